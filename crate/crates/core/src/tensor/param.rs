use super::matrix::Matrix;
use super::tape::{Tape, Var};

/// A trainable matrix that outlives individual tapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    /// `None` until a backward pass has been collected.
    pub grad: Option<Matrix>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    /// Registers the current value on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.parameter(self.value.clone())
    }

    /// Adds the tape gradient of `var` into this parameter's slot.
    pub fn collect(&mut self, tape: &Tape, var: Var) {
        let Some(g) = tape.grad(var) else { return };
        match self.grad.as_mut() {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }
}
