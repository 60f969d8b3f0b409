use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar function against central
/// differences and returns `max |g_auto - g_fd| / max(1, |g_fd|)`.
///
/// `f` builds its computation on the given tape from the input variable and
/// must return a `1 x 1` node.
pub fn finite_diff_check<F>(f: F, x: &Matrix, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let input = tape.parameter(x.clone());
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let auto = tape
        .grad(input)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));

    let eval = |point: Matrix| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let y = f(&mut t, v)?;
        t.value(y).item()
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = eval(probe.clone())?;
        probe.data_mut()[k] = orig - h;
        let minus = eval(probe.clone())?;
        probe.data_mut()[k] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let err = (auto.data()[k] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
