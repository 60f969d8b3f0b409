//! Self-supervised objectives: batch normalization of embeddings, the
//! cross-correlation matrix, Barlow Twins, the Competitive Barlow Twins pair,
//! VICReg terms and the composite per-model losses.
//!
//! Cross-correlation uses the column-cosine form: both embeddings are
//! centered, divided by their unbiased column std and multiplied as
//! `A^T B / (N - 1)`, which equals the normalized second-moment ratio exactly
//! and makes `C_ii = 1` when both inputs coincide.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    Center,
    CenterAndScale,
}

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the Competitive Barlow Twins term.
    pub alpha: f64,
    /// Weight of the summed covariance term.
    pub beta: f64,
    /// Off-diagonal (triangle) weight.
    pub lambda: f64,
    /// Competition weight on the opponent's triangle.
    pub mu: f64,
    /// Optional VICReg invariance weight, added to both losses.
    pub vicreg_invariance: Option<f64>,
    /// Optional VICReg variance weight, added to both losses.
    pub vicreg_variance: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda: 5e-3,
            mu: 1.0,
            vicreg_invariance: None,
            vicreg_variance: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("mu", self.mu),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be > 0 (got {v})"));
            }
        }
        for (name, v) in [
            ("vicreg_invariance", self.vicreg_invariance),
            ("vicreg_variance", self.vicreg_variance),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    bad.push(format!("{name} must be > 0 when set (got {v})"));
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "invalid loss config: {}",
                bad.join("; ")
            )))
        }
    }
}

fn require_batch(tape: &Tape, h: Var, op: &'static str) -> Result<()> {
    let (n, d) = tape.shape(h);
    if n < 2 {
        return Err(Error::Shape {
            op,
            lhs: (n, d),
            rhs: (2, d),
        });
    }
    Ok(())
}

fn require_same_shape(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape {
            op,
            lhs: tape.shape(a),
            rhs: tape.shape(b),
        });
    }
    Ok(())
}

pub fn batch_normalize(tape: &mut Tape, h: Var, mode: NormalizeMode) -> Result<Var> {
    require_batch(tape, h, "batch_normalize")?;
    let mean = tape.column_mean(h)?;
    let centered = tape.sub(h, mean)?;
    match mode {
        NormalizeMode::Center => Ok(centered),
        NormalizeMode::CenterAndScale => {
            let std = tape.column_std(h)?;
            tape.div(centered, std)
        }
    }
}

/// `d x d` cross-correlation between the columns of two embeddings.
pub fn cross_correlation(tape: &mut Tape, h_a: Var, h_b: Var) -> Result<Var> {
    require_same_shape(tape, h_a, h_b, "cross_correlation")?;
    require_batch(tape, h_a, "cross_correlation")?;
    let n = tape.shape(h_a).0;
    let a = batch_normalize(tape, h_a, NormalizeMode::CenterAndScale)?;
    let b = batch_normalize(tape, h_b, NormalizeMode::CenterAndScale)?;
    let at = tape.transpose(a)?;
    let c = tape.matmul(at, b)?;
    tape.scale(c, 1.0 / (n - 1) as f64)
}

fn require_square(tape: &Tape, c: Var, op: &'static str) -> Result<usize> {
    let (r, k) = tape.shape(c);
    if r != k {
        return Err(Error::Shape {
            op,
            lhs: (r, k),
            rhs: (k, k),
        });
    }
    Ok(r)
}

fn masked_sum_of_squares(tape: &mut Tape, c: Var, mask: Matrix) -> Result<Var> {
    let m = tape.constant(mask);
    let masked = tape.mul(c, m)?;
    tape.sum_of_squares(masked)
}

/// `Σ_i (1 - C_ii)^2`.
pub fn invariance_term(tape: &mut Tape, c: Var) -> Result<Var> {
    let d = require_square(tape, c, "invariance_term")?;
    let eye = tape.constant(Matrix::identity(d));
    let diag_only = tape.mul(c, eye)?;
    let ones = tape.constant(Matrix::filled(1, d, 1.0));
    let diag = tape.matmul(ones, diag_only)?;
    let gap = tape.add_scalar(diag, -1.0)?;
    tape.sum_of_squares(gap)
}

/// `Σ_{j>i} C_ij^2`.
pub fn upper_triangle(tape: &mut Tape, c: Var) -> Result<Var> {
    let d = require_square(tape, c, "upper_triangle")?;
    masked_sum_of_squares(tape, c, Matrix::from_fn(d, d, |i, j| f64::from(u8::from(j > i))))
}

/// `Σ_{i>j} C_ij^2`.
pub fn lower_triangle(tape: &mut Tape, c: Var) -> Result<Var> {
    let d = require_square(tape, c, "lower_triangle")?;
    masked_sum_of_squares(tape, c, Matrix::from_fn(d, d, |i, j| f64::from(u8::from(i > j))))
}

fn off_diagonal_sum_of_squares(tape: &mut Tape, c: Var) -> Result<Var> {
    let d = require_square(tape, c, "off_diagonal")?;
    masked_sum_of_squares(tape, c, Matrix::from_fn(d, d, |i, j| f64::from(u8::from(i != j))))
}

/// Invariance plus `lambda` times the off-diagonal sum of squares.
pub fn barlow_twins_loss(tape: &mut Tape, c: Var, lambda: f64) -> Result<Var> {
    let inv = invariance_term(tape, c)?;
    let off = off_diagonal_sum_of_squares(tape, c)?;
    let off = tape.scale(off, lambda)?;
    tape.add(inv, off)
}

/// The pieces of a Competitive Barlow Twins evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CompetitiveTerms {
    pub loss_a: Var,
    pub loss_b: Var,
    pub invariance: Var,
    pub upper: Var,
    pub lower: Var,
}

/// `L_A = inv + λ(U − μL)`, `L_B = inv + λ(L − μU)` over strict triangles.
pub fn competitive_bt_losses(tape: &mut Tape, c: Var, lambda: f64, mu: f64) -> Result<CompetitiveTerms> {
    let invariance = invariance_term(tape, c)?;
    let upper = upper_triangle(tape, c)?;
    let lower = lower_triangle(tape, c)?;
    let side = |tape: &mut Tape, own: Var, other: Var| -> Result<Var> {
        let other = tape.scale(other, mu)?;
        let diff = tape.sub(own, other)?;
        let diff = tape.scale(diff, lambda)?;
        tape.add(invariance, diff)
    };
    let loss_a = side(tape, upper, lower)?;
    let loss_b = side(tape, lower, upper)?;
    Ok(CompetitiveTerms {
        loss_a,
        loss_b,
        invariance,
        upper,
        lower,
    })
}

/// Sum of squared off-diagonal covariance entries divided by `d`, for one
/// embedding.
pub fn covariance_term(tape: &mut Tape, h: Var) -> Result<Var> {
    require_batch(tape, h, "covariance_term")?;
    let (n, d) = tape.shape(h);
    let centered = batch_normalize(tape, h, NormalizeMode::Center)?;
    let ct = tape.transpose(centered)?;
    let cov = tape.matmul(ct, centered)?;
    let cov = tape.scale(cov, 1.0 / (n - 1) as f64)?;
    let off = off_diagonal_sum_of_squares(tape, cov)?;
    tape.scale(off, 1.0 / d as f64)
}

/// Mean over columns of `max(0, 1 − std)` for one embedding.
pub fn variance_term(tape: &mut Tape, h: Var) -> Result<Var> {
    require_batch(tape, h, "variance_term")?;
    let d = tape.shape(h).1;
    let std = tape.column_std(h)?;
    let neg = tape.scale(std, -1.0)?;
    let gap = tape.add_scalar(neg, 1.0)?;
    let hinge = tape.relu(gap)?;
    let total = tape.sum(hinge)?;
    tape.scale(total, 1.0 / d as f64)
}

/// Mean over rows of the squared Euclidean distance between paired rows.
pub fn vicreg_invariance(tape: &mut Tape, h_a: Var, h_b: Var) -> Result<Var> {
    require_same_shape(tape, h_a, h_b, "vicreg_invariance")?;
    let n = tape.shape(h_a).0;
    let diff = tape.sub(h_a, h_b)?;
    let ss = tape.sum_of_squares(diff)?;
    tape.scale(ss, 1.0 / n as f64)
}

/// VICReg terms for a pair; variance and covariance are summed over both
/// embeddings.
#[derive(Debug, Clone, Copy)]
pub struct VicRegTerms {
    pub invariance: Var,
    pub variance: Var,
    pub covariance: Var,
}

pub fn vicreg_terms(tape: &mut Tape, h_a: Var, h_b: Var) -> Result<VicRegTerms> {
    require_same_shape(tape, h_a, h_b, "vicreg_terms")?;
    let invariance = vicreg_invariance(tape, h_a, h_b)?;
    let va = variance_term(tape, h_a)?;
    let vb = variance_term(tape, h_b)?;
    let variance = tape.add(va, vb)?;
    let ca = covariance_term(tape, h_a)?;
    let cb = covariance_term(tape, h_b)?;
    let covariance = tape.add(ca, cb)?;
    Ok(VicRegTerms {
        invariance,
        variance,
        covariance,
    })
}

/// Both composite losses together with the quantities they are built from.
#[derive(Debug, Clone, Copy)]
pub struct GraphAcLosses {
    pub loss_a: Var,
    pub loss_b: Var,
    pub correlation: Var,
    pub invariance: Var,
    pub upper: Var,
    pub lower: Var,
    pub covariance: Var,
}

/// `L_A = α L_CBT_A + β L_Cov`, `L_B = α L_CBT_B + β L_Cov`, plus the
/// optional VICReg invariance and variance terms when configured.
pub fn graphac_losses(tape: &mut Tape, h_a: Var, h_b: Var, config: &LossConfig) -> Result<GraphAcLosses> {
    require_same_shape(tape, h_a, h_b, "graphac_losses")?;
    let correlation = cross_correlation(tape, h_a, h_b)?;
    let cbt = competitive_bt_losses(tape, correlation, config.lambda, config.mu)?;
    let ca = covariance_term(tape, h_a)?;
    let cb = covariance_term(tape, h_b)?;
    let covariance = tape.add(ca, cb)?;

    let mut shared = tape.scale(covariance, config.beta)?;
    if let Some(w) = config.vicreg_invariance {
        let inv = vicreg_invariance(tape, h_a, h_b)?;
        let inv = tape.scale(inv, w)?;
        shared = tape.add(shared, inv)?;
    }
    if let Some(w) = config.vicreg_variance {
        let va = variance_term(tape, h_a)?;
        let vb = variance_term(tape, h_b)?;
        let v = tape.add(va, vb)?;
        let v = tape.scale(v, w)?;
        shared = tape.add(shared, v)?;
    }
    let a = tape.scale(cbt.loss_a, config.alpha)?;
    let loss_a = tape.add(a, shared)?;
    let b = tape.scale(cbt.loss_b, config.alpha)?;
    let loss_b = tape.add(b, shared)?;
    Ok(GraphAcLosses {
        loss_a,
        loss_b,
        correlation,
        invariance: cbt.invariance,
        upper: cbt.upper,
        lower: cbt.lower,
        covariance,
    })
}
