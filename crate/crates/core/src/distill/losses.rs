//! Cross-entropy, soft-target KL, hidden-state alignment and their
//! weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::softmax_rows;
use crate::tensor::Var;

/// Mean over positions of `-log softmax(logits)[target]`.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    let v = *shape.last().ok_or_else(|| Error::shape("cross-entropy of a scalar"))?;
    if targets.len() * v != logits.numel() {
        return Err(Error::shape(format!("{} targets for logits {shape:?}", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::invalid(format!("target id {bad} out of range for V={v}")));
    }
    Ok(logits.log_softmax_rows(1.0)?.pick_last(targets)?.mean().neg())
}

/// Mean over positions of `KL(softmax(t/T) ‖ softmax(s/T))`. The teacher
/// logits are read as constants; no gradient flows back to them.
pub fn kd_loss<'t>(teacher: Var<'t>, student: Var<'t>, temp: f64) -> Result<Var<'t>> {
    if !(temp > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temp}")));
    }
    let shape = student.shape();
    if teacher.shape() != shape {
        return Err(Error::shape(format!(
            "teacher logits {:?} vs student {shape:?}",
            teacher.shape()
        )));
    }
    let v = *shape.last().ok_or_else(|| Error::shape("KD loss of a scalar"))?;
    let rows = (student.numel() / v) as f64;
    let p_t = softmax_rows(&teacher.to_vec(), v, temp);
    let neg_entropy: f64 = p_t.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>() / rows;
    let tape = student.tape();
    let p_t = tape.constant(&shape, p_t)?;
    let cross = student.log_softmax_rows(temp)?.mul(p_t)?.sum().scale(1.0 / rows);
    Ok(cross.neg().add_scalar(neg_entropy))
}

/// `(1/B) Σ_b ‖h̄_t[b] − h_s[b]‖_F` over `[B, S, D]` states. Unnormalised.
pub fn frobenius_loss<'t>(teacher_mean: Var<'t>, student: Var<'t>) -> Result<Var<'t>> {
    let shape = student.shape();
    if teacher_mean.shape() != shape || shape.is_empty() {
        return Err(Error::shape(format!(
            "teacher hidden {:?} vs student hidden {shape:?}",
            teacher_mean.shape()
        )));
    }
    let b = shape[0];
    student
        .sub(teacher_mean)?
        .reshape(&[b, student.numel() / b])?
        .row_norms()
        .map(|n| n.mean())
}

/// Effective per-step weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub alpha: f64,
    pub temp: f64,
    pub beta: f64,
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid(format!(
                "negative loss weight: α={} β={}",
                self.alpha, self.beta
            )));
        }
        if self.alpha + self.beta > 1.0 + 1e-12 {
            return Err(Error::invalid(format!("α + β = {} exceeds 1", self.alpha + self.beta)));
        }
        if !(self.temp > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temp
            )));
        }
        Ok(())
    }

    /// Coefficient of the KD term: `α·T²`, or `α` in the literal form.
    pub fn kd_coefficient(&self, t_squared: bool) -> f64 {
        if t_squared {
            self.alpha * self.temp * self.temp
        } else {
            self.alpha
        }
    }

    /// Scalar combination of already-computed terms; `frob_normalised` is
    /// the alignment term after division by `√|h_s|`.
    pub fn combine(&self, ce: f64, kd: f64, frob_normalised: f64, t_squared: bool) -> f64 {
        (1.0 - self.alpha - self.beta) * ce + self.kd_coefficient(t_squared) * kd + self.beta * frob_normalised
    }
}

/// `(1−α−β)·CE + α·T²·KD + β·frob/√numel`.
pub fn combined_loss<'t>(
    ce: Var<'t>,
    kd: Var<'t>,
    frob: Var<'t>,
    weights: &DistillWeights,
    h_s_numel: usize,
    t_squared: bool,
) -> Result<Var<'t>> {
    weights.validate()?;
    if h_s_numel == 0 {
        return Err(Error::invalid("hidden-state size must be positive"));
    }
    let ce_part = ce.scale(1.0 - weights.alpha - weights.beta);
    let kd_part = kd.scale(weights.kd_coefficient(t_squared));
    let frob_part = frob.scale(weights.beta / (h_s_numel as f64).sqrt());
    ce_part.add(kd_part)?.add(frob_part)
}
