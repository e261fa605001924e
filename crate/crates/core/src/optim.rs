//! Adam with decoupled learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

impl std::str::FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(LrSchedule::Cosine),
            "constant" => Ok(LrSchedule::Constant),
            other => Err(format!("unknown lr schedule `{other}` (expected cosine or constant)")),
        }
    }
}

/// Learning rate at optimizer step `step` of `total`: linear warmup over
/// `ceil(warmup_ratio·total)` steps, then cosine decay to zero (or flat).
pub fn lr_at(base: f64, schedule: LrSchedule, warmup_ratio: f64, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let span = (total - warmup.min(total)).max(1);
            let progress = ((step - warmup) as f64 / span as f64).min(1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Global L2 norm over the stored gradients of `params`.
pub fn grad_norm<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    params
        .into_iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scales stored gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = grad_norm(params.iter().map(|p| &**p));
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                p.zero_grad();
                p.accumulate_grad(&scaled).expect("same length");
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every trainable tensor with its stored gradient (tensors
    /// without a gradient are treated as having a zero gradient). The
    /// parameter list must be the same, in the same order, on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::invalid("optimizer parameter list changed between steps"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]);
            for ((x, mi), (vi, gi)) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut().zip(&g)) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
