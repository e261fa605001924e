//! Logarithmic within-epoch annealing and per-epoch anchor decay.

use serde::{Deserialize, Serialize};

use super::losses::DistillWeights;
use crate::error::{Error, Result};

/// `final + (anchor − final) / (1 + ln(k + 1))`.
pub fn schedule_value(anchor: f64, final_value: f64, k: usize) -> Result<f64> {
    if anchor < final_value {
        return Err(Error::invalid(format!(
            "schedule anchor {anchor} is below its final value {final_value}"
        )));
    }
    Ok(final_value + (anchor - final_value) / (1.0 + ((k + 1) as f64).ln()))
}

/// Which step counter feeds the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KMode {
    /// Step counter restarts each epoch; the epoch anchor is the numerator.
    #[default]
    PerEpoch,
    /// Step counter runs across epochs; the epoch anchor is still used.
    Global,
}

impl std::str::FromStr for KMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-epoch" => Ok(KMode::PerEpoch),
            "global" => Ok(KMode::Global),
            other => Err(format!("unknown k mode `{other}` (expected per-epoch or global)")),
        }
    }
}

/// One annealed quantity: an epoch anchor decaying from `initial` towards
/// `final_value` by `delta` per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub anchor: f64,
    pub initial: f64,
    pub final_value: f64,
    pub delta: f64,
}

impl Track {
    pub fn new(initial: f64, final_value: f64, delta: f64) -> Result<Self> {
        if initial < final_value {
            return Err(Error::invalid(format!(
                "initial value {initial} is below final value {final_value}"
            )));
        }
        if !(delta >= 0.0) {
            return Err(Error::invalid(format!("decay step must be non-negative, got {delta}")));
        }
        Ok(Track {
            anchor: initial,
            initial,
            final_value,
            delta,
        })
    }

    pub fn constant(value: f64) -> Self {
        Track {
            anchor: value,
            initial: value,
            final_value: value,
            delta: 0.0,
        }
    }

    pub fn value(&self, k: usize) -> f64 {
        schedule_value(self.anchor, self.final_value, k).expect("anchor never drops below its floor")
    }

    /// `anchor ← max(anchor − Δ, final)`.
    pub fn decay(&mut self) {
        self.anchor = (self.anchor - self.delta).max(self.final_value);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub alpha: Track,
    pub temp: Track,
    pub beta: Track,
    pub k_mode: KMode,
    /// Optimizer steps taken in the current epoch.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: usize,
}

impl AnnealState {
    pub fn new(alpha: Track, temp: Track, beta: Track, k_mode: KMode) -> Result<Self> {
        let state = AnnealState {
            alpha,
            temp,
            beta,
            k_mode,
            step: 0,
            epoch: 0,
            global_step: 0,
        };
        if !(temp.final_value > 0.0) {
            return Err(Error::invalid("temperature floor must be positive"));
        }
        state.weights().validate()?;
        Ok(state)
    }

    fn k(&self) -> usize {
        match self.k_mode {
            KMode::PerEpoch => self.step,
            KMode::Global => self.global_step,
        }
    }

    /// `(α_k, T_k, β_k)` for the current step.
    pub fn weights(&self) -> DistillWeights {
        let k = self.k();
        DistillWeights {
            alpha: self.alpha.value(k),
            temp: self.temp.value(k),
            beta: self.beta.value(k),
        }
    }

    /// Moves to the next optimizer step.
    pub fn advance(&mut self) {
        self.step += 1;
        self.global_step += 1;
    }
}

/// End-of-epoch update: every anchor decays towards its floor and the
/// within-epoch step restarts.
pub fn epoch_decay(mut state: AnnealState) -> AnnealState {
    state.alpha.decay();
    state.temp.decay();
    state.beta.decay();
    state.step = 0;
    state.epoch += 1;
    state
}
