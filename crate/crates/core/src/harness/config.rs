//! Run configuration: a flat TOML table whose omitted keys take the
//! published training hyperparameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{AnnealState, DistillOptions, KMode, StudentConfig, Track};
use crate::error::{Error, Result};
use crate::optim::LrSchedule;
use crate::teacher::{CaptureMode, PretrainOptions, TeacherConfig};
use crate::xlstm::ForgetGate;

/// How the hidden-state alignment term is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    /// No alignment term; α and T follow their own tracks.
    #[default]
    Off,
    /// Constant `beta_fixed` with constant `alpha_with_beta`.
    Fixed,
    /// β and α both annealed over their `*_annealed_*` ranges.
    Annealed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub warmup_ratio: f64,
    pub alpha_initial: f64,
    pub alpha_final: f64,
    pub temp_initial: f64,
    pub temp_final: f64,
    pub delta: f64,
    pub context_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip: Option<f64>,
    pub t_squared: bool,
    pub k_mode: KMode,

    pub beta_mode: BetaMode,
    pub beta_fixed: f64,
    pub alpha_with_beta: f64,
    pub beta_annealed_initial: f64,
    pub beta_annealed_final: f64,
    pub alpha_annealed_initial: f64,
    pub alpha_annealed_final: f64,

    pub teacher_layers: usize,
    pub teacher_heads: usize,
    pub d_model: usize,
    /// Expected vocabulary size; checked against the corpus when set.
    pub vocab: Option<usize>,
    pub capture: CaptureMode,
    pub student_blocks: Option<usize>,
    pub student_heads: Option<usize>,
    pub forget_gate: ForgetGate,

    pub teacher_steps: usize,
    pub teacher_lr: f64,
    pub teacher_clip: Option<f64>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub student_checkpoint: Option<PathBuf>,

    /// Text corpus; a synthetic one is generated when absent.
    pub corpus: Option<PathBuf>,
    pub synthetic_len: usize,
    pub synthetic_noise: f64,
    /// Seed of the synthetic corpus, independent of the run seed.
    pub corpus_seed: u64,
    pub held_out: f64,

    pub bench_lengths: Vec<usize>,
    pub bench_repeats: usize,
    pub gradcheck_tol: f64,
    /// Backward rule to corrupt during gradcheck, as `kind` or `kind:factor`.
    pub gradcheck_fault: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lr: 2e-4,
            lr_schedule: LrSchedule::Cosine,
            batch_size: 8,
            grad_accum: 4,
            warmup_ratio: 0.1,
            alpha_initial: 0.8,
            alpha_final: 0.5,
            temp_initial: 2.0,
            temp_final: 1.0,
            delta: 0.05,
            context_size: 512,
            epochs: 10,
            seed: 0,
            clip: None,
            t_squared: true,
            k_mode: KMode::PerEpoch,
            beta_mode: BetaMode::Off,
            beta_fixed: 0.1,
            alpha_with_beta: 0.3,
            beta_annealed_initial: 0.2,
            beta_annealed_final: 0.1,
            alpha_annealed_initial: 0.3,
            alpha_annealed_final: 0.2,
            teacher_layers: 4,
            teacher_heads: 6,
            d_model: 64,
            vocab: None,
            capture: CaptureMode::Block,
            student_blocks: None,
            student_heads: None,
            forget_gate: ForgetGate::Sigmoid,
            teacher_steps: 1000,
            teacher_lr: 3e-3,
            teacher_clip: Some(1.0),
            teacher_checkpoint: None,
            student_checkpoint: None,
            corpus: None,
            synthetic_len: 40_000,
            synthetic_noise: 0.02,
            corpus_seed: 0,
            held_out: 0.1,
            bench_lengths: vec![128, 256, 512, 1024],
            bench_repeats: 3,
            gradcheck_tol: 1e-4,
            gradcheck_fault: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) and applies `KEY=VALUE`
    /// overrides in order. Values parse as TOML, falling back to a string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = parse_override(o)?;
            table.insert(key, value);
        }
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("temp_final", self.temp_final),
            ("teacher_lr", self.teacher_lr),
            ("gradcheck_tol", self.gradcheck_tol),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("grad_accum", self.grad_accum),
            ("context_size", self.context_size),
            ("d_model", self.d_model),
            ("teacher_layers", self.teacher_layers),
            ("teacher_heads", self.teacher_heads),
            ("bench_repeats", self.bench_repeats),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config(
                "warmup_ratio",
                format!("must lie in [0, 1), got {}", self.warmup_ratio),
            ));
        }
        if !(self.held_out > 0.0 && self.held_out < 1.0) {
            return Err(Error::config(
                "held_out",
                format!("must lie in (0, 1), got {}", self.held_out),
            ));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::config(
                "delta",
                format!("must be non-negative, got {}", self.delta),
            ));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::config("clip", format!("must be positive, got {c}")));
            }
        }
        if self.corpus.is_none() && self.synthetic_len < 2 {
            return Err(Error::config("synthetic_len", "must be at least 2"));
        }
        self.anneal()?;
        if let Some(f) = &self.gradcheck_fault {
            parse_fault(f)?;
        }
        Ok(())
    }

    /// Initial annealing state for the configured β mode.
    pub fn anneal(&self) -> Result<AnnealState> {
        let track = |field: &str, init: f64, fin: f64| {
            Track::new(init, fin, self.delta).map_err(|e| Error::config(field, e.to_string()))
        };
        let temp = track("temp_initial", self.temp_initial, self.temp_final)?;
        let (alpha, beta) = match self.beta_mode {
            BetaMode::Off => (
                track("alpha_initial", self.alpha_initial, self.alpha_final)?,
                Track::constant(0.0),
            ),
            BetaMode::Fixed => (Track::constant(self.alpha_with_beta), Track::constant(self.beta_fixed)),
            BetaMode::Annealed => (
                track(
                    "alpha_annealed_initial",
                    self.alpha_annealed_initial,
                    self.alpha_annealed_final,
                )?,
                track(
                    "beta_annealed_initial",
                    self.beta_annealed_initial,
                    self.beta_annealed_final,
                )?,
            ),
        };
        AnnealState::new(alpha, temp, beta, self.k_mode).map_err(|e| Error::config("beta_mode", e.to_string()))
    }

    pub fn distill_options(&self) -> Result<DistillOptions> {
        Ok(DistillOptions {
            epochs: self.epochs,
            lr: self.lr,
            lr_schedule: self.lr_schedule,
            warmup_ratio: self.warmup_ratio,
            grad_accum: self.grad_accum,
            clip: self.clip,
            t_squared: self.t_squared,
            anneal: self.anneal()?,
        })
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            steps: self.teacher_steps,
            lr: self.teacher_lr,
            warmup_ratio: self.warmup_ratio,
            schedule: self.lr_schedule,
            clip: self.teacher_clip,
        }
    }

    pub fn teacher_config(&self, vocab: usize) -> Result<TeacherConfig> {
        if let Some(v) = self.vocab {
            if v != vocab {
                return Err(Error::config(
                    "vocab",
                    format!("configured {v} but the corpus has {vocab} symbols"),
                ));
            }
        }
        let cfg = TeacherConfig {
            vocab,
            d_model: self.d_model,
            n_layers: self.teacher_layers,
            n_heads: self.teacher_heads,
            max_seq: self.context_size,
            capture: self.capture,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Heuristic student shape, with any explicit overrides applied.
    pub fn student_config(&self, vocab: usize) -> Result<StudentConfig> {
        let mut cfg = StudentConfig {
            n_blocks: self.student_blocks.unwrap_or(self.teacher_layers / 2),
            n_heads: self
                .student_heads
                .unwrap_or(crate::distill::round_up(self.teacher_heads, 4)),
            d_model: self.d_model,
            vocab,
            forget: self.forget_gate,
        };
        if self.student_blocks.is_none() && self.student_heads.is_none() {
            cfg = crate::distill::derive_student_config(
                self.teacher_layers,
                self.teacher_heads,
                self.d_model,
                vocab,
                self.forget_gate,
            )?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::config("override", format!("`{s}` is not KEY=VALUE")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}

/// Parses `kind` or `kind:factor` into a corrupted backward rule.
pub fn parse_fault(s: &str) -> Result<(crate::tensor::UnaryKind, f64)> {
    use crate::tensor::UnaryKind::*;
    let (name, factor) = match s.split_once(':') {
        Some((n, f)) => (
            n,
            f.parse::<f64>()
                .map_err(|_| Error::config("gradcheck_fault", format!("bad factor in `{s}`")))?,
        ),
        None => (s, 1.5),
    };
    let kind = match name {
        "exp" => Exp,
        "log" => Log,
        "sigmoid" => Sigmoid,
        "log_sigmoid" => LogSigmoid,
        "tanh" => Tanh,
        "neg" => Neg,
        "abs" => Abs,
        "square" => Square,
        other => return Err(Error::config("gradcheck_fault", format!("unknown op `{other}`"))),
    };
    Ok((kind, factor))
}
