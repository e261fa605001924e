//! The epoch/step loop of Δ-distillation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::losses::{combined_loss, cross_entropy, frobenius_loss, kd_loss};
use super::schedule::{epoch_decay, AnnealState};
use super::student::Student;
use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::optim::{clip_grad_norm, grad_norm, lr_at, Adam, LrSchedule};
use crate::teacher::{layerwise_mean_hidden, Teacher};
use crate::tensor::Tape;

/// One optimizer step's measurements. `loss_frob` is already divided by
/// `√|h_s|`, so `loss_total` is reproduced by
/// [`DistillWeights::combine`](super::DistillWeights::combine).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub alpha_k: f64,
    pub temp_k: f64,
    pub beta_k: f64,
    pub loss_ce: f64,
    pub loss_kd: f64,
    pub loss_frob: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillOptions {
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_ratio: f64,
    pub grad_accum: usize,
    pub clip: Option<f64>,
    pub t_squared: bool,
    pub anneal: AnnealState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillSummary {
    pub optimizer_steps: usize,
    pub anneal: AnnealState,
}

/// Teacher logits and layer-averaged hidden states per training window,
/// computed on first use. The teacher is frozen, so these never change.
struct TeacherCache {
    logits: Vec<Option<Vec<f64>>>,
    hidden: Vec<Option<Vec<f64>>>,
}

impl TeacherCache {
    fn new(windows: usize) -> Self {
        TeacherCache {
            logits: vec![None; windows],
            hidden: vec![None; windows],
        }
    }

    fn fill(&mut self, teacher: &Teacher, stream: &BatchStream, ids: &[usize]) -> Result<()> {
        let missing: Vec<usize> = ids.iter().copied().filter(|&w| self.logits[w].is_none()).collect();
        if missing.is_empty() {
            return Ok(());
        }
        let s = stream.context();
        let tokens: Vec<usize> = missing.iter().flat_map(|&w| stream.window(w).0.to_vec()).collect();
        let tape = Tape::new();
        let out = teacher.forward(&tape, &tokens, missing.len(), s)?;
        let logits = out.logits.to_vec();
        let hidden = layerwise_mean_hidden(&out.capture)?.to_vec();
        let (lv, hd) = (logits.len() / missing.len(), hidden.len() / missing.len());
        for (r, &w) in missing.iter().enumerate() {
            self.logits[w] = Some(logits[r * lv..(r + 1) * lv].to_vec());
            self.hidden[w] = Some(hidden[r * hd..(r + 1) * hd].to_vec());
        }
        Ok(())
    }

    fn batch(&self, ids: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let cat = |v: &[Option<Vec<f64>>]| ids.iter().flat_map(|&w| v[w].clone().expect("filled")).collect();
        (cat(&self.logits), cat(&self.hidden))
    }
}

/// Runs `opts.epochs` epochs of distillation over `stream`, calling `sink`
/// once per optimizer step.
///
/// On a non-finite loss or gradient the run stops with
/// [`Error::NonFinite`] before that step's update, so `student` still holds
/// the last good parameters.
pub fn run_delta_distillation(
    teacher: &Teacher,
    student: &mut Student,
    stream: &BatchStream,
    opts: &DistillOptions,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<DistillSummary> {
    let (tc, sc) = (&teacher.config, &student.config);
    if tc.vocab != sc.vocab {
        return Err(Error::config(
            "vocab",
            format!("teacher V={} but student V={}", tc.vocab, sc.vocab),
        ));
    }
    if tc.d_model != sc.d_model {
        return Err(Error::config(
            "d_model",
            format!("teacher D={} but student D={}", tc.d_model, sc.d_model),
        ));
    }
    if stream.context() > tc.max_seq {
        return Err(Error::config(
            "context_size",
            format!("{} exceeds teacher max_seq {}", stream.context(), tc.max_seq),
        ));
    }
    if opts.grad_accum == 0 {
        return Err(Error::config("grad_accum", "must be positive"));
    }
    let per_epoch = stream.batches_per_epoch().div_ceil(opts.grad_accum);
    if per_epoch == 0 && opts.epochs > 0 {
        return Err(Error::config("batch_size", "corpus yields no full batch"));
    }
    let total_steps = per_epoch * opts.epochs;

    let mut cache = TeacherCache::new(stream.n_windows());
    let mut anneal = opts.anneal;
    let mut adam = Adam::default();
    let mut opt_step = 0;
    for epoch in 0..opts.epochs {
        let batches: Vec<_> = stream.epoch(epoch).collect();
        for (step, group) in batches.chunks(opts.grad_accum).enumerate() {
            let started = Instant::now();
            let w = anneal.weights();
            student.zero_grad();
            let mut sums = [0.0f64; 4];
            for (ids, batch) in group {
                cache.fill(teacher, stream, ids)?;
                let (t_logits, t_hidden) = cache.batch(ids);
                let tape = Tape::new();
                let out = student.forward(&tape, &batch.inputs, batch.batch, batch.seq)?;
                let numel = out.hidden.numel();
                let ce = cross_entropy(out.logits, &batch.targets)?;
                let kd = kd_loss(tape.constant(&out.logits.shape(), t_logits)?, out.logits, w.temp)?;
                let frob = frobenius_loss(tape.constant(&out.hidden.shape(), t_hidden)?, out.hidden)?;
                let total = combined_loss(ce, kd, frob, &w, numel, opts.t_squared)?;
                let value = total.item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "distillation loss {value} at epoch {}, step {step}",
                        epoch + 1
                    )));
                }
                let parts = [ce.item(), kd.item(), frob.item() / (numel as f64).sqrt(), value];
                sums.iter_mut().zip(parts).for_each(|(s, p)| *s += p);
                let grads = tape.backward(total.scale(1.0 / group.len() as f64))?;
                grads.accumulate_into(student.trainable_params_mut())?;
            }
            let n = group.len() as f64;
            let [loss_ce, loss_kd, loss_frob, loss_total] = sums.map(|s| s / n);

            let mut params = student.trainable_params_mut();
            let norm = match opts.clip {
                Some(c) => clip_grad_norm(&mut params, c),
                None => grad_norm(params.iter().map(|p| &**p)),
            };
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient norm {norm} at epoch {}, step {step}",
                    epoch + 1
                )));
            }
            let lr = lr_at(opts.lr, opts.lr_schedule, opts.warmup_ratio, opt_step, total_steps);
            adam.step(&mut params, lr)?;

            sink(&MetricsRecord {
                epoch: epoch + 1,
                step,
                alpha_k: w.alpha,
                temp_k: w.temp,
                beta_k: w.beta,
                loss_ce,
                loss_kd,
                loss_frob,
                loss_total,
                grad_norm: norm,
                lr,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            })?;
            anneal.advance();
            opt_step += 1;
        }
        anneal = epoch_decay(anneal);
    }
    Ok(DistillSummary {
        optimizer_steps: opt_step,
        anneal,
    })
}
