//! Held-out evaluation of teacher and student.

use serde::{Deserialize, Serialize};

use super::losses::{cross_entropy, frobenius_loss, kd_loss};
use super::student::Student;
use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::teacher::{layerwise_mean_hidden, Teacher};
use crate::tensor::Tape;

/// Position-weighted averages over a held-out stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub student_ce: f64,
    pub student_ppl: f64,
    pub teacher_ce: f64,
    pub teacher_ppl: f64,
    /// `KL(teacher ‖ student)` at temperature 1.
    pub kl_t1: f64,
    /// Per-sequence alignment norm, unnormalised.
    pub frobenius: f64,
    /// Alignment norm divided by `√(S·D)`.
    pub frobenius_normalized: f64,
    pub positions: usize,
}

pub fn evaluate(teacher: &Teacher, student: &Student, stream: &BatchStream) -> Result<EvalReport> {
    if teacher.config.vocab != student.config.vocab || teacher.config.d_model != student.config.d_model {
        return Err(Error::config("student", "student and teacher dimensions differ"));
    }
    let (mut sce, mut tce, mut kl, mut frob, mut frob_n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut positions, mut sequences) = (0usize, 0usize);
    for batch in stream.sequential() {
        let tape = Tape::new();
        let t = teacher.forward(&tape, &batch.inputs, batch.batch, batch.seq)?;
        let s = student.forward(&tape, &batch.inputs, batch.batch, batch.seq)?;
        let n = batch.batch * batch.seq;
        sce += cross_entropy(s.logits, &batch.targets)?.item() * n as f64;
        tce += cross_entropy(t.logits, &batch.targets)?.item() * n as f64;
        kl += kd_loss(t.logits, s.logits, 1.0)?.item() * n as f64;
        let f = frobenius_loss(layerwise_mean_hidden(&t.capture)?, s.hidden)?.item();
        frob += f * batch.batch as f64;
        frob_n += f * batch.batch as f64 / ((batch.seq * student.config.d_model) as f64).sqrt();
        positions += n;
        sequences += batch.batch;
    }
    let (np, ns) = (positions as f64, sequences as f64);
    Ok(EvalReport {
        student_ce: sce / np,
        student_ppl: (sce / np).exp(),
        teacher_ce: tce / np,
        teacher_ppl: (tce / np).exp(),
        kl_t1: kl / np,
        frobenius: frob / ns,
        frobenius_normalized: frob_n / ns,
        positions,
    })
}
