//! Student architecture heuristic and teacher weight reuse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{prefixed, Parameterized};
use crate::teacher::{embed, LmHead, Teacher};
use crate::tensor::{Tape, Tensor, Var};
use crate::xlstm::{build_stack, ForgetGate, XlstmStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    #[serde(default)]
    pub forget: ForgetGate,
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::config("n_blocks", "at least one block is required"));
        }
        if self.n_heads == 0 || !self.n_heads.is_multiple_of(4) {
            return Err(Error::config(
                "n_heads",
                format!("{} is not a positive multiple of 4", self.n_heads),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }
}

/// Smallest multiple of `k` that is at least `x`.
pub fn round_up(x: usize, k: usize) -> usize {
    x.div_ceil(k) * k
}

/// Half the teacher depth (floored) and the teacher head count rounded up
/// to a multiple of four; width and vocabulary are inherited.
pub fn derive_student_config(
    teacher_layers: usize,
    teacher_heads: usize,
    d_model: usize,
    vocab: usize,
    forget: ForgetGate,
) -> Result<StudentConfig> {
    if teacher_layers < 2 {
        return Err(Error::config(
            "n_layers",
            format!("teacher needs at least 2 layers, has {teacher_layers}"),
        ));
    }
    if teacher_heads == 0 {
        return Err(Error::config("n_heads", "teacher needs at least one head"));
    }
    let cfg = StudentConfig {
        n_blocks: teacher_layers / 2,
        n_heads: round_up(teacher_heads, 4),
        d_model,
        vocab,
        forget,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Frozen embedding and head around a trainable xLSTM stack.
#[derive(Debug, Clone)]
pub struct Student {
    pub config: StudentConfig,
    pub embedding: Tensor,
    pub stack: XlstmStack,
    pub head: LmHead,
}

/// Logits `[B, S, V]` and the final stack output `h_s` `[B, S, D]`.
#[derive(Debug, Clone, Copy)]
pub struct StudentOutput<'t> {
    pub logits: Var<'t>,
    pub hidden: Var<'t>,
}

impl Student {
    pub fn forward<'t>(&self, tape: &'t Tape, tokens: &[usize], batch: usize, seq: usize) -> Result<StudentOutput<'t>> {
        let x = embed(tape, &self.embedding, tokens, batch, seq)?;
        let hidden = self.stack.forward(tape, x)?;
        Ok(StudentOutput {
            logits: self.head.forward(tape, hidden)?,
            hidden,
        })
    }

    /// Share of parameters that receive updates.
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_param_count() as f64 / self.param_count() as f64
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_params_mut()
            .into_iter()
            .map(|(_, t)| t)
            .filter(|t| t.requires_grad())
            .collect()
    }
}

impl Parameterized for Student {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        out.extend(prefixed("stack", self.stack.named_params()));
        out.extend(prefixed("head", self.head.named_params()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        out.extend(prefixed("stack", self.stack.named_params_mut()));
        out.extend(prefixed("head", self.head.named_params_mut()));
        out
    }
}

/// Copies the teacher's embedding and head (frozen) around a freshly seeded
/// stack. Returns the student and its trainable-parameter fraction.
pub fn init_student_from_teacher(teacher: &Teacher, config: StudentConfig, seed: u64) -> Result<(Student, f64)> {
    config.validate()?;
    let tc = &teacher.config;
    if tc.d_model != config.d_model || tc.vocab != config.vocab {
        return Err(Error::config(
            "student",
            format!(
                "student (D={}, V={}) does not match teacher (D={}, V={})",
                config.d_model, config.vocab, tc.d_model, tc.vocab
            ),
        ));
    }
    let mut embedding = teacher.embedding.clone();
    embedding.set_requires_grad(false);
    let mut head = teacher.head.clone();
    head.set_trainable(false);
    let stack = build_stack(config.d_model, config.n_blocks, config.n_heads, config.forget, seed)?;
    let student = Student {
        config,
        embedding,
        stack,
        head,
    };
    let fraction = student.trainable_fraction();
    Ok((student, fraction))
}
