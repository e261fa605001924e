use rand::Rng;

use super::ForgetGate;
use crate::error::{Error, Result};
use crate::nn::{normal, Parameterized};
use crate::tensor::{Tape, Tensor, Var};

const FORGET_BIAS: f64 = 3.0;

/// sLSTM cell with exponential input gating, normaliser and stabiliser
/// states, and head-wise block-diagonal recurrence.
///
/// Gate pre-activations are laid out gate-major (`z, i, f, o`), each gate
/// block head-major. The recurrent weights are stored compactly per head as
/// `[H, d, 4d]` and expanded into a block-diagonal `[D, 4D]` matrix.
#[derive(Debug, Clone)]
pub struct SlstmCell {
    pub w: Tensor,
    pub r: Tensor,
    pub b: Tensor,
    heads: usize,
    forget: ForgetGate,
}

/// Stabilised recurrent state. `m` is `None` before the first step.
#[derive(Debug, Clone, Copy)]
pub struct SlstmState<'t> {
    pub c: Var<'t>,
    pub n: Var<'t>,
    pub h: Var<'t>,
    pub m: Option<Var<'t>>,
}

/// State of the unstabilised reference formulation.
#[derive(Debug, Clone, Copy)]
pub struct NaiveSlstmState<'t> {
    pub c: Var<'t>,
    pub n: Var<'t>,
    pub h: Var<'t>,
}

fn zeros<'t>(tape: &'t Tape, batch: usize, d: usize) -> Result<Var<'t>> {
    tape.constant(&[batch, d], vec![0.0; batch * d])
}

impl<'t> SlstmState<'t> {
    pub fn zeros(tape: &'t Tape, batch: usize, d: usize) -> Result<Self> {
        Ok(SlstmState {
            c: zeros(tape, batch, d)?,
            n: zeros(tape, batch, d)?,
            h: zeros(tape, batch, d)?,
            m: None,
        })
    }
}

impl<'t> NaiveSlstmState<'t> {
    pub fn zeros(tape: &'t Tape, batch: usize, d: usize) -> Result<Self> {
        Ok(NaiveSlstmState {
            c: zeros(tape, batch, d)?,
            n: zeros(tape, batch, d)?,
            h: zeros(tape, batch, d)?,
        })
    }
}

/// Scalar stabilised gates for one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilizedGates {
    pub m: f64,
    pub i: f64,
    pub f: f64,
}

/// `m = max(log f + m_prev, ĩ)`, `i' = exp(ĩ - m)`, `f' = exp(log f + m_prev - m)`.
/// Without a previous stabiliser the forget path is treated as `-inf`.
pub fn stabilize_gates(i_tilde: f64, log_f: f64, m_prev: Option<f64>) -> StabilizedGates {
    match m_prev {
        None => StabilizedGates {
            m: i_tilde,
            i: 1.0,
            f: 0.0,
        },
        Some(mp) => {
            let m = (log_f + mp).max(i_tilde);
            StabilizedGates {
                m,
                i: (i_tilde - m).exp(),
                f: (log_f + mp - m).exp(),
            }
        }
    }
}

/// Unstabilised `(i, f) = (exp ĩ, exp log f)`.
pub fn naive_gates(i_tilde: f64, log_f: f64) -> (f64, f64) {
    (i_tilde.exp(), log_f.exp())
}

struct Gates<'t> {
    z: Var<'t>,
    i_tilde: Var<'t>,
    f_tilde: Var<'t>,
    o: Var<'t>,
}

impl SlstmCell {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, forget: ForgetGate, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config("heads", format!("{d} is not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let mut b = vec![0.0; 4 * d];
        b[2 * d..3 * d].iter_mut().for_each(|v| *v = FORGET_BIAS);
        Ok(SlstmCell {
            w: normal(&[d, 4 * d], 1.0 / (d as f64).sqrt(), rng)?,
            r: normal(&[heads, dh, 4 * dh], 1.0 / (dh as f64).sqrt(), rng)?,
            b: Tensor::from_vec(&[4 * d], b)?.with_grad(true),
            heads,
            forget,
        })
    }

    pub fn d(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forget(&self) -> ForgetGate {
        self.forget
    }

    /// `x·W + b` for inputs of shape `[.., D]`.
    pub fn input_projection<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() < 2 || shape[shape.len() - 1] != self.d() {
            return Err(Error::shape(format!(
                "sLSTM input {shape:?}, expected [.., {}]",
                self.d()
            )));
        }
        x.matmul(tape.leaf(&self.w))?.add_row(tape.leaf(&self.b))
    }

    fn gates<'t>(&self, tape: &'t Tape, pre: Var<'t>, h: Var<'t>) -> Result<Gates<'t>> {
        let d = self.d();
        let batch = pre.shape()[0];
        if pre.shape() != [batch, 4 * d] || h.shape() != [batch, d] {
            return Err(Error::shape(format!(
                "sLSTM pre-activation {:?} / hidden {:?} for D={d}",
                pre.shape(),
                h.shape()
            )));
        }
        let pre = pre.add(h.matmul(tape.leaf(&self.r).block_diag(4)?)?)?;
        Ok(Gates {
            z: pre.narrow(1, 0, d)?.tanh(),
            i_tilde: pre.narrow(1, d, d)?,
            f_tilde: pre.narrow(1, 2 * d, d)?,
            o: pre.narrow(1, 3 * d, d)?.sigmoid(),
        })
    }

    fn log_forget<'t>(&self, f_tilde: Var<'t>) -> Var<'t> {
        match self.forget {
            ForgetGate::Sigmoid => f_tilde.log_sigmoid(),
            ForgetGate::Exp => f_tilde,
        }
    }

    /// One stabilised step from the precomputed input projection `[B, 4D]`.
    pub fn step_from_pre<'t>(&self, tape: &'t Tape, pre: Var<'t>, state: SlstmState<'t>) -> Result<SlstmState<'t>> {
        let g = self.gates(tape, pre, state.h)?;
        let log_f = self.log_forget(g.f_tilde);
        let (c, n, m) = match state.m {
            None => {
                let m = g.i_tilde;
                let i = g.i_tilde.sub(m)?.exp();
                (i.mul(g.z)?, i, m)
            }
            Some(m_prev) => {
                let carried = log_f.add(m_prev)?;
                let m = carried.maximum(g.i_tilde)?;
                let i = g.i_tilde.sub(m)?.exp();
                let f = carried.sub(m)?.exp();
                let c = f.mul(state.c)?.add(i.mul(g.z)?)?;
                let n = f.mul(state.n)?.add(i)?;
                (c, n, m)
            }
        };
        check_normalizer(n)?;
        let h = g.o.mul(c.div(n)?)?;
        Ok(SlstmState { c, n, h, m: Some(m) })
    }

    pub fn step<'t>(&self, tape: &'t Tape, x: Var<'t>, state: SlstmState<'t>) -> Result<SlstmState<'t>> {
        let pre = self.input_projection(tape, as_batch(x)?)?;
        self.step_from_pre(tape, pre, state)
    }

    /// Reference step with raw exponential gates; overflows for large `ĩ`.
    pub fn naive_step<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        state: NaiveSlstmState<'t>,
    ) -> Result<NaiveSlstmState<'t>> {
        let pre = self.input_projection(tape, as_batch(x)?)?;
        let g = self.gates(tape, pre, state.h)?;
        let i = g.i_tilde.exp();
        let f = self.log_forget(g.f_tilde).exp();
        let c = f.mul(state.c)?.add(i.mul(g.z)?)?;
        let n = f.mul(state.n)?.add(i)?;
        let h = g.o.mul(c.div(n)?)?;
        Ok(NaiveSlstmState { c, n, h })
    }

    /// Runs `[B, S, D]` from a zero state and returns the hidden states.
    pub fn forward_sequence<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(Error::shape(format!(
                "sLSTM sequence input {shape:?}, expected [B, S, D]"
            )));
        }
        let pre = self.input_projection(tape, x)?;
        let mut state = SlstmState::zeros(tape, shape[0], self.d())?;
        let mut hs = Vec::with_capacity(shape[1]);
        for t in 0..shape[1] {
            state = self.step_from_pre(tape, pre.select(1, t)?, state)?;
            hs.push(state.h);
        }
        Var::stack(&hs, 1)
    }
}

fn as_batch(x: Var<'_>) -> Result<Var<'_>> {
    match x.shape().as_slice() {
        [d] => x.reshape(&[1, *d]),
        [_, _] => Ok(x),
        s => Err(Error::shape(format!("cell input {s:?}, expected [D] or [B, D]"))),
    }
}

fn check_normalizer(n: Var<'_>) -> Result<()> {
    if n.to_vec().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::NonFinite("sLSTM normalizer state reached zero".into()));
    }
    Ok(())
}

impl Parameterized for SlstmCell {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.w), ("r".into(), &self.r), ("b".into(), &self.b)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("w".into(), &mut self.w),
            ("r".into(), &mut self.r),
            ("b".into(), &mut self.b),
        ]
    }
}
