use rand::Rng;

use super::ForgetGate;
use crate::error::{Error, Result};
use crate::nn::{filled, normal, Parameterized};
use crate::tensor::{Tape, Tensor, Var};

const FORGET_BIAS: f64 = 3.0;
/// Cap on `-m` so the rescaled unit floor `exp(-m)` stays finite.
const MAX_NEG_LOG_SCALE: f64 = 700.0;

/// mLSTM cell: per-head matrix memory `C ∈ R^{d×d}` with scalar exponential
/// input gate and sigmoid or exponential forget gate per head.
///
/// Memory and normaliser are stored rescaled by `exp(-m)` with a running
/// per-head stabiliser `m`; the readout divides by `max(|nᵀq|, exp(-m))`,
/// which is the same hidden state as `C q / max(|nᵀq|, 1)` on the unscaled
/// memory.
#[derive(Debug, Clone)]
pub struct MlstmCell {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_q: Tensor,
    pub b_k: Tensor,
    pub b_v: Tensor,
    pub b_o: Tensor,
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    heads: usize,
    forget: ForgetGate,
}

/// Per-step projections of the input. Shapes are `[B, D]` for `q, k, v, o`
/// and `[B, H]` for the gate pre-activations, or with an extra sequence axis
/// when produced by [`MlstmCell::project`] on `[B, S, D]`.
#[derive(Debug, Clone, Copy)]
pub struct MlstmStepInputs<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
    pub i_tilde: Var<'t>,
    pub log_f: Var<'t>,
    pub o: Var<'t>,
}

impl<'t> MlstmStepInputs<'t> {
    /// Slice timestep `t` out of sequence projections.
    pub fn at(&self, t: usize) -> Result<Self> {
        Ok(MlstmStepInputs {
            q: self.q.select(1, t)?,
            k: self.k.select(1, t)?,
            v: self.v.select(1, t)?,
            i_tilde: self.i_tilde.select(1, t)?,
            log_f: self.log_f.select(1, t)?,
            o: self.o.select(1, t)?,
        })
    }
}

/// Rescaled memory `[B·H, d, d]`, normaliser `[B·H, d]` and stabiliser
/// `[B·H]`; `m` is `None` before the first step.
#[derive(Debug, Clone, Copy)]
pub struct MlstmState<'t> {
    pub c: Var<'t>,
    pub n: Var<'t>,
    pub m: Option<Var<'t>>,
}

impl<'t> MlstmState<'t> {
    pub fn zeros(tape: &'t Tape, batch: usize, heads: usize, dh: usize) -> Result<Self> {
        let bh = batch * heads;
        Ok(MlstmState {
            c: tape.constant(&[bh, dh, dh], vec![0.0; bh * dh * dh])?,
            n: tape.constant(&[bh, dh], vec![0.0; bh * dh])?,
            m: None,
        })
    }

    /// Unscaled `(C, n)` values, i.e. the memory of the plain recurrence.
    pub fn memory(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut c, mut n) = (self.c.to_vec(), self.n.to_vec());
        if let Some(m) = self.m {
            let m = m.to_vec();
            let cs = c.len() / m.len();
            let ns = n.len() / m.len();
            for (j, mj) in m.iter().enumerate() {
                let s = mj.exp();
                c[j * cs..(j + 1) * cs].iter_mut().for_each(|v| *v *= s);
                n[j * ns..(j + 1) * ns].iter_mut().for_each(|v| *v *= s);
            }
        }
        (c, n)
    }
}

impl MlstmCell {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, forget: ForgetGate, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config("heads", format!("{d} is not divisible by {heads} heads")));
        }
        let std = 1.0 / (d as f64).sqrt();
        Ok(MlstmCell {
            w_q: normal(&[d, d], std, rng)?,
            w_k: normal(&[d, d], std, rng)?,
            w_v: normal(&[d, d], std, rng)?,
            w_o: normal(&[d, d], std, rng)?,
            b_q: filled(&[d], 0.0)?,
            b_k: filled(&[d], 0.0)?,
            b_v: filled(&[d], 0.0)?,
            b_o: filled(&[d], 0.0)?,
            w_i: normal(&[d, heads], std, rng)?,
            w_f: normal(&[d, heads], std, rng)?,
            b_i: filled(&[heads], 0.0)?,
            b_f: filled(&[heads], FORGET_BIAS)?,
            heads,
            forget,
        })
    }

    pub fn d(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.heads
    }

    pub fn forget(&self) -> ForgetGate {
        self.forget
    }

    /// Projections of `[.., D]` inputs; the key carries the `1/√d` factor
    /// on the weight term only.
    pub fn project<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<MlstmStepInputs<'t>> {
        let shape = x.shape();
        if shape.len() < 2 || shape[shape.len() - 1] != self.d() {
            return Err(Error::shape(format!(
                "mLSTM input {shape:?}, expected [.., {}]",
                self.d()
            )));
        }
        let lin = |w: &Tensor, b: &Tensor| x.matmul(tape.leaf(w))?.add_row(tape.leaf(b));
        let key_scale = 1.0 / (self.head_dim() as f64).sqrt();
        let f_tilde = lin(&self.w_f, &self.b_f)?;
        Ok(MlstmStepInputs {
            q: lin(&self.w_q, &self.b_q)?,
            k: x.matmul(tape.leaf(&self.w_k))?
                .scale(key_scale)
                .add_row(tape.leaf(&self.b_k))?,
            v: lin(&self.w_v, &self.b_v)?,
            i_tilde: lin(&self.w_i, &self.b_i)?,
            log_f: match self.forget {
                ForgetGate::Sigmoid => f_tilde.log_sigmoid(),
                ForgetGate::Exp => f_tilde,
            },
            o: lin(&self.w_o, &self.b_o)?.sigmoid(),
        })
    }

    /// One step; returns the new state and `h = o ⊙ h̃` of shape `[B, D]`.
    pub fn step_projected<'t>(
        &self,
        inp: MlstmStepInputs<'t>,
        state: MlstmState<'t>,
    ) -> Result<(MlstmState<'t>, Var<'t>)> {
        let (d, dh, heads) = (self.d(), self.head_dim(), self.heads);
        let batch = inp.q.shape()[0];
        let bh = batch * heads;
        for (name, v, w) in [
            ("q", inp.q, d),
            ("k", inp.k, d),
            ("v", inp.v, d),
            ("o", inp.o, d),
            ("i", inp.i_tilde, heads),
            ("f", inp.log_f, heads),
        ] {
            if v.shape() != [batch, w] {
                return Err(Error::shape(format!(
                    "mLSTM {name} {:?}, expected [{batch}, {w}]",
                    v.shape()
                )));
            }
        }
        if state.c.shape() != [bh, dh, dh] || state.n.shape() != [bh, dh] {
            return Err(Error::shape(format!(
                "mLSTM state {:?}/{:?} for batch {batch}",
                state.c.shape(),
                state.n.shape()
            )));
        }
        let q = inp.q.reshape(&[bh, dh])?;
        let k = inp.k.reshape(&[bh, dh])?;
        let v = inp.v.reshape(&[bh, dh])?;
        let i_tilde = inp.i_tilde.reshape(&[bh])?;
        let log_f = inp.log_f.reshape(&[bh])?;
        let vk = v.reshape(&[bh, dh, 1])?.bmm(k.reshape(&[bh, 1, dh])?, false, false)?;

        let (c, n, m) = match state.m {
            None => {
                let m = i_tilde;
                let i = i_tilde.sub(m)?.exp();
                (vk.mul_col(i)?, k.mul_col(i)?, m)
            }
            Some(m_prev) => {
                let carried = log_f.add(m_prev)?;
                let m = carried.maximum(i_tilde)?;
                let i = i_tilde.sub(m)?.exp();
                let f = carried.sub(m)?.exp();
                let c = state.c.mul_col(f)?.add(vk.mul_col(i)?)?;
                let n = state.n.mul_col(f)?.add(k.mul_col(i)?)?;
                (c, n, m)
            }
        };
        let num = c.bmm(q.reshape(&[bh, dh, 1])?, false, false)?.reshape(&[bh, dh])?;
        let floor = m.max_scalar(-MAX_NEG_LOG_SCALE).neg().exp();
        let den = n.mul(q)?.sum_axis(1)?.abs().maximum(floor)?;
        let h_tilde = num.div_col(den)?.reshape(&[batch, d])?;
        let h = inp.o.mul(h_tilde)?;
        Ok((MlstmState { c, n, m: Some(m) }, h))
    }

    pub fn step<'t>(&self, tape: &'t Tape, x: Var<'t>, state: MlstmState<'t>) -> Result<(MlstmState<'t>, Var<'t>)> {
        let x = match x.shape().as_slice() {
            [d] => x.reshape(&[1, *d])?,
            [_, _] => x,
            s => return Err(Error::shape(format!("mLSTM step input {s:?}, expected [D] or [B, D]"))),
        };
        let inp = self.project(tape, x)?;
        self.step_projected(inp, state)
    }

    /// Runs `[B, S, D]` from a zero state and returns the hidden states.
    pub fn forward_sequence<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(Error::shape(format!(
                "mLSTM sequence input {shape:?}, expected [B, S, D]"
            )));
        }
        let proj = self.project(tape, x)?;
        let mut state = MlstmState::zeros(tape, shape[0], self.heads, self.head_dim())?;
        let mut hs = Vec::with_capacity(shape[1]);
        for t in 0..shape[1] {
            let (s, h) = self.step_projected(proj.at(t)?, state)?;
            state = s;
            hs.push(h);
        }
        Var::stack(&hs, 1)
    }
}

/// Quadratic (all-pairs) form of the mLSTM readout for one head of one
/// sequence. `q, k, v, o` are `[S, d]` row-major with `k` already scaled;
/// `i_tilde` and `log_f` are `[S]`. Returns `h` as `[S, d]`.
pub fn mlstm_parallel(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    o: &[f64],
    i_tilde: &[f64],
    log_f: &[f64],
    d: usize,
) -> Result<Vec<f64>> {
    let s = i_tilde.len();
    if log_f.len() != s || [q, k, v, o].iter().any(|a| a.len() != s * d) {
        return Err(Error::shape(format!("parallel mLSTM inputs do not match S={s}, d={d}")));
    }
    let mut out = vec![0.0; s * d];
    let mut log_d = vec![0.0; s];
    for t in 0..s {
        // log D[t, j] = ĩ_j + Σ_{r=j+1..t} log f_r
        let mut acc = 0.0;
        for j in (0..=t).rev() {
            log_d[j] = i_tilde[j] + acc;
            acc += log_f[j];
        }
        let top = log_d[..=t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let qt = &q[t * d..(t + 1) * d];
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for j in 0..=t {
            let kq: f64 = k[j * d..(j + 1) * d].iter().zip(qt).map(|(a, b)| a * b).sum();
            let w = (log_d[j] - top).exp() * kq;
            den += w;
            num.iter_mut()
                .zip(&v[j * d..(j + 1) * d])
                .for_each(|(n, vj)| *n += w * vj);
        }
        let den = den.abs().max((-top).min(MAX_NEG_LOG_SCALE).exp());
        for u in 0..d {
            out[t * d + u] = o[t * d + u] * num[u] / den;
        }
    }
    Ok(out)
}

impl Parameterized for MlstmCell {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w_q".into(), &self.w_q),
            ("w_k".into(), &self.w_k),
            ("w_v".into(), &self.w_v),
            ("w_o".into(), &self.w_o),
            ("b_q".into(), &self.b_q),
            ("b_k".into(), &self.b_k),
            ("b_v".into(), &self.b_v),
            ("b_o".into(), &self.b_o),
            ("w_i".into(), &self.w_i),
            ("w_f".into(), &self.w_f),
            ("b_i".into(), &self.b_i),
            ("b_f".into(), &self.b_f),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("w_q".into(), &mut self.w_q),
            ("w_k".into(), &mut self.w_k),
            ("w_v".into(), &mut self.w_v),
            ("w_o".into(), &mut self.w_o),
            ("b_q".into(), &mut self.b_q),
            ("b_k".into(), &mut self.b_k),
            ("b_v".into(), &mut self.b_v),
            ("b_o".into(), &mut self.b_o),
            ("w_i".into(), &mut self.w_i),
            ("w_f".into(), &mut self.w_f),
            ("b_i".into(), &mut self.b_i),
            ("b_f".into(), &mut self.b_f),
        ]
    }
}
