use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{filled, normal, Parameterized};
use crate::tensor::{Tape, Tensor, Var};

/// Classic LSTM with sigmoid gates and tanh cell/hidden activations.
///
/// Inputs are `[D_in]` vectors or `[B, D_in]` batches; weights are stored
/// input-major so that a step is `x·W + h·R + b` per gate.
#[derive(Debug, Clone)]
pub struct VanillaLstm {
    pub w_z: Tensor,
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    pub r_z: Tensor,
    pub r_i: Tensor,
    pub r_f: Tensor,
    pub r_o: Tensor,
    pub b_z: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState<'t> {
    pub c: Var<'t>,
    pub h: Var<'t>,
}

impl<'t> LstmState<'t> {
    pub fn zeros(tape: &'t Tape, batch: usize, d_hidden: usize) -> Result<Self> {
        Ok(LstmState {
            c: tape.constant(&[batch, d_hidden], vec![0.0; batch * d_hidden])?,
            h: tape.constant(&[batch, d_hidden], vec![0.0; batch * d_hidden])?,
        })
    }
}

impl VanillaLstm {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_hidden: usize, rng: &mut R) -> Result<Self> {
        let sw = 1.0 / (d_in as f64).sqrt();
        let sr = 1.0 / (d_hidden as f64).sqrt();
        Ok(VanillaLstm {
            w_z: normal(&[d_in, d_hidden], sw, rng)?,
            w_i: normal(&[d_in, d_hidden], sw, rng)?,
            w_f: normal(&[d_in, d_hidden], sw, rng)?,
            w_o: normal(&[d_in, d_hidden], sw, rng)?,
            r_z: normal(&[d_hidden, d_hidden], sr, rng)?,
            r_i: normal(&[d_hidden, d_hidden], sr, rng)?,
            r_f: normal(&[d_hidden, d_hidden], sr, rng)?,
            r_o: normal(&[d_hidden, d_hidden], sr, rng)?,
            b_z: filled(&[d_hidden], 0.0)?,
            b_i: filled(&[d_hidden], 0.0)?,
            b_f: filled(&[d_hidden], 0.0)?,
            b_o: filled(&[d_hidden], 0.0)?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn d_hidden(&self) -> usize {
        self.w_z.shape()[1]
    }

    fn pre<'t>(tape: &'t Tape, x: Var<'t>, h: Var<'t>, w: &Tensor, r: &Tensor, b: &Tensor) -> Result<Var<'t>> {
        x.matmul(tape.leaf(w))?
            .add(h.matmul(tape.leaf(r))?)?
            .add_row(tape.leaf(b))
    }

    /// One step: `c' = f·c + i·z`, `h' = o·tanh(c')`.
    pub fn step<'t>(&self, tape: &'t Tape, x: Var<'t>, state: LstmState<'t>) -> Result<LstmState<'t>> {
        let x = match x.shape().as_slice() {
            [d] if *d == self.d_in() => x.reshape(&[1, *d])?,
            [_, d] if *d == self.d_in() => x,
            s => {
                return Err(Error::shape(format!(
                    "LSTM input {s:?}, expected [.., {}]",
                    self.d_in()
                )))
            }
        };
        let batch = x.shape()[0];
        let expect = vec![batch, self.d_hidden()];
        if state.c.shape() != expect || state.h.shape() != expect {
            return Err(Error::shape(format!(
                "LSTM state {:?}/{:?}, expected {expect:?}",
                state.c.shape(),
                state.h.shape()
            )));
        }
        let h = state.h;
        let z = Self::pre(tape, x, h, &self.w_z, &self.r_z, &self.b_z)?.tanh();
        let i = Self::pre(tape, x, h, &self.w_i, &self.r_i, &self.b_i)?.sigmoid();
        let f = Self::pre(tape, x, h, &self.w_f, &self.r_f, &self.b_f)?.sigmoid();
        let o = Self::pre(tape, x, h, &self.w_o, &self.r_o, &self.b_o)?.sigmoid();
        let c = f.mul(state.c)?.add(i.mul(z)?)?;
        let h = o.mul(c.tanh())?;
        Ok(LstmState { c, h })
    }
}

impl Parameterized for VanillaLstm {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w_z".into(), &self.w_z),
            ("w_i".into(), &self.w_i),
            ("w_f".into(), &self.w_f),
            ("w_o".into(), &self.w_o),
            ("r_z".into(), &self.r_z),
            ("r_i".into(), &self.r_i),
            ("r_f".into(), &self.r_f),
            ("r_o".into(), &self.r_o),
            ("b_z".into(), &self.b_z),
            ("b_i".into(), &self.b_i),
            ("b_f".into(), &self.b_f),
            ("b_o".into(), &self.b_o),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("w_z".into(), &mut self.w_z),
            ("w_i".into(), &mut self.w_i),
            ("w_f".into(), &mut self.w_f),
            ("w_o".into(), &mut self.w_o),
            ("r_z".into(), &mut self.r_z),
            ("r_i".into(), &mut self.r_i),
            ("r_f".into(), &mut self.r_f),
            ("r_o".into(), &mut self.r_o),
            ("b_z".into(), &mut self.b_z),
            ("b_i".into(), &mut self.b_i),
            ("b_f".into(), &mut self.b_f),
            ("b_o".into(), &mut self.b_o),
        ]
    }
}
