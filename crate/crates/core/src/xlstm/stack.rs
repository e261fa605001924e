use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ForgetGate, MlstmCell, SlstmCell};
use crate::error::{Error, Result};
use crate::nn::{prefixed, LayerNorm, Linear, Parameterized};
use crate::tensor::{Tape, Tensor, Var};

const OUT_PROJ_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Slstm,
    Mlstm,
}

impl BlockKind {
    /// sLSTM at even positions, mLSTM at odd ones.
    pub fn at(index: usize) -> Self {
        if index % 2 == 0 {
            BlockKind::Slstm
        } else {
            BlockKind::Mlstm
        }
    }
}

#[derive(Debug, Clone)]
pub enum Cell {
    S(SlstmCell),
    M(MlstmCell),
}

impl Cell {
    pub fn kind(&self) -> BlockKind {
        match self {
            Cell::S(_) => BlockKind::Slstm,
            Cell::M(_) => BlockKind::Mlstm,
        }
    }

    pub fn forward_sequence<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Cell::S(c) => c.forward_sequence(tape, x),
            Cell::M(c) => c.forward_sequence(tape, x),
        }
    }
}

impl Parameterized for Cell {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Cell::S(c) => c.named_params(),
            Cell::M(c) => c.named_params(),
        }
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Cell::S(c) => c.named_params_mut(),
            Cell::M(c) => c.named_params_mut(),
        }
    }
}

/// `x + proj(cell(norm(x)))` over a whole sequence.
#[derive(Debug, Clone)]
pub struct XlstmBlock {
    pub norm: LayerNorm,
    pub cell: Cell,
    pub out: Linear,
}

impl XlstmBlock {
    pub fn kind(&self) -> BlockKind {
        self.cell.kind()
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.cell.forward_sequence(tape, self.norm.forward(tape, x)?)?;
        x.add(self.out.forward(tape, y)?)
    }
}

impl Parameterized for XlstmBlock {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        prefixed("norm", self.norm.named_params())
            .chain(prefixed("cell", self.cell.named_params()))
            .chain(prefixed("out", self.out.named_params()))
            .collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed("norm", self.norm.named_params_mut())
            .chain(prefixed("cell", self.cell.named_params_mut()))
            .chain(prefixed("out", self.out.named_params_mut()))
            .collect()
    }
}

/// Alternating sLSTM/mLSTM blocks; the student's sequence mixer.
#[derive(Debug, Clone)]
pub struct XlstmStack {
    pub blocks: Vec<XlstmBlock>,
    d_model: usize,
    heads: usize,
}

impl XlstmStack {
    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn kinds(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(XlstmBlock::kind).collect()
    }

    /// Maps `[B, S, D]` to the final block output `h_s` of the same shape.
    /// Recurrent state starts from zero for every call.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(Error::shape(format!(
                "stack input {shape:?}, expected [B, S, {}]",
                self.d_model
            )));
        }
        self.blocks.iter().try_fold(x, |h, block| block.forward(tape, h))
    }
}

impl Parameterized for XlstmStack {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(j, b)| prefixed(&format!("blocks.{j}"), b.named_params()))
            .collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(j, b)| prefixed(&format!("blocks.{j}"), b.named_params_mut()))
            .collect()
    }
}

/// Seeded construction of an `n_blocks`-deep stack over width `d_model`.
pub fn build_stack(
    d_model: usize,
    n_blocks: usize,
    n_heads: usize,
    forget: ForgetGate,
    seed: u64,
) -> Result<XlstmStack> {
    if n_blocks == 0 {
        return Err(Error::config("n_blocks", "at least one block is required"));
    }
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::config(
            "n_heads",
            format!("d_model {d_model} is not divisible by {n_heads} heads"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = (0..n_blocks)
        .map(|j| {
            let cell = match BlockKind::at(j) {
                BlockKind::Slstm => Cell::S(SlstmCell::new(d_model, n_heads, forget, &mut rng)?),
                BlockKind::Mlstm => Cell::M(MlstmCell::new(d_model, n_heads, forget, &mut rng)?),
            };
            Ok(XlstmBlock {
                norm: LayerNorm::new(d_model)?,
                cell,
                out: Linear::new(d_model, d_model, OUT_PROJ_STD, &mut rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(XlstmStack {
        blocks,
        d_model,
        heads: n_heads,
    })
}
