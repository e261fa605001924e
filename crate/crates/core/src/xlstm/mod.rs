//! Recurrent cells of the student: the classic LSTM baseline, the sLSTM
//! (scalar memory, exponential gating with normaliser and stabiliser states)
//! and the mLSTM (matrix memory), plus the alternating block stack.

mod lstm;
mod mlstm;
mod slstm;
mod stack;

use serde::{Deserialize, Serialize};

pub use lstm::{LstmState, VanillaLstm};
pub use mlstm::{mlstm_parallel, MlstmCell, MlstmState, MlstmStepInputs};
pub use slstm::{naive_gates, stabilize_gates, NaiveSlstmState, SlstmCell, SlstmState, StabilizedGates};
pub use stack::{build_stack, BlockKind, Cell, XlstmBlock, XlstmStack};

/// Activation of the forget gate in exponentially gated cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgetGate {
    #[default]
    Sigmoid,
    Exp,
}

impl std::str::FromStr for ForgetGate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(ForgetGate::Sigmoid),
            "exp" => Ok(ForgetGate::Exp),
            other => Err(format!("unknown forget gate `{other}` (expected sigmoid or exp)")),
        }
    }
}
