//! Squeeze-and-recursion temporal gates.
//!
//! An SRTG unit squeezes an activation volume to a (T, C) embedding per
//! clip, runs it through a stacked LSTM, and fuses the recurrent stream back
//! into the volume only when the squeezed and recurrent embeddings are
//! cycle-consistent.

mod embedding;
mod lstm;
mod unit;

pub use embedding::{
    cycle_consistent, nearest_frame_index, soft_nearest_neighbor, soft_weights, GateDecision, TemporalEmbedding,
    Verdict,
};
pub use lstm::{
    lstm_cell_step, recursion, LstmLayerParams, LstmLayerVars, LstmParams, LstmState, LstmVars, GATE_NAMES,
};
pub use unit::{fuse, squeeze, srtg_unit, SrtgConfig};

/// How the recurrent stream is combined with the main stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// `main * sigmoid(recurrent)`, broadcast over H and W.
    #[default]
    Multiplicative,
    /// `main + recurrent`, broadcast over H and W.
    Additive,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Multiplicative => "multiplicative",
            FusionMode::Additive => "additive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multiplicative" | "mul" => Some(FusionMode::Multiplicative),
            "additive" | "add" => Some(FusionMode::Additive),
            _ => None,
        }
    }
}
