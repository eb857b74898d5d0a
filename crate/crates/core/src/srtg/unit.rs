use alloc::vec;
use alloc::vec::Vec;

use super::embedding::{cycle_consistent, GateDecision, TemporalEmbedding};
use super::lstm::{recursion, LstmVars};
use super::FusionMode;
use crate::{Graph, Result, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SrtgConfig {
    /// When false the gate is bypassed and the recurrent stream is always
    /// fused.
    pub gate_active: bool,
    pub fusion: FusionMode,
}

impl Default for SrtgConfig {
    fn default() -> Self {
        SrtgConfig {
            gate_active: true,
            fusion: FusionMode::Multiplicative,
        }
    }
}

/// Spatial average pooling of (N, C, T, H, W) into an (N, T, C) embedding.
pub fn squeeze(g: &mut Graph, input: Var) -> Result<Var> {
    g.spatial_avg_pool(input)
}

/// Fuses the recurrent embedding into every clip of `main`.
pub fn fuse(g: &mut Graph, main: Var, recurrent: Var, mode: FusionMode) -> Result<Var> {
    let n = g.shape(main).first().copied().unwrap_or(0);
    g.fuse(main, recurrent, mode, &vec![true; n])
}

fn clip_embedding(g: &Graph, v: Var, clip: usize) -> Result<TemporalEmbedding> {
    let s = g.shape(v);
    let (t, c) = (s[1], s[2]);
    TemporalEmbedding::new(t, c, g.value(v)[clip * t * c..][..t * c].to_vec())
}

/// Squeeze, recur, gate and fuse one activation volume.
///
/// Each clip of the batch is gated on its own. When every clip is closed
/// the input node itself is returned, so the output is bit-identical to the
/// input. The verdict is a hard routing decision and carries no gradient.
pub fn srtg_unit(
    g: &mut Graph,
    input: Var,
    lstm: &LstmVars,
    config: SrtgConfig,
) -> Result<(Var, Vec<GateDecision>)> {
    let squeezed = squeeze(g, input)?;
    let recurrent = recursion(g, squeezed, lstm)?;
    let n = g.shape(input)[0];
    let decisions: Vec<GateDecision> = if config.gate_active {
        (0..n)
            .map(|i| {
                let a = clip_embedding(g, squeezed, i)?;
                let b = clip_embedding(g, recurrent, i)?;
                cycle_consistent(&a, &b)
            })
            .collect::<Result<_>>()?
    } else {
        (0..n).map(|_| GateDecision::inactive()).collect()
    };
    let open: Vec<bool> = decisions.iter().map(|d| d.verdict.fuses()).collect();
    if open.iter().all(|o| !o) {
        return Ok((input, decisions));
    }
    let out = g.fuse(input, recurrent, config.fusion, &open)?;
    Ok((out, decisions))
}
