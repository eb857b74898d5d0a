//! CSV and JSON outputs.

use std::fmt::Write as _;

use serde::Serialize;
use srtg_core::backbone::{gflops, OpCount};
use srtg_core::harness::{ClipGate, EpochStats, EvalReport};

pub fn metrics_header(layers: usize) -> String {
    let mut h = String::from("epoch,lr,train_loss,train_top1,val_loss,val_top1,val_top5,gate_open_rate");
    for l in 0..layers {
        let _ = write!(h, ",gate_open_layer{l}");
    }
    h
}

/// One CSV row. Floats use the shortest representation that parses back
/// to the same value, so equal runs give equal bytes.
pub fn metrics_row(s: &EpochStats, layers: usize) -> String {
    let mut r = format!(
        "{},{},{},{},{},{},{},{}",
        s.epoch,
        s.lr,
        s.train_loss,
        s.train_top1,
        s.val_loss,
        s.val_top1,
        s.val_top5,
        s.gate_open_rate.map(|g| g.to_string()).unwrap_or_default()
    );
    for l in 0..layers {
        let _ = write!(r, ",{}", s.layer_open_rates.get(l).map(|g| g.to_string()).unwrap_or_default());
    }
    r
}

pub fn metrics_csv(history: &[EpochStats], layers: usize) -> String {
    let mut out = metrics_header(layers);
    out.push('\n');
    for s in history {
        out.push_str(&metrics_row(s, layers));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
pub struct LayerOps {
    pub name: String,
    pub kind: &'static str,
    pub macs: u64,
    pub gflops: f64,
    pub output: [usize; 4],
}

#[derive(Serialize)]
pub struct Totals {
    pub convolutions: u64,
    pub lstm: u64,
    pub gate: u64,
    pub fusion: u64,
    pub head: u64,
    pub total_macs: u64,
    pub total_gflops: f64,
}

#[derive(Serialize)]
pub struct OpsReport {
    pub input: [usize; 4],
    pub convention: &'static str,
    pub layers: Vec<LayerOps>,
    pub totals: Totals,
    pub srtg_overhead_ratio: f64,
}

pub const OPS_CONVENTION: &str =
    "MACs counted analytically per clip; GFLOPs = 2 * MACs / 1e9; gate counted as multiplies; batch norm, pooling and activations excluded";

impl OpsReport {
    pub fn new(input: [usize; 4], ops: &OpCount) -> Self {
        let t = &ops.totals;
        OpsReport {
            input,
            convention: OPS_CONVENTION,
            layers: ops
                .layers
                .iter()
                .map(|l| LayerOps {
                    name: l.name.clone(),
                    kind: l.kind.name(),
                    macs: l.macs,
                    gflops: gflops(l.macs),
                    output: l.output,
                })
                .collect(),
            totals: Totals {
                convolutions: t.convolutions,
                lstm: t.lstm,
                gate: t.gate,
                fusion: t.fusion,
                head: t.head,
                total_macs: t.total(),
                total_gflops: gflops(t.total()),
            },
            srtg_overhead_ratio: t.srtg_overhead_ratio(),
        }
    }
}

#[derive(Serialize)]
pub struct GateLine<'a> {
    pub layer: usize,
    pub name: &'a str,
    pub clip_id: usize,
    pub verdict: &'static str,
    pub match_indices_fwd: &'a [usize],
    pub match_indices_bwd: &'a [usize],
}

pub fn gate_lines(gates: &[ClipGate]) -> String {
    let mut out = String::new();
    for g in gates {
        let line = GateLine {
            layer: g.layer,
            name: &g.name,
            clip_id: g.clip_id,
            verdict: g.decision.verdict.name(),
            match_indices_fwd: &g.decision.a_in_b,
            match_indices_bwd: &g.decision.b_in_a,
        };
        out.push_str(&serde_json::to_string(&line).expect("serializable"));
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
pub struct EvalSummary {
    pub count: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub gate_open_rate: Option<f64>,
    pub layer_open_rates: Vec<f64>,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        EvalSummary {
            count: r.count,
            loss: r.loss,
            top1: r.top1,
            top5: r.top5,
            gate_open_rate: r.gate_open_rate,
            layer_open_rates: r.layer_open_rates.clone(),
        }
    }
}
