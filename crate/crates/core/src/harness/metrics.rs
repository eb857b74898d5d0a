use alloc::string::String;
use alloc::vec::Vec;

use super::synthetic::Dataset;
use crate::backbone::{Mode, Network};
use crate::srtg::{GateDecision, Verdict};
use crate::{Error, Graph, Result};

/// Indices of the `k` largest entries, best first. Ties go to the lower
/// class index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of rows whose label is among the top `k` logits.
pub fn top_k_accuracy(logits: &[f64], classes: usize, labels: &[usize], k: usize) -> Result<f64> {
    if classes == 0 || logits.len() != classes * labels.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "top_k: {} logits for {} labels and {} classes",
            logits.len(),
            labels.len(),
            classes
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("top_k"));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, l)| top_k_indices(&logits[i * classes..][..classes], k).contains(l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Gate decision for one clip at one SRTG unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipGate {
    pub clip_id: usize,
    pub layer: usize,
    pub name: String,
    pub decision: GateDecision,
}

/// Share of decisions that let the recurrent stream through (Open or
/// Inactive). `None` when there are no decisions.
pub fn gate_open_rate(gates: &[ClipGate]) -> Option<f64> {
    if gates.is_empty() {
        return None;
    }
    let open = gates.iter().filter(|g| g.decision.verdict != Verdict::Closed).count();
    Some(open as f64 / gates.len() as f64)
}

/// Open rate of each SRTG unit, indexed by its forward-order layer.
pub fn layer_open_rates(gates: &[ClipGate]) -> Vec<f64> {
    let layers = gates.iter().map(|g| g.layer + 1).max().unwrap_or(0);
    (0..layers)
        .map(|l| {
            let these: Vec<ClipGate> = gates.iter().filter(|g| g.layer == l).cloned().collect();
            gate_open_rate(&these).unwrap_or(0.0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub gate_open_rate: Option<f64>,
    pub layer_open_rates: Vec<f64>,
    pub gates: Vec<ClipGate>,
}

/// Runs the network over `data` with running batch-norm statistics.
pub fn evaluate(net: &mut Network, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let classes = net.spec().num_classes;
    let mut logits = Vec::with_capacity(data.len() * classes);
    let mut loss = 0.0;
    let mut gates = Vec::new();
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size) {
        let (x, labels) = data.batch(chunk)?;
        let mut g = Graph::new();
        let xv = g.input(&x);
        let out = net.forward(&mut g, xv, Mode::Eval)?;
        let l = g.softmax_cross_entropy(out.output, &labels)?;
        loss += g.value(l)[0] * chunk.len() as f64;
        logits.extend_from_slice(g.value(out.output));
        for rec in out.gates {
            for (j, d) in rec.decisions.into_iter().enumerate() {
                gates.push(ClipGate {
                    clip_id: chunk[j],
                    layer: rec.layer,
                    name: rec.name.clone(),
                    decision: d,
                });
            }
        }
    }
    Ok(EvalReport {
        count: data.len(),
        loss: loss / data.len() as f64,
        top1: top_k_accuracy(&logits, classes, &data.labels, 1)?,
        top5: top_k_accuracy(&logits, classes, &data.labels, 5)?,
        gate_open_rate: gate_open_rate(&gates),
        layer_open_rates: layer_open_rates(&gates),
        gates,
    })
}
