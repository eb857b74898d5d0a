use alloc::format;
use alloc::vec::Vec;

use crate::graph::softmax_row;
use crate::{math, Error, Result};

/// T frame vectors of dimension C, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalEmbedding {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TemporalEmbedding {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Empty("temporal embedding"));
        }
        if data.len() != frames * dim {
            return Err(Error::shape(
                "temporal embedding",
                "data length",
                format!("{} frames x {} channels, got {} values", frames, dim, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("temporal embedding"));
        }
        Ok(TemporalEmbedding { frames, dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).ok_or(Error::Empty("temporal embedding"))?;
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::shape("temporal embedding", "frame dimension", format!("frames must all have {} values", dim)));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), dim, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..][..self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn check_query(op: &'static str, query: &[f64], reference: &TemporalEmbedding) -> Result<()> {
    if query.len() != reference.dim() {
        return Err(Error::shape(
            op,
            "channels",
            format!("query has {} values, reference frames {}", query.len(), reference.dim()),
        ));
    }
    Ok(())
}

/// Softmax over frames of the negative squared distance to `query`.
pub fn soft_weights(query: &[f64], reference: &TemporalEmbedding) -> Result<Vec<f64>> {
    check_query("soft_weights", query, reference)?;
    let logits: Vec<f64> = (0..reference.frames())
        .map(|i| -math::sq_dist(query, reference.frame(i)))
        .collect();
    let mut z = alloc::vec![0.0; logits.len()];
    softmax_row(&logits, &mut z);
    Ok(z)
}

/// Soft match of `query` in `reference`: the softmax(-||q - B_i||^2)
/// weighted average of the reference frames.
pub fn soft_nearest_neighbor(query: &[f64], reference: &TemporalEmbedding) -> Result<Vec<f64>> {
    let z = soft_weights(query, reference)?;
    let mut out = alloc::vec![0.0; reference.dim()];
    for (i, zi) in z.iter().enumerate() {
        for (o, b) in out.iter_mut().zip(reference.frame(i)) {
            *o += zi * b;
        }
    }
    Ok(out)
}

/// Index of the reference frame closest to `soft_match`; ties go to the
/// smallest index.
pub fn nearest_frame_index(soft_match: &[f64], reference: &TemporalEmbedding) -> Result<usize> {
    check_query("nearest_frame_index", soft_match, reference)?;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..reference.frames() {
        let d = math::sq_dist(soft_match, reference.frame(i));
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    /// Both embeddings are cycle-consistent; the recurrent stream is fused.
    Open,
    /// Consistency failed; only the main stream passes.
    Closed,
    /// Gate bypassed; the recurrent stream is always fused.
    Inactive,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Open => "open",
            Verdict::Closed => "closed",
            Verdict::Inactive => "inactive",
        }
    }

    /// Whether the recurrent stream reaches the output.
    pub fn fuses(self) -> bool {
        !matches!(self, Verdict::Closed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub verdict: Verdict,
    /// Every frame of A soft-matches back to its own index in B.
    pub a_in_b_consistent: bool,
    /// Every frame of B soft-matches back to its own index in A.
    pub b_in_a_consistent: bool,
    /// `a_in_b[t]`: nearest B frame to the soft match of `A_t` in B.
    pub a_in_b: Vec<usize>,
    /// `b_in_a[t]`: nearest A frame to the soft match of `B_t` in A.
    pub b_in_a: Vec<usize>,
}

impl GateDecision {
    pub fn inactive() -> Self {
        GateDecision {
            verdict: Verdict::Inactive,
            a_in_b_consistent: false,
            b_in_a_consistent: false,
            a_in_b: Vec::new(),
            b_in_a: Vec::new(),
        }
    }
}

fn one_way(a: &TemporalEmbedding, b: &TemporalEmbedding) -> Result<Vec<usize>> {
    (0..a.frames())
        .map(|t| {
            let soft = soft_nearest_neighbor(a.frame(t), b)?;
            nearest_frame_index(&soft, b)
        })
        .collect()
}

/// Two embeddings are cycle-consistent iff every frame of each one,
/// soft-matched into the other and snapped to the nearest frame there,
/// lands on its own time index.
pub fn cycle_consistent(a: &TemporalEmbedding, b: &TemporalEmbedding) -> Result<GateDecision> {
    if a.frames() != b.frames() || a.dim() != b.dim() {
        return Err(Error::shape(
            "cycle_consistent",
            "embedding",
            format!("({}, {}) vs ({}, {})", a.frames(), a.dim(), b.frames(), b.dim()),
        ));
    }
    let a_in_b = one_way(a, b)?;
    let b_in_a = one_way(b, a)?;
    let fwd = a_in_b.iter().enumerate().all(|(t, &i)| i == t);
    let bwd = b_in_a.iter().enumerate().all(|(t, &i)| i == t);
    Ok(GateDecision {
        verdict: if fwd && bwd { Verdict::Open } else { Verdict::Closed },
        a_in_b_consistent: fwd,
        b_in_a_consistent: bwd,
        a_in_b,
        b_in_a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn emb(rows: &[&[f64]]) -> TemporalEmbedding {
        TemporalEmbedding::from_rows(rows).unwrap()
    }

    #[test]
    fn dominant_weight() {
        let b = emb(&[&[0.0], &[10.0]]);
        let s = soft_nearest_neighbor(&[0.0], &b).unwrap();
        assert!(s[0].abs() < 1e-40);
    }

    #[test]
    fn two_frame_fixture() {
        let b = emb(&[&[0.0], &[1.0]]);
        let z = soft_weights(&[0.0], &b).unwrap();
        assert!((z[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((z[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let s = soft_nearest_neighbor(&[0.0], &b).unwrap();
        assert!((s[0] - 0.26894).abs() < 1e-5);
        assert_eq!(nearest_frame_index(&s, &b).unwrap(), 0);
    }

    #[test]
    fn identical_frames_give_uniform_weights() {
        let b = emb(&[&[0.5, -1.0], &[0.5, -1.0], &[0.5, -1.0]]);
        let z = soft_weights(&[0.5, -1.0], &b).unwrap();
        for v in &z {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(soft_nearest_neighbor(&[0.5, -1.0], &b).unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let b = emb(&[&[-1.0], &[1.0]]);
        assert_eq!(nearest_frame_index(&[0.0], &b).unwrap(), 0);
        let b = emb(&[&[3.0], &[1.0], &[2.0]]);
        assert_eq!(nearest_frame_index(&[2.0], &b).unwrap(), 2);
    }

    #[test]
    fn reversal_closes() {
        let a = emb(&[&[0.0], &[10.0]]);
        let b = emb(&[&[10.0], &[0.0]]);
        let d = cycle_consistent(&a, &b).unwrap();
        assert_eq!(d.verdict, Verdict::Closed);
        assert_eq!(d.a_in_b, vec![1, 0]);
        assert_eq!(d.b_in_a, vec![1, 0]);
    }

    #[test]
    fn self_and_single_frame_open() {
        let a = emb(&[&[0.0, 1.0], &[2.0, 0.0], &[-1.0, -1.0]]);
        let d = cycle_consistent(&a, &a).unwrap();
        assert_eq!(d.verdict, Verdict::Open);
        assert_eq!(d.a_in_b, vec![0, 1, 2]);
        let x = emb(&[&[3.0]]);
        let y = emb(&[&[-7.0]]);
        assert_eq!(cycle_consistent(&x, &y).unwrap().verdict, Verdict::Open);
    }

    #[test]
    fn errors() {
        let a = emb(&[&[0.0], &[1.0]]);
        let b = emb(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(cycle_consistent(&a, &b).is_err());
        assert!(soft_nearest_neighbor(&[0.0, 0.0], &a).is_err());
        assert!(TemporalEmbedding::from_rows::<&[f64]>(&[]).is_err());
        assert!(TemporalEmbedding::new(1, 1, vec![f64::NAN]).is_err());
    }
}
