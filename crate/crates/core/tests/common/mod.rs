#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srtg_core::srtg::TemporalEmbedding;
use srtg_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n, -1.0, 1.0)).unwrap()
}

pub fn rand_embedding(rng: &mut ChaCha8Rng, t: usize, c: usize, scale: f64) -> TemporalEmbedding {
    TemporalEmbedding::new(t, c, rand_vec(rng, t * c, -scale, scale)).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain nested-loop 3D convolution over (N, C, T, H, W) with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_naive(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, ci, it, ih, iw] = xs;
    let [co, _, kt, kh, kw] = ws;
    let o = |i: usize, k: usize, a: usize| (i + 2 * pad[a] - k) / stride[a] + 1;
    let (ot, oh, ow) = (o(it, kt, 0), o(ih, kh, 1), o(iw, kw, 2));
    let mut y = vec![0.0; n * co * ot * oh * ow];
    for ni in 0..n {
        for c_o in 0..co {
            for t in 0..ot {
                for h in 0..oh {
                    for wo in 0..ow {
                        let mut s = b.map_or(0.0, |b| b[c_o]);
                        for c_i in 0..ci {
                            for a in 0..kt {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let ti = (t * stride[0] + a) as isize - pad[0] as isize;
                                        let hi = (h * stride[1] + bb) as isize - pad[1] as isize;
                                        let wi = (wo * stride[2] + c) as isize - pad[2] as isize;
                                        if ti < 0 || hi < 0 || wi < 0 {
                                            continue;
                                        }
                                        let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                                        if ti >= it || hi >= ih || wi >= iw {
                                            continue;
                                        }
                                        let xv = x[(((ni * ci + c_i) * it + ti) * ih + hi) * iw + wi];
                                        let wv = w[(((c_o * ci + c_i) * kt + a) * kh + bb) * kw + c];
                                        s += xv * wv;
                                    }
                                }
                            }
                        }
                        y[(((ni * co + c_o) * ot + t) * oh + h) * ow + wo] = s;
                    }
                }
            }
        }
    }
    (y, [n, co, ot, oh, ow])
}

/// Cycle check written out as plain loops over f64 slices.
pub fn cycle_oracle(a: &[f64], b: &[f64], t: usize, c: usize) -> bool {
    let frame = |e: &[f64], i: usize| e[i * c..(i + 1) * c].to_vec();
    let d2 = |p: &[f64], q: &[f64]| -> f64 {
        let mut s = 0.0;
        for k in 0..c {
            s += (p[k] - q[k]) * (p[k] - q[k]);
        }
        s
    };
    let hop = |q: &[f64], r: &[f64]| -> usize {
        let logits: Vec<f64> = (0..t).map(|i| -d2(q, &frame(r, i))).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut soft = vec![0.0; c];
        for i in 0..t {
            for k in 0..c {
                soft[k] += e[i] / z * r[i * c + k];
            }
        }
        let mut best = 0;
        for i in 1..t {
            if d2(&soft, &frame(r, i)) < d2(&soft, &frame(r, best)) {
                best = i;
            }
        }
        best
    };
    for i in 0..t {
        if hop(&frame(a, i), b) != i || hop(&frame(b, i), a) != i {
            return false;
        }
    }
    true
}
