mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srtg_core::graph::Conv3dGeom;
use srtg_core::srtg::{
    cycle_consistent, soft_weights, srtg_unit, LstmParams, SrtgConfig, TemporalEmbedding, Verdict,
};
use srtg_core::{Graph, Tensor};

fn embedding(t: usize, c: usize) -> impl Strategy<Value = TemporalEmbedding> {
    prop::collection::vec(-2.0f64..2.0, t * c).prop_map(move |d| TemporalEmbedding::new(t, c, d).unwrap())
}

fn sized_embedding() -> impl Strategy<Value = TemporalEmbedding> {
    (1usize..=8, 1usize..=6).prop_flat_map(|(t, c)| embedding(t, c))
}

fn min_pair_dist(e: &TemporalEmbedding) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..e.frames() {
        for j in i + 1..e.frames() {
            let d: f64 = e.frame(i).iter().zip(e.frame(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            m = m.min(d);
        }
    }
    m
}

/// Frames spread far enough apart that the soft match is sharp.
fn distinct_embedding() -> impl Strategy<Value = TemporalEmbedding> {
    (2usize..=8, 2usize..=6, any::<u64>()).prop_map(|(t, c, seed)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let e = rand_embedding(&mut r, t, c, 4.0);
            if min_pair_dist(&e) > 2.0 {
                return e;
            }
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn verdict_is_symmetric((a, b) in (1usize..=6, 1usize..=5).prop_flat_map(|(t, c)| (embedding(t, c), embedding(t, c)))) {
        let ab = cycle_consistent(&a, &b).unwrap();
        let ba = cycle_consistent(&b, &a).unwrap();
        prop_assert_eq!(ab.verdict, ba.verdict);
        prop_assert_eq!(ab.a_in_b, ba.b_in_a);
    }

    #[test]
    fn distinct_frames_are_self_consistent(e in distinct_embedding()) {
        prop_assert_eq!(cycle_consistent(&e, &e).unwrap().verdict, Verdict::Open);
    }

    #[test]
    fn permutations_are_detected(e in distinct_embedding(), seed in any::<u64>()) {
        let t = e.frames();
        let mut perm: Vec<usize> = (0..t).collect();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        while perm.iter().enumerate().all(|(i, &p)| i == p) {
            perm.shuffle(&mut r);
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| e.frame(p).to_vec()).collect();
        let permuted = TemporalEmbedding::from_rows(&rows).unwrap();
        prop_assert_eq!(cycle_consistent(&e, &permuted).unwrap().verdict, Verdict::Closed);
    }

    #[test]
    fn weights_ignore_common_translation(b in sized_embedding(), shift in prop::collection::vec(-5.0f64..5.0, 6)) {
        let c = b.dim();
        let mut r = ChaCha8Rng::seed_from_u64(c as u64);
        let q = rand_vec(&mut r, c, -2.0, 2.0);
        let moved: Vec<f64> = b.data().iter().enumerate().map(|(i, v)| v + shift[i % c]).collect();
        let moved = TemporalEmbedding::new(b.frames(), c, moved).unwrap();
        let q2: Vec<f64> = q.iter().zip(&shift).map(|(v, s)| v + s).collect();
        let z1 = soft_weights(&q, &b).unwrap();
        let z2 = soft_weights(&q2, &moved).unwrap();
        for (x, y) in z1.iter().zip(&z2) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((z1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(row in prop::collection::vec(-20.0f64..20.0, 1..10), k in -50.0f64..50.0) {
        let n = row.len();
        let mut g = Graph::new();
        let a = g.constant(&[1, n], row.clone()).unwrap();
        let b = g.constant(&[1, n], row.iter().map(|v| v + k).collect()).unwrap();
        let (sa, sb) = (g.softmax_last(a).unwrap(), g.softmax_last(b).unwrap());
        for (x, y) in g.value(sa).iter().zip(g.value(sb)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x1 = rand_tensor(&mut r, &[1, 2, 4, 5, 5]);
        let x2 = rand_tensor(&mut r, &[1, 2, 4, 5, 5]);
        let w = rand_tensor(&mut r, &[3, 2, 3, 3, 3]);
        let mix: Vec<f64> = x1.data().iter().zip(x2.data()).map(|(a, b)| alpha * a + beta * b).collect();
        let xm = Tensor::new(&[1, 2, 4, 5, 5], mix).unwrap();
        let geom = Conv3dGeom::new([1, 2, 1], [1, 1, 1]);
        let mut g = Graph::new();
        let wv = g.input(&w);
        let outs: Vec<_> = [&x1, &x2, &xm].iter().map(|x| {
            let v = g.input(x);
            g.conv3d(v, wv, None, geom).unwrap()
        }).collect();
        let (y1, y2, ym) = (g.value(outs[0]), g.value(outs[1]), g.value(outs[2]));
        for i in 0..ym.len() {
            prop_assert!((ym[i] - (alpha * y1[i] + beta * y2[i])).abs() < 1e-10);
        }
    }
}

#[test]
fn closed_gate_returns_the_input_bit_for_bit() {
    let mut r = rng(21);
    let mut checked = 0;
    let mut trial = 0;
    while checked < 100 {
        trial += 1;
        let (n, c, t) = (r.random_range(1..3), r.random_range(1..5), r.random_range(2..6));
        let x = rand_tensor(&mut r, &[n, c, t, 2, 3]);
        let p = LstmParams::init(c, 2, &mut r).unwrap();
        let mut g = Graph::new();
        let lv = p.bind(&mut g);
        let xv = g.input(&x);
        let (y, decisions) = srtg_unit(&mut g, xv, &lv, SrtgConfig::default()).unwrap();
        assert_eq!(g.shape(y), x.shape());
        for (i, d) in decisions.iter().enumerate() {
            let vol = x.numel() / n;
            let (got, inp) = (&g.value(y)[i * vol..][..vol], &x.data()[i * vol..][..vol]);
            if d.verdict == Verdict::Closed {
                assert!(got.iter().zip(inp).all(|(a, b)| a.to_bits() == b.to_bits()));
                checked += 1;
            } else {
                assert!(got.iter().zip(inp).any(|(a, b)| a != b));
            }
        }
        assert!(trial < 10_000);
    }
}
