//! End-to-end acceptance checks. Each test writes one `PASS` or `FAIL`
//! line straight to stderr (visible without `--nocapture`) and fails when
//! its criterion is not met.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srtg::config::RunConfig;
use srtg::formats::Checkpoint;
use srtg::report::metrics_csv;
use srtg_core::backbone::{
    count_macs, gflops, BlockModel, BlockSpec, ConvKind, Ctx, DepthKind, Mode, Network, NetworkSpec, Placement,
};
use srtg_core::gradcheck::grad_check;
use srtg_core::harness::{generate, Trainer};
use srtg_core::srtg::{
    cycle_consistent, nearest_frame_index, recursion, soft_nearest_neighbor, soft_weights, srtg_unit, FusionMode,
    LstmLayerParams, LstmLayerVars, LstmParams, LstmVars, SrtgConfig, TemporalEmbedding, Verdict,
};
use srtg_core::{Graph, Result as CoreResult, Tensor, Var};

type Outcome = Result<String, String>;

fn report(n: u32, what: &str, started: Instant, outcome: Outcome) {
    let secs = started.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let line = format!("criterion {n} [{what}]: {tag} ({secs:.1} s) {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    if let Err(d) = outcome {
        panic!("criterion {n} failed: {d}");
    }
}

fn within(elapsed: Duration, limit_s: u64) -> std::result::Result<(), String> {
    if elapsed.as_secs_f64() < limit_s as f64 {
        Ok(())
    } else {
        Err(format!("took {:.1} s, budget {limit_s} s", elapsed.as_secs_f64()))
    }
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_cfg(name: &str) -> RunConfig {
    RunConfig::parse(&fs::read_to_string(configs().join(name)).unwrap()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(r, n, -1.0, 1.0)).unwrap()
}

fn rand_embedding(r: &mut ChaCha8Rng, t: usize, c: usize, scale: f64) -> TemporalEmbedding {
    TemporalEmbedding::new(t, c, rand_vec(r, t * c, -scale, scale)).unwrap()
}

#[test]
fn criterion_1_overhead() {
    let start = Instant::now();
    let run = || -> Outcome {
        let spec = load_cfg("r3d34_srtg.cfg").network;
        let ops = count_macs(&spec, [3, 16, 224, 224]).map_err(|e| e.to_string())?;
        let total = gflops(ops.total_macs());
        let ratio = ops.totals.srtg_overhead_ratio();
        let target = 110.48;
        let dev = (total - target).abs() / target;
        let summary = format!(
            "total {total:.2} GFLOPs ({:.2} GMACs), target 110.48 off by {:.1}%, overhead ratio {:.3}%",
            ops.total_macs() as f64 / 1e9,
            100.0 * dev,
            100.0 * ratio
        );
        within(start.elapsed(), 5)?;
        let mut problems = Vec::new();
        if dev > 0.02 {
            problems.push("GFLOPs not within 2% of 110.48");
        }
        if !(0.0005..=0.004).contains(&ratio) {
            problems.push("overhead ratio outside [0.05%, 0.4%]");
        }
        if problems.is_empty() {
            Ok(summary)
        } else {
            Err(format!("{summary}: {}", problems.join("; ")))
        }
    };
    report(1, "operation count", start, run());
}

/// Cycle check written out as plain loops over f64 slices.
fn cycle_oracle(a: &[f64], b: &[f64], t: usize, c: usize) -> bool {
    let frame = |e: &[f64], i: usize| e[i * c..(i + 1) * c].to_vec();
    let d2 = |p: &[f64], q: &[f64]| -> f64 { (0..c).map(|k| (p[k] - q[k]) * (p[k] - q[k])).sum() };
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
    (0..t).all(|i| hop(&frame(a, i), b) == i && hop(&frame(b, i), a) == i)
}

#[test]
fn criterion_2_matching_oracles() {
    let start = Instant::now();
    let run = || -> Outcome {
        let b = TemporalEmbedding::from_rows(&[[0.0], [1.0]]).unwrap();
        let s = soft_nearest_neighbor(&[0.0], &b).map_err(|e| e.to_string())?;
        let idx = nearest_frame_index(&s, &b).map_err(|e| e.to_string())?;
        if (s[0] - 0.26894).abs() > 1e-5 || idx != 0 {
            return Err(format!("fixture gave {} at index {idx}", s[0]));
        }
        let mut r = rng(6);
        let mut agree = 0;
        for trial in 0..500 {
            let t = r.random_range(1..=8);
            let c = r.random_range(1..=16);
            let scale = [0.3, 1.0, 3.0][trial % 3];
            let a = rand_embedding(&mut r, t, c, scale);
            let b = if trial % 2 == 0 {
                let d: Vec<f64> = a.data().iter().map(|v| v + r.random_range(-0.2..0.2)).collect();
                TemporalEmbedding::new(t, c, d).unwrap()
            } else {
                rand_embedding(&mut r, t, c, scale)
            };
            let got = cycle_consistent(&a, &b).map_err(|e| e.to_string())?.verdict == Verdict::Open;
            agree += usize::from(got == cycle_oracle(a.data(), b.data(), t, c));
        }
        within(start.elapsed(), 10)?;
        if agree == 500 {
            Ok(format!("soft match {:.5}, index {idx}, 500/500 pairs agree", s[0]))
        } else {
            Err(format!("{agree}/500 pairs agree"))
        }
    };
    report(2, "matching oracles", start, run());
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn project(g: &mut Graph, y: Var, seed: u64) -> CoreResult<Var> {
    let shape = g.shape(y).to_vec();
    let w = rand_tensor(&mut rng(seed), &shape);
    let wv = g.input(&w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn lstm_layer_error() -> CoreResult<f64> {
    let mut r = rng(4);
    let layer = LstmLayerParams::init(2, 2, &mut r)?;
    let mut params: Vec<Tensor> = layer.tensors().into_iter().cloned().collect();
    params.push(rand_tensor(&mut r, &[2, 3, 2]));
    let rep = grad_check(
        |g, v| {
            let lstm = LstmVars {
                layers: vec![LstmLayerVars::from_slice(&v[..8])],
            };
            let y = recursion(g, v[8], &lstm)?;
            project(g, y, 5)
        },
        &mut params,
        EPS,
    )?;
    Ok(rep.max_rel_error)
}

/// Frames on distinct cube corners and a near-monotone LSTM, so the gate
/// opens and the recurrent path carries gradient.
fn open_gate_setup(c: usize, t: usize) -> (Tensor, LstmParams) {
    let mut r = rng(6);
    let corners = [[1.0, 1.0, 1.0], [-1.0, -1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0]];
    let hw = 4;
    let mut x = vec![0.0; c * t * hw];
    for ci in 0..c {
        for ti in 0..t {
            let jitter = rand_vec(&mut r, hw, -0.3, 0.3);
            let mean = jitter.iter().sum::<f64>() / hw as f64;
            for s in 0..hw {
                x[(ci * t + ti) * hw + s] = 1.5 * corners[ti][ci] + jitter[s] - mean;
            }
        }
    }
    let mut p = LstmParams::init(c, 2, &mut r).unwrap();
    for layer in &mut p.layers {
        for w in [&mut layer.w_f, &mut layer.w_i, &mut layer.w_c, &mut layer.w_a] {
            w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
        for j in 0..c {
            layer.w_c.data_mut()[j * 2 * c + c + j] = 2.0;
        }
        layer.b_f.data_mut().iter_mut().for_each(|v| *v = -3.0);
        layer.b_i.data_mut().iter_mut().for_each(|v| *v = 3.0);
        layer.b_a.data_mut().iter_mut().for_each(|v| *v = 3.0);
    }
    (Tensor::new(&[1, c, t, 2, 2], x).unwrap(), p)
}

fn unit_error(fusion: FusionMode) -> CoreResult<f64> {
    let (x, p) = open_gate_setup(3, 4);
    let mut params: Vec<Tensor> = p.tensors().cloned().collect();
    params.push(x);
    let cfg = SrtgConfig {
        gate_active: true,
        fusion,
    };
    let mut opened = true;
    let rep = grad_check(
        |g, v| {
            let lstm = LstmVars {
                layers: v[..16].chunks(8).map(LstmLayerVars::from_slice).collect(),
            };
            let (y, d) = srtg_unit(g, v[16], &lstm, cfg)?;
            opened &= d[0].verdict == Verdict::Open;
            project(g, y, 7)
        },
        &mut params,
        EPS,
    )?;
    // A closed gate would make the check trivially pass on the LSTM.
    Ok(if opened { rep.max_rel_error } else { f64::INFINITY })
}

fn block_error(depth: DepthKind) -> CoreResult<f64> {
    let spec = match depth {
        DepthKind::Simple => BlockSpec::simple(3, 4, [1, 2, 2]),
        DepthKind::Bottleneck => BlockSpec::bottleneck(4, 2, 2, [1, 1, 1]),
    }
    .with_placement(Placement::Final)
    .with_srtg(SrtgConfig {
        gate_active: false,
        fusion: FusionMode::Multiplicative,
    });
    let model = BlockModel::new(&spec, 10)?;
    let mut params: Vec<Tensor> = model.store.params().to_vec();
    params.push(rand_tensor(&mut rng(11), &[2, spec.in_channels, 3, 4, 4]));
    let np = model.store.len();
    let rep = grad_check(
        |g, v| {
            let mut buffers = model.store.buffers().to_vec();
            let mut ctx = Ctx::new(g, &v[..np], &mut buffers, Mode::Train);
            let y = model.block.forward(&mut ctx, v[np])?;
            project(g, y, 12)
        },
        &mut params,
        EPS,
    )?;
    Ok(rep.max_rel_error)
}

#[test]
fn criterion_3_gradients() {
    let start = Instant::now();
    let run = || -> Outcome {
        let checks: [(&str, CoreResult<f64>); 5] = [
            ("lstm layer", lstm_layer_error()),
            ("unit multiplicative", unit_error(FusionMode::Multiplicative)),
            ("unit additive", unit_error(FusionMode::Additive)),
            ("simple block", block_error(DepthKind::Simple)),
            ("bottleneck block", block_error(DepthKind::Bottleneck)),
        ];
        let mut parts = Vec::new();
        let mut ok = true;
        for (name, e) in checks {
            let e = e.map_err(|e| format!("{name}: {e}"))?;
            ok &= e <= TOL;
            parts.push(format!("{name} {e:.1e}"));
        }
        within(start.elapsed(), 60)?;
        let summary = parts.join(", ");
        if ok {
            Ok(summary)
        } else {
            Err(format!("tolerance {TOL:e} exceeded: {summary}"))
        }
    };
    report(3, "gradient checks", start, run());
}

fn min_pair_dist(e: &TemporalEmbedding) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..e.frames() {
        for j in i + 1..e.frames() {
            let d: f64 = e.frame(i).iter().zip(e.frame(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            m = m.min(d.sqrt());
        }
    }
    m
}

fn distinct_embedding(r: &mut ChaCha8Rng) -> TemporalEmbedding {
    let (t, c) = (r.random_range(2..=8), r.random_range(2..=6));
    loop {
        let e = rand_embedding(r, t, c, 4.0);
        if min_pair_dist(&e) > 1.5 {
            return e;
        }
    }
}

const TRIALS: usize = 200;

fn consistency_properties() -> Outcome {
    let mut r = rng(40);
    for trial in 0..TRIALS {
        let e = distinct_embedding(&mut r);
        if cycle_consistent(&e, &e).unwrap().verdict != Verdict::Open {
            return Err(format!("self-consistency failed on trial {trial}"));
        }
        let mut perm: Vec<usize> = (0..e.frames()).collect();
        while perm.iter().enumerate().all(|(i, &p)| i == p) {
            perm.shuffle(&mut r);
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| e.frame(p).to_vec()).collect();
        let permuted = TemporalEmbedding::from_rows(&rows).unwrap();
        if cycle_consistent(&e, &permuted).unwrap().verdict != Verdict::Closed {
            return Err(format!("permutation {perm:?} not detected on trial {trial}"));
        }
    }

    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (t, c) = (r.random_range(1..=8), r.random_range(1..=6));
        let b = rand_embedding(&mut r, t, c, 2.0);
        let q = rand_vec(&mut r, c, -2.0, 2.0);
        let shift = rand_vec(&mut r, c, -5.0, 5.0);
        let moved: Vec<f64> = b.data().iter().enumerate().map(|(i, v)| v + shift[i % c]).collect();
        let moved = TemporalEmbedding::new(t, c, moved).unwrap();
        let q2: Vec<f64> = q.iter().zip(&shift).map(|(v, s)| v + s).collect();
        let z1 = soft_weights(&q, &b).unwrap();
        let z2 = soft_weights(&q2, &moved).unwrap();
        worst = z1.iter().zip(&z2).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    if worst >= 1e-12 {
        return Err(format!("translation changed weights by {worst:e}"));
    }

    let mut closed = 0;
    let mut attempts = 0;
    while closed < TRIALS {
        attempts += 1;
        let (n, c, t) = (r.random_range(1..3), r.random_range(1..5), r.random_range(2..6));
        let x = rand_tensor(&mut r, &[n, c, t, 2, 3]);
        let p = LstmParams::init(c, 2, &mut r).unwrap();
        let mut g = Graph::new();
        let lv = p.bind(&mut g);
        let xv = g.input(&x);
        let (y, decisions) = srtg_unit(&mut g, xv, &lv, SrtgConfig::default()).unwrap();
        let vol = x.numel() / n;
        for (i, d) in decisions.iter().enumerate() {
            if d.verdict != Verdict::Closed {
                continue;
            }
            let (got, inp) = (&g.value(y)[i * vol..][..vol], &x.data()[i * vol..][..vol]);
            if !got.iter().zip(inp).all(|(a, b)| a.to_bits() == b.to_bits()) {
                return Err(format!("closed gate altered the output on attempt {attempts}"));
            }
            closed += 1;
        }
        if attempts > 100 * TRIALS {
            return Err("too few closed gates sampled".into());
        }
    }
    Ok(format!(
        "{TRIALS} trials each: self-consistency, permutation, translation (max {worst:.1e}), closed-gate identity"
    ))
}

#[test]
fn criterion_4_consistency_properties() {
    let start = Instant::now();
    report(4, "consistency properties", start, consistency_properties());
}

#[test]
fn criterion_5_configuration_sweep() {
    let start = Instant::now();
    let run = || -> Outcome {
        let x = rand_tensor(&mut rng(1), &[2, 4, 4, 6, 6]);
        let mut count = 0;
        for conv in [ConvKind::Full3d, ConvKind::TwoPlusOneD] {
            for depth in [DepthKind::Simple, DepthKind::Bottleneck] {
                for p in Placement::valid_for(depth) {
                    let base = match depth {
                        DepthKind::Simple => BlockSpec::simple(4, 6, [2, 2, 2]),
                        DepthKind::Bottleneck => BlockSpec::bottleneck(4, 3, 2, [2, 2, 2]),
                    }
                    .with_conv(conv);
                    let name = format!("{}/{}/{}", depth.name(), conv.name(), p.name());
                    let mut shapes = Vec::new();
                    for spec in [base.clone().with_placement(p), base.with_placement(Placement::None)] {
                        let fail = |e: srtg_core::Error| format!("{name}: {e}");
                        let mut m = BlockModel::new(&spec, 3).map_err(fail)?;
                        let mut g = Graph::new();
                        let xv = g.input(&x);
                        let out = m.forward(&mut g, xv, Mode::Train).map_err(fail)?;
                        shapes.push(g.shape(out.output).to_vec());
                        let l = g.sum(out.output);
                        g.backward(l).map_err(fail)?;
                        m.store.collect_grads(&g, &out.vars).map_err(fail)?;
                        let finite = m.store.params().iter().all(|p| p.grad().unwrap().iter().all(|v| v.is_finite()));
                        if !finite {
                            return Err(format!("{name}: non-finite gradient"));
                        }
                    }
                    if shapes[0] != shapes[1] {
                        return Err(format!("{name}: shape {:?} vs {:?}", shapes[0], shapes[1]));
                    }
                    count += 1;
                }
            }
        }
        if count == 24 {
            Ok("24/24 combinations build, run forward/backward and keep shape".into())
        } else {
            Err(format!("expected 24 combinations, found {count}"))
        }
    };
    report(5, "configuration sweep", start, run());
}

fn train_to_end(cfg: &RunConfig, spec: &NetworkSpec) -> CoreResult<(f64, Option<f64>)> {
    let train = generate(&cfg.data.train_spec())?;
    let val = generate(&cfg.data.val_spec())?;
    let net = Network::new(spec, cfg.init_seed)?;
    let mut tr = Trainer::new(net, cfg.train.clone())?;
    tr.fit(&train, &val)?;
    let last = tr.history.last().expect("at least one epoch");
    Ok((last.val_top1, last.gate_open_rate))
}

#[test]
fn criterion_6_temporal_training() {
    let start = Instant::now();
    let run = || -> Outcome {
        let cfg = load_cfg("temporal.cfg");
        let spec = &cfg.network;
        let widest = spec.stages.iter().map(|s| s.channels).max().unwrap_or(0);
        if spec.stages.len() != 2 || widest > 16 || spec.placement == Placement::None {
            return Err("configured network is not a two-stage mini SRTG network".into());
        }
        let (top1, gate) = train_to_end(&cfg, spec).map_err(|e| e.to_string())?;
        let (base, _) = train_to_end(&cfg, &spec.without_srtg()).map_err(|e| e.to_string())?;
        within(start.elapsed(), 15 * 60)?;
        let summary = format!(
            "val top-1 {top1:.3} after {} epochs (no-SRTG baseline {base:.3}), final gate-open rate {}",
            cfg.train.epochs,
            gate.map_or("n/a".into(), |g| format!("{g:.3}"))
        );
        if top1 >= 0.9 {
            Ok(summary)
        } else {
            Err(summary)
        }
    };
    report(6, "temporal training", start, run());
}

#[test]
fn criterion_7_determinism_and_resume() {
    let start = Instant::now();
    let run = || -> CoreResult<Outcome> {
        let cfg = load_cfg("toy.cfg");
        let train = generate(&cfg.data.train_spec())?;
        let val = generate(&cfg.data.val_spec())?;
        let fresh = || -> CoreResult<Trainer> { Trainer::new(Network::new(&cfg.network, cfg.init_seed)?, cfg.train.clone()) };
        let layers = Network::new(&cfg.network, cfg.init_seed)?.num_srtg_units();

        let mut a = fresh()?;
        a.fit(&train, &val)?;
        let mut b = fresh()?;
        b.fit(&train, &val)?;
        let (csv_a, csv_b) = (metrics_csv(&a.history, layers), metrics_csv(&b.history, layers));
        if csv_a != csv_b {
            return Ok(Err("two seeded runs produced different metrics".into()));
        }

        let mut part = fresh()?;
        part.step_epoch(&train, &val)?;
        let bytes = Checkpoint::from_trainer(&cfg, &part).to_bytes();
        drop(part);
        let (_, mut resumed) = Checkpoint::from_bytes(&bytes).unwrap().into_trainer().unwrap();
        resumed.fit(&train, &val)?;
        let same_csv = metrics_csv(&resumed.history, layers) == csv_a;
        let same_ck = Checkpoint::from_trainer(&cfg, &resumed).to_bytes() == Checkpoint::from_trainer(&cfg, &a).to_bytes();
        Ok(if same_csv && same_ck {
            Ok(format!("identical metrics over {} epochs; resume after epoch 1 is bit-exact", a.history.len()))
        } else {
            Err(format!("resume mismatch: csv equal {same_csv}, checkpoint equal {same_ck}"))
        })
    };
    let outcome = run().unwrap_or_else(|e| Err(e.to_string()));
    report(7, "determinism and resume", start, outcome);
}
