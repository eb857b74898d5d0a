//! `srtg` command line.
//!
//! Exit codes: 0 success, 1 validation error (arguments, configuration,
//! input files), 2 runtime failure (writing outputs, divergence, a failed
//! gradient check).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use srtg_core::backbone::{count_macs, gflops, BlockModel, BlockSpec, Ctx, DepthKind, Mode, Network};
use srtg_core::gradcheck::grad_check;
use srtg_core::harness::{evaluate, generate, Dataset, Trainer};
use srtg_core::{Graph, Tensor};

use crate::config::{parse_dims, RunConfig};
use crate::formats::{load_dataset, save_dataset, write_file, Checkpoint};
use crate::report::{gate_lines, metrics_csv, metrics_header, metrics_row, EvalSummary, OpsReport};

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "error: {m}"),
            Failure::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

trait OrFail<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: std::fmt::Display> OrFail<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Validation(e.to_string()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.to_string()))
    }
}

#[derive(Parser, Debug)]
#[command(name = "srtg", version, about = "Squeeze-and-recursion temporal gates: data, training and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration file.
    #[arg(long, visible_alias = "net")]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for data, shuffling and initialization.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Units {
    Macs,
    Gflops,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the train and validation splits as binary files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train, writing metrics.csv and checkpoint.bin after every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory with train.bin and val.bin (generated from the config
        /// when omitted).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint; its embedded config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Top-1/top-5, loss and gate-open rates of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (the config's validation split when omitted).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Analytic MAC / GFLOP count of the configured network.
    CountOps {
        #[command(flatten)]
        common: Common,
        /// Clip shape CxTxHxW (defaults to the config's data clip).
        #[arg(long)]
        input: Option<String>,
        #[arg(long, value_enum, default_value = "gflops")]
        units: Units,
    },
    /// Per-clip gate verdicts and match indices as JSON lines.
    GateAnalyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of one block built from the network config.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.code()
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let text = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse_with(&text, &common.overrides).invalid()?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

/// Creates the output directory and persists the effective config and
/// seed before any work starts.
fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    write_file(&out.join("effective.cfg"), cfg.to_text().as_bytes()).runtime()?;
    let seeds = format!(
        "data {}\ntrain {}\ninit {}\n",
        cfg.data.seed, cfg.train.seed, cfg.init_seed
    );
    write_file(&out.join("seed.txt"), seeds.as_bytes()).runtime()
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    write_file(path, text.as_bytes()).runtime()
}

fn splits(cfg: &RunConfig, dir: Option<&Path>) -> Result<(Dataset, Dataset), Failure> {
    match dir {
        Some(d) => Ok((load_dataset(&d.join("train.bin")).invalid()?, load_dataset(&d.join("val.bin")).invalid()?)),
        None => Ok((generate(&cfg.data.train_spec()).invalid()?, generate(&cfg.data.val_spec()).invalid()?)),
    }
}

fn check_data(net: &Network, d: &Dataset) -> Result<(), Failure> {
    let spec = net.spec();
    if d.clip_shape[0] != spec.in_channels || d.num_classes != spec.num_classes {
        return Err(Failure::Validation(format!(
            "data has {} channels / {} classes, network expects {} / {}",
            d.clip_shape[0], d.num_classes, spec.in_channels, spec.num_classes
        )));
    }
    Ok(())
}

fn restore(common: &Common, checkpoint: &Path) -> Result<(RunConfig, Trainer), Failure> {
    let ck = Checkpoint::load(checkpoint).invalid()?;
    let (mut cfg, tr) = ck.into_trainer().invalid()?;
    if !common.overrides.is_empty() {
        cfg = RunConfig::parse_with(&cfg.to_text(), &common.overrides).invalid()?;
    }
    Ok((cfg, tr))
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let (train, val) = splits(&cfg, None)?;
            prepare_out(&common.out, &cfg)?;
            save_dataset(&common.out.join("train.bin"), &train).runtime()?;
            save_dataset(&common.out.join("val.bin"), &val).runtime()?;
            println!("wrote {} train and {} val clips to {}", train.len(), val.len(), common.out.display());
            Ok(())
        }
        Command::Train {
            common,
            data,
            resume,
            stop_after,
        } => train(&common, data.as_deref(), resume.as_deref(), stop_after),
        Command::Evaluate { common, checkpoint, data } => {
            let (cfg, mut tr) = restore(&common, &checkpoint)?;
            let val = eval_data(&cfg, data.as_deref())?;
            check_data(&tr.net, &val)?;
            prepare_out(&common.out, &cfg)?;
            let val = cfg.train.eval_view(&val).invalid()?;
            let r = evaluate(&mut tr.net, &val, cfg.train.batch_size).runtime()?;
            let json = serde_json::to_string_pretty(&EvalSummary::from(&r)).runtime()?;
            write_text(&common.out.join("eval.json"), &json)?;
            println!("{json}");
            Ok(())
        }
        Command::CountOps { common, input, units } => {
            let cfg = load_config(&common)?;
            let input = match input {
                Some(s) => parse_dims::<4>(&s).map_err(|m| Failure::Validation(format!("--input {s:?}: {m}")))?,
                None => cfg.data.clip,
            };
            let ops = count_macs(&cfg.network, input).invalid()?;
            prepare_out(&common.out, &cfg)?;
            let report = OpsReport::new(input, &ops);
            write_text(&common.out.join("ops.json"), &serde_json::to_string_pretty(&report).runtime()?)?;
            let total = ops.total_macs();
            match units {
                Units::Macs => println!("total {total} MACs"),
                Units::Gflops => println!("total {:.2} GFLOPs", gflops(total)),
            }
            println!("srtg overhead {:.4}%", 100.0 * ops.totals.srtg_overhead_ratio());
            Ok(())
        }
        Command::GateAnalyze { common, checkpoint, data } => {
            let (cfg, mut tr) = restore(&common, &checkpoint)?;
            let val = eval_data(&cfg, data.as_deref())?;
            check_data(&tr.net, &val)?;
            prepare_out(&common.out, &cfg)?;
            let val = cfg.train.eval_view(&val).invalid()?;
            let r = evaluate(&mut tr.net, &val, cfg.train.batch_size).runtime()?;
            write_text(&common.out.join("gates.jsonl"), &gate_lines(&r.gates))?;
            for (l, rate) in r.layer_open_rates.iter().enumerate() {
                println!("layer {l}: open rate {rate}");
            }
            Ok(())
        }
        Command::GradCheck { common, eps, tol } => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out, &cfg)?;
            let err = block_grad_check(&cfg, eps).invalid()?;
            let json = serde_json::json!({ "eps": eps, "tol": tol, "max_rel_error": err, "pass": err <= tol });
            write_text(&common.out.join("gradcheck.json"), &json.to_string())?;
            println!("max relative error {err:e} (tolerance {tol:e})");
            if err <= tol {
                Ok(())
            } else {
                Err(Failure::Runtime(format!("gradient check failed: {err:e} > {tol:e}")))
            }
        }
    }
}

fn eval_data(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset, Failure> {
    match path {
        Some(p) => load_dataset(p).invalid(),
        None => generate(&cfg.data.val_spec()).invalid(),
    }
}

fn train(common: &Common, data: Option<&Path>, resume: Option<&Path>, stop_after: Option<usize>) -> Result<(), Failure> {
    let (cfg, mut tr) = match resume {
        Some(ck) => restore(common, ck)?,
        None => {
            let cfg = load_config(common)?;
            let net = Network::new(&cfg.network, cfg.init_seed).invalid()?;
            let tr = Trainer::new(net, cfg.train.clone()).invalid()?;
            (cfg, tr)
        }
    };
    tr.config = cfg.train.clone();
    let (train, val) = splits(&cfg, data)?;
    check_data(&tr.net, &train)?;
    check_data(&tr.net, &val)?;
    prepare_out(&common.out, &cfg)?;
    let layers = tr.net.num_srtg_units();
    let csv_path = common.out.join("metrics.csv");
    let mut csv = metrics_csv(&tr.history, layers);
    write_text(&csv_path, &csv)?;
    let stop = stop_after.unwrap_or(usize::MAX).min(cfg.train.epochs);
    while tr.epoch < stop {
        let s = tr.step_epoch(&train, &val).runtime()?;
        csv.push_str(&metrics_row(&s, layers));
        csv.push('\n');
        write_text(&csv_path, &csv)?;
        Checkpoint::from_trainer(&cfg, &tr).save(&common.out.join("checkpoint.bin")).runtime()?;
        println!(
            "epoch {} lr {} loss {:.4} train {:.3} val {:.3}{}",
            s.epoch,
            s.lr,
            s.train_loss,
            s.train_top1,
            s.val_top1,
            s.gate_open_rate.map(|g| format!(" gate {g:.3}")).unwrap_or_default()
        );
    }
    debug_assert!(csv.starts_with(&metrics_header(layers)));
    Ok(())
}

/// Builds a small block with the configured depth kind, convolution kind,
/// placement and gate settings and checks every gradient.
pub fn block_grad_check(cfg: &RunConfig, eps: f64) -> srtg_core::Result<f64> {
    let n = &cfg.network;
    let mut spec = match n.depth_kind {
        DepthKind::Simple => BlockSpec::simple(3, 4, [1, 2, 2]),
        DepthKind::Bottleneck => BlockSpec::bottleneck(3, 2, 2, [1, 2, 2]),
    };
    spec.conv_kind = n.conv_kind;
    spec.placement = n.placement;
    spec.srtg = n.srtg;
    spec.lstm_layers = n.lstm_layers;
    let model = BlockModel::new(&spec, cfg.init_seed)?;
    let mut rng_state = cfg.init_seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let shape = [2, 3, 4, 4, 4];
    let x = Tensor::new(&shape, (0..shape.iter().product()).map(|_| next()).collect())?;
    let proj: Vec<f64> = (0..2 * spec.out_channels * 4 * 2 * 2).map(|_| next()).collect();
    let mut params = model.store.params().to_vec();
    params.push(x);
    let np = model.store.len();
    let report = grad_check(
        |g: &mut Graph, v| {
            let mut buffers = model.store.buffers().to_vec();
            let mut ctx = Ctx::new(g, &v[..np], &mut buffers, Mode::Train);
            let y = model.block.forward(&mut ctx, v[np])?;
            let w = g.constant(g.shape(y).to_vec().as_slice(), proj.clone())?;
            let p = g.mul(y, w)?;
            Ok(g.sum(p))
        },
        &mut params,
        eps,
    )?;
    Ok(report.max_rel_error)
}
