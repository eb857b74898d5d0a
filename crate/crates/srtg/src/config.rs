//! Sectioned plain-text run configuration.
//!
//! ```text
//! [data]
//! family = forward_reversed
//! clip = 3x8x16x16
//!
//! [network]
//! placement = final
//!
//! [stage1]
//! blocks = 1
//! channels = 8
//! stride = 1x1x1
//! ```
//!
//! `#` starts a comment. Unknown sections and keys are rejected. Overrides
//! use dotted paths (`train.lr=0.05`) and are applied before typing, so
//! they go through the same checks as file entries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use srtg_core::backbone::{ConvKind, DepthKind, NetworkSpec, Placement, PoolSpec, StageSpec};
use srtg_core::harness::{MotionFamily, SyntheticSpec, TrainConfig};
use srtg_core::srtg::FusionMode;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("override {0:?} is not of the form section.key=value")]
    BadOverride(String),
    #[error("{0}")]
    Invalid(String),
}

type Raw = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub family: MotionFamily,
    pub num_classes: usize,
    /// (C, T, H, W)
    pub clip: [usize; 4],
    pub noise: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            family: MotionFamily::ForwardReversed,
            num_classes: 2,
            clip: [3, 8, 16, 16],
            noise: 0.1,
            train_samples: 400,
            val_samples: 100,
            seed: 0,
        }
    }
}

const VAL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl DataConfig {
    fn spec(&self, samples: usize, seed: u64) -> SyntheticSpec {
        let [channels, frames, height, width] = self.clip;
        SyntheticSpec {
            family: self.family,
            num_classes: self.num_classes,
            channels,
            frames,
            height,
            width,
            noise: self.noise,
            samples,
            seed,
        }
    }

    pub fn train_spec(&self) -> SyntheticSpec {
        self.spec(self.train_samples, self.seed)
    }

    /// The validation split uses its own seed so its clips never coincide
    /// with training clips.
    pub fn val_spec(&self) -> SyntheticSpec {
        self.spec(self.val_samples, self.seed ^ VAL_SEED_SALT)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub network: NetworkSpec,
    /// Parameter initialization seed.
    pub init_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            network: NetworkSpec::mini(3, 2, Placement::Final),
            init_seed: 0,
        }
    }
}

pub fn parse_dims<const N: usize>(s: &str) -> Result<[usize; N], String> {
    let parts: Vec<&str> = s.trim().split('x').collect();
    if parts.len() != N {
        return Err(format!("expected {N} extents separated by 'x'"));
    }
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
        if *o == 0 {
            return Err("extents must be positive".into());
        }
    }
    Ok(out)
}

fn dims_str(d: &[usize]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}

fn triple_allow_zero(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.trim().split('x').collect();
    if parts.len() != 3 {
        return Err("expected 3 values separated by 'x'".into());
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(out)
}

struct Section<'a> {
    name: &'a str,
    entries: BTreeMap<String, String>,
}

impl<'a> Section<'a> {
    fn new(raw: &Raw, name: &'a str) -> Self {
        Section {
            name,
            entries: raw.get(name).cloned().unwrap_or_default(),
        }
    }

    fn take<T>(&mut self, key: &str, out: &mut T, parse: impl Fn(&str) -> Result<T, String>) -> Result<bool, ConfigError> {
        match self.entries.remove(key) {
            None => Ok(false),
            Some(v) => {
                *out = parse(&v).map_err(|msg| ConfigError::BadValue {
                    key: format!("{}.{}", self.name, key),
                    value: v.clone(),
                    msg,
                })?;
                Ok(true)
            }
        }
    }

    fn num<T: FromStr>(&mut self, key: &str, out: &mut T) -> Result<bool, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key, out, |s| s.trim().parse::<T>().map_err(|e| e.to_string()))
    }

    fn named<T>(&mut self, key: &str, out: &mut T, parse: fn(&str) -> Option<T>, what: &str) -> Result<bool, ConfigError> {
        self.take(key, out, |s| parse(s.trim()).ok_or_else(|| format!("unknown {what}")))
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.keys().next() {
            Some(k) => Err(ConfigError::UnknownKey(format!("{}.{}", self.name, k))),
            None => Ok(()),
        }
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}"))).collect()
}

fn parse_raw(text: &str) -> Result<Raw, ConfigError> {
    let mut raw = Raw::new();
    let mut current: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| ConfigError::Syntax {
            line: i + 1,
            msg: msg.to_string(),
        };
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?.trim();
            if name.is_empty() {
                return Err(err("empty section name"));
            }
            if raw.contains_key(name) {
                return Err(err("section appears twice"));
            }
            raw.insert(name.to_string(), BTreeMap::new());
            current = Some(name.to_string());
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
        let sec = current.as_ref().ok_or_else(|| err("key outside of a section"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("empty key"));
        }
        if raw.get_mut(sec).expect("section exists").insert(k.into(), v.into()).is_some() {
            return Err(err("key appears twice in its section"));
        }
    }
    Ok(raw)
}

/// Splits `section.key=value`.
pub fn parse_override(s: &str) -> Result<(String, String, String), ConfigError> {
    let bad = || ConfigError::BadOverride(s.to_string());
    let (path, value) = s.split_once('=').ok_or_else(bad)?;
    let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
    if section.is_empty() || key.is_empty() {
        return Err(bad());
    }
    Ok((section.to_string(), key.trim().to_string(), value.trim().to_string()))
}

fn stage_index(name: &str) -> Option<usize> {
    name.strip_prefix("stage")?.parse().ok().filter(|&i| i > 0)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with(text, &[])
    }

    /// Parses `text`, applies `section.key=value` overrides and validates.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut raw = parse_raw(text)?;
        for o in overrides {
            let (s, k, v) = parse_override(o)?;
            raw.entry(s).or_default().insert(k, v);
        }
        Self::from_raw(&raw)
    }

    fn from_raw(raw: &Raw) -> Result<Self, ConfigError> {
        for name in raw.keys() {
            if !matches!(name.as_str(), "data" | "train" | "network") && stage_index(name).is_none() {
                return Err(ConfigError::UnknownSection(name.clone()));
            }
        }
        let mut cfg = RunConfig::default();

        let d = &mut cfg.data;
        let mut s = Section::new(raw, "data");
        s.named("family", &mut d.family, MotionFamily::parse, "motion family")?;
        s.num("num_classes", &mut d.num_classes)?;
        s.take("clip", &mut d.clip, parse_dims::<4>)?;
        s.num("noise", &mut d.noise)?;
        s.num("train_samples", &mut d.train_samples)?;
        s.num("val_samples", &mut d.val_samples)?;
        s.num("seed", &mut d.seed)?;
        s.finish()?;

        let t = &mut cfg.train;
        let mut s = Section::new(raw, "train");
        s.num("lr", &mut t.lr)?;
        s.num("momentum", &mut t.momentum)?;
        s.num("weight_decay", &mut t.weight_decay)?;
        s.num("batch_size", &mut t.batch_size)?;
        s.num("epochs", &mut t.epochs)?;
        let explicit_milestones = s.take("milestones", &mut t.milestones, parse_list)?;
        s.num("gamma", &mut t.gamma)?;
        s.num("frames_per_clip", &mut t.frames_per_clip)?;
        s.num("seed", &mut t.seed)?;
        s.finish()?;
        if !explicit_milestones {
            t.milestones = TrainConfig::for_epochs(t.epochs).milestones;
        }

        let n = &mut cfg.network;
        let mut s = Section::new(raw, "network");
        s.named("depth_kind", &mut n.depth_kind, DepthKind::parse, "depth kind")?;
        s.named("conv_kind", &mut n.conv_kind, ConvKind::parse, "conv kind")?;
        s.named("placement", &mut n.placement, Placement::parse, "placement")?;
        s.take("gate_active", &mut n.srtg.gate_active, parse_bool)?;
        s.named("fusion", &mut n.srtg.fusion, FusionMode::parse, "fusion mode")?;
        s.num("lstm_layers", &mut n.lstm_layers)?;
        s.num("expansion", &mut n.expansion)?;
        s.num("in_channels", &mut n.in_channels)?;
        s.num("num_classes", &mut n.num_classes)?;
        s.num("stem_channels", &mut n.stem.out_channels)?;
        s.take("stem_kernel", &mut n.stem.kernel, parse_dims::<3>)?;
        s.take("stem_stride", &mut n.stem.stride, parse_dims::<3>)?;
        s.take("stem_padding", &mut n.stem.padding, triple_allow_zero)?;
        let mut pool = n.stem.pool.is_some();
        let mut pk = [3, 3, 3];
        let mut ps = [2, 2, 2];
        let mut pp = [1, 1, 1];
        if let Some(p) = &n.stem.pool {
            (pk, ps, pp) = (p.kernel, p.stride, p.padding);
        }
        s.take("stem_pool", &mut pool, parse_bool)?;
        s.take("pool_kernel", &mut pk, parse_dims::<3>)?;
        s.take("pool_stride", &mut ps, parse_dims::<3>)?;
        s.take("pool_padding", &mut pp, triple_allow_zero)?;
        n.stem.pool = pool.then_some(PoolSpec {
            kernel: pk,
            stride: ps,
            padding: pp,
        });
        s.num("seed", &mut cfg.init_seed)?;
        s.finish()?;

        let mut stage_ids: Vec<usize> = raw.keys().filter_map(|k| stage_index(k)).collect();
        stage_ids.sort_unstable();
        if !stage_ids.is_empty() {
            if stage_ids.iter().enumerate().any(|(i, &s)| s != i + 1) {
                return Err(ConfigError::Invalid(format!(
                    "stage sections must be numbered 1..K without gaps, got {stage_ids:?}"
                )));
            }
            cfg.network.stages.clear();
            for id in stage_ids {
                let name = format!("stage{id}");
                let mut st = StageSpec {
                    blocks: 1,
                    channels: 0,
                    stride: [1, 1, 1],
                };
                let mut s = Section::new(raw, &name);
                s.num("blocks", &mut st.blocks)?;
                if !s.num("channels", &mut st.channels)? {
                    return Err(ConfigError::Invalid(format!("{name}.channels is required")));
                }
                s.take("stride", &mut st.stride, parse_dims::<3>)?;
                s.finish()?;
                cfg.network.stages.push(st);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: srtg_core::Error| ConfigError::Invalid(e.to_string());
        self.network.validate().map_err(inv)?;
        self.train.validate().map_err(inv)?;
        if self.train.epochs == 0 {
            return Err(ConfigError::Invalid("train.epochs must be positive".into()));
        }
        let mut m = self.train.milestones.clone();
        m.sort_unstable();
        if m != self.train.milestones {
            return Err(ConfigError::Invalid("train.milestones must be ascending".into()));
        }
        self.data.train_spec().validate().map_err(inv)?;
        self.data.val_spec().validate().map_err(inv)?;
        if self.data.val_samples == 0 {
            return Err(ConfigError::Invalid("data.val_samples must be positive".into()));
        }
        Ok(())
    }

    /// Checks that the network can consume the configured data.
    pub fn check_data_matches_network(&self) -> Result<(), ConfigError> {
        if self.data.clip[0] != self.network.in_channels || self.data.num_classes != self.network.num_classes {
            return Err(ConfigError::Invalid(format!(
                "data has {} channels / {} classes, network expects {} / {}",
                self.data.clip[0], self.data.num_classes, self.network.in_channels, self.network.num_classes
            )));
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let d = &self.data;
        let _ = writeln!(o, "[data]");
        let _ = writeln!(o, "family = {}", d.family.name());
        let _ = writeln!(o, "num_classes = {}", d.num_classes);
        let _ = writeln!(o, "clip = {}", dims_str(&d.clip));
        let _ = writeln!(o, "noise = {:?}", d.noise);
        let _ = writeln!(o, "train_samples = {}", d.train_samples);
        let _ = writeln!(o, "val_samples = {}", d.val_samples);
        let _ = writeln!(o, "seed = {}", d.seed);
        let t = &self.train;
        let _ = writeln!(o, "\n[train]");
        let _ = writeln!(o, "lr = {:?}", t.lr);
        let _ = writeln!(o, "momentum = {:?}", t.momentum);
        let _ = writeln!(o, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(o, "batch_size = {}", t.batch_size);
        let _ = writeln!(o, "epochs = {}", t.epochs);
        let ms: Vec<String> = t.milestones.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(o, "milestones = {}", if ms.is_empty() { "none".into() } else { ms.join(",") });
        let _ = writeln!(o, "gamma = {:?}", t.gamma);
        let _ = writeln!(o, "frames_per_clip = {}", t.frames_per_clip);
        let _ = writeln!(o, "seed = {}", t.seed);
        let n = &self.network;
        let _ = writeln!(o, "\n[network]");
        let _ = writeln!(o, "depth_kind = {}", n.depth_kind.name());
        let _ = writeln!(o, "conv_kind = {}", n.conv_kind.name());
        let _ = writeln!(o, "placement = {}", n.placement.name());
        let _ = writeln!(o, "gate_active = {}", n.srtg.gate_active);
        let _ = writeln!(o, "fusion = {}", n.srtg.fusion.name());
        let _ = writeln!(o, "lstm_layers = {}", n.lstm_layers);
        let _ = writeln!(o, "expansion = {}", n.expansion);
        let _ = writeln!(o, "in_channels = {}", n.in_channels);
        let _ = writeln!(o, "num_classes = {}", n.num_classes);
        let _ = writeln!(o, "stem_channels = {}", n.stem.out_channels);
        let _ = writeln!(o, "stem_kernel = {}", dims_str(&n.stem.kernel));
        let _ = writeln!(o, "stem_stride = {}", dims_str(&n.stem.stride));
        let _ = writeln!(o, "stem_padding = {}", dims_str(&n.stem.padding));
        let _ = writeln!(o, "stem_pool = {}", n.stem.pool.is_some());
        if let Some(p) = &n.stem.pool {
            let _ = writeln!(o, "pool_kernel = {}", dims_str(&p.kernel));
            let _ = writeln!(o, "pool_stride = {}", dims_str(&p.stride));
            let _ = writeln!(o, "pool_padding = {}", dims_str(&p.padding));
        }
        let _ = writeln!(o, "seed = {}", self.init_seed);
        for (i, st) in n.stages.iter().enumerate() {
            let _ = writeln!(o, "\n[stage{}]", i + 1);
            let _ = writeln!(o, "blocks = {}", st.blocks);
            let _ = writeln!(o, "channels = {}", st.channels);
            let _ = writeln!(o, "stride = {}", dims_str(&st.stride));
        }
        o
    }

    /// Sets every seed (data, shuffle, initialization) to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.init_seed = seed;
    }
}
