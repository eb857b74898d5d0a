//! Binary dataset and checkpoint files.
//!
//! Both are little-endian: an 8-byte magic, a `u32` format version, the
//! payload, and a CRC-32 of everything before it. Truncated or damaged
//! files fail the checksum.

use std::path::Path;

use srtg_core::backbone::Network;
use srtg_core::harness::{Dataset, EpochStats, Sgd, Trainer};
use srtg_core::Tensor;

use crate::config::RunConfig;

pub const DATASET_MAGIC: &[u8; 8] = b"SRTGDATA";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SRTGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64_LE: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a {0} file (bad magic)")]
    BadMagic(&'static str),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        t.shape().iter().for_each(|&d| self.u64(d as u64));
        self.f64s(t.data());
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.0);
        self.u32(crc);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(FormatError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.bytes(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, elem: usize) -> Result<usize, FormatError> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(FormatError::Truncated);
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>, FormatError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|e| FormatError::Corrupt(e.to_string()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor), FormatError> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let data = self.f64s()?;
        let t = Tensor::new(&shape, data).map_err(|e| FormatError::Corrupt(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

/// Checks magic, version and trailing checksum; returns the payload after
/// the version field.
fn open<'a>(bytes: &'a [u8], magic: &[u8; 8], what: &'static str, version: u32) -> Result<Reader<'a>, FormatError> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(if bytes.len() < 8 && magic.starts_with(bytes) {
            FormatError::Truncated
        } else {
            FormatError::BadMagic(what)
        });
    }
    if bytes.len() < 12 {
        return Err(FormatError::Truncated);
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(FormatError::Version {
            found,
            expected: version,
        });
    }
    if bytes.len() < 16 {
        return Err(FormatError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    Ok(Reader { buf: body, pos: 12 })
}

fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    std::fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn dataset_to_bytes(d: &Dataset) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(DTYPE_F64_LE);
    w.u64(d.len() as u64);
    d.clip_shape.iter().for_each(|&v| w.u32(v as u32));
    w.u32(d.num_classes as u32);
    d.clips.iter().for_each(|&v| w.f64(v));
    d.labels.iter().for_each(|&l| w.u32(l as u32));
    w.finish()
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = open(bytes, DATASET_MAGIC, "dataset", DATASET_VERSION)?;
    let dtype = r.u32()?;
    if dtype != DTYPE_F64_LE {
        return Err(FormatError::Corrupt(format!("unknown dtype {dtype}")));
    }
    let count = r.u64()? as usize;
    let mut shape = [0usize; 4];
    for s in &mut shape {
        *s = r.u32()? as usize;
    }
    let classes = r.u32()? as usize;
    let vol = shape.iter().product::<usize>();
    let need = count.checked_mul(vol).and_then(|n| n.checked_mul(8)).ok_or(FormatError::Truncated)?;
    if need > bytes.len() {
        return Err(FormatError::Truncated);
    }
    let clips = (0..count * vol).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let labels = (0..count).map(|_| r.u32().map(|l| l as usize)).collect::<Result<Vec<_>, _>>()?;
    if r.pos != r.buf.len() {
        return Err(FormatError::Corrupt("trailing bytes".into()));
    }
    Dataset::new(shape, classes, clips, labels).map_err(|e| FormatError::Corrupt(e.to_string()))
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<(), FormatError> {
    write_file(path, &dataset_to_bytes(d))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, FormatError> {
    dataset_from_bytes(&read_file(path)?)
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Effective configuration text of the run.
    pub config: String,
    /// Completed epochs.
    pub epoch: usize,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    pub momentum: Vec<Vec<f64>>,
    pub history: Vec<EpochStats>,
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, tr: &Trainer) -> Self {
        let store = tr.net.store();
        let strip = |t: &Tensor| Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        Checkpoint {
            config: config.to_text(),
            epoch: tr.epoch,
            params: store.names().iter().cloned().zip(store.params().iter().map(strip)).collect(),
            buffers: store.buffer_names().iter().cloned().zip(store.buffers().iter().map(strip)).collect(),
            momentum: tr.optimizer.momentum_buffers.clone(),
            history: tr.history.clone(),
        }
    }

    /// Rebuilds the network from the embedded config and restores every
    /// tensor, the optimizer state and the history.
    pub fn into_trainer(self) -> Result<(RunConfig, Trainer), FormatError> {
        let cfg = RunConfig::parse(&self.config).map_err(|e| FormatError::Corrupt(format!("embedded config: {e}")))?;
        let net = Network::new(&cfg.network, cfg.init_seed).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        let mut tr = Trainer::new(net, cfg.train.clone()).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        restore(&mut tr, &self)?;
        Ok((cfg, tr))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config);
        w.u64(self.epoch as u64);
        for group in [&self.params, &self.buffers] {
            w.u32(group.len() as u32);
            group.iter().for_each(|(n, t)| w.tensor(n, t));
        }
        w.u32(self.momentum.len() as u32);
        self.momentum.iter().for_each(|m| w.f64s(m));
        w.u32(self.history.len() as u32);
        for h in &self.history {
            w.u64(h.epoch as u64);
            for v in [h.lr, h.train_loss, h.train_top1, h.val_loss, h.val_top1, h.val_top5] {
                w.f64(v);
            }
            match h.gate_open_rate {
                Some(r) => {
                    w.u8(1);
                    w.f64(r);
                }
                None => w.u8(0),
            }
            w.f64s(&h.layer_open_rates);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = open(bytes, CHECKPOINT_MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
        let config = r.str()?;
        let epoch = r.u64()? as usize;
        let mut groups = [Vec::new(), Vec::new()];
        for g in &mut groups {
            let n = r.u32()?;
            for _ in 0..n {
                g.push(r.tensor()?);
            }
        }
        let [params, buffers] = groups;
        let n = r.u32()?;
        let momentum = (0..n).map(|_| r.f64s()).collect::<Result<Vec<_>, _>>()?;
        let n = r.u32()?;
        let mut history = Vec::new();
        for _ in 0..n {
            let epoch = r.u64()? as usize;
            let mut v = [0.0; 6];
            for x in &mut v {
                *x = r.f64()?;
            }
            let gate_open_rate = match r.u8()? {
                0 => None,
                1 => Some(r.f64()?),
                b => return Err(FormatError::Corrupt(format!("bad flag {b}"))),
            };
            history.push(EpochStats {
                epoch,
                lr: v[0],
                train_loss: v[1],
                train_top1: v[2],
                val_loss: v[3],
                val_top1: v[4],
                val_top5: v[5],
                gate_open_rate,
                layer_open_rates: r.f64s()?,
            });
        }
        if r.pos != r.buf.len() {
            return Err(FormatError::Corrupt("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            epoch,
            params,
            buffers,
            momentum,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn restore(tr: &mut Trainer, ck: &Checkpoint) -> Result<(), FormatError> {
    let store = tr.net.store_mut();
    let mismatch = |what: &str, name: &str| FormatError::Corrupt(format!("{what} {name} does not match the network"));
    if ck.params.len() != store.len() || ck.buffers.len() != store.buffers().len() {
        return Err(FormatError::Corrupt("tensor count does not match the network".into()));
    }
    for (i, (name, t)) in ck.params.iter().enumerate() {
        if store.names()[i] != *name || store.params()[i].shape() != t.shape() {
            return Err(mismatch("parameter", name));
        }
        store.params_mut()[i].data_mut().copy_from_slice(t.data());
    }
    for (i, (name, t)) in ck.buffers.iter().enumerate() {
        if store.buffer_names()[i] != *name || store.buffers()[i].shape() != t.shape() {
            return Err(mismatch("buffer", name));
        }
        store.buffers_mut()[i].data_mut().copy_from_slice(t.data());
    }
    let fresh = Sgd::new(store);
    if fresh.momentum_buffers.len() != ck.momentum.len()
        || fresh.momentum_buffers.iter().zip(&ck.momentum).any(|(a, b)| a.len() != b.len())
    {
        return Err(FormatError::Corrupt("optimizer state does not match the network".into()));
    }
    tr.optimizer = Sgd {
        momentum_buffers: ck.momentum.clone(),
    };
    tr.epoch = ck.epoch;
    tr.history = ck.history.clone();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use srtg_core::harness::{generate, MotionFamily, SyntheticSpec};

    fn small() -> Dataset {
        generate(&SyntheticSpec {
            family: MotionFamily::Translation,
            num_classes: 2,
            channels: 1,
            frames: 3,
            height: 4,
            width: 4,
            noise: 0.1,
            samples: 5,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn dataset_round_trip_and_damage() {
        let d = small();
        let bytes = dataset_to_bytes(&d);
        assert_eq!(dataset_from_bytes(&bytes).unwrap(), d);
        assert!(matches!(dataset_from_bytes(&bytes[..bytes.len() - 9]), Err(FormatError::Checksum { .. })));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(dataset_from_bytes(&flipped), Err(FormatError::Checksum { .. })));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(dataset_from_bytes(&v2), Err(FormatError::Version { found: 2, .. })));
        assert!(matches!(dataset_from_bytes(b"SRTGCKPT\x01\0\0\0"), Err(FormatError::BadMagic(_))));
        assert!(matches!(dataset_from_bytes(b"SRTG"), Err(FormatError::Truncated)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.network.stages.truncate(1);
        cfg.data.clip = [3, 4, 8, 8];
        let net = Network::new(&cfg.network, 4).unwrap();
        let tr = Trainer::new(net, cfg.train.clone()).unwrap();
        let ck = Checkpoint::from_trainer(&cfg, &tr);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let (cfg2, tr2) = back.into_trainer().unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(Checkpoint::from_trainer(&cfg2, &tr2).to_bytes(), bytes);
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(FormatError::Checksum { .. })));
    }
}
