use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::{evaluate, top_k_accuracy};
use super::synthetic::Dataset;
use crate::backbone::{Mode, Network, ParamStore};
use crate::{Error, Graph, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Decoupled: `p -= lr * weight_decay * p` each step.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// Training clips longer than this are cut to a random window of this
    /// many frames each epoch; evaluation takes the centre window.
    pub frames_per_clip: usize,
    /// Seeds the per-epoch shuffle and frame windows.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_epochs(30)
    }
}

impl TrainConfig {
    /// Defaults with milestones at 50% and 75% of the run.
    pub fn for_epochs(epochs: usize) -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-6,
            batch_size: 16,
            epochs,
            milestones: vec![epochs / 2, epochs * 3 / 4],
            gamma: 0.1,
            frames_per_clip: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && self.batch_size > 0
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && self.frames_per_clip > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training config {:?}", self)))
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m > 0 && epoch >= m).count();
        (0..drops).fold(self.lr, |lr, _| lr * self.gamma)
    }

    /// Shuffled clip order for an epoch; depends only on (seed, epoch).
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    /// Training view of `data` for an epoch: random frame windows when the
    /// clips are longer than `frames_per_clip`.
    pub fn epoch_view<'a>(&self, data: &'a Dataset, epoch: usize) -> Result<Cow<'a, Dataset>> {
        let t = data.clip_shape[1];
        if t <= self.frames_per_clip {
            return Ok(Cow::Borrowed(data));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ WINDOW_SALT);
        rng.set_stream(epoch as u64);
        let starts: Vec<usize> = (0..data.len()).map(|_| rng.random_range(0..=t - self.frames_per_clip)).collect();
        Ok(Cow::Owned(data.window(self.frames_per_clip, |i| starts[i])?))
    }

    pub fn eval_view<'a>(&self, data: &'a Dataset) -> Result<Cow<'a, Dataset>> {
        if data.clip_shape[1] <= self.frames_per_clip {
            Ok(Cow::Borrowed(data))
        } else {
            Ok(Cow::Owned(data.center_frames(self.frames_per_clip)?))
        }
    }
}

const WINDOW_SALT: u64 = 0x5eed_f4a3_0000_0001;

/// SGD with heavy-ball momentum and decoupled weight decay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum_buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore) -> Self {
        Sgd {
            momentum_buffers: store.params().iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        if self.momentum_buffers.len() != store.len() {
            return Err(Error::InvalidArgument("optimizer state does not match the parameters".into()));
        }
        for (p, buf) in store.params_mut().iter_mut().zip(&mut self.momentum_buffers) {
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            for ((w, v), g) in p.data_mut().iter_mut().zip(buf.iter_mut()).zip(&grad) {
                *v = momentum * *v + g;
                *w -= lr * (*v + weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub gate_open_rate: Option<f64>,
    pub layer_open_rates: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network,
    pub config: TrainConfig,
    pub optimizer: Sgd,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(net.store());
        Ok(Trainer {
            net,
            config,
            optimizer,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// One pass over `data`; returns mean loss and top-1 on the batches as
    /// they were seen.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Empty("train_epoch"));
        }
        let classes = self.net.spec().num_classes;
        let lr = self.config.lr_at(self.epoch);
        let data = self.config.epoch_view(data, self.epoch)?;
        let order = self.config.epoch_order(data.len(), self.epoch);
        let mut loss_sum = 0.0;
        let mut logits = Vec::with_capacity(data.len() * classes);
        let mut labels_seen = Vec::with_capacity(data.len());
        for chunk in order.chunks(self.config.batch_size) {
            let (x, labels) = data.batch(chunk)?;
            let mut g = Graph::new();
            let xv = g.input(&x);
            let epoch = self.epoch;
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                e => e,
            };
            let out = self.net.forward(&mut g, xv, Mode::Train).map_err(diverged)?;
            let loss = g.softmax_cross_entropy(out.output, &labels).map_err(diverged)?;
            let lv = g.value(loss)[0];
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    loss: lv,
                });
            }
            loss_sum += lv * chunk.len() as f64;
            logits.extend_from_slice(g.value(out.output));
            labels_seen.extend_from_slice(&labels);
            g.backward(loss)?;
            self.net.store_mut().collect_grads(&g, &out.vars)?;
            let c = &self.config;
            self.optimizer.step(self.net.store_mut(), lr, c.momentum, c.weight_decay)?;
        }
        if !self.net.store().params().iter().all(|p| p.all_finite()) {
            return Err(Error::Diverged {
                epoch: self.epoch,
                loss: f64::NAN,
            });
        }
        let top1 = top_k_accuracy(&logits, classes, &labels_seen, 1)?;
        Ok((loss_sum / data.len() as f64, top1))
    }

    /// Trains one epoch, evaluates on `val` and appends to the history.
    pub fn step_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochStats> {
        let lr = self.config.lr_at(self.epoch);
        let (train_loss, train_top1) = self.train_epoch(train)?;
        let val = self.config.eval_view(val)?;
        let report = evaluate(&mut self.net, &val, self.config.batch_size)?;
        let stats = EpochStats {
            epoch: self.epoch,
            lr,
            train_loss,
            train_top1,
            val_loss: report.loss,
            val_top1: report.top1,
            val_top5: report.top5,
            gate_open_rate: report.gate_open_rate,
            layer_open_rates: report.layer_open_rates,
        };
        self.epoch += 1;
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// Runs the remaining epochs up to `config.epochs`.
    pub fn fit(&mut self, train: &Dataset, val: &Dataset) -> Result<&[EpochStats]> {
        while self.epoch < self.config.epochs {
            self.step_epoch(train, val)?;
        }
        Ok(&self.history)
    }
}
