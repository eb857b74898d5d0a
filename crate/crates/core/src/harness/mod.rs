//! Synthetic data, training loop and evaluation metrics.

pub mod metrics;
pub mod synthetic;
pub mod train;

pub use metrics::{evaluate, gate_open_rate, layer_open_rates, top_k_accuracy, top_k_indices, ClipGate, EvalReport};
pub use synthetic::{generate, generate_clip, Dataset, MotionFamily, SyntheticSpec};
pub use train::{EpochStats, Sgd, TrainConfig, Trainer};
