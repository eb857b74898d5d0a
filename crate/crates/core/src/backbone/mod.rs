//! Residual 3D backbones with optional SRTG units.

mod block;
mod layers;
pub mod macs;
mod network;
mod params;
mod spec;

pub use block::{Block, BlockModel, ForwardOutput};
pub use layers::{Ctx, GateRecord, Mode, BN_EPS, BN_MOMENTUM};
pub use macs::{count_macs, gflops, LayerCount, OpCount, OpKind, OpTotals};
pub use network::Network;
pub use params::{BufferId, ParamId, ParamStore};
pub use spec::{BlockSpec, ConvKind, DepthKind, NetworkSpec, Placement, PoolSpec, StageSpec, StemSpec};
