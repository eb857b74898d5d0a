use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Conv, ConvUnit, Ctx, GateRecord, Mode, SrtgModule};
use super::params::ParamStore;
use super::spec::{BlockSpec, DepthKind, Placement};
use crate::graph::Conv3dGeom;
use crate::{Graph, Result, Var};

/// One residual block with an optional SRTG unit.
#[derive(Clone, Debug)]
pub struct Block {
    spec: BlockSpec,
    conv_a: ConvUnit,
    bn_a: BatchNorm,
    conv_b: ConvUnit,
    bn_b: BatchNorm,
    /// Bottleneck expansion conv.
    conv_c: Option<(ConvUnit, BatchNorm)>,
    downsample: Option<(Conv, BatchNorm)>,
    srtg: Option<SrtgModule>,
}

impl Block {
    /// Registers the block's parameters in `store` under `name`. `srtg_layer`
    /// is the forward-order index given to the block's SRTG unit, if any.
    pub fn build<R: Rng + ?Sized>(
        spec: &BlockSpec,
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        srtg_layer: usize,
    ) -> Result<Self> {
        spec.validate()?;
        let (ci, cm, co) = (spec.in_channels, spec.mid_channels, spec.out_channels);
        let k3 = [3, 3, 3];
        let (conv_a, conv_b, conv_c) = match spec.depth_kind {
            DepthKind::Simple => {
                let a = ConvUnit::new(store, rng, &format!("{name}.conv_a"), spec.conv_kind, ci, co, k3, spec.stride, [1; 3])?;
                let bn_a = BatchNorm::new(store, &format!("{name}.bn_a"), co)?;
                let b = ConvUnit::new(store, rng, &format!("{name}.conv_b"), spec.conv_kind, co, co, k3, [1; 3], [1; 3])?;
                ((a, bn_a), b, None)
            }
            DepthKind::Bottleneck => {
                let a = ConvUnit::new(store, rng, &format!("{name}.conv_a"), spec.conv_kind, ci, cm, [1; 3], [1; 3], [0; 3])?;
                let bn_a = BatchNorm::new(store, &format!("{name}.bn_a"), cm)?;
                let b = ConvUnit::new(store, rng, &format!("{name}.conv_b"), spec.conv_kind, cm, cm, k3, spec.stride, [1; 3])?;
                ((a, bn_a), b, Some(()))
            }
        };
        let (conv_a, bn_a) = conv_a;
        let bn_b = BatchNorm::new(store, &format!("{name}.bn_b"), cm)?;
        let conv_c = match conv_c {
            Some(()) => {
                let c = ConvUnit::new(store, rng, &format!("{name}.conv_c"), spec.conv_kind, cm, co, [1; 3], [1; 3], [0; 3])?;
                Some((c, BatchNorm::new(store, &format!("{name}.bn_c"), co)?))
            }
            None => None,
        };
        let downsample = if spec.needs_downsample() {
            let geom = Conv3dGeom::new(spec.stride, [0; 3]);
            let c = Conv::new(store, rng, &format!("{name}.downsample.conv"), ci, co, [1; 3], geom)?;
            Some((c, BatchNorm::new(store, &format!("{name}.downsample.bn"), co)?))
        } else {
            None
        };
        let srtg = match spec.placement {
            Placement::None => None,
            p => {
                let channels = match p {
                    Placement::Start => ci,
                    Placement::Top | Placement::Mid => cm,
                    _ => co,
                };
                Some(SrtgModule::new(
                    store,
                    rng,
                    &format!("{name}.srtg"),
                    srtg_layer,
                    channels,
                    spec.lstm_layers,
                    spec.srtg,
                )?)
            }
        };
        Ok(Block {
            spec: spec.clone(),
            conv_a,
            bn_a,
            conv_b,
            bn_b,
            conv_c,
            downsample,
            srtg,
        })
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn has_srtg(&self) -> bool {
        self.srtg.is_some()
    }

    fn gate_at(&self, ctx: &mut Ctx, here: Placement, x: Var) -> Result<Var> {
        match &self.srtg {
            Some(m) if self.spec.placement == here => m.forward(ctx, x),
            _ => Ok(x),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = self.gate_at(ctx, Placement::Start, x)?;
        h = self.conv_a.forward(ctx, h)?;
        h = self.bn_a.forward(ctx, h)?;
        h = ctx.g.relu(h);
        match self.spec.depth_kind {
            DepthKind::Simple => {
                h = self.gate_at(ctx, Placement::Mid, h)?;
                h = self.conv_b.forward(ctx, h)?;
                h = self.bn_b.forward(ctx, h)?;
            }
            DepthKind::Bottleneck => {
                h = self.gate_at(ctx, Placement::Top, h)?;
                h = self.conv_b.forward(ctx, h)?;
                h = self.bn_b.forward(ctx, h)?;
                h = ctx.g.relu(h);
                h = self.gate_at(ctx, Placement::Mid, h)?;
                if let Some((conv, bn)) = &self.conv_c {
                    h = conv.forward(ctx, h)?;
                    h = bn.forward(ctx, h)?;
                }
                h = self.gate_at(ctx, Placement::End, h)?;
            }
        }
        let mut skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        skip = self.gate_at(ctx, Placement::Res, skip)?;
        let sum = ctx.g.add(h, skip)?;
        let out = ctx.g.relu(sum);
        self.gate_at(ctx, Placement::Final, out)
    }
}

/// Result of a forward pass through a self-contained model.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub output: Var,
    /// Parameter leaves, in store order.
    pub vars: Vec<Var>,
    pub gates: Vec<GateRecord>,
}

/// A single block together with its own parameter store.
#[derive(Clone, Debug)]
pub struct BlockModel {
    pub store: ParamStore,
    pub block: Block,
}

impl BlockModel {
    pub fn new(spec: &BlockSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = Block::build(spec, &mut store, &mut rng, "block", 0)?;
        Ok(BlockModel { store, block })
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<ForwardOutput> {
        let vars = self.store.bind(g);
        let (store, block) = (&mut self.store, &self.block);
        let mut ctx = Ctx::new(g, &vars, store.buffers_mut(), mode);
        let output = block.forward(&mut ctx, x)?;
        let gates = ctx.gates;
        Ok(ForwardOutput { output, vars, gates })
    }
}
