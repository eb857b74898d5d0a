use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{Block, ForwardOutput};
use super::layers::{BatchNorm, ConvUnit, Ctx, Mode};
use super::params::{ParamId, ParamStore};
use super::spec::NetworkSpec;
use crate::graph::Conv3dGeom;
use crate::{math, Error, Graph, Result, Tensor, Var};

/// Stem, residual stages, global average pooling and a linear head.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    store: ParamStore,
    stem_conv: ConvUnit,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Network {
    /// Builds and initializes a network; the same seed gives the same
    /// parameters.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let st = &spec.stem;
        let stem_conv = ConvUnit::new(
            &mut store,
            &mut rng,
            "stem.conv",
            spec.conv_kind,
            spec.in_channels,
            st.out_channels,
            st.kernel,
            st.stride,
            st.padding,
        )?;
        let stem_bn = BatchNorm::new(&mut store, "stem.bn", st.out_channels)?;
        let mut blocks = Vec::new();
        let mut srtg_layer = 0;
        for (si, stage) in spec.block_specs().iter().enumerate() {
            for (bi, bs) in stage.iter().enumerate() {
                let b = Block::build(bs, &mut store, &mut rng, &format!("stage{}.block{}", si + 1, bi), srtg_layer)?;
                srtg_layer += usize::from(b.has_srtg());
                blocks.push(b);
            }
        }
        let feat = spec.out_channels();
        let bound = 1.0 / math::sqrt(feat as f64);
        let n = feat * spec.num_classes;
        let w = Tensor::new(
            &[feat, spec.num_classes],
            (0..n).map(|_| rand::Rng::random_range(&mut rng, -bound..bound)).collect(),
        )?;
        let head_w = store.add_param("head.weight".into(), w);
        let head_b = store.add_param("head.bias".into(), Tensor::zeros(&[spec.num_classes])?);
        Ok(Network {
            spec: spec.clone(),
            store,
            stem_conv,
            stem_bn,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_srtg_units(&self) -> usize {
        self.blocks.iter().filter(|b| b.has_srtg()).count()
    }

    /// Forward pass of an (N, C, T, H, W) batch to (N, classes) logits.
    /// Parameters are bound as graph leaves in store order.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<ForwardOutput> {
        let vars = self.store.bind(g);
        let mut buffers = core::mem::take(self.store.buffers_mut_vec());
        let res = {
            let mut ctx = Ctx::new(g, &vars, &mut buffers, mode);
            self.forward_ctx(&mut ctx, x).map(|out| (out, ctx.gates))
        };
        *self.store.buffers_mut_vec() = buffers;
        let (output, gates) = res?;
        Ok(ForwardOutput { output, vars, gates })
    }

    /// Forward pass with externally bound parameters and buffers.
    pub fn forward_ctx(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x);
        if s.len() != 5 || s[1] != self.spec.in_channels {
            return Err(Error::shape(
                "network",
                "input",
                format!("expected (N, {}, T, H, W), got {:?}", self.spec.in_channels, s),
            ));
        }
        let mut h = self.stem_conv.forward(ctx, x)?;
        h = self.stem_bn.forward(ctx, h)?;
        h = ctx.g.relu(h);
        if let Some(p) = &self.spec.stem.pool {
            h = ctx.g.max_pool3d(h, p.kernel, Conv3dGeom::new(p.stride, p.padding))?;
        }
        for b in &self.blocks {
            h = b.forward(ctx, h)?;
        }
        let pooled = ctx.g.global_avg_pool(h)?;
        let logits = ctx.g.matmul(pooled, ctx.vars[self.head_w.0])?;
        ctx.g.add_bias(logits, ctx.vars[self.head_b.0])
    }
}
