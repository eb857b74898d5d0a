use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::params::{BufferId, ParamId, ParamStore};
use super::spec::ConvKind;
use crate::graph::Conv3dGeom;
use crate::srtg::{srtg_unit, GateDecision, LstmLayerParams, LstmLayerVars, LstmVars, SrtgConfig};
use crate::{math, Graph, Result, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Gate verdicts of one SRTG unit for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    /// Position of the unit in forward order.
    pub layer: usize,
    pub name: String,
    pub decisions: Vec<GateDecision>,
}

/// State threaded through a forward pass.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub vars: &'a [Var],
    pub buffers: &'a mut [Tensor],
    pub mode: Mode,
    pub gates: Vec<GateRecord>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, vars: &'a [Var], buffers: &'a mut [Tensor], mode: Mode) -> Self {
        Ctx {
            g,
            vars,
            buffers,
            mode,
            gates: Vec::new(),
        }
    }

    fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    weight: ParamId,
    geom: Conv3dGeom,
}

impl Conv {
    /// Bias-free conv, weights uniform in +-sqrt(6 / fan_in).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        ci: usize,
        co: usize,
        kernel: [usize; 3],
        geom: Conv3dGeom,
    ) -> Result<Self> {
        let fan_in = ci * kernel.iter().product::<usize>();
        let w = uniform(rng, &[co, ci, kernel[0], kernel[1], kernel[2]], math::sqrt(6.0 / fan_in as f64))?;
        Ok(Conv {
            weight: store.add_param(format!("{name}.weight"), w),
            geom,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        ctx.g.conv3d(x, w, None, self.geom)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(&[c], 1.0)?),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[c])?),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])?),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)?),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode {
            Mode::Eval => {
                let (m, v) = (ctx.buffers[self.running_mean.0].data(), ctx.buffers[self.running_var.0].data());
                Ok(ctx.g.batch_norm(x, gamma, beta, Some((m, v)), BN_EPS)?.0)
            }
            Mode::Train => {
                let (y, stats) = ctx.g.batch_norm(x, gamma, beta, None, BN_EPS)?;
                if let Some(st) = stats {
                    let unbias = if st.count > 1 {
                        st.count as f64 / (st.count - 1) as f64
                    } else {
                        1.0
                    };
                    let rm = ctx.buffers[self.running_mean.0].data_mut();
                    for (r, m) in rm.iter_mut().zip(&st.mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                    }
                    let rv = ctx.buffers[self.running_var.0].data_mut();
                    for (r, v) in rv.iter_mut().zip(&st.var) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                    }
                }
                Ok(y)
            }
        }
    }
}

/// A k x k x k convolution, either full or factorized into spatial and
/// temporal parts with a BN + ReLU in between. The intermediate width equals
/// the output width.
#[derive(Clone, Debug)]
pub(crate) enum ConvUnit {
    Full(Conv),
    Factorized { spatial: Conv, bn: BatchNorm, temporal: Conv },
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kind: ConvKind,
        ci: usize,
        co: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let factorize = kind == ConvKind::TwoPlusOneD && kernel[0] > 1 && (kernel[1] > 1 || kernel[2] > 1);
        if !factorize {
            let geom = Conv3dGeom::new(stride, padding);
            return Ok(ConvUnit::Full(Conv::new(store, rng, name, ci, co, kernel, geom)?));
        }
        let spatial = Conv::new(
            store,
            rng,
            &format!("{name}.spatial"),
            ci,
            co,
            [1, kernel[1], kernel[2]],
            Conv3dGeom::new([1, stride[1], stride[2]], [0, padding[1], padding[2]]),
        )?;
        let bn = BatchNorm::new(store, &format!("{name}.bn_mid"), co)?;
        let temporal = Conv::new(
            store,
            rng,
            &format!("{name}.temporal"),
            co,
            co,
            [kernel[0], 1, 1],
            Conv3dGeom::new([stride[0], 1, 1], [padding[0], 0, 0]),
        )?;
        Ok(ConvUnit::Factorized { spatial, bn, temporal })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            ConvUnit::Full(c) => c.forward(ctx, x),
            ConvUnit::Factorized { spatial, bn, temporal } => {
                let y = spatial.forward(ctx, x)?;
                let y = bn.forward(ctx, y)?;
                let y = ctx.g.relu(y);
                temporal.forward(ctx, y)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SrtgModule {
    pub name: String,
    pub layer: usize,
    pub config: SrtgConfig,
    lstm: Vec<[ParamId; 8]>,
}

impl SrtgModule {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        layer: usize,
        channels: usize,
        num_layers: usize,
        config: SrtgConfig,
    ) -> Result<Self> {
        let mut lstm = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let p = LstmLayerParams::init(channels, channels, rng)?;
            let names = ["w_f", "w_i", "w_c", "w_a", "b_f", "b_i", "b_c", "b_a"];
            let ids: Vec<ParamId> = p
                .tensors()
                .into_iter()
                .zip(names)
                .map(|(t, n)| store.add_param(format!("{name}.lstm{l}.{n}"), t.clone()))
                .collect();
            lstm.push([ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6], ids[7]]);
        }
        Ok(SrtgModule {
            name: String::from(name),
            layer,
            config,
            lstm,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let vars = LstmVars {
            layers: self
                .lstm
                .iter()
                .map(|ids| LstmLayerVars::from_slice(&ids.map(|id| ctx.var(id))))
                .collect(),
        };
        let (y, decisions) = srtg_unit(ctx.g, x, &vars, self.config)?;
        ctx.gates.push(GateRecord {
            layer: self.layer,
            name: self.name.clone(),
            decisions,
        });
        Ok(y)
    }
}
