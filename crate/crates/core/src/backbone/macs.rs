//! Analytic multiply-accumulate counts for a network spec, per clip.
//!
//! Conventions: a convolution costs `out_elems * in_ch * kT * kH * kW`; an
//! LSTM layer costs `4 * C * (C_in + C)` per time step; the gate (only when
//! active) costs `6 * T^2 * C` multiplies: distance matrices in both
//! directions, soft-match weighted sums and nearest-frame distances; the
//! multiplicative fusion costs `C * T * H * W`. Batch norm, pooling and
//! activations are not counted. GFLOPs are `2 * MACs / 1e9`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::spec::{BlockSpec, ConvKind, DepthKind, NetworkSpec, Placement};
use crate::kernels::out_extent;
use crate::srtg::{FusionMode, SrtgConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv,
    Lstm,
    Gate,
    Fusion,
    Head,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::Lstm => "lstm",
            OpKind::Gate => "gate",
            OpKind::Fusion => "fusion",
            OpKind::Head => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub kind: OpKind,
    pub macs: u64,
    /// (C, T, H, W) after the layer.
    pub output: [usize; 4],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpTotals {
    pub convolutions: u64,
    pub lstm: u64,
    pub gate: u64,
    pub fusion: u64,
    pub head: u64,
}

impl OpTotals {
    pub fn total(&self) -> u64 {
        self.convolutions + self.lstm + self.gate + self.fusion + self.head
    }

    /// (LSTM + gate) / total.
    pub fn srtg_overhead_ratio(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            (self.lstm + self.gate) as f64 / t as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub layers: Vec<LayerCount>,
    pub totals: OpTotals,
}

pub fn gflops(macs: u64) -> f64 {
    2.0 * macs as f64 / 1e9
}

impl OpCount {
    pub fn total_macs(&self) -> u64 {
        self.totals.total()
    }

    pub fn total_gflops(&self) -> f64 {
        gflops(self.total_macs())
    }

    fn push(&mut self, name: String, kind: OpKind, macs: u64, output: [usize; 4]) {
        let t = &mut self.totals;
        match kind {
            OpKind::Conv => t.convolutions += macs,
            OpKind::Lstm => t.lstm += macs,
            OpKind::Gate => t.gate += macs,
            OpKind::Fusion => t.fusion += macs,
            OpKind::Head => t.head += macs,
        }
        self.layers.push(LayerCount { name, kind, macs, output });
    }

    fn conv(
        &mut self,
        name: &str,
        x: [usize; 4],
        co: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<[usize; 4]> {
        let mut out = [co, 0, 0, 0];
        for a in 0..3 {
            out[a + 1] = out_extent(x[a + 1], k[a], stride[a], pad[a])
                .filter(|&e| e > 0)
                .ok_or_else(|| Error::InvalidArgument(format!("{name}: unresolved output shape from input {:?}", x)))?;
        }
        let macs = (out.iter().product::<usize>() * x[0] * k.iter().product::<usize>()) as u64;
        self.push(name.into(), OpKind::Conv, macs, out);
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_unit(
        &mut self,
        name: &str,
        kind: ConvKind,
        x: [usize; 4],
        co: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<[usize; 4]> {
        let factorize = kind == ConvKind::TwoPlusOneD && k[0] > 1 && (k[1] > 1 || k[2] > 1);
        if !factorize {
            return self.conv(name, x, co, k, stride, pad);
        }
        let s = self.conv(
            &format!("{name}.spatial"),
            x,
            co,
            [1, k[1], k[2]],
            [1, stride[1], stride[2]],
            [0, pad[1], pad[2]],
        )?;
        self.conv(&format!("{name}.temporal"), s, co, [k[0], 1, 1], [stride[0], 1, 1], [pad[0], 0, 0])
    }

    fn srtg(&mut self, name: &str, x: [usize; 4], layers: usize, cfg: SrtgConfig) {
        let [c, t, h, w] = x.map(|v| v as u64);
        self.push(format!("{name}.lstm"), OpKind::Lstm, t * layers as u64 * 4 * c * (c + c), x);
        if cfg.gate_active {
            self.push(format!("{name}.gate"), OpKind::Gate, 6 * t * t * c, x);
        }
        let fusion = match cfg.fusion {
            FusionMode::Multiplicative => c * t * h * w,
            FusionMode::Additive => 0,
        };
        self.push(format!("{name}.fusion"), OpKind::Fusion, fusion, x);
    }

    fn block(&mut self, name: &str, b: &BlockSpec, x: [usize; 4]) -> Result<[usize; 4]> {
        let at = |p: Placement| b.placement == p;
        let srtg_name = format!("{name}.srtg");
        if at(Placement::Start) {
            self.srtg(&srtg_name, x, b.lstm_layers, b.srtg);
        }
        let mut h;
        match b.depth_kind {
            DepthKind::Simple => {
                let oc = b.out_channels;
                h = self.conv_unit(&format!("{name}.conv_a"), b.conv_kind, x, oc, [3; 3], b.stride, [1; 3])?;
                if at(Placement::Mid) {
                    self.srtg(&srtg_name, h, b.lstm_layers, b.srtg);
                }
                h = self.conv_unit(&format!("{name}.conv_b"), b.conv_kind, h, oc, [3; 3], [1; 3], [1; 3])?;
            }
            DepthKind::Bottleneck => {
                let m = b.mid_channels;
                h = self.conv_unit(&format!("{name}.conv_a"), b.conv_kind, x, m, [1; 3], [1; 3], [0; 3])?;
                if at(Placement::Top) {
                    self.srtg(&srtg_name, h, b.lstm_layers, b.srtg);
                }
                h = self.conv_unit(&format!("{name}.conv_b"), b.conv_kind, h, m, [3; 3], b.stride, [1; 3])?;
                if at(Placement::Mid) {
                    self.srtg(&srtg_name, h, b.lstm_layers, b.srtg);
                }
                h = self.conv_unit(&format!("{name}.conv_c"), b.conv_kind, h, b.out_channels, [1; 3], [1; 3], [0; 3])?;
                if at(Placement::End) {
                    self.srtg(&srtg_name, h, b.lstm_layers, b.srtg);
                }
            }
        }
        let skip = if b.needs_downsample() {
            self.conv(&format!("{name}.downsample"), x, b.out_channels, [1; 3], b.stride, [0; 3])?
        } else {
            x
        };
        if skip != h {
            return Err(Error::InvalidArgument(format!(
                "{name}: residual shapes differ: main {:?}, skip {:?}",
                h, skip
            )));
        }
        if at(Placement::Res) {
            self.srtg(&srtg_name, skip, b.lstm_layers, b.srtg);
        }
        if at(Placement::Final) {
            self.srtg(&srtg_name, h, b.lstm_layers, b.srtg);
        }
        Ok(h)
    }
}

/// Per-layer and total MACs for one clip of shape (C, T, H, W).
pub fn count_macs(spec: &NetworkSpec, input: [usize; 4]) -> Result<OpCount> {
    spec.validate()?;
    if input[0] != spec.in_channels || input.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "input {:?} does not match a network with {} input channels",
            input, spec.in_channels
        )));
    }
    let mut oc = OpCount::default();
    let st = &spec.stem;
    let mut x = oc.conv_unit("stem.conv", spec.conv_kind, input, st.out_channels, st.kernel, st.stride, st.padding)?;
    if let Some(p) = &spec.stem.pool {
        for a in 0..3 {
            x[a + 1] = out_extent(x[a + 1], p.kernel[a], p.stride[a], p.padding[a])
                .filter(|&e| e > 0)
                .ok_or_else(|| Error::InvalidArgument(format!("stem.pool: unresolved output shape from {:?}", x)))?;
        }
    }
    for (si, stage) in spec.block_specs().iter().enumerate() {
        for (bi, b) in stage.iter().enumerate() {
            x = oc.block(&format!("stage{}.block{}", si + 1, bi), b, x)?;
        }
    }
    oc.push("head".into(), OpKind::Head, (x[0] * spec.num_classes) as u64, [spec.num_classes, 1, 1, 1]);
    Ok(oc)
}
