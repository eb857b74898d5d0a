use alloc::format;
use alloc::vec::Vec;

use crate::srtg::{FusionMode, SrtgConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DepthKind {
    /// Two 3x3x3 convolutions.
    Simple,
    /// 1x1x1 reduce, 3x3x3, 1x1x1 expand.
    Bottleneck,
}

impl DepthKind {
    pub fn name(self) -> &'static str {
        match self {
            DepthKind::Simple => "simple",
            DepthKind::Bottleneck => "bottleneck",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simple" => Some(DepthKind::Simple),
            "bottleneck" => Some(DepthKind::Bottleneck),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvKind {
    Full3d,
    /// k x k x k factorized into 1 x k x k spatial then k x 1 x 1 temporal.
    TwoPlusOneD,
}

impl ConvKind {
    pub fn name(self) -> &'static str {
        match self {
            ConvKind::Full3d => "3d",
            ConvKind::TwoPlusOneD => "2+1d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "3d" | "full_3d" => Some(ConvKind::Full3d),
            "2+1d" | "(2+1)d" | "two_plus_one_d" => Some(ConvKind::TwoPlusOneD),
            _ => None,
        }
    }
}

/// Where the SRTG unit sits inside a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    None,
    /// Before the first convolution of the main path.
    Start,
    /// After the first convolution (Bottleneck only).
    Top,
    /// Simple: between the two convolutions. Bottleneck: after the second.
    Mid,
    /// After the last convolution, before the residual add (Bottleneck only).
    End,
    /// On the skip connection.
    Res,
    /// After the residual add and activation.
    Final,
}

impl Placement {
    pub const ALL: [Placement; 7] = [
        Placement::None,
        Placement::Start,
        Placement::Top,
        Placement::Mid,
        Placement::End,
        Placement::Res,
        Placement::Final,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placement::None => "none",
            Placement::Start => "start",
            Placement::Top => "top",
            Placement::Mid => "mid",
            Placement::End => "end",
            Placement::Res => "res",
            Placement::Final => "final",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn allowed_for(self, depth: DepthKind) -> bool {
        !(depth == DepthKind::Simple && matches!(self, Placement::Top | Placement::End))
    }

    pub fn valid_for(depth: DepthKind) -> impl Iterator<Item = Placement> {
        Self::ALL.into_iter().filter(move |p| p.allowed_for(depth))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub depth_kind: DepthKind,
    pub conv_kind: ConvKind,
    pub placement: Placement,
    pub in_channels: usize,
    /// Simple: output of the first conv (= out_channels). Bottleneck: the
    /// reduced width.
    pub mid_channels: usize,
    pub out_channels: usize,
    /// Applied by the first 3x3x3 conv and the downsampling skip.
    pub stride: [usize; 3],
    pub srtg: SrtgConfig,
    pub lstm_layers: usize,
}

impl BlockSpec {
    pub fn simple(in_channels: usize, out_channels: usize, stride: [usize; 3]) -> Self {
        BlockSpec {
            depth_kind: DepthKind::Simple,
            conv_kind: ConvKind::Full3d,
            placement: Placement::None,
            in_channels,
            mid_channels: out_channels,
            out_channels,
            stride,
            srtg: SrtgConfig::default(),
            lstm_layers: 2,
        }
    }

    pub fn bottleneck(in_channels: usize, width: usize, expansion: usize, stride: [usize; 3]) -> Self {
        BlockSpec {
            depth_kind: DepthKind::Bottleneck,
            mid_channels: width,
            out_channels: width * expansion,
            ..Self::simple(in_channels, width * expansion, stride)
        }
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn with_conv(mut self, conv_kind: ConvKind) -> Self {
        self.conv_kind = conv_kind;
        self
    }

    pub fn with_srtg(mut self, srtg: SrtgConfig) -> Self {
        self.srtg = srtg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.placement.allowed_for(self.depth_kind) {
            return Err(Error::InvalidPlacement {
                placement: self.placement.name(),
                depth: self.depth_kind.name(),
            });
        }
        if self.in_channels == 0 || self.mid_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(format!("block channels must be positive: {:?}", self)));
        }
        if self.stride.contains(&0) {
            return Err(Error::InvalidArgument(format!("block stride must be positive: {:?}", self.stride)));
        }
        if self.depth_kind == DepthKind::Simple && self.mid_channels != self.out_channels {
            return Err(Error::InvalidArgument("simple blocks keep mid_channels == out_channels".into()));
        }
        if self.placement != Placement::None && self.lstm_layers == 0 {
            return Err(Error::InvalidArgument("an SRTG unit needs at least one LSTM layer".into()));
        }
        Ok(())
    }

    pub(crate) fn needs_downsample(&self) -> bool {
        self.stride != [1, 1, 1] || self.in_channels != self.out_channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub pool: Option<PoolSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    /// Simple: block output channels. Bottleneck: reduced width (output is
    /// `channels * expansion`).
    pub channels: usize,
    /// Stride of the first block of the stage.
    pub stride: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth_kind: DepthKind,
    pub conv_kind: ConvKind,
    pub placement: Placement,
    pub srtg: SrtgConfig,
    pub lstm_layers: usize,
    pub expansion: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
}

impl NetworkSpec {
    /// Block descriptors, stage by stage, with channels chained through.
    pub fn block_specs(&self) -> Vec<Vec<BlockSpec>> {
        let mut in_ch = self.stem.out_channels;
        self.stages
            .iter()
            .map(|st| {
                (0..st.blocks)
                    .map(|b| {
                        let stride = if b == 0 { st.stride } else { [1, 1, 1] };
                        let mut spec = match self.depth_kind {
                            DepthKind::Simple => BlockSpec::simple(in_ch, st.channels, stride),
                            DepthKind::Bottleneck => BlockSpec::bottleneck(in_ch, st.channels, self.expansion, stride),
                        };
                        spec.conv_kind = self.conv_kind;
                        spec.placement = self.placement;
                        spec.srtg = self.srtg;
                        spec.lstm_layers = self.lstm_layers;
                        in_ch = spec.out_channels;
                        spec
                    })
                    .collect()
            })
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        let last = self.stages.last().map_or(self.stem.out_channels, |s| s.channels);
        match self.depth_kind {
            DepthKind::Simple => last,
            DepthKind::Bottleneck if self.stages.is_empty() => last,
            DepthKind::Bottleneck => last * self.expansion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument("in_channels and num_classes must be positive".into()));
        }
        if self.stem.out_channels == 0 || self.stem.kernel.contains(&0) || self.stem.stride.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid stem {:?}", self.stem)));
        }
        if let Some(p) = &self.stem.pool {
            if p.kernel.contains(&0) || p.stride.contains(&0) || (0..3).any(|a| p.padding[a] >= p.kernel[a]) {
                return Err(Error::InvalidArgument(format!("invalid stem pool {:?}", p)));
            }
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.blocks == 0 || s.channels == 0) {
            return Err(Error::InvalidArgument("every stage needs at least one block and positive channels".into()));
        }
        if self.depth_kind == DepthKind::Bottleneck && self.expansion == 0 {
            return Err(Error::InvalidArgument("bottleneck expansion must be positive".into()));
        }
        for stage in self.block_specs() {
            for b in stage {
                b.validate()?;
            }
        }
        Ok(())
    }

    /// Returns a copy with the SRTG units removed.
    pub fn without_srtg(&self) -> Self {
        NetworkSpec {
            placement: Placement::None,
            ..self.clone()
        }
    }

    fn resnet(depth_kind: DepthKind, conv_kind: ConvKind, blocks: [usize; 4], placement: Placement) -> Self {
        let widths = [64, 128, 256, 512];
        NetworkSpec {
            in_channels: 3,
            num_classes: 400,
            depth_kind,
            conv_kind,
            placement,
            srtg: SrtgConfig {
                gate_active: true,
                fusion: FusionMode::Multiplicative,
            },
            lstm_layers: 2,
            expansion: 4,
            stem: StemSpec {
                out_channels: 64,
                kernel: [7, 7, 7],
                stride: [1, 2, 2],
                padding: [3, 3, 3],
                pool: Some(PoolSpec {
                    kernel: [3, 3, 3],
                    stride: [2, 2, 2],
                    padding: [1, 1, 1],
                }),
            },
            stages: (0..4)
                .map(|i| StageSpec {
                    blocks: blocks[i],
                    channels: widths[i],
                    stride: if i == 0 { [1, 1, 1] } else { [2, 2, 2] },
                })
                .collect(),
        }
    }

    /// 34-layer 3D ResNet (Simple blocks 3-4-6-3, widths 64..512, 7x7x7
    /// stem with (1,2,2) stride and a 3x3x3/2 max pool).
    pub fn r3d_34(placement: Placement) -> Self {
        Self::resnet(DepthKind::Simple, ConvKind::Full3d, [3, 4, 6, 3], placement)
    }

    /// 50-layer 3D ResNet (Bottleneck blocks 3-4-6-3, expansion 4).
    pub fn r3d_50(placement: Placement) -> Self {
        Self::resnet(DepthKind::Bottleneck, ConvKind::Full3d, [3, 4, 6, 3], placement)
    }

    pub fn r2plus1d_34(placement: Placement) -> Self {
        Self::resnet(DepthKind::Simple, ConvKind::TwoPlusOneD, [3, 4, 6, 3], placement)
    }

    pub fn r2plus1d_50(placement: Placement) -> Self {
        Self::resnet(DepthKind::Bottleneck, ConvKind::TwoPlusOneD, [3, 4, 6, 3], placement)
    }

    /// Two-stage network for desk-scale experiments: 3x3x3 stem with
    /// (1,2,2) stride, one Simple block per stage, widths 8 and 16.
    pub fn mini(in_channels: usize, num_classes: usize, placement: Placement) -> Self {
        NetworkSpec {
            in_channels,
            num_classes,
            depth_kind: DepthKind::Simple,
            conv_kind: ConvKind::Full3d,
            placement,
            srtg: SrtgConfig::default(),
            lstm_layers: 2,
            expansion: 4,
            stem: StemSpec {
                out_channels: 8,
                kernel: [3, 3, 3],
                stride: [1, 2, 2],
                padding: [1, 1, 1],
                pool: None,
            },
            stages: alloc::vec![
                StageSpec {
                    blocks: 1,
                    channels: 8,
                    stride: [1, 1, 1],
                },
                StageSpec {
                    blocks: 1,
                    channels: 16,
                    stride: [2, 2, 2],
                },
            ],
        }
    }
}
