use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{max_pool_3x3_s2, BatchNorm2d, Conv2d, ConvSpec, Init, Scope};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand by 4.
    Bottleneck,
}

impl BlockKind {
    fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub width: usize,
    pub stride: usize,
}

/// Residual CNN: a strided 7x7 stem with 3x3 stride-2 max pooling (stage one), then
/// residual stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub block: BlockKind,
    pub stages: Vec<StageConfig>,
}

impl BackboneConfig {
    /// 50-layer bottleneck network: 7x7x2048 output at 224x224 input.
    pub fn resnet50() -> Self {
        let stage = |blocks, width, stride| StageConfig { blocks, width, stride };
        Self {
            stem_channels: 64,
            block: BlockKind::Bottleneck,
            stages: vec![stage(3, 64, 1), stage(4, 128, 2), stage(6, 256, 2), stage(3, 512, 2)],
        }
    }

    /// Two stages at 8 channels, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            block: BlockKind::Basic,
            stages: vec![StageConfig { blocks: 1, width: 8, stride: 1 }],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages
            .last()
            .map_or(self.stem_channels, |s| s.width * self.block.expansion())
    }

    /// Total spatial downsampling factor.
    pub fn reduction(&self) -> usize {
        4 * self.stages.iter().map(|s| s.stride).product::<usize>()
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(vs: &Scope, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let spec = ConvSpec::strided(kernel, stride, kernel / 2).no_bias();
        Ok(Self {
            conv: Conv2d::new(&vs.pp("conv"), c_in, c_out, spec, Init::Kaiming { fan_in: c_in * kernel * kernel })?,
            bn: BatchNorm2d::new(&vs.pp("bn"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, train)
    }
}

#[derive(Clone, Debug)]
struct Block {
    layers: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl Block {
    fn new(vs: &Scope, kind: BlockKind, c_in: usize, width: usize, stride: usize) -> Result<Self> {
        let c_out = width * kind.expansion();
        let layers = match kind {
            BlockKind::Basic => vec![
                ConvBn::new(&vs.pp("l0"), c_in, width, 3, stride)?,
                ConvBn::new(&vs.pp("l1"), width, width, 3, 1)?,
            ],
            BlockKind::Bottleneck => vec![
                ConvBn::new(&vs.pp("l0"), c_in, width, 1, 1)?,
                ConvBn::new(&vs.pp("l1"), width, width, 3, stride)?,
                ConvBn::new(&vs.pp("l2"), width, c_out, 1, 1)?,
            ],
        };
        let shortcut = if stride != 1 || c_in != c_out {
            Some(ConvBn::new(&vs.pp("shortcut"), c_in, c_out, 1, stride)?)
        } else {
            None
        };
        Ok(Self { layers, shortcut })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, train)?;
            if i != last {
                h = h.relu()?;
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvBn,
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn new(vs: &Scope, cfg: &BackboneConfig) -> Result<Self> {
        let stem = ConvBn::new(&vs.pp("stem"), 3, cfg.stem_channels, 7, 2)?;
        let mut blocks = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (si, stage) in cfg.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.stride } else { 1 };
                blocks.push(Block::new(&vs.pp(format!("stage{}.{bi}", si + 2)), cfg.block, c_in, stage.width, stride)?);
                c_in = stage.width * cfg.block.expansion();
            }
        }
        Ok(Self { stem, blocks })
    }

    /// `n x 3 x s x s` -> `n x c x s/r x s/r`.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.stem.forward(x, train)?.relu()?;
        let mut h = max_pool_3x3_s2(&h)?;
        for block in &self.blocks {
            h = block.forward(&h, train)?;
        }
        Ok(h)
    }
}
