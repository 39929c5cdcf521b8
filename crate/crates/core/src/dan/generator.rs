use candle_core::Tensor;

use super::DanConfig;
use crate::error::{Error, Result};
use crate::nn::{instance_norm, sigmoid, Conv2d, ConvSpec, ConvTranspose2d, Init, Scope};

/// Rejects anything that is not an `n x 3 x h x w` batch with `h`, `w`
/// divisible by 4.
pub fn check_image(x: &Tensor) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::Shape(format!("expected an n x 3 x h x w image batch, got {dims:?}")));
    }
    if dims[2] % 4 != 0 || dims[3] % 4 != 0 || dims[2] == 0 || dims[3] == 0 {
        return Err(Error::Shape(format!(
            "image height and width must be positive multiples of 4, got {}x{}",
            dims[2], dims[3]
        )));
    }
    Ok(())
}

/// The three convolution blocks shared by both generators and both encoders.
#[derive(Clone, Debug)]
pub struct Stem {
    blocks: [Conv2d; 3],
}

#[derive(Clone, Debug)]
pub struct StemOutput {
    /// Output of the second (first strided) block, `h/2 x w/2`.
    pub f_e2: Tensor,
    /// Output of the third block, `h/4 x w/4`.
    pub f_share: Tensor,
}

impl Stem {
    pub(crate) fn new(vs: &Scope, cfg: &DanConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let init = Init::Normal(cfg.init_std);
        Ok(Self {
            blocks: [
                Conv2d::new(&vs.pp("block1"), 3, c, ConvSpec::same(7), init)?,
                Conv2d::new(&vs.pp("block2"), c, 2 * c, ConvSpec::strided(3, 2, 1), init)?,
                Conv2d::new(&vs.pp("block3"), 2 * c, 4 * c, ConvSpec::strided(3, 2, 1), init)?,
            ],
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<StemOutput> {
        check_image(x)?;
        let block = |conv: &Conv2d, x: &Tensor| -> Result<Tensor> { Ok(instance_norm(&conv.forward(x)?)?.relu()?) };
        let f1 = block(&self.blocks[0], x)?;
        let f_e2 = block(&self.blocks[1], &f1)?;
        let f_share = block(&self.blocks[2], &f_e2)?;
        Ok(StemOutput { f_e2, f_share })
    }
}

/// `x + conv(relu(norm(conv(x))))`, with instance normalization optional.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    normalized: bool,
}

impl ResBlock {
    fn new(vs: &Scope, channels: usize, normalized: bool, init: Init) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&vs.pp("conv1"), channels, channels, ConvSpec::same(3), init)?,
            conv2: Conv2d::new(&vs.pp("conv2"), channels, channels, ConvSpec::same(3), init)?,
            normalized,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let norm = |t: Tensor| -> Result<Tensor> { if self.normalized { instance_norm(&t) } else { Ok(t) } };
        let h = norm(self.conv1.forward(x)?)?.relu()?;
        let h = norm(self.conv2.forward(&h)?)?;
        Ok((x + h)?)
    }
}

#[derive(Clone, Debug)]
pub struct ContentOutput {
    /// Attended, projected content feature `n x 4c x h/4 x w/4`.
    pub f_c: Tensor,
    /// Foreground probability per location, `n x 1 x h/4 x w/4`.
    pub mask: Tensor,
    pub f_e2: Tensor,
    /// Concatenated residual-block outputs, `n x (num_resblocks * 4c) x h/4 x w/4`.
    pub f_fused: Tensor,
    pub f_share: Tensor,
}

#[derive(Clone, Debug)]
pub struct StyleFeature {
    pub f_s: Tensor,
    pub f_share: Tensor,
}

/// One mapping direction: content encoder with spatial attention, style
/// encoder, and the decoder with the stem skip.
#[derive(Clone, Debug)]
pub struct Generator {
    stem: Stem,
    content_blocks: Vec<ResBlock>,
    attention_fc: Conv2d,
    projection: Conv2d,
    style_blocks: Vec<ResBlock>,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
    out: Conv2d,
}

impl Generator {
    pub(crate) fn new(vs: &Scope, stem: Stem, cfg: &DanConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let wide = 4 * c;
        let fused = cfg.num_resblocks * wide;
        let init = Init::Normal(cfg.init_std);
        let content_blocks = (0..cfg.num_resblocks)
            .map(|i| ResBlock::new(&vs.pp(format!("content.res{i}")), wide, false, init))
            .collect::<Result<Vec<_>>>()?;
        let style_blocks = (0..cfg.num_resblocks)
            .map(|i| ResBlock::new(&vs.pp(format!("style.res{i}")), wide, true, init))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stem,
            content_blocks,
            attention_fc: Conv2d::new(&vs.pp("content.attention_fc"), fused, 1, ConvSpec::same(1), init)?,
            projection: Conv2d::new(&vs.pp("content.projection"), fused, wide, ConvSpec::same(1), init)?,
            style_blocks,
            up1: ConvTranspose2d::upsample(&vs.pp("decoder.up1"), 2 * wide, 2 * c, 2, init)?,
            up2: ConvTranspose2d::upsample(&vs.pp("decoder.up2"), 2 * c, c, 2, init)?,
            out: Conv2d::new(&vs.pp("decoder.out"), c, 3, ConvSpec::same(7), init)?,
        })
    }

    pub fn stem(&self) -> &Stem {
        &self.stem
    }

    fn content_from_stem(&self, stem: &StemOutput) -> Result<ContentOutput> {
        let mut h = stem.f_share.clone();
        let mut outputs = Vec::with_capacity(self.content_blocks.len());
        for block in &self.content_blocks {
            h = block.forward(&h)?;
            outputs.push(h.clone());
        }
        let f_fused = Tensor::cat(&outputs, 1)?;
        let mask = sigmoid(&self.attention_fc.forward(&f_fused)?)?;
        let attended = f_fused.broadcast_mul(&mask)?;
        let f_c = self.projection.forward(&attended)?;
        Ok(ContentOutput {
            f_c,
            mask,
            f_e2: stem.f_e2.clone(),
            f_fused,
            f_share: stem.f_share.clone(),
        })
    }

    fn style_from_stem(&self, stem: &StemOutput) -> Result<StyleFeature> {
        let mut h = stem.f_share.clone();
        for block in &self.style_blocks {
            h = block.forward(&h)?;
        }
        Ok(StyleFeature { f_s: h, f_share: stem.f_share.clone() })
    }

    pub fn content_encode(&self, x: &Tensor) -> Result<ContentOutput> {
        self.content_from_stem(&self.stem.forward(x)?)
    }

    pub fn style_encode(&self, x: &Tensor) -> Result<StyleFeature> {
        self.style_from_stem(&self.stem.forward(x)?)
    }

    /// Both encoders over a single stem pass.
    pub fn encode(&self, x: &Tensor) -> Result<(ContentOutput, StyleFeature)> {
        let stem = self.stem.forward(x)?;
        Ok((self.content_from_stem(&stem)?, self.style_from_stem(&stem)?))
    }

    pub fn decode(&self, content: &ContentOutput, style: &StyleFeature) -> Result<Tensor> {
        let (cd, sd) = (content.f_c.dims(), style.f_s.dims());
        if cd.len() != 4 || sd.len() != 4 || cd[0] != sd[0] || cd[2..] != sd[2..] {
            return Err(Error::Shape(format!("content {cd:?} and style {sd:?} features disagree")));
        }
        let joined = Tensor::cat(&[&content.f_c, &style.f_s], 1)?;
        let up = instance_norm(&self.up1.forward(&joined)?)?.relu()?;
        if up.dims() != content.f_e2.dims() {
            return Err(Error::Shape(format!(
                "decoder configuration: first upsampling gives {:?} but the stem skip is {:?}",
                up.dims(),
                content.f_e2.dims()
            )));
        }
        let skipped = (up + &content.f_e2)?;
        let up = instance_norm(&self.up2.forward(&skipped)?)?.relu()?;
        Ok(self.out.forward(&up)?.tanh()?)
    }

    pub fn translate(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.translate_with_style(x)?.0)
    }

    /// Translation plus the style feature of the input, which the style loss reuses.
    pub fn translate_with_style(&self, x: &Tensor) -> Result<(Tensor, StyleFeature)> {
        let (content, style) = self.encode(x)?;
        let out = self.decode(&content, &style)?;
        Ok((out, style))
    }
}

/// Channel count of the fused residual feature.
pub fn fused_channels(cfg: &DanConfig) -> usize {
    cfg.num_resblocks * 4 * cfg.base_channels
}
