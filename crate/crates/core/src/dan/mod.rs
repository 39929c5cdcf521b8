//! Dual-branch adversarial translation network.
//!
//! Two generators, `G: X -> Y` (source to target) and `F: Y -> X`, each made
//! of a content encoder with per-location attention over fused residual
//! features, a style encoder trained through Gram-matrix matching, and a
//! decoder with a skip from the stem. The stem's three convolution blocks are
//! one parameter set shared by both generators and both encoders. `D_T`
//! scores target-domain images (real `y` vs `G(x)`), `D_S` source-domain ones.

mod discriminator;
mod generator;
mod losses;
mod pool;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::ParamStore;

pub use discriminator::Discriminator;
pub use generator::{check_image, fused_channels, ContentOutput, Generator, ResBlock, Stem, StemOutput, StyleFeature};
pub use losses::{
    adversarial_losses, cycle_loss, dan_total_loss, gram, identity_loss, identity_loss_from, lsgan_from_scores,
    style_loss, style_loss_features, AdversarialLosses, DanLossParts, DanLossReport, GeneratorTerms, LossWeights,
};
pub use pool::ImagePool;

/// Architecture widths. The defaults reproduce the reference geometry
/// (64/128/256 stem, nine 256-channel residual blocks, 2304-d fused
/// feature); smaller `base_channels` keep CPU smoke runs cheap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DanConfig {
    pub base_channels: usize,
    pub num_resblocks: usize,
    pub disc_channels: usize,
    pub init_std: f64,
}

impl Default for DanConfig {
    fn default() -> Self {
        Self { base_channels: 64, num_resblocks: 9, disc_channels: 64, init_std: 0.02 }
    }
}

/// Parameter-name prefixes of the generator side (what the generator optimizer updates).
pub const GENERATOR_PREFIXES: [&str; 3] = ["stem.", "gen_g.", "gen_f."];
pub const DISCRIMINATOR_PREFIXES: [&str; 2] = ["disc_s.", "disc_t."];

pub struct Dan {
    pub store: ParamStore,
    pub config: DanConfig,
    pub g: Generator,
    pub f: Generator,
    pub d_s: Discriminator,
    pub d_t: Discriminator,
}

impl std::fmt::Debug for Dan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dan").field("config", &self.config).field("store", &self.store).finish()
    }
}

impl Dan {
    pub fn new(config: &DanConfig, dtype: DType, seed: u64) -> Result<Self> {
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let stem = Stem::new(&root.pp("stem"), config)?;
        let g = Generator::new(&root.pp("gen_g"), stem.clone(), config)?;
        let f = Generator::new(&root.pp("gen_f"), stem, config)?;
        let d_s = Discriminator::new(&root.pp("disc_s"), config.disc_channels, config.init_std)?;
        let d_t = Discriminator::new(&root.pp("disc_t"), config.disc_channels, config.init_std)?;
        Ok(Self { store, config: config.clone(), g, f, d_s, d_t })
    }

    /// All differentiable generator-side terms for source batch `x` and
    /// target batch `y`.
    pub fn generator_terms(&self, x: &Tensor, y: &Tensor, weights: &LossWeights) -> Result<GeneratorTerms> {
        let (fake_y, sx) = self.g.translate_with_style(x)?;
        let (fake_x, ty) = self.f.translate_with_style(y)?;
        let rec_x = self.f.translate(&fake_y)?;
        let rec_y = self.g.translate(&fake_x)?;
        let (idt_y, sy) = self.g.translate_with_style(y)?;
        let (idt_x, tx) = self.f.translate_with_style(x)?;

        let adv_g = (self.d_t.forward(&fake_y)? - 1.0)?.sqr()?.mean_all()?;
        let adv_f = (self.d_s.forward(&fake_x)? - 1.0)?.sqr()?.mean_all()?;
        let cyc = cycle_loss(x, &rec_x, y, &rec_y)?;
        let id = identity_loss_from(x, &idt_x, y, &idt_y)?;
        let style = style_loss_features(&sx, &sy, &tx, &ty)?;
        let total = (((&adv_g + &adv_f)? + (&cyc * weights.lambda_cyc)?)?
            + ((&id * weights.lambda_id)? + (&style * weights.lambda_style)?)?)?;
        Ok(GeneratorTerms { adv_g, adv_f, cyc, id, style, total, fake_y, fake_x })
    }

    /// `(l_disc_s, l_disc_t)` with fakes treated as constants.
    pub fn discriminator_losses(&self, x: &Tensor, y: &Tensor, fake_x: &Tensor, fake_y: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, l_disc_s) = lsgan_from_scores(&self.d_s.forward(x)?, &self.d_s.forward(&fake_x.detach())?)?;
        let (_, l_disc_t) = lsgan_from_scores(&self.d_t.forward(y)?, &self.d_t.forward(&fake_y.detach())?)?;
        Ok((l_disc_s, l_disc_t))
    }
}

#[cfg(test)]
mod tests;
