//! Attention-based siamese re-identification network.
//!
//! One backbone serves both branches of a pair. Its globally pooled feature
//! `f_g` is reweighted by a softmax over channels, added back to itself
//! through a shortcut and compressed by two fully connected layers into
//! `f_d`; the retrieval embedding is `[f_d, f_g]`. An identification head
//! classifies each branch and a verification head decides same/different
//! from the squared embedding difference.

mod backbone;
mod losses;

use std::path::PathBuf;

use candle_core::{DType, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout, Linear, ParamStore};

pub use backbone::{Backbone, BackboneConfig, BlockKind, StageConfig};
pub use losses::{attnet_total, cross_entropy, identification_loss, verification_loss, AttNetLossTerms};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttNetConfig {
    pub backbone: BackboneConfig,
    pub input_size: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub num_identities: usize,
    /// Checkpoint directory holding `backbone.*` tensors to start from.
    pub pretrained: Option<PathBuf>,
}

impl Default for AttNetConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::resnet50(),
            input_size: 224,
            hidden_dim: 1024,
            embed_dim: 512,
            dropout: 0.5,
            num_identities: 576,
            pretrained: None,
        }
    }
}

impl AttNetConfig {
    pub fn feature_dim(&self) -> usize {
        self.backbone.out_channels()
    }

    /// Length of the retrieval embedding `f_a`.
    pub fn embedding_dim(&self) -> usize {
        self.embed_dim + self.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.backbone.reduction();
        if self.input_size == 0 || self.input_size % r != 0 {
            return Err(Error::InvalidArgument(format!(
                "input_size {} must be a positive multiple of the backbone reduction {r}",
                self.input_size
            )));
        }
        if self.num_identities == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidArgument("attnet widths and num_identities must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Evaluation mode uses running statistics and no dropout; training mode
/// uses batch statistics and dropout drawn from the given generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Every intermediate of one forward pass, each `n x dim`.
#[derive(Clone, Debug)]
pub struct AttendedEmbedding {
    pub f_g: Tensor,
    pub mask: Tensor,
    pub f_m: Tensor,
    pub f_sum: Tensor,
    pub f_d: Tensor,
    pub f_a: Tensor,
}

pub struct AttNet {
    pub store: ParamStore,
    pub config: AttNetConfig,
    pub backbone: Backbone,
    pub attention_conv: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    pub id_classifier: Linear,
    pub verif_classifier: Linear,
}

impl std::fmt::Debug for AttNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttNet").field("config", &self.config).field("store", &self.store).finish()
    }
}

impl AttNet {
    /// Randomly initialized network; `config.pretrained` is not read here.
    pub fn new(config: &AttNetConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype, seed);
        let root = store.root();
        let c = config.feature_dim();
        let e = config.embedding_dim();
        let backbone = Backbone::new(&root.pp("backbone"), &config.backbone)?;
        let attention_conv = Linear::new(&root.pp("attention_conv"), c, c)?;
        let fc1 = Linear::new(&root.pp("fc1"), c, config.hidden_dim)?;
        let fc2 = Linear::new(&root.pp("fc2"), config.hidden_dim, config.embed_dim)?;
        let id_classifier = Linear::new(&root.pp("id_classifier"), e, config.num_identities)?;
        let verif_classifier = Linear::new(&root.pp("verif_classifier"), e, 2)?;
        Ok(Self { store, config: config.clone(), backbone, attention_conv, fc1, fc2, id_classifier, verif_classifier })
    }

    pub fn check_input(&self, img: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        let dims = img.dims();
        if dims.len() != 4 || dims[1] != 3 || dims[2] != s || dims[3] != s {
            return Err(Error::Shape(format!("expected an n x 3 x {s} x {s} batch, got {dims:?}")));
        }
        Ok(())
    }

    /// Globally pooled backbone feature `f_g`.
    pub fn pooled(&self, img: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(img)?;
        let map = self.backbone.forward(img, train)?;
        Ok(map.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    /// Everything after pooling.
    pub fn head(&self, f_g: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<AttendedEmbedding> {
        let mask = candle_nn::ops::softmax(&self.attention_conv.forward(f_g)?, D::Minus1)?;
        let f_m = (f_g * &mask)?;
        let f_sum = (f_g + &f_m)?;
        let hidden = dropout(&self.fc1.forward(&f_sum)?.relu()?, self.config.dropout, rng)?;
        let f_d = self.fc2.forward(&hidden)?;
        let f_a = Tensor::cat(&[&f_d, f_g], 1)?;
        Ok(AttendedEmbedding { f_g: f_g.clone(), mask, f_m, f_sum, f_d, f_a })
    }

    pub fn extract_embedding(&self, img: &Tensor, mode: Mode<'_>) -> Result<AttendedEmbedding> {
        let train = mode.is_train();
        let f_g = self.pooled(img, train)?;
        let rng = match mode {
            Mode::Train(rng) => Some(rng),
            Mode::Eval => None,
        };
        self.head(&f_g, rng)
    }

    pub fn id_logits(&self, e: &AttendedEmbedding) -> Result<Tensor> {
        self.id_classifier.forward(&e.f_a)
    }

    /// Two-way same/different scores from `(f_a1 - f_a2)^2`; column 1 is "same".
    pub fn verif_logits(&self, e1: &AttendedEmbedding, e2: &AttendedEmbedding) -> Result<Tensor> {
        let diff = (&e1.f_a - &e2.f_a)?.sqr()?;
        self.verif_classifier.forward(&diff)
    }
}
