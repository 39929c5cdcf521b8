use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{instance_norm, leaky_relu, Conv2d, ConvSpec, Init, Scope};

/// Patch discriminator: four stride-2 4x4 convolutions then a 1-channel
/// score convolution, giving one score per receptive-field patch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    score: Conv2d,
}

impl Discriminator {
    pub(crate) fn new(vs: &Scope, base: usize, init_std: f64) -> Result<Self> {
        let init = Init::Normal(init_std);
        let widths = [base, 2 * base, 4 * base, 8 * base];
        let mut convs = Vec::with_capacity(widths.len());
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&vs.pp(format!("conv{i}")), c_in, w, ConvSpec::strided(4, 2, 1), init)?);
            c_in = w;
        }
        let score = Conv2d::new(&vs.pp("score"), c_in, 1, ConvSpec::same(3), init)?;
        Ok(Self { convs, score })
    }

    /// Score map `n x 1 x h/16 x w/16`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            // a 1x1 map has no spatial statistics to normalize
            if i > 0 && h.dim(2)? * h.dim(3)? > 1 {
                h = instance_norm(&h)?;
            }
            h = leaky_relu(&h, 0.2)?;
        }
        self.score.forward(&h)
    }
}
