use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{Discriminator, Generator, StyleFeature};
use crate::error::{Error, Result};
use crate::nn::scalar;

/// Per-sample Gram matrix: `n x c x h x w` -> `n x c x c`, unnormalized.
pub fn gram(feature: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = feature.dims4()?;
    let flat = feature.reshape((n, c, h * w))?;
    Ok(flat.matmul(&flat.t()?)?)
}

fn same_shape(label: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{label}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `(1/NM)||gram(a) - gram(b)||_F^2`, averaged over the batch.
fn gram_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = a.dims4()?;
    let diff = (gram(a)? - gram(b)?)?;
    let sq = diff.sqr()?.sum_all()?;
    Ok((sq / (n * c * h * w) as f64)?)
}

/// Style loss over the four style-encoder outputs: `sx = E_g(x)`,
/// `sy = E_g(y)`, `ty = E_f(y)`, `tx = E_f(x)`.
pub fn style_loss(sx: &Tensor, sy: &Tensor, tx: &Tensor, ty: &Tensor) -> Result<Tensor> {
    same_shape("style_loss sx/sy", sx, sy)?;
    same_shape("style_loss sx/tx", sx, tx)?;
    same_shape("style_loss tx/ty", tx, ty)?;
    Ok((gram_distance(sx, sy)? + gram_distance(ty, tx)?)?)
}

pub fn style_loss_features(sx: &StyleFeature, sy: &StyleFeature, tx: &StyleFeature, ty: &StyleFeature) -> Result<Tensor> {
    style_loss(&sx.f_s, &sy.f_s, &tx.f_s, &ty.f_s)
}

/// Least-squares adversarial terms computed from score maps.
pub fn lsgan_from_scores(real_scores: &Tensor, fake_scores: &Tensor) -> Result<(Tensor, Tensor)> {
    let l_gen = (fake_scores - 1.0)?.sqr()?.mean_all()?;
    let l_disc = ((real_scores - 1.0)?.sqr()?.mean_all()? + fake_scores.sqr()?.mean_all()?)?;
    Ok((l_gen, l_disc))
}

#[derive(Clone, Debug)]
pub struct AdversarialLosses {
    /// Generator term; gradients reach the generator through `fake`.
    pub gen: Tensor,
    /// Discriminator term on `fake` detached from the generator.
    pub disc: Tensor,
}

pub fn adversarial_losses(disc: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<AdversarialLosses> {
    let gen = (disc.forward(fake)? - 1.0)?.sqr()?.mean_all()?;
    let (_, disc_loss) = lsgan_from_scores(&disc.forward(real)?, &disc.forward(&fake.detach())?)?;
    Ok(AdversarialLosses { gen, disc: disc_loss })
}

fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("l1", a, b)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn cycle_loss(x: &Tensor, x_rec: &Tensor, y: &Tensor, y_rec: &Tensor) -> Result<Tensor> {
    Ok((l1(x_rec, x)? + l1(y_rec, y)?)?)
}

/// `mean|g(y) - y| + mean|f(x) - x|`.
pub fn identity_loss(g: &Generator, f: &Generator, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    identity_loss_from(x, &f.translate(x)?, y, &g.translate(y)?)
}

pub fn identity_loss_from(x: &Tensor, f_x: &Tensor, y: &Tensor, g_y: &Tensor) -> Result<Tensor> {
    Ok((l1(g_y, y)? + l1(f_x, x)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    pub lambda_style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cyc: 10.0, lambda_id: 5.0, lambda_style: 1.0 }
    }
}

/// Scalar loss components of one DAN step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DanLossParts {
    pub l_adv_g: f64,
    pub l_adv_f: f64,
    pub l_disc_s: f64,
    pub l_disc_t: f64,
    pub l_cyc: f64,
    pub l_id: f64,
    pub l_style: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DanLossReport {
    pub l_adv_g: f64,
    pub l_adv_f: f64,
    pub l_disc_s: f64,
    pub l_disc_t: f64,
    pub l_cyc: f64,
    pub l_id: f64,
    pub l_style: f64,
    /// Generator objective; discriminator terms are excluded.
    pub total: f64,
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    pub lambda_style: f64,
}

impl DanLossReport {
    /// Component-wise mean of several reports.
    pub fn mean(reports: &[DanLossReport]) -> Option<DanLossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&DanLossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(DanLossReport {
            l_adv_g: avg(|r| r.l_adv_g),
            l_adv_f: avg(|r| r.l_adv_f),
            l_disc_s: avg(|r| r.l_disc_s),
            l_disc_t: avg(|r| r.l_disc_t),
            l_cyc: avg(|r| r.l_cyc),
            l_id: avg(|r| r.l_id),
            l_style: avg(|r| r.l_style),
            total: avg(|r| r.total),
            ..*first
        })
    }
}

/// Weighted generator objective; aborts naming the first non-finite term.
pub fn dan_total_loss(parts: &DanLossParts, weights: &LossWeights) -> Result<DanLossReport> {
    let terms = [
        ("l_adv_g", parts.l_adv_g),
        ("l_adv_f", parts.l_adv_f),
        ("l_disc_s", parts.l_disc_s),
        ("l_disc_t", parts.l_disc_t),
        ("l_cyc", parts.l_cyc),
        ("l_id", parts.l_id),
        ("l_style", parts.l_style),
    ];
    if let Some((name, _)) = terms.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { term: (*name).to_string() });
    }
    let total = parts.l_adv_g
        + parts.l_adv_f
        + weights.lambda_cyc * parts.l_cyc
        + weights.lambda_id * parts.l_id
        + weights.lambda_style * parts.l_style;
    Ok(DanLossReport {
        l_adv_g: parts.l_adv_g,
        l_adv_f: parts.l_adv_f,
        l_disc_s: parts.l_disc_s,
        l_disc_t: parts.l_disc_t,
        l_cyc: parts.l_cyc,
        l_id: parts.l_id,
        l_style: parts.l_style,
        total,
        lambda_cyc: weights.lambda_cyc,
        lambda_id: weights.lambda_id,
        lambda_style: weights.lambda_style,
    })
}

/// Differentiable generator terms of one step, with the translations the
/// discriminator update needs.
#[derive(Clone, Debug)]
pub struct GeneratorTerms {
    pub adv_g: Tensor,
    pub adv_f: Tensor,
    pub cyc: Tensor,
    pub id: Tensor,
    pub style: Tensor,
    pub total: Tensor,
    /// `G(x)`, source translated to the target domain.
    pub fake_y: Tensor,
    /// `F(y)`, target translated to the source domain.
    pub fake_x: Tensor,
}

impl GeneratorTerms {
    pub fn parts(&self) -> Result<DanLossParts> {
        Ok(DanLossParts {
            l_adv_g: scalar(&self.adv_g)?,
            l_adv_f: scalar(&self.adv_f)?,
            l_cyc: scalar(&self.cyc)?,
            l_id: scalar(&self.id)?,
            l_style: scalar(&self.style)?,
            ..Default::default()
        })
    }
}
