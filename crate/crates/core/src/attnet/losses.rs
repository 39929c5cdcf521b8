use candle_core::{DType, Tensor, D};

use super::{AttNet, AttendedEmbedding, Mode};
use crate::error::{Error, Result};

/// Mean softmax cross-entropy of `logits` (`n x c`) at `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::from_vec(labels.to_vec(), (n, 1), logits.device())?;
    let picked = log_p.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

pub fn identification_loss(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    cross_entropy(logits, labels)
}

/// Two-way cross-entropy of the verification head; `same[i]` is 0 or 1.
pub fn verification_loss(net: &AttNet, e1: &AttendedEmbedding, e2: &AttendedEmbedding, same: &[u8]) -> Result<Tensor> {
    let targets: Vec<u32> = same.iter().map(|&s| u32::from(s != 0)).collect();
    cross_entropy(&net.verif_logits(e1, e2)?, &targets)
}

/// Equal-weight sum of the two objectives.
pub fn attnet_total(id: f64, verif: f64) -> f64 {
    id + verif
}

#[derive(Clone, Debug)]
pub struct AttNetLossTerms {
    /// Identification loss averaged over both branches.
    pub id: Tensor,
    pub verif: Tensor,
    pub total: Tensor,
}

impl AttNet {
    /// Joint loss of a pair batch: images `n x 3 x s x s` per branch.
    pub fn total_loss(
        &self,
        images_a: &Tensor,
        images_b: &Tensor,
        ids_a: &[u32],
        ids_b: &[u32],
        same: &[u8],
        mode: Mode<'_>,
    ) -> Result<AttNetLossTerms> {
        let n = images_a.dim(0)?;
        if images_b.dim(0)? != n || ids_a.len() != n || ids_b.len() != n || same.len() != n {
            return Err(Error::Shape(format!("pair batch of {n} has inconsistent components")));
        }
        // both branches go through the backbone together so that batch
        // statistics are shared
        let both = Tensor::cat(&[images_a, images_b], 0)?;
        let emb = self.extract_embedding(&both, mode)?;
        let ids: Vec<u32> = ids_a.iter().chain(ids_b).copied().collect();
        let id = identification_loss(&self.id_logits(&emb)?, &ids)?;
        let half = |t: &Tensor, i: usize| t.narrow(0, i * n, n);
        let split = |i: usize| -> Result<AttendedEmbedding> {
            Ok(AttendedEmbedding {
                f_g: half(&emb.f_g, i)?,
                mask: half(&emb.mask, i)?,
                f_m: half(&emb.f_m, i)?,
                f_sum: half(&emb.f_sum, i)?,
                f_d: half(&emb.f_d, i)?,
                f_a: half(&emb.f_a, i)?,
            })
        };
        let verif = verification_loss(self, &split(0)?, &split(1)?, same)?;
        let total = (&id + &verif)?;
        Ok(AttNetLossTerms { id, verif, total })
    }

    /// Evaluation-mode embeddings `f_a` of a batch, as host floats.
    pub fn embed(&self, img: &Tensor) -> Result<Vec<Vec<f32>>> {
        let e = self.extract_embedding(img, Mode::Eval)?;
        Ok(e.f_a.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }
}
