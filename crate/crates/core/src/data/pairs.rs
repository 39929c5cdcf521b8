use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::images::{load_image_batch, ImageBatch};
use super::DatasetIndex;
use crate::error::{Error, Result};

/// Record positions of a verification batch (images not yet loaded).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairIndices {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub ids_a: Vec<u32>,
    pub ids_b: Vec<u32>,
    pub same_flags: Vec<u8>,
}

impl PairIndices {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.same_flags.iter().filter(|&&f| f == 1).count()
    }
}

#[derive(Clone, Debug)]
pub struct PairBatch {
    pub images_a: ImageBatch,
    pub images_b: ImageBatch,
    pub ids_a: Vec<u32>,
    pub ids_b: Vec<u32>,
    pub same_flags: Vec<u8>,
}

impl PairBatch {
    pub fn load(index: &DatasetIndex, pairs: &PairIndices, size: usize) -> Result<Self> {
        let pick = |pos: &[usize]| pos.iter().map(|&i| index.records[i].clone()).collect::<Vec<_>>();
        Ok(Self {
            images_a: load_image_batch(&pick(&pairs.a), size)?,
            images_b: load_image_batch(&pick(&pairs.b), size)?,
            ids_a: pairs.ids_a.clone(),
            ids_b: pairs.ids_b.clone(),
            same_flags: pairs.same_flags.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids_a.is_empty()
    }
}

pub fn sample_verification_pairs(
    index: &DatasetIndex,
    batch: usize,
    pos_ratio: f64,
    seed: u64,
) -> Result<PairIndices> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_verification_pairs_with(index, batch, pos_ratio, &mut rng)
}

/// Draws `batch` pairs of which `batch * pos_ratio` (stochastically rounded)
/// share an identity. Positive pairs use two distinct images of one identity;
/// negative pairs draw two distinct identities.
pub fn sample_verification_pairs_with(
    index: &DatasetIndex,
    batch: usize,
    pos_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PairIndices> {
    if !(0.0..=1.0).contains(&pos_ratio) {
        return Err(Error::InvalidArgument(format!("pos_ratio {pos_ratio} outside [0, 1]")));
    }
    let groups: Vec<(u32, Vec<usize>)> = index.by_identity().into_iter().collect();
    let exact = batch as f64 * pos_ratio;
    let mut positives = exact.floor() as usize;
    if rng.random::<f64>() < exact - exact.floor() {
        positives += 1;
    }
    let negatives = batch - positives;
    let multi: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].1.len() >= 2).collect();
    if positives > 0 && multi.is_empty() {
        return Err(Error::InsufficientData(format!(
            "positive pairs requested but none of the {} identities has 2 images",
            groups.len()
        )));
    }
    if negatives > 0 && groups.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "negative pairs need at least 2 identities, index has {}",
            groups.len()
        )));
    }

    let mut pairs: Vec<(usize, usize, u32, u32)> = Vec::with_capacity(batch);
    for _ in 0..positives {
        let (id, members) = &groups[multi[rng.random_range(0..multi.len())]];
        let i = rng.random_range(0..members.len());
        let mut j = rng.random_range(0..members.len() - 1);
        if j >= i {
            j += 1;
        }
        pairs.push((members[i], members[j], *id, *id));
    }
    for _ in 0..negatives {
        let ga = rng.random_range(0..groups.len());
        let mut gb = rng.random_range(0..groups.len() - 1);
        if gb >= ga {
            gb += 1;
        }
        let (ida, ma) = &groups[ga];
        let (idb, mb) = &groups[gb];
        pairs.push((ma[rng.random_range(0..ma.len())], mb[rng.random_range(0..mb.len())], *ida, *idb));
    }
    pairs.shuffle(rng);

    Ok(PairIndices {
        a: pairs.iter().map(|p| p.0).collect(),
        b: pairs.iter().map(|p| p.1).collect(),
        ids_a: pairs.iter().map(|p| p.2).collect(),
        ids_b: pairs.iter().map(|p| p.3).collect(),
        same_flags: pairs.iter().map(|p| u8::from(p.2 == p.3)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetRecord, Domain, Split};
    use std::path::PathBuf;

    fn index(ids: &[u32]) -> DatasetIndex {
        DatasetIndex::new(
            Split::Train,
            ids.iter()
                .enumerate()
                .map(|(n, &id)| DatasetRecord {
                    image_path: PathBuf::from(format!("{n}.png")),
                    vehicle_id: id,
                    camera_id: 0,
                    domain_tag: Domain::Source,
                })
                .collect(),
        )
    }

    fn toy() -> DatasetIndex {
        index(&[0, 0, 0, 1, 1, 2, 2, 2, 3, 3])
    }

    #[test]
    fn half_positive_batch() {
        let p = sample_verification_pairs(&toy(), 16, 0.5, 1).unwrap();
        assert_eq!(p.len(), 16);
        assert_eq!(p.positives(), 8);
        for i in 0..16 {
            assert_eq!(p.same_flags[i] == 1, p.ids_a[i] == p.ids_b[i]);
            assert_ne!(p.a[i], p.b[i]);
        }
    }

    #[test]
    fn zero_ratio_gives_only_negatives() {
        let p = sample_verification_pairs(&toy(), 12, 0.0, 4).unwrap();
        assert!(p.same_flags.iter().all(|&f| f == 0));
        // singletons are fine without positives
        assert!(sample_verification_pairs(&index(&[0, 1, 2]), 4, 0.0, 0).is_ok());
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let a = sample_verification_pairs(&toy(), 16, 0.3, 99).unwrap();
        let b = sample_verification_pairs(&toy(), 16, 0.3, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ids_a, b.ids_a);
    }

    #[test]
    fn deficiency_is_named() {
        let err = sample_verification_pairs(&index(&[0, 1, 2]), 4, 0.5, 0).unwrap_err();
        assert!(err.to_string().contains("2 images"), "{err}");
    }

    #[test]
    fn empirical_ratio_over_many_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for ratio in [0.25, 0.3, 0.5, 0.77] {
            let mut pos = 0;
            for _ in 0..1000 {
                let p = sample_verification_pairs_with(&toy(), 10, ratio, &mut rng).unwrap();
                let exact = 10.0 * ratio;
                assert!((p.positives() as f64 - exact).abs() <= 1.0);
                pos += p.positives();
            }
            let frac = pos as f64 / 10_000.0;
            assert!((frac - ratio).abs() <= 0.02, "ratio {ratio}: {frac}");
        }
    }
}
