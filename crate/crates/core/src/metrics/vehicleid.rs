use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate_distances, pairwise_distance, EvalReport, Metric, Protocol};
use crate::data::DatasetIndex;
use crate::embedding::Embeddings;
use crate::error::{Error, Result};

/// The four standard test-set sizes, in identities.
pub const VEHICLEID_TEST_SIZES: [usize; 4] = [800, 1600, 2400, 3200];

/// Record positions of one sampled trial.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VehicleIdSplit {
    pub gallery: Vec<usize>,
    pub probes: Vec<usize>,
}

/// Keeps the `test_size` smallest identities and draws one gallery image
/// for each; all their other images become probes.
pub fn sample_vehicleid_split(index: &DatasetIndex, test_size: usize, rng: &mut ChaCha8Rng) -> Result<VehicleIdSplit> {
    let groups = index.by_identity();
    if groups.len() < test_size || test_size == 0 {
        return Err(Error::InsufficientData(format!(
            "test size {test_size} needs that many identities, the index has {}",
            groups.len()
        )));
    }
    let mut gallery = Vec::with_capacity(test_size);
    let mut probes = Vec::new();
    for positions in groups.values().take(test_size) {
        let &pick = positions.choose(rng).expect("identity groups are non-empty");
        gallery.push(pick);
        probes.extend(positions.iter().copied().filter(|&p| p != pick));
    }
    probes.sort_unstable();
    Ok(VehicleIdSplit { gallery, probes })
}

/// Mean report over `trials` seeded gallery draws.
pub fn vehicleid_multi_trial_eval(
    index: &DatasetIndex,
    embeddings: &Embeddings,
    test_size: usize,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    if embeddings.rows() != index.len() {
        return Err(Error::Shape(format!("{} embeddings for {} records", embeddings.rows(), index.len())));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(trials);
    for _ in 0..trials {
        let split = sample_vehicleid_split(index, test_size, &mut rng)?;
        let pick = |pos: &[usize]| pos.iter().map(|&p| index.records[p].clone()).collect::<Vec<_>>();
        let dist = pairwise_distance(&embeddings.select(&split.probes), &embeddings.select(&split.gallery), Metric::Cosine)?;
        reports.push(evaluate_distances(
            &dist,
            &pick(&split.probes),
            &pick(&split.gallery),
            Protocol::VehicleidRandomGallery,
            None,
        )?);
    }
    let n = trials as f64;
    let k = reports[0].cmc.len();
    Ok(EvalReport {
        map: reports.iter().map(|r| r.map).sum::<f64>() / n,
        cmc: (0..k).map(|i| reports.iter().map(|r| r.cmc[i]).sum::<f64>() / n).collect(),
        num_queries: reports[0].num_queries,
        num_gallery: test_size,
        num_skipped: reports[0].num_skipped,
        protocol: Protocol::VehicleidRandomGallery,
    })
}
