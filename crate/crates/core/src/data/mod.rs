//! Labeled image corpora: index types, on-disk layouts, the synthetic
//! two-domain generator, verification-pair sampling and image loading.

mod images;
mod layout;
mod pairs;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use images::{denormalize, load_image, load_image_batch, normalize, ImageBatch};
pub use layout::{load_dataset_index, load_veri776, Layout, LoadReport, VeriSplits};
pub use pairs::{sample_verification_pairs, sample_verification_pairs_with, PairBatch, PairIndices};
pub use synth::{
    generate_synthetic_domains, mean_brightness, render_synthetic_image, DomainStyle, SyntheticSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(rename = "path")]
    pub image_path: PathBuf,
    pub vehicle_id: u32,
    pub camera_id: u32,
    #[serde(rename = "domain")]
    pub domain_tag: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub split: Split,
    pub num_identities: usize,
    pub records: Vec<DatasetRecord>,
}

/// Image paths with every label stripped; the only view DAN training gets.
#[derive(Clone, Debug, Default)]
pub struct UnlabeledImages {
    pub paths: Vec<PathBuf>,
}

impl DatasetIndex {
    /// Builds an index whose identity count is derived from the records.
    pub fn new(split: Split, records: Vec<DatasetRecord>) -> Self {
        let num_identities = records.iter().map(|r| r.vehicle_id).collect::<BTreeSet<_>>().len();
        Self { split, num_identities, records }
    }

    pub fn empty(split: Split) -> Self {
        Self::new(split, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record count per identity, keyed by `vehicle_id`.
    pub fn identity_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.vehicle_id).or_insert(0) += 1;
        }
        counts
    }

    /// Record positions grouped by identity, in record order.
    pub fn by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups.entry(r.vehicle_id).or_default().push(i);
        }
        groups
    }

    pub fn unlabeled(&self) -> UnlabeledImages {
        UnlabeledImages { paths: self.records.iter().map(|r| r.image_path.clone()).collect() }
    }

    pub fn subset(&self, split: Split, positions: &[usize]) -> Self {
        Self::new(split, positions.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// First `per_id` images of each identity become queries, the rest gallery.
    pub fn split_query_gallery(&self, per_id: usize) -> (DatasetIndex, DatasetIndex) {
        let mut query = Vec::new();
        let mut gallery = Vec::new();
        for positions in self.by_identity().values() {
            for (k, &i) in positions.iter().enumerate() {
                if k < per_id {
                    query.push(i);
                } else {
                    gallery.push(i);
                }
            }
        }
        query.sort_unstable();
        gallery.sort_unstable();
        (self.subset(Split::Query, &query), self.subset(Split::Gallery, &gallery))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("index", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: DatasetIndex =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let distinct = index.records.iter().map(|r| r.vehicle_id).collect::<BTreeSet<_>>().len();
        if distinct != index.num_identities {
            return Err(Error::InvalidArgument(format!(
                "{}: num_identities is {} but records hold {distinct} distinct ids",
                path.display(),
                index.num_identities
            )));
        }
        Ok(index)
    }
}

/// Rewrites `vehicle_id`s of all given record sets into one dense namespace
/// `0..n`, preserving numeric order of the original ids.
pub(crate) fn remap_dense(sets: &mut [&mut Vec<DatasetRecord>]) -> usize {
    let ids: BTreeSet<u32> = sets.iter().flat_map(|s| s.iter().map(|r| r.vehicle_id)).collect();
    let map: BTreeMap<u32, u32> = ids.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
    for set in sets.iter_mut() {
        for r in set.iter_mut() {
            r.vehicle_id = map[&r.vehicle_id];
        }
    }
    map.len()
}
