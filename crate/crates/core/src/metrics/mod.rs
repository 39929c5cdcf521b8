//! Retrieval scoring: distance matrices, average precision, mAP and CMC
//! under the VeRi-776 and VehicleID query/gallery protocols.

mod vehicleid;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetRecord;
use crate::embedding::Embeddings;
use crate::error::{Error, Result};

pub use vehicleid::{sample_vehicleid_split, vehicleid_multi_trial_eval, VehicleIdSplit, VEHICLEID_TEST_SIZES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Gallery entries with the query's identity and camera are ignored.
    VeriCrossCamera,
    VehicleidRandomGallery,
    Plain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub fn pairwise_distance(q: &Embeddings, g: &Embeddings, metric: Metric) -> Result<DistanceMatrix> {
    if q.rows() > 0 && g.rows() > 0 && q.dim() != g.dim() {
        return Err(Error::Shape(format!("query dim {} vs gallery dim {}", q.dim(), g.dim())));
    }
    let norms = |e: &Embeddings| (0..e.rows()).map(|i| dot(e.row(i), e.row(i)).sqrt()).collect::<Vec<_>>();
    let (qn, gn) = (norms(q), norms(g));
    let mut data = Vec::with_capacity(q.rows() * g.rows());
    for i in 0..q.rows() {
        for j in 0..g.rows() {
            let d = match metric {
                Metric::Cosine => {
                    let denom = qn[i] * gn[j];
                    // a zero vector is orthogonal to everything
                    let cos = if denom > 0.0 { dot(q.row(i), g.row(j)) / denom } else { 0.0 };
                    (1.0 - cos).clamp(0.0, 2.0)
                }
                Metric::Euclidean => (qn[i] * qn[i] + gn[j] * gn[j] - 2.0 * dot(q.row(i), g.row(j))).max(0.0).sqrt(),
            };
            data.push(d);
        }
    }
    Ok(DistanceMatrix { rows: q.rows(), cols: g.rows(), data })
}

/// `(1/R) sum over hits of precision at the hit`; `None` without relevant items.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k - 1]` is the rank-k match rate.
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// Queries without any valid relevant gallery item.
    pub num_skipped: usize,
    pub protocol: Protocol,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k.saturating_sub(1)).or(self.cmc.last()).copied().unwrap_or(0.0)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("eval report", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("k,rate\n");
        for (k, rate) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{},{rate}\n", k + 1));
        }
        out
    }
}

/// Gallery order for one query: ascending distance, ties by gallery index.
pub fn ranking(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

/// Scores precomputed distances. `max_rank` truncates the CMC curve, which
/// otherwise covers the whole gallery.
pub fn evaluate_distances(
    dist: &DistanceMatrix,
    queries: &[DatasetRecord],
    gallery: &[DatasetRecord],
    protocol: Protocol,
    max_rank: Option<usize>,
) -> Result<EvalReport> {
    if dist.rows != queries.len() || dist.cols != gallery.len() {
        return Err(Error::Shape(format!(
            "{}x{} distances for {} queries and {} gallery items",
            dist.rows,
            dist.cols,
            queries.len(),
            gallery.len()
        )));
    }
    if let Some(d) = dist.data.iter().find(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite distance {d}")));
    }
    let k_max = max_rank.unwrap_or(gallery.len()).min(gallery.len());
    let mut first_hits = vec![0usize; k_max];
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    for (i, q) in queries.iter().enumerate() {
        let relevance: Vec<bool> = ranking(dist.row(i))
            .into_iter()
            .filter(|&j| {
                let g = &gallery[j];
                !(protocol == Protocol::VeriCrossCamera && g.vehicle_id == q.vehicle_id && g.camera_id == q.camera_id)
            })
            .map(|j| gallery[j].vehicle_id == q.vehicle_id)
            .collect();
        let Some(ap) = average_precision(&relevance) else { continue };
        evaluated += 1;
        ap_sum += ap;
        let first = relevance.iter().position(|&r| r).expect("ap implies a hit");
        if first < k_max {
            first_hits[first] += 1;
        }
    }
    let skipped = queries.len() - evaluated;
    if skipped > 0 {
        log::warn!("{skipped} of {} queries have no valid match and were skipped", queries.len());
    }
    let denom = evaluated.max(1) as f64;
    let mut cmc = Vec::with_capacity(k_max);
    let mut acc = 0usize;
    for hits in first_hits {
        acc += hits;
        cmc.push(acc as f64 / denom);
    }
    Ok(EvalReport {
        map: ap_sum / denom,
        cmc,
        num_queries: evaluated,
        num_gallery: gallery.len(),
        num_skipped: skipped,
        protocol,
    })
}

/// Cosine-distance evaluation over the whole gallery.
pub fn evaluate(
    queries: &[DatasetRecord],
    gallery: &[DatasetRecord],
    q: &Embeddings,
    g: &Embeddings,
    protocol: Protocol,
) -> Result<EvalReport> {
    evaluate_with(queries, gallery, q, g, protocol, Metric::Cosine, None)
}

pub fn evaluate_with(
    queries: &[DatasetRecord],
    gallery: &[DatasetRecord],
    q: &Embeddings,
    g: &Embeddings,
    protocol: Protocol,
    metric: Metric,
    max_rank: Option<usize>,
) -> Result<EvalReport> {
    if q.rows() != queries.len() || g.rows() != gallery.len() {
        return Err(Error::Shape(format!(
            "{} query / {} gallery embeddings for {} / {} records",
            q.rows(),
            g.rows(),
            queries.len(),
            gallery.len()
        )));
    }
    evaluate_distances(&pairwise_distance(q, g, metric)?, queries, gallery, protocol, max_rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use proptest::prelude::*;

    fn rec(id: u32, cam: u32) -> DatasetRecord {
        DatasetRecord { image_path: "x.png".into(), vehicle_id: id, camera_id: cam, domain_tag: Domain::Target }
    }

    #[test]
    fn ap_fixtures() {
        assert_eq!(average_precision(&[true, true, false, false]), Some(1.0));
        assert!((average_precision(&[true, false, true]).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((average_precision(&[false, false, true]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn cosine_extremes() {
        let q = Embeddings::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let g = Embeddings::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0]]).unwrap();
        let d = pairwise_distance(&q, &g, Metric::Cosine).unwrap();
        assert!(d.get(0, 0).abs() < 1e-12);
        assert!((d.get(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn distances_match_double_loop() {
        let q = Embeddings::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.5, -0.7], vec![-0.4, 0.9, 0.1]]).unwrap();
        let g = Embeddings::from_rows(&[vec![1.5, 0.2, -0.3], vec![-2.0, 1.1, 0.6]]).unwrap();
        let cos = pairwise_distance(&q, &g, Metric::Cosine).unwrap();
        let euc = pairwise_distance(&q, &g, Metric::Euclidean).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let (a, b) = (q.row(i), g.row(j));
                let mut ab = 0.0f64;
                let mut aa = 0.0f64;
                let mut bb = 0.0f64;
                let mut sq = 0.0f64;
                for k in 0..3 {
                    let (x, y) = (a[k] as f64, b[k] as f64);
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                    sq += (x - y) * (x - y);
                }
                assert!((cos.get(i, j) - (1.0 - ab / (aa.sqrt() * bb.sqrt()))).abs() < 1e-6);
                assert!((euc.get(i, j) - sq.sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let q = Embeddings::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let g = Embeddings::from_rows(&[vec![1.0]]).unwrap();
        assert!(pairwise_distance(&q, &g, Metric::Cosine).is_err());
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let records: Vec<_> = (0..5).map(|i| rec(i, 0)).collect();
        let emb = Embeddings::from_rows(&(0..5).map(|i| {
            let mut v = vec![0.0; 5];
            v[i] = 1.0;
            v
        }).collect::<Vec<_>>()).unwrap();
        let r = evaluate(&records, &records, &emb, &emb, Protocol::Plain).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc[0], 1.0);
        assert_eq!(r.num_queries, 5);
    }

    #[test]
    fn cross_camera_filter_drops_same_camera_matches() {
        let q = [rec(0, 1)];
        let g = [rec(0, 1), rec(1, 2), rec(0, 3)];
        let dist = DistanceMatrix { rows: 1, cols: 3, data: vec![0.0, 0.5, 1.0] };
        let plain = evaluate_distances(&dist, &q, &g, Protocol::Plain, None).unwrap();
        assert_eq!(plain.cmc[0], 1.0);
        let veri = evaluate_distances(&dist, &q, &g, Protocol::VeriCrossCamera, None).unwrap();
        assert_eq!(veri.cmc, vec![0.0, 1.0, 1.0]);
        assert!((veri.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn queries_without_matches_are_counted() {
        let dist = DistanceMatrix { rows: 2, cols: 1, data: vec![0.1, 0.2] };
        let r = evaluate_distances(&dist, &[rec(0, 0), rec(5, 0)], &[rec(0, 1)], Protocol::Plain, None).unwrap();
        assert_eq!((r.num_queries, r.num_skipped), (1, 1));
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        assert_eq!(ranking(&[0.5, 0.1, 0.5, 0.1]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn report_serialization() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalReport { map: 0.5, cmc: vec![0.5, 1.0], num_queries: 2, num_gallery: 2, num_skipped: 0, protocol: Protocol::VeriCrossCamera };
        let path = dir.path().join("r.json");
        r.write_json(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"mAP\"") && text.contains("veri_cross_camera"));
        assert_eq!(EvalReport::read_json(&path).unwrap(), r);
        assert_eq!(r.cmc_csv(), "k,rate\n1,0.5\n2,1\n");
    }

    proptest! {
        #[test]
        fn cmc_is_monotone_and_bounded(
            dists in prop::collection::vec(0.0f64..2.0, 24),
            qids in prop::collection::vec(0u32..3, 4),
            gids in prop::collection::vec(0u32..3, 6),
        ) {
            let dist = DistanceMatrix { rows: 4, cols: 6, data: dists };
            let q: Vec<_> = qids.iter().map(|&i| rec(i, 0)).collect();
            let g: Vec<_> = gids.iter().map(|&i| rec(i, 1)).collect();
            let r = evaluate_distances(&dist, &q, &g, Protocol::Plain, None).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.map));
            prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
            if r.num_queries > 0 {
                prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
            }
        }

        #[test]
        fn gallery_permutation_preserves_scores(
            dists in prop::collection::vec(0.0f64..2.0, 12),
            gids in prop::collection::vec(0u32..2, 6),
            perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let q = vec![rec(0, 0), rec(1, 0)];
            let g: Vec<_> = gids.iter().map(|&i| rec(i, 1)).collect();
            let dist = DistanceMatrix { rows: 2, cols: 6, data: dists.clone() };
            let base = evaluate_distances(&dist, &q, &g, Protocol::Plain, None).unwrap();
            let pg: Vec<_> = perm.iter().map(|&j| g[j].clone()).collect();
            let pd: Vec<f64> = (0..2).flat_map(|i| perm.iter().map(|&j| dists[i * 6 + j]).collect::<Vec<_>>()).collect();
            let shuffled = evaluate_distances(&DistanceMatrix { rows: 2, cols: 6, data: pd }, &q, &pg, Protocol::Plain, None).unwrap();
            // continuous distances make ties vanishingly unlikely
            prop_assert!((base.map - shuffled.map).abs() < 1e-12);
            prop_assert_eq!(base.cmc, shuffled.cmc);
        }
    }
}
