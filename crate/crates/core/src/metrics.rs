//! Query/gallery evaluation: per-query ranking, average precision, the
//! CMC curve and their aggregation into an [`EvalReport`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::{DistanceConfig, DistanceMatrix};
use crate::gallery::{GalleryIndex, GalleryRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Drop gallery items sharing both person and camera with the query.
    pub cross_camera_filter: bool,
    pub max_rank: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            cross_camera_filter: true,
            max_rank: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub trials: usize,
    pub seed: u64,
    #[serde(rename = "mAP_mean")]
    pub map_mean: f64,
    #[serde(rename = "mAP_std")]
    pub map_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[r]` is the fraction of valid queries matched within rank `r + 1`.
    pub cmc: Vec<f64>,
    pub num_valid_queries: usize,
    pub num_queries: usize,
    /// Aligned with the query list; `None` marks an excluded query.
    pub per_query_ap: Vec<Option<f64>>,
    pub protocol: EvalProtocol,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub distance: Option<DistanceConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub random_baseline: Option<RandomBaseline>,
}

impl EvalReport {
    pub fn cmc_at(&self, rank: usize) -> Option<f64> {
        rank.checked_sub(1).and_then(|r| self.cmc.get(r).copied())
    }

    /// CMC non-decreasing and every value in [0, 1].
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.map) {
            return Err(Error::invalid(format!("mAP {} outside [0, 1]", self.map)));
        }
        if let Some(w) = self.cmc.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::invalid(format!(
                "CMC decreases between rank {} and {}",
                w + 1,
                w + 2
            )));
        }
        if let Some(v) = self.cmc.iter().find(|v| !in_unit(**v)) {
            return Err(Error::invalid(format!("CMC value {v} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Valid gallery indices sorted by ascending distance; ties keep gallery
/// order.
pub fn rank_gallery(row: &[f64], valid: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| valid[j]).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    order
}

/// Mean of precision@k over the ranks k holding a relevant item.
/// `None` when nothing is relevant.
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

pub fn cmc_curve(first_hit_ranks: &[usize], max_rank: usize) -> Result<Vec<f64>> {
    if max_rank == 0 {
        return Err(Error::invalid("max_rank must be at least 1"));
    }
    if first_hit_ranks.contains(&0) {
        return Err(Error::invalid("ranks are 1-based"));
    }
    let mut counts = vec![0usize; max_rank];
    for &r in first_hit_ranks {
        if r <= max_rank {
            counts[r - 1] += 1;
        }
    }
    let total = first_hit_ranks.len().max(1) as f64;
    let mut acc = 0usize;
    Ok(counts
        .iter()
        .map(|c| {
            acc += c;
            acc as f64 / total
        })
        .collect())
}

fn valid_mask(q: &GalleryRecord, gallery: &GalleryIndex, protocol: &EvalProtocol) -> Vec<bool> {
    gallery
        .records
        .iter()
        .map(|g| {
            !(protocol.cross_camera_filter
                && g.person_id == q.person_id
                && g.camera_id == q.camera_id)
        })
        .collect()
}

struct QueryOutcome {
    ap: f64,
    first_hit: usize,
}

fn check_shapes(queries: &GalleryIndex, gallery: &GalleryIndex, d: &DistanceMatrix) -> Result<()> {
    if d.shape() != (queries.len(), gallery.len()) {
        return Err(Error::shape(format!(
            "distance matrix is {:?} but there are {} queries and {} gallery items",
            d.shape(),
            queries.len(),
            gallery.len()
        )));
    }
    Ok(())
}

pub fn evaluate(
    queries: &GalleryIndex,
    gallery: &GalleryIndex,
    d: &DistanceMatrix,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    check_shapes(queries, gallery, d)?;
    if protocol.max_rank == 0 {
        return Err(Error::invalid("max_rank must be at least 1"));
    }
    let outcomes: Vec<Option<QueryOutcome>> = queries
        .records
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let valid = valid_mask(q, gallery, protocol);
            let row = d.row(qi).to_vec();
            let order = rank_gallery(&row, &valid);
            let relevance: Vec<bool> = order
                .iter()
                .map(|&j| gallery.records[j].person_id == q.person_id)
                .collect();
            let ap = average_precision(&relevance)?;
            let first_hit = relevance.iter().position(|&r| r).unwrap() + 1;
            Some(QueryOutcome { ap, first_hit })
        })
        .collect();

    let scored: Vec<&QueryOutcome> = outcomes.iter().flatten().collect();
    if scored.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let map = scored.iter().map(|o| o.ap).sum::<f64>() / scored.len() as f64;
    let ranks: Vec<usize> = scored.iter().map(|o| o.first_hit).collect();
    let report = EvalReport {
        map,
        cmc: cmc_curve(&ranks, protocol.max_rank)?,
        num_valid_queries: scored.len(),
        num_queries: queries.len(),
        per_query_ap: outcomes.iter().map(|o| o.as_ref().map(|o| o.ap)).collect(),
        protocol: *protocol,
        distance: None,
        random_baseline: None,
    };
    report.validate()?;
    Ok(report)
}

/// mAP of uniformly random rankings under the same protocol, estimated by
/// simulation. Only the positions of the relevant items matter, so each
/// trial samples those positions directly.
pub fn random_ranking_baseline(
    queries: &GalleryIndex,
    gallery: &GalleryIndex,
    protocol: &EvalProtocol,
    trials: usize,
    seed: u64,
) -> Result<RandomBaseline> {
    if trials < 2 {
        return Err(Error::invalid("random baseline needs at least 2 trials"));
    }
    // (valid items, relevant items) per query with at least one positive.
    let shapes: Vec<(usize, usize)> = queries
        .records
        .iter()
        .filter_map(|q| {
            let valid = valid_mask(q, gallery, protocol);
            let m = valid.iter().filter(|&&v| v).count();
            let r = gallery
                .records
                .iter()
                .zip(&valid)
                .filter(|(g, &v)| v && g.person_id == q.person_id)
                .count();
            (r > 0).then_some((m, r))
        })
        .collect();
    if shapes.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::new();
    let maps: Vec<f64> = (0..trials)
        .map(|_| {
            let total: f64 = shapes
                .iter()
                .map(|&(m, r)| {
                    positions.clear();
                    positions.extend(sample(&mut rng, m, r));
                    positions.sort_unstable();
                    positions
                        .iter()
                        .enumerate()
                        .map(|(k, &p)| (k + 1) as f64 / (p + 1) as f64)
                        .sum::<f64>()
                        / r as f64
                })
                .sum();
            total / shapes.len() as f64
        })
        .collect();
    let mean = maps.iter().sum::<f64>() / trials as f64;
    let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    Ok(RandomBaseline {
        trials,
        seed,
        map_mean: mean,
        map_std: var.sqrt(),
    })
}
