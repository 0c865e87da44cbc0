//! PK batch sampling, batch-hard triplet mining and the hinge triplet
//! loss with its gradient with respect to the embeddings.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gallery::GalleryIndex;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            p: 4,
            k: 4,
            margin: 0.3,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::invalid(format!(
                "P and K must both be at least 2 (got P={}, K={})",
                self.p, self.k
            )));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::invalid(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Draw `P` identities without replacement and `K` rows for each, indexed
/// into `index`. Identities with fewer than `K` rows are sampled with
/// replacement.
pub fn pk_sample(index: &GalleryIndex, cfg: &MiningConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in index.records.iter().enumerate() {
        by_id.entry(r.person_id).or_default().push(i);
    }
    if by_id.len() < cfg.p {
        return Err(Error::invalid(format!(
            "PK sampling needs {} identities, only {} available",
            cfg.p,
            by_id.len()
        )));
    }
    let ids: Vec<&Vec<usize>> = by_id.values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batch = Vec::with_capacity(cfg.p * cfg.k);
    for pick in sample(&mut rng, ids.len(), cfg.p) {
        let rows = ids[pick];
        if rows.len() >= cfg.k {
            batch.extend(sample(&mut rng, rows.len(), cfg.k).into_iter().map(|j| rows[j]));
        } else {
            batch.extend((0..cfg.k).map(|_| rows[rng.random_range(0..rows.len())]));
        }
    }
    Ok(batch)
}

/// For every anchor, the farthest same-label sample (excluding itself)
/// and the closest different-label sample. Ties go to the lowest index.
pub fn batch_hard(d: ArrayView2<'_, f64>, labels: &[u32]) -> Result<TripletSet> {
    let n = labels.len();
    if d.dim() != (n, n) {
        return Err(Error::shape(format!(
            "batch distances are {:?}, expected {n}x{n}",
            d.dim()
        )));
    }
    let mut triplets = Vec::with_capacity(n);
    for a in 0..n {
        let mut positive: Option<(usize, f64)> = None;
        let mut negative: Option<(usize, f64)> = None;
        for j in 0..n {
            let dist = d[[a, j]];
            if labels[j] == labels[a] {
                if j != a && positive.is_none_or(|(_, best)| dist > best) {
                    positive = Some((j, dist));
                }
            } else if negative.is_none_or(|(_, best)| dist < best) {
                negative = Some((j, dist));
            }
        }
        match (positive, negative) {
            (Some((p, _)), Some((ng, _))) => triplets.push(Triplet {
                anchor: a,
                positive: p,
                negative: ng,
            }),
            (None, _) => {
                return Err(Error::invalid(format!("anchor {a} has no positive in the batch")))
            }
            (_, None) => {
                return Err(Error::invalid(format!("anchor {a} has no negative in the batch")))
            }
        }
    }
    Ok(TripletSet { triplets })
}

fn diff_and_norm(e: ArrayView2<'_, f64>, i: usize, j: usize) -> (Vec<f64>, f64) {
    let diff: Vec<f64> = e.row(i).iter().zip(e.row(j).iter()).map(|(a, b)| a - b).collect();
    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    (diff, norm)
}

/// Mean hinge loss `max(0, d(a,p) − d(a,n) + margin)` over the triplets
/// and its (sub)gradient with respect to every embedding row.
pub fn triplet_loss_grad(
    e: ArrayView2<'_, f64>,
    t: &TripletSet,
    margin: f64,
) -> Result<(f64, Array2<f64>)> {
    if t.is_empty() {
        return Err(Error::invalid("triplet loss over an empty triplet set"));
    }
    let n = e.nrows();
    if let Some(bad) = t
        .triplets
        .iter()
        .find(|tr| tr.anchor >= n || tr.positive >= n || tr.negative >= n)
    {
        return Err(Error::invalid(format!(
            "triplet {bad:?} indexes outside {n} embeddings"
        )));
    }
    let scale = 1.0 / t.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(e.dim());
    for tr in &t.triplets {
        let (ap, d_ap) = diff_and_norm(e, tr.anchor, tr.positive);
        let (an, d_an) = diff_and_norm(e, tr.anchor, tr.negative);
        let hinge = d_ap - d_an + margin;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        // d‖x‖/dx = x/‖x‖, taken as zero at x = 0.
        let unit = |v: f64, norm: f64| if norm > 0.0 { v / norm } else { 0.0 };
        for k in 0..e.ncols() {
            let gp = scale * unit(ap[k], d_ap);
            let gn = scale * unit(an[k], d_an);
            grad[[tr.anchor, k]] += gp - gn;
            grad[[tr.positive, k]] -= gp;
            grad[[tr.negative, k]] += gn;
        }
    }
    Ok((loss * scale, grad))
}
