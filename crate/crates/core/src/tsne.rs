//! Exact O(N²) t-SNE.
//!
//! Input affinities use a Gaussian kernel whose per-point bandwidth is
//! found by bisection so that each conditional row has the requested
//! perplexity (base-2 entropy). The embedding uses a Student-t kernel and
//! is optimised by gradient descent with momentum, per-coordinate gains
//! and early exaggeration.

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor applied to symmetric affinities before renormalising.
pub const AFFINITY_FLOOR: f64 = 1e-12;
const ENTROPY_TOL_BITS: f64 = 1e-10;
const MAX_BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches and exaggeration stops.
    pub switch_iteration: usize,
    pub exaggeration: f64,
    pub output_dims: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            switch_iteration: 250,
            exaggeration: 12.0,
            output_dims: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneOutput {
    pub embedding: Array2<f64>,
    /// KL divergence (without exaggeration) at the initial layout and
    /// after every iteration.
    pub kl_trace: Vec<f64>,
}

impl TsneOutput {
    pub fn initial_kl(&self) -> f64 {
        self.kl_trace[0]
    }

    pub fn final_kl(&self) -> f64 {
        *self.kl_trace.last().unwrap()
    }
}

fn squared_distances(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Conditional distribution for one point at precision `beta`, and its
/// entropy in bits. `dists` excludes the point itself.
fn conditional_row(dists: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = dists.iter().map(|&d| (-beta * (d - min)).exp()).collect();
    let z: f64 = p.iter().sum();
    let mut weighted = 0.0;
    for (pj, &d) in p.iter_mut().zip(dists) {
        *pj /= z;
        weighted += *pj * (d - min);
    }
    let nats = z.ln() + beta * weighted;
    (p, nats / std::f64::consts::LN_2)
}

/// Entropy in bits of a probability vector.
pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.log2()).sum::<f64>()
}

fn check_input(x: ArrayView2<'_, f64>, perplexity: f64) -> Result<()> {
    let n = x.nrows();
    if n < 3 {
        return Err(Error::invalid(format!("t-SNE needs at least 3 points, got {n}")));
    }
    if !(1.0..n as f64).contains(&perplexity) {
        return Err(Error::invalid(format!(
            "perplexity must be in [1, N) = [1, {n}), got {perplexity}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("t-SNE input contains non-finite values"));
    }
    let first = x.row(0);
    if x.outer_iter().all(|r| r == first) {
        return Err(Error::invalid("t-SNE input is degenerate: all rows are identical"));
    }
    Ok(())
}

/// Row-stochastic conditional affinities `P[i][j] = p_{j|i}` with zero
/// diagonal, and the per-point precisions `1 / (2σ_i²)`.
pub fn conditional_affinities(
    x: ArrayView2<'_, f64>,
    perplexity: f64,
) -> Result<(Array2<f64>, Vec<f64>)> {
    check_input(x, perplexity)?;
    let n = x.nrows();
    let d = squared_distances(x);
    let target = perplexity.log2();
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dists: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[[i, j]]).collect();
            let mean = dists.iter().sum::<f64>() / dists.len() as f64;
            let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let (mut row, mut h) = conditional_row(&dists, beta);
            for _ in 0..MAX_BISECTION_STEPS {
                if (h - target).abs() < ENTROPY_TOL_BITS {
                    break;
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_infinite() { beta * 2.0 } else { (lo + hi) / 2.0 };
                } else {
                    hi = beta;
                    beta = (lo + hi) / 2.0;
                }
                (row, h) = conditional_row(&dists, beta);
            }
            // Re-insert the zero self-affinity.
            row.insert(i, 0.0);
            (row, beta)
        })
        .collect();
    let mut p = Array2::zeros((n, n));
    let mut betas = Vec::with_capacity(n);
    for (i, (row, beta)) in rows.into_iter().enumerate() {
        p.row_mut(i).assign(&ndarray::Array1::from(row));
        betas.push(beta);
    }
    Ok((p, betas))
}

/// Symmetric joint affinities `(p_{j|i} + p_{i|j}) / 2N`, off-diagonal
/// entries floored at [`AFFINITY_FLOOR`] and renormalised to sum to one.
pub fn perplexity_affinities(x: ArrayView2<'_, f64>, perplexity: f64) -> Result<Array2<f64>> {
    let (c, _) = conditional_affinities(x, perplexity)?;
    Ok(symmetrize(c.view()))
}

pub fn symmetrize(conditional: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = conditional.nrows();
    let mut p = &conditional + &conditional.t();
    p /= 2.0 * n as f64;
    for ((i, j), v) in p.indexed_iter_mut() {
        *v = if i == j { 0.0 } else { v.max(AFFINITY_FLOOR) };
    }
    let total = p.sum();
    p / total
}

/// KL(P‖Q) and its gradient for a joint affinity matrix `p` with
/// `Q` from a Student-t kernel on `y`, scaling P by `scale` in the
/// gradient only (early exaggeration). Returns the true KL.
fn kl_grad_scaled(
    p: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    scale: f64,
) -> (f64, Array2<f64>) {
    let n = y.nrows();
    let dims = y.ncols();
    let w = {
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let d2: f64 = (0..dims).map(|k| (y[[i, k]] - y[[j, k]]).powi(2)).sum();
                let v = 1.0 / (1.0 + d2);
                w[[i, j]] = v;
                w[[j, i]] = v;
            }
        }
        w
    };
    let z: f64 = w.sum();
    let per_row: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut kl = 0.0;
            let mut g = vec![0.0; dims];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let q = w[[i, j]] / z;
                let pij = p[[i, j]];
                if pij > 0.0 {
                    kl += pij * (pij / q).ln();
                }
                let coeff = 4.0 * (scale * pij - q) * w[[i, j]];
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk += coeff * (y[[i, k]] - y[[j, k]]);
                }
            }
            (kl, g)
        })
        .collect();
    let mut grad = Array2::zeros((n, dims));
    let mut kl = 0.0;
    for (i, (row_kl, g)) in per_row.into_iter().enumerate() {
        kl += row_kl;
        grad.row_mut(i).assign(&ndarray::Array1::from(g));
    }
    (kl, grad)
}

pub fn kl_and_gradient(p: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    let n = y.nrows();
    if p.dim() != (n, n) {
        return Err(Error::shape(format!(
            "affinities are {:?} but the embedding has {n} points",
            p.dim()
        )));
    }
    if n < 2 {
        return Err(Error::shape("KL needs at least two points"));
    }
    Ok(kl_grad_scaled(p, y, 1.0))
}

pub fn run_tsne(x: ArrayView2<'_, f64>, params: &TsneParams) -> Result<TsneOutput> {
    if params.iterations == 0 {
        return Err(Error::invalid("t-SNE needs at least one iteration"));
    }
    if params.output_dims == 0 {
        return Err(Error::invalid("t-SNE output dimension must be positive"));
    }
    let p = perplexity_affinities(x, params.perplexity)?;
    let n = x.nrows();
    let dims = params.output_dims;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Array2::from_shape_fn((n, dims), |_| normal.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, dims));
    let mut gains = Array2::<f64>::ones((n, dims));
    let mut kl_trace = Vec::with_capacity(params.iterations + 1);

    for it in 0..params.iterations {
        let early = it < params.switch_iteration;
        let scale = if early { params.exaggeration } else { 1.0 };
        let momentum = if early {
            params.initial_momentum
        } else {
            params.final_momentum
        };
        let (kl, grad) = kl_grad_scaled(p.view(), y.view(), scale);
        kl_trace.push(kl);
        ndarray::Zip::from(&mut gains)
            .and(&grad)
            .and(&update)
            .for_each(|g, &dy, &u| {
                *g = if (dy > 0.0) != (u > 0.0) {
                    *g + 0.2
                } else {
                    (*g * 0.8).max(0.01)
                };
            });
        ndarray::Zip::from(&mut update)
            .and(&gains)
            .and(&grad)
            .for_each(|u, &g, &dy| *u = momentum * *u - params.learning_rate * g * dy);
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("n >= 3");
        y -= &mean;
    }
    kl_trace.push(kl_grad_scaled(p.view(), y.view(), 1.0).0);
    Ok(TsneOutput {
        embedding: y,
        kl_trace,
    })
}

/// Fraction of each point's `k` nearest neighbours (euclidean, self
/// excluded, ties by index) that share its label, averaged over points.
pub fn knn_label_purity(y: ArrayView2<'_, f64>, labels: &[u32], k: usize) -> Result<f64> {
    let n = y.nrows();
    if labels.len() != n || k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "purity needs {n} labels and 0 < k < {n}, got {} labels and k = {k}",
            labels.len()
        )));
    }
    let d = squared_distances(y);
    let total: f64 = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| d[[i, a]].total_cmp(&d[[i, b]]));
            others[..k].iter().filter(|&&j| labels[j] == labels[i]).count() as f64 / k as f64
        })
        .sum();
    Ok(total / n as f64)
}
