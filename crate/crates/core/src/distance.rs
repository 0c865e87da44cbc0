//! Global distance metrics and stripe-level local distances.
//!
//! Local distances compare two sequences of stripe vectors. Each pair of
//! stripes contributes `squash(‖a_i − b_j‖)`, where
//! `squash(x) = (eˣ − 1)/(eˣ + 1)` maps `[0, ∞)` onto `[0, 1)`. The aligned
//! variant takes the cheapest monotone right/down path through that cost
//! grid; the one-to-one variant sums the diagonal.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, DISTANCE_MAGIC};
use crate::gallery::EmbeddingSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMode {
    DpAligned,
    OneToOne,
    None,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(format!("unknown metric {s:?}")),
        }
    }
}

impl fmt::Display for LocalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocalMode::DpAligned => "dp_aligned",
            LocalMode::OneToOne => "one_to_one",
            LocalMode::None => "none",
        })
    }
}

impl FromStr for LocalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dp_aligned" => Ok(LocalMode::DpAligned),
            "one_to_one" => Ok(LocalMode::OneToOne),
            "none" => Ok(LocalMode::None),
            _ => Err(format!("unknown local mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    pub metric: Metric,
    /// Weight of the local term in `global + lambda * local`.
    pub lambda: f64,
    pub local_mode: LocalMode,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            lambda: 1.0,
            local_mode: LocalMode::None,
        }
    }
}

/// Q×G matrix of non-negative, finite dissimilarities.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    values: Array2<f64>,
    tag: String,
}

impl DistanceMatrix {
    pub fn new(values: Array2<f64>, tag: impl Into<String>) -> Result<Self> {
        if let Some(((q, g), v)) = values
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::invalid(format!(
                "distance ({q}, {g}) = {v} is not a finite non-negative value"
            )));
        }
        Ok(Self {
            values,
            tag: tag.into(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn row(&self, q: usize) -> ArrayView1<'_, f64> {
        self.values.row(q)
    }

    /// Permute gallery columns: column `j` of the result is column
    /// `order[j]` of `self`.
    pub fn select_columns(&self, order: &[usize]) -> DistanceMatrix {
        DistanceMatrix {
            values: self.values.select(Axis(1), order),
            tag: self.tag.clone(),
        }
    }
}

fn euclidean_f32(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn cosine_f32(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    // Rounding can push the cosine just past ±1.
    (1.0 - dot / (na.sqrt() * nb.sqrt())).max(0.0)
}

pub fn pair_distance(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>, metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => euclidean_f32(a, b),
        Metric::Cosine => cosine_f32(a, b),
    }
}

fn build_matrix<F>(q: usize, g: usize, tag: String, f: F) -> Result<DistanceMatrix>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let rows: Vec<Vec<f64>> = (0..q)
        .into_par_iter()
        .map(|i| (0..g).map(|j| f(i, j)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let values = Array2::from_shape_vec((q, g), rows.into_iter().flatten().collect())
        .expect("rows have G entries each");
    DistanceMatrix::new(values, tag)
}

pub fn distance_matrix(
    queries: ArrayView2<'_, f32>,
    gallery: ArrayView2<'_, f32>,
    metric: Metric,
) -> Result<DistanceMatrix> {
    if queries.ncols() != gallery.ncols() {
        return Err(Error::shape(format!(
            "query dimension {} differs from gallery dimension {}",
            queries.ncols(),
            gallery.ncols()
        )));
    }
    build_matrix(queries.nrows(), gallery.nrows(), metric.to_string(), |i, j| {
        Ok(pair_distance(queries.row(i), gallery.row(j), metric))
    })
}

pub fn squash(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::invalid(format!("squash expects x >= 0, got {x}")));
    }
    // tanh(x/2) == (e^x - 1)/(e^x + 1) without overflow for large x.
    Ok((x / 2.0).tanh())
}

/// Grid of squashed stripe-to-stripe euclidean distances.
pub fn cost_grid(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!(
            "stripe dimension {} differs from {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::shape("stripe sequences must be non-empty"));
    }
    let mut grid = Array2::zeros((a.nrows(), b.nrows()));
    for ((i, j), c) in grid.indexed_iter_mut() {
        *c = squash(euclidean_f32(a.row(i), b.row(j)))?;
    }
    Ok(grid)
}

/// Accumulated-cost table of the right/down shortest path:
/// `d[i][j] = c[i][j] + min(d[i-1][j], d[i][j-1])`.
fn accumulate(grid: ArrayView2<'_, f64>) -> Array2<f64> {
    let (rows, cols) = grid.dim();
    let mut d = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => d[[0, j - 1]],
                (_, 0) => d[[i - 1, 0]],
                _ => f64::min(d[[i - 1, j]], d[[i, j - 1]]),
            };
            d[[i, j]] = grid[[i, j]] + best;
        }
    }
    d
}

/// Minimum total cost over monotone paths from the top-left to the
/// bottom-right cell, moving one row down or one column right per step.
pub fn min_path_cost(grid: ArrayView2<'_, f64>) -> Result<f64> {
    let (rows, cols) = grid.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::shape("cost grid must be non-empty"));
    }
    Ok(accumulate(grid)[[rows - 1, cols - 1]])
}

/// Cheapest path and its cells, start to end. When both predecessors
/// tie, the traceback prefers the cell above (the "down" move).
pub fn min_path(grid: ArrayView2<'_, f64>) -> Result<(f64, Vec<(usize, usize)>)> {
    let (rows, cols) = grid.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::shape("cost grid must be non-empty"));
    }
    let d = accumulate(grid);
    let (mut i, mut j) = (rows - 1, cols - 1);
    let mut path = vec![(i, j)];
    while (i, j) != (0, 0) {
        if i == 0 {
            j -= 1;
        } else if j == 0 || d[[i - 1, j]] <= d[[i, j - 1]] {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok((d[[rows - 1, cols - 1]], path))
}

pub fn aligned_distance(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> Result<f64> {
    min_path_cost(cost_grid(a, b)?.view())
}

pub fn one_to_one_distance(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::shape(format!(
            "one-to-one matching needs equal stripe counts, got {} and {}; use the aligned distance",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!(
            "stripe dimension {} differs from {}",
            a.ncols(),
            b.ncols()
        )));
    }
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| squash(euclidean_f32(x, y)))
        .sum()
}

pub fn local_distance_matrix(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    mode: LocalMode,
) -> Result<DistanceMatrix> {
    let (ql, gl) = match (queries.local(), gallery.local()) {
        (Some(q), Some(g)) => (q, g),
        _ => {
            return Err(Error::invalid(
                "local distances need local features on both sides",
            ))
        }
    };
    let f: fn(ArrayView2<'_, f32>, ArrayView2<'_, f32>) -> Result<f64> = match mode {
        LocalMode::DpAligned => aligned_distance,
        LocalMode::OneToOne => one_to_one_distance,
        LocalMode::None => return Err(Error::invalid("local mode `none` has no local distance")),
    };
    build_matrix(ql.dim().0, gl.dim().0, mode.to_string(), |i, j| {
        f(
            ql.index_axis(Axis(0), i),
            gl.index_axis(Axis(0), j),
        )
    })
}

pub fn combine_distances(
    global: &DistanceMatrix,
    local: &DistanceMatrix,
    lambda: f64,
) -> Result<DistanceMatrix> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if global.shape() != local.shape() {
        return Err(Error::shape(format!(
            "global distances are {:?}, local are {:?}",
            global.shape(),
            local.shape()
        )));
    }
    let values = &global.values + &(lambda * &local.values);
    DistanceMatrix::new(values, format!("{}+{}*{}", global.tag, lambda, local.tag))
}

/// Global metric, plus the weighted local term unless `local_mode` is `none`.
pub fn compute_distances(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    cfg: &DistanceConfig,
) -> Result<DistanceMatrix> {
    let global = distance_matrix(queries.global().view(), gallery.global().view(), cfg.metric)?;
    if cfg.local_mode == LocalMode::None {
        return Ok(global);
    }
    let local = local_distance_matrix(queries, gallery, cfg.local_mode)?;
    combine_distances(&global, &local, cfg.lambda)
}

/// Stored as f32 in the `RDMX` container (N = Q, D = G, no local block).
pub fn encode_distances(d: &DistanceMatrix) -> Result<Vec<u8>> {
    let narrowed = d.values.mapv(|v| v as f32);
    container::encode(DISTANCE_MAGIC, narrowed.view(), None)
}

pub fn decode_distances(bytes: &[u8]) -> Result<DistanceMatrix> {
    let (values, local) = container::decode(DISTANCE_MAGIC, bytes)?;
    if local.is_some() {
        return Err(Error::shape("distance container must not carry a local block"));
    }
    DistanceMatrix::new(values.mapv(f64::from), "stored")
}

pub fn read_distances(path: impl AsRef<Path>) -> Result<DistanceMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_distances(&bytes)
}

pub fn write_distances(path: impl AsRef<Path>, d: &DistanceMatrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_distances(d)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        let d = distance_matrix(array![[0.0f32, 0.0]].view(), array![[3.0f32, 4.0]].view(), Metric::Euclidean).unwrap();
        assert_eq!(d.values()[[0, 0]], 5.0);

        let a = array![[1.0f32, 2.0, 3.0]];
        let d = distance_matrix(a.view(), a.view(), Metric::Cosine).unwrap();
        assert!(d.values()[[0, 0]].abs() < 1e-12);

        let d = distance_matrix(array![[1.0f32, 0.0]].view(), array![[0.0f32, 2.0], [0.0, 0.0]].view(), Metric::Cosine).unwrap();
        assert_eq!(d.values()[[0, 0]], 1.0);
        assert_eq!(d.values()[[0, 1]], 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(distance_matrix(array![[0.0f32]].view(), array![[0.0f32, 1.0]].view(), Metric::Euclidean).is_err());
    }

    #[test]
    fn squash_values() {
        assert_eq!(squash(0.0).unwrap(), 0.0);
        assert!((squash(3f64.ln()).unwrap() - 0.5).abs() < 1e-15);
        assert!(squash(-1e-3).is_err());
        assert!(squash(f64::NAN).is_err());
        assert!(squash(1e4).unwrap() <= 1.0);
    }

    #[test]
    fn dp_on_hand_grid() {
        let grid = array![[0.1, 0.9], [0.2, 0.3]];
        // Right-then-down: 0.1 + 0.9 + 0.3 = 1.3. Down-then-right: 0.1 + 0.2 + 0.3 = 0.6.
        let (cost, path) = min_path(grid.view()).unwrap();
        assert!((cost - 0.6).abs() < 1e-12);
        assert_eq!(path, vec![(0, 0), (1, 0), (1, 1)]);
        assert!((min_path_cost(grid.view()).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn dp_ties_prefer_down() {
        // The "down" predecessor of (1, 1) is (0, 1), the cell above it.
        let grid = Array2::<f64>::zeros((2, 2));
        let (_, path) = min_path(grid.view()).unwrap();
        assert_eq!(path, vec![(0, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn identical_stripes_give_zero() {
        let a = array![[0.5f32, 1.0], [0.5, 1.0], [0.5, 1.0]];
        let b = array![[0.5f32, 1.0], [0.5, 1.0]];
        assert_eq!(aligned_distance(a.view(), b.view()).unwrap(), 0.0);
        assert_eq!(one_to_one_distance(a.view(), a.view()).unwrap(), 0.0);
    }

    #[test]
    fn one_to_one_sums_diagonal() {
        // Stripe distances chosen so squash gives 0.1 and 0.3 on the diagonal.
        let x0 = 2.0 * 0.1f64.atanh();
        let x1 = 2.0 * 0.3f64.atanh();
        let a = array![[0.0f32], [0.0]];
        let b = array![[x0 as f32], [x1 as f32]];
        assert!((one_to_one_distance(a.view(), b.view()).unwrap() - 0.4).abs() < 1e-6);
        let c = Array2::<f32>::zeros((4, 1));
        assert!(one_to_one_distance(Array2::<f32>::zeros((3, 1)).view(), c.view()).is_err());
    }

    fn set(local: Array3<f32>) -> EmbeddingSet {
        let n = local.dim().0;
        EmbeddingSet::new(Array2::zeros((n, 1)), Some(local)).unwrap()
    }

    #[test]
    fn local_matrix_matches_scalar_ops() {
        let q = Array3::from_shape_fn((2, 3, 2), |(i, s, k)| (i * 7 + s * 3 + k) as f32 * 0.1);
        let g = Array3::from_shape_fn((2, 3, 2), |(i, s, k)| (i * 5 + s + k * 2) as f32 * 0.13);
        let (qs, gs) = (set(q.clone()), set(g.clone()));
        for mode in [LocalMode::DpAligned, LocalMode::OneToOne] {
            let m = local_distance_matrix(&qs, &gs, mode).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let (a, b) = (q.index_axis(Axis(0), i), g.index_axis(Axis(0), j));
                    let expect = match mode {
                        LocalMode::DpAligned => aligned_distance(a, b),
                        _ => one_to_one_distance(a, b),
                    }
                    .unwrap();
                    assert_eq!(m.values()[[i, j]], expect);
                }
            }
        }
        let same = local_distance_matrix(&qs, &qs, LocalMode::OneToOne).unwrap();
        assert!((0..2).all(|i| same.values()[[i, i]] == 0.0));
    }

    #[test]
    fn modes_agree_with_one_stripe() {
        let q = set(Array3::from_shape_fn((3, 1, 4), |(i, _, k)| (i + k) as f32));
        let g = set(Array3::from_shape_fn((2, 1, 4), |(i, _, k)| (i * k) as f32 * 0.5));
        let a = local_distance_matrix(&q, &g, LocalMode::DpAligned).unwrap();
        let b = local_distance_matrix(&q, &g, LocalMode::OneToOne).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn missing_local_features() {
        let s = EmbeddingSet::global_only(Array2::zeros((1, 2))).unwrap();
        assert!(local_distance_matrix(&s, &s, LocalMode::DpAligned).is_err());
    }

    #[test]
    fn combine_cases() {
        let dg = DistanceMatrix::new(array![[1.0, 2.0], [3.0, 0.5]], "g").unwrap();
        let dl = DistanceMatrix::new(array![[0.2, 0.7], [0.1, 0.4]], "l").unwrap();
        assert_eq!(combine_distances(&dg, &dl, 0.0).unwrap().values(), dg.values());
        assert_eq!(
            combine_distances(&dg, &dg, 1.0).unwrap().values(),
            &(2.0 * dg.values())
        );
        let wrong = DistanceMatrix::new(array![[0.0]], "x").unwrap();
        assert!(combine_distances(&dg, &wrong, 1.0).is_err());
    }

    #[test]
    fn combine_with_row_constant_local_keeps_argmin() {
        let dg = DistanceMatrix::new(array![[1.0, 0.2, 3.0], [0.4, 2.0, 0.1]], "g").unwrap();
        let dl = DistanceMatrix::new(array![[5.0, 5.0, 5.0], [0.3, 0.3, 0.3]], "l").unwrap();
        let argmin = |m: &DistanceMatrix, r: usize| {
            m.row(r).iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0
        };
        for lambda in [0.0, 0.5, 10.0] {
            let c = combine_distances(&dg, &dl, lambda).unwrap();
            assert_eq!(argmin(&c, 0), 1);
            assert_eq!(argmin(&c, 1), 2);
        }
    }

    #[test]
    fn rdmx_round_trip() {
        let d = DistanceMatrix::new(array![[0.5, 1.25], [2.0, 0.0]], "euclidean").unwrap();
        let back = decode_distances(&encode_distances(&d).unwrap()).unwrap();
        assert_eq!(back.values(), d.values());
        let bytes = encode_distances(&d).unwrap();
        assert_eq!(&bytes[..4], b"RDMX");
    }

    fn stripes(max: usize) -> impl Strategy<Value = Array2<f32>> {
        (1..=max).prop_flat_map(|s| {
            proptest::collection::vec(-2.0f32..2.0, s * 3)
                .prop_map(move |v| Array2::from_shape_vec((s, 3), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn aligned_is_symmetric(a in stripes(6), b in stripes(6)) {
            let ab = aligned_distance(a.view(), b.view()).unwrap();
            let ba = aligned_distance(b.view(), a.view()).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn aligned_bounded_by_border_path(a in stripes(6), b in stripes(6)) {
            let grid = cost_grid(a.view(), b.view()).unwrap();
            let (r, c) = grid.dim();
            let border: f64 = grid.row(0).sum() + (1..r).map(|i| grid[[i, c - 1]]).sum::<f64>();
            prop_assert!(aligned_distance(a.view(), b.view()).unwrap() <= border + 1e-12);
        }

        #[test]
        fn traceback_cost_matches(a in stripes(6), b in stripes(6)) {
            let grid = cost_grid(a.view(), b.view()).unwrap();
            let (cost, path) = min_path(grid.view()).unwrap();
            prop_assert_eq!(path.len(), grid.nrows() + grid.ncols() - 1);
            let along: f64 = path.iter().map(|&(i, j)| grid[[i, j]]).sum();
            prop_assert!((cost - along).abs() < 1e-12);
        }

        #[test]
        fn squash_is_monotone(x in 0.0f64..10.0, delta in 1e-3f64..10.0) {
            let y = x + delta;
            prop_assert!(squash(x).unwrap() < squash(y).unwrap());
        }

        #[test]
        fn euclidean_triangle_inequality(
            v in proptest::collection::vec(-10.0f32..10.0, 15)
        ) {
            let m = Array2::from_shape_vec((3, 5), v).unwrap();
            let d = distance_matrix(m.view(), m.view(), Metric::Euclidean).unwrap();
            let d = d.values();
            prop_assert!(d[[0, 2]] <= d[[0, 1]] + d[[1, 2]] + 1e-6);
            prop_assert!(d[[0, 1]] <= d[[0, 2]] + d[[2, 1]] + 1e-6);
            prop_assert!((0..3).all(|i| d[[i, i]] == 0.0));
            prop_assert_eq!(d[[0, 1]], d[[1, 0]]);
        }
    }
}
