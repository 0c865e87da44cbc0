//! Camera-context analysis: per-camera mean offsets, a score for how
//! identity-agnostic those offsets are, offset removal, and the
//! per-camera residual transform `x + A_c x + b_c`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::ensemble::{load_tensors, save_tensors, NamedTensors, TensorManifest};
use crate::{Error, Result};

pub const CONSISTENCY_EPS: f64 = 1e-8;

/// Human-readable definition embedded in reports.
pub const CONSISTENCY_DEFINITION: &str = "mean over (camera, person) cells with samples of \
    |(cell mean - person mean) - offset_c| / (|offset_c| + 1e-8); 0 means every person \
    sees the same camera displacement";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CameraOffsets {
    pub global_mean: Vec<f64>,
    /// `mean(rows of camera c) − global mean`.
    pub offsets: BTreeMap<u32, Vec<f64>>,
    pub counts: BTreeMap<u32, usize>,
    pub consistency: f64,
}

impl CameraOffsets {
    /// `Σ_c count_c · offset_c`, zero up to rounding.
    pub fn weighted_sum(&self) -> Vec<f64> {
        let mut sum = vec![0.0; self.global_mean.len()];
        for (cam, off) in &self.offsets {
            let n = self.counts[cam] as f64;
            sum.iter_mut().zip(off).for_each(|(s, o)| *s += n * o);
        }
        sum
    }
}

fn check_rows(e: ArrayView2<'_, f64>, ids: &[u32], what: &str) -> Result<()> {
    if ids.len() != e.nrows() {
        return Err(Error::shape(format!(
            "{} {what} for {} embedding rows",
            ids.len(),
            e.nrows()
        )));
    }
    Ok(())
}

fn mean_of(e: ArrayView2<'_, f64>, rows: &[usize]) -> Array1<f64> {
    let mut m = Array1::zeros(e.ncols());
    for &r in rows {
        m += &e.row(r);
    }
    m / rows.len() as f64
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

fn group(ids: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut g: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        g.entry(id).or_default().push(i);
    }
    g
}

pub fn camera_offsets(
    e: ArrayView2<'_, f64>,
    camids: &[u32],
    pids: &[u32],
) -> Result<CameraOffsets> {
    if e.nrows() == 0 {
        return Err(Error::invalid("camera offsets of an empty embedding set"));
    }
    check_rows(e, camids, "camera ids")?;
    check_rows(e, pids, "person ids")?;
    let all: Vec<usize> = (0..e.nrows()).collect();
    let global = mean_of(e, &all);

    let by_cam = group(camids);
    let offsets: BTreeMap<u32, Array1<f64>> = by_cam
        .iter()
        .map(|(&c, rows)| (c, mean_of(e, rows) - &global))
        .collect();

    let person_means: BTreeMap<u32, Array1<f64>> = group(pids)
        .iter()
        .map(|(&p, rows)| (p, mean_of(e, rows)))
        .collect();
    let mut cells: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, (&c, &p)) in camids.iter().zip(pids).enumerate() {
        cells.entry((c, p)).or_default().push(i);
    }
    let total: f64 = cells
        .iter()
        .map(|(&(c, p), rows)| {
            let shift = mean_of(e, rows) - &person_means[&p];
            let off = &offsets[&c];
            norm((&shift - off).view()) / (norm(off.view()) + CONSISTENCY_EPS)
        })
        .sum();

    Ok(CameraOffsets {
        global_mean: global.to_vec(),
        counts: by_cam.iter().map(|(&c, rows)| (c, rows.len())).collect(),
        offsets: offsets.into_iter().map(|(c, o)| (c, o.to_vec())).collect(),
        consistency: total / cells.len() as f64,
    })
}

/// Subtract each row's camera offset.
pub fn camera_normalize(
    e: ArrayView2<'_, f64>,
    offsets: &CameraOffsets,
    camids: &[u32],
) -> Result<Array2<f64>> {
    check_rows(e, camids, "camera ids")?;
    let mut out = e.to_owned();
    for (mut row, cam) in out.axis_iter_mut(Axis(0)).zip(camids) {
        let off = offsets.offsets.get(cam).ok_or(Error::UnknownCamera(*cam))?;
        if off.len() != row.len() {
            return Err(Error::shape(format!(
                "offset dimension {} != embedding dimension {}",
                off.len(),
                row.len()
            )));
        }
        row.iter_mut().zip(off).for_each(|(x, o)| *x -= o);
    }
    Ok(out)
}

/// Per-camera affine residual parameters shared by every identity.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraResidualParams {
    dim: usize,
    layers: BTreeMap<u32, (Array2<f64>, Array1<f64>)>,
}

impl CameraResidualParams {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            layers: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, camera: u32, weight: Array2<f64>, bias: Array1<f64>) -> Result<()> {
        if weight.dim() != (self.dim, self.dim) || bias.len() != self.dim {
            return Err(Error::shape(format!(
                "camera {camera}: weight {:?} and bias {} do not match dimension {}",
                weight.dim(),
                bias.len(),
                self.dim
            )));
        }
        self.layers.insert(camera, (weight, bias));
        Ok(())
    }

    pub fn cameras(&self) -> impl Iterator<Item = u32> + '_ {
        self.layers.keys().copied()
    }

    fn tensor_names(camera: u32) -> (String, String) {
        (format!("camera_{camera}.weight"), format!("camera_{camera}.bias"))
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let mut tensors = NamedTensors::new();
        for (&c, (w, b)) in &self.layers {
            let (wn, bn) = Self::tensor_names(c);
            tensors.insert(wn, w.clone().into_dyn());
            tensors.insert(bn, b.clone().into_dyn());
        }
        save_tensors(
            manifest_path,
            &tensors,
            TensorManifest {
                alpha: None,
                step: None,
                warmup: None,
                tensors: Vec::new(),
            },
        )
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (_, tensors) = load_tensors(manifest_path)?;
        let mut cameras = std::collections::BTreeSet::new();
        for name in tensors.keys() {
            let cam = name
                .strip_prefix("camera_")
                .and_then(|rest| rest.strip_suffix(".weight").or_else(|| rest.strip_suffix(".bias")))
                .and_then(|id| id.parse::<u32>().ok())
                .ok_or_else(|| Error::Tensor {
                    name: name.clone(),
                    reason: "expected camera_<id>.weight or camera_<id>.bias".into(),
                })?;
            cameras.insert(cam);
        }
        let mut params: Option<Self> = None;
        for cam in cameras {
            let (wn, bn) = Self::tensor_names(cam);
            let missing = |n: &str| Error::Tensor {
                name: n.to_string(),
                reason: "missing from manifest".into(),
            };
            let w = tensors.get(&wn).ok_or_else(|| missing(&wn))?;
            let b = tensors.get(&bn).ok_or_else(|| missing(&bn))?;
            let w = w
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::Tensor { name: wn.clone(), reason: e.to_string() })?;
            let b = b
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|e| Error::Tensor { name: bn.clone(), reason: e.to_string() })?;
            let p = params.get_or_insert_with(|| Self::new(b.len()));
            p.insert(cam, w, b)?;
        }
        params.ok_or_else(|| Error::invalid("camera residual manifest lists no cameras"))
    }
}

/// `row ← row + A_c·row + b_c` with `c` the row's camera.
pub fn apply_camera_residual(
    e: ArrayView2<'_, f64>,
    params: &CameraResidualParams,
    camids: &[u32],
) -> Result<Array2<f64>> {
    check_rows(e, camids, "camera ids")?;
    if e.ncols() != params.dim {
        return Err(Error::shape(format!(
            "embeddings have dimension {}, residual parameters {}",
            e.ncols(),
            params.dim
        )));
    }
    let mut out = e.to_owned();
    for (mut row, cam) in out.axis_iter_mut(Axis(0)).zip(camids) {
        let (w, b) = params.layers.get(cam).ok_or(Error::UnknownCamera(*cam))?;
        let delta = w.dot(&row) + b;
        row += &delta;
    }
    Ok(out)
}
