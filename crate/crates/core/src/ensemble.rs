//! Mean-teacher self-ensembling: an exponential moving average of named
//! parameter tensors and an MSE consistency loss between teacher and
//! student embeddings.
//!
//! Persistence: a JSON manifest listing `(name, shape, file)` per tensor,
//! with each tensor stored in its own `REMB` container next to it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::container::{self, EMBEDDING_MAGIC};
use crate::{Error, Result};

pub type NamedTensors = BTreeMap<String, ArrayD<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    teacher: NamedTensors,
    alpha: f64,
    step: u64,
    warmup: bool,
}

impl EmaState {
    /// Start the teacher as a copy of `initial`.
    pub fn new(initial: NamedTensors, alpha: f64, warmup: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::invalid(format!("EMA decay must be in [0, 1), got {alpha}")));
        }
        Ok(Self {
            teacher: initial,
            alpha,
            step: 0,
            warmup,
        })
    }

    pub fn teacher(&self) -> &NamedTensors {
        &self.teacher
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn warmup(&self) -> bool {
        self.warmup
    }

    /// Decay used by the next update.
    pub fn effective_alpha(&self) -> f64 {
        if self.warmup {
            self.alpha.min(1.0 - 1.0 / (self.step as f64 + 1.0))
        } else {
            self.alpha
        }
    }

    /// `teacher ← α·teacher + (1 − α)·student` for every tensor. The
    /// student must carry exactly the teacher's names and shapes; nothing
    /// is modified if it does not.
    pub fn update(&mut self, student: &NamedTensors) -> Result<()> {
        for (name, t) in &self.teacher {
            let s = student.get(name).ok_or_else(|| Error::Tensor {
                name: name.clone(),
                reason: "missing from student".into(),
            })?;
            if s.shape() != t.shape() {
                return Err(Error::Tensor {
                    name: name.clone(),
                    reason: format!("student shape {:?} != teacher shape {:?}", s.shape(), t.shape()),
                });
            }
        }
        if let Some(extra) = student.keys().find(|k| !self.teacher.contains_key(*k)) {
            return Err(Error::Tensor {
                name: extra.clone(),
                reason: "not present in teacher".into(),
            });
        }
        let a = self.effective_alpha();
        for (name, t) in self.teacher.iter_mut() {
            t.zip_mut_with(&student[name], |t, &s| *t = a * *t + (1.0 - a) * s);
        }
        self.step += 1;
        Ok(())
    }
}

/// Mean squared error over all entries, and its gradient with respect to
/// the student (`2 (student − teacher) / (N·D)`). The teacher is constant.
pub fn consistency_loss_grad(
    teacher: ArrayView2<'_, f64>,
    student: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>)> {
    if teacher.dim() != student.dim() {
        return Err(Error::shape(format!(
            "teacher embeddings are {:?}, student embeddings are {:?}",
            teacher.dim(),
            student.dim()
        )));
    }
    let count = student.len();
    if count == 0 {
        return Err(Error::shape("consistency loss over empty embeddings"));
    }
    let diff = &student - &teacher;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count as f64;
    Ok((loss, diff * (2.0 / count as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warmup: Option<bool>,
    pub tensors: Vec<TensorEntry>,
}

/// Container rows/cols for an arbitrary shape: first axis by the rest.
fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [first, rest @ ..] => (*first, rest.iter().product()),
    }
}

pub fn encode_tensor(t: &ArrayD<f64>) -> Result<Vec<u8>> {
    let dims = matrix_dims(t.shape());
    let flat: Vec<f32> = t.iter().map(|&v| v as f32).collect();
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: i / dims.1.max(1),
            col: i % dims.1.max(1),
        });
    }
    let m = Array2::from_shape_vec(dims, flat).expect("dims cover every element");
    container::encode(EMBEDDING_MAGIC, m.view(), None)
}

pub fn decode_tensor(bytes: &[u8], shape: &[usize]) -> Result<ArrayD<f64>> {
    let (m, local) = container::decode(EMBEDDING_MAGIC, bytes)?;
    if local.is_some() || m.dim() != matrix_dims(shape) {
        return Err(Error::shape(format!(
            "stored tensor is {:?}, manifest shape {shape:?} needs {:?}",
            m.dim(),
            matrix_dims(shape)
        )));
    }
    let data: Vec<f64> = m.iter().map(|&v| f64::from(v)).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("element count checked"))
}

fn tensor_file_name(i: usize) -> String {
    format!("tensor_{i:04}.remb")
}

/// Write `tensors` next to `manifest_path`, one container per tensor.
pub fn save_tensors(
    manifest_path: &Path,
    tensors: &NamedTensors,
    mut manifest: TensorManifest,
) -> Result<()> {
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    manifest.tensors.clear();
    for (i, (name, t)) in tensors.iter().enumerate() {
        let file = tensor_file_name(i);
        let path = dir.join(&file);
        let bytes = encode_tensor(t).map_err(|e| Error::Tensor {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(manifest_path, json + "\n").map_err(|e| Error::io(manifest_path, e))
}

pub fn load_tensors(manifest_path: &Path) -> Result<(TensorManifest, NamedTensors)> {
    let text =
        std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: TensorManifest = serde_json::from_str(&text)?;
    let dir: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut tensors = NamedTensors::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let t = decode_tensor(&bytes, &entry.shape).map_err(|e| Error::Tensor {
            name: entry.name.clone(),
            reason: e.to_string(),
        })?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Tensor {
                name: entry.name.clone(),
                reason: "listed twice in manifest".into(),
            });
        }
    }
    Ok((manifest, tensors))
}

impl EmaState {
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        save_tensors(
            manifest_path,
            &self.teacher,
            TensorManifest {
                alpha: Some(self.alpha),
                step: Some(self.step),
                warmup: Some(self.warmup),
                tensors: Vec::new(),
            },
        )
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (m, tensors) = load_tensors(manifest_path)?;
        let alpha = m
            .alpha
            .ok_or_else(|| Error::invalid("EMA manifest lacks `alpha`"))?;
        let mut state = EmaState::new(tensors, alpha, m.warmup.unwrap_or(false))?;
        state.step = m.step.unwrap_or(0);
        Ok(state)
    }
}
