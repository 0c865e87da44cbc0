//! Identities, cameras and images, plus persistence of embedding sets.
//!
//! A [`GalleryIndex`] fixes the canonical row order; an [`EmbeddingSet`]
//! loaded alongside it describes record `i` in row `i`.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::container::{self, EMBEDDING_MAGIC};
use crate::{Error, Result};

/// `<pid>_c<camid>_<idx>.<ext>`, e.g. `0001_c3_017.png`.
pub const DEFAULT_FILENAME_PATTERN: &str =
    r"^(?P<pid>\d+)_c(?P<camid>\d+)_\d+\.[A-Za-z0-9]+$";

pub const METADATA_HEADER: &str = "index,person_id,camera_id,role,path";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
    Train,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Query => "query",
            Role::Gallery => "gallery",
            Role::Train => "train",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "query" => Ok(Role::Query),
            "gallery" => Ok(Role::Gallery),
            "train" => Ok(Role::Train),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GalleryRecord {
    pub person_id: u32,
    pub camera_id: u32,
    pub path: String,
    pub role: Role,
}

/// Compiled filename pattern with `pid` and `camid` named captures.
#[derive(Debug, Clone)]
pub struct FilenamePattern(Regex);

impl FilenamePattern {
    pub fn new(pattern: &str) -> Result<Self> {
        let re = Regex::new(pattern)
            .map_err(|e| Error::invalid(format!("filename pattern: {e}")))?;
        let names: HashSet<&str> = re.capture_names().flatten().collect();
        for needed in ["pid", "camid"] {
            if !names.contains(needed) {
                return Err(Error::invalid(format!(
                    "filename pattern lacks a named capture `{needed}`"
                )));
            }
        }
        Ok(Self(re))
    }
}

impl Default for FilenamePattern {
    fn default() -> Self {
        Self::new(DEFAULT_FILENAME_PATTERN).expect("default pattern is valid")
    }
}

/// Parse person and camera ids from the file name (the last path
/// component). The role is supplied by the caller.
pub fn parse_record(path: &str, pattern: &FilenamePattern, role: Role) -> Result<GalleryRecord> {
    let ingest = |reason: String| Error::Ingest {
        file: path.to_string(),
        reason,
    };
    let name = Path::new(path)
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| ingest("no file name".into()))?;
    let caps = pattern
        .0
        .captures(name)
        .ok_or_else(|| ingest(format!("does not match pattern {}", pattern.0.as_str())))?;
    let field = |key: &str| -> Result<u32> {
        caps[key]
            .parse::<u32>()
            .map_err(|e| ingest(format!("{key} {:?}: {e}", &caps[key])))
    };
    Ok(GalleryRecord {
        person_id: field("pid")?,
        camera_id: field("camid")?,
        path: path.to_string(),
        role,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GalleryIndex {
    pub records: Vec<GalleryRecord>,
}

impl GalleryIndex {
    pub fn new(records: Vec<GalleryRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn person_ids(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.person_id).collect()
    }

    pub fn camera_ids(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.camera_id).collect()
    }

    /// Row indices whose role is in `roles`, in canonical order.
    pub fn rows_with_role(&self, roles: &[Role]) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| roles.contains(&r.role))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> GalleryIndex {
        GalleryIndex::new(rows.iter().map(|&i| self.records[i].clone()).collect())
    }

    /// Parse the comma-separated metadata format. The path is the last
    /// column and may itself contain commas.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == METADATA_HEADER => {}
            Some((_, header)) => {
                return Err(Error::Metadata {
                    line: 1,
                    reason: format!("expected header {METADATA_HEADER:?}, found {header:?}"),
                })
            }
            None => {
                return Err(Error::Metadata {
                    line: 1,
                    reason: "missing header".into(),
                })
            }
        }
        let mut seen = HashSet::new();
        let mut records = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Metadata {
                line: line_no,
                reason,
            };
            let fields: Vec<&str> = line.splitn(5, ',').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", fields.len())));
            }
            let index: usize = fields[0]
                .trim()
                .parse()
                .map_err(|e| bad(format!("index {:?}: {e}", fields[0])))?;
            let person_id: u32 = fields[1]
                .trim()
                .parse()
                .map_err(|e| bad(format!("person_id {:?}: {e}", fields[1])))?;
            let camera_id: u32 = fields[2]
                .trim()
                .parse()
                .map_err(|e| bad(format!("camera_id {:?}: {e}", fields[2])))?;
            let role: Role = fields[3].trim().parse().map_err(bad)?;
            let path = fields[4].to_string();
            if path.is_empty() {
                return Err(bad("empty path".into()));
            }
            if !seen.insert(index) {
                return Err(bad(format!("duplicate index {index}")));
            }
            records.push(GalleryRecord {
                person_id,
                camera_id,
                path,
                role,
            });
        }
        Ok(Self { records })
    }

    pub fn to_metadata(&self) -> String {
        let mut out = String::from(METADATA_HEADER);
        out.push('\n');
        for (i, r) in self.records.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                r.person_id, r.camera_id, r.role, r.path
            ));
        }
        out
    }
}

pub fn load_index(path: impl AsRef<Path>) -> Result<GalleryIndex> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GalleryIndex::parse(&text)
}

/// Global features (N×D) and optional per-stripe local features (N×S×Dl).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    global: Array2<f32>,
    local: Option<Array3<f32>>,
}

impl EmbeddingSet {
    pub fn new(global: Array2<f32>, local: Option<Array3<f32>>) -> Result<Self> {
        if let Some((row, col)) = first_non_finite(global.indexed_iter()) {
            return Err(Error::NonFinite { row, col });
        }
        if let Some(l) = &local {
            let (n, s, dl) = l.dim();
            if n != global.nrows() {
                return Err(Error::shape(format!(
                    "local features have {n} rows, global features have {}",
                    global.nrows()
                )));
            }
            if s == 0 || dl == 0 {
                return Err(Error::shape("local features need S >= 1 and Dl >= 1"));
            }
            if let Some(((row, stripe, dim), _)) = l.indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite {
                    row,
                    col: stripe * dl + dim,
                });
            }
        }
        Ok(Self { global, local })
    }

    pub fn global_only(global: Array2<f32>) -> Result<Self> {
        Self::new(global, None)
    }

    pub fn len(&self) -> usize {
        self.global.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.global.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.global.ncols()
    }

    pub fn global(&self) -> &Array2<f32> {
        &self.global
    }

    pub fn local(&self) -> Option<&Array3<f32>> {
        self.local.as_ref()
    }

    /// Global features widened to f64 for numerics.
    pub fn global_f64(&self) -> Array2<f64> {
        self.global.mapv(f64::from)
    }

    pub fn select_rows(&self, rows: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            global: self.global.select(ndarray::Axis(0), rows),
            local: self
                .local
                .as_ref()
                .map(|l| l.select(ndarray::Axis(0), rows)),
        }
    }

    /// Check that this set is row-aligned with `index`.
    pub fn check_aligned(&self, index: &GalleryIndex) -> Result<()> {
        if self.len() != index.len() {
            return Err(Error::shape(format!(
                "embedding set has {} rows but index has {} records",
                self.len(),
                index.len()
            )));
        }
        Ok(())
    }
}

fn first_non_finite<'a, I>(mut iter: I) -> Option<(usize, usize)>
where
    I: Iterator<Item = ((usize, usize), &'a f32)>,
{
    iter.find(|(_, v)| !v.is_finite()).map(|(ix, _)| ix)
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    if let Some((row, col)) = first_non_finite(set.global.indexed_iter()) {
        return Err(Error::NonFinite { row, col });
    }
    container::encode(
        EMBEDDING_MAGIC,
        set.global.view(),
        set.local.as_ref().map(|l| l.view()),
    )
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let (global, local) = container::decode(EMBEDDING_MAGIC, bytes)?;
    EmbeddingSet::new(global, local)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn write_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embeddings(set)?).map_err(|e| Error::io(path, e))
}
