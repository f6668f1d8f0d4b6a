//! On-disk session layout.
//!
//! ```text
//! <session>/
//!   session.json            identity and dataset reference
//!   manifest.json           DatasetManifest
//!   state.json              current round, round records, metrics, request log
//!   annotations/<id>.json   PolygonAnnotation, one per (image, label)
//!   checkpoints/round_NNNN.json
//!   heatmaps/round_NNNN/<id>.hmap and <id>.png
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place. A
//! round becomes visible only when `state.json` names it, so a checkpoint
//! written by a job that died before publishing is ignored on restart.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use refocus_core::annotation::PolygonAnnotation;
use refocus_core::loss::LossWeights;
use refocus_core::metrics::RoundHistory;
use refocus_core::nn::ModelSnapshot;
use refocus_core::train::TrainingParams;
use refocus_core::Grid;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Writes `bytes` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    write_atomic(path, &bytes)
}

/// `Ok(None)` when the file does not exist.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| Error::json(path, e)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

const HEATMAP_MAGIC: &[u8; 4] = b"HMAP";

/// Compact heatmap grid: magic, little-endian `u32` rows and cols, then
/// row-major `f32` values.
pub fn encode_heatmap(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * grid.len());
    out.extend_from_slice(HEATMAP_MAGIC);
    out.extend_from_slice(&(grid.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.cols() as u32).to_le_bytes());
    for &v in grid.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_heatmap(bytes: &[u8]) -> Result<Grid> {
    let bad = |m: &str| Error::Rejected(format!("malformed heatmap file: {m}"));
    if bytes.len() < 12 || &bytes[..4] != HEATMAP_MAGIC {
        return Err(bad("bad header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (u32_at(4), u32_at(8));
    let body = &bytes[12..];
    if body.len() != 4 * rows * cols {
        return Err(bad("length does not match shape"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok(Grid::from_vec(rows, cols, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    #[serde(default)]
    pub request_id: Option<String>,
    #[serde(default)]
    pub dataset_root: Option<PathBuf>,
    #[serde(default)]
    pub labels_file: Option<PathBuf>,
    #[serde(default)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub round_index: u32,
    pub parent: Option<u32>,
    pub params: TrainingParams,
    pub snapshot: ModelSnapshot,
}

/// One published round of the lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: u32,
    pub parent_round: Option<u32>,
    /// `(image_id, label_index)` pairs that carried masks.
    pub annotated_items: Vec<(String, usize)>,
    pub weights: Option<LossWeights>,
    pub params: TrainingParams,
    pub checkpoint: String,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionState {
    pub current_round: Option<u32>,
    pub rounds: Vec<RoundRecord>,
    pub history: RoundHistory,
    /// Responses of completed mutating requests, keyed by request id.
    #[serde(default)]
    pub requests: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

/// Injective file-name encoding of `(image_id, label)`: bytes outside
/// `[A-Za-z0-9.-]` become `_XX` hex escapes.
fn file_key(image_id: &str, label: usize) -> String {
    let mut key = String::with_capacity(image_id.len() + 8);
    for b in image_id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || (b == b'.' && !key.is_empty()) {
            key.push(char::from(b));
        } else {
            key.push_str(&format!("_{b:02x}"));
        }
    }
    format!("{key}__{label}")
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn save_info(&self, info: &SessionInfo) -> Result<()> {
        write_json(&self.path("session.json"), info)
    }

    pub fn load_info(&self) -> Result<Option<SessionInfo>> {
        read_json(&self.path("session.json"))
    }

    pub fn save_manifest(&self, m: &refocus_core::dataset::DatasetManifest) -> Result<()> {
        write_json(&self.path("manifest.json"), m)
    }

    pub fn load_manifest(&self) -> Result<Option<refocus_core::dataset::DatasetManifest>> {
        read_json(&self.path("manifest.json"))
    }

    pub fn save_state(&self, s: &SessionState) -> Result<()> {
        write_json(&self.path("state.json"), s)
    }

    pub fn load_state(&self) -> Result<SessionState> {
        Ok(read_json(&self.path("state.json"))?.unwrap_or_default())
    }

    pub fn checkpoint_name(round: u32) -> String {
        format!("round_{round:04}.json")
    }

    /// Writes a checkpoint file. It stays invisible until a state naming it
    /// is saved.
    pub fn save_checkpoint(&self, c: &Checkpoint) -> Result<String> {
        let name = Self::checkpoint_name(c.round_index);
        write_json(&self.path("checkpoints").join(&name), c)?;
        Ok(name)
    }

    pub fn load_checkpoint(&self, name: &str) -> Result<Checkpoint> {
        read_json(&self.path("checkpoints").join(name))?.ok_or_else(|| Error::NotFound(format!("checkpoint {name}")))
    }

    pub fn save_annotation(&self, a: &PolygonAnnotation) -> Result<()> {
        let file = format!("{}.json", file_key(&a.image_id, a.label_index));
        write_json(&self.path("annotations").join(file), a)
    }

    pub fn load_annotations(&self) -> Result<Vec<PolygonAnnotation>> {
        let dir = self.path("annotations");
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        let mut out = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                if let Some(a) = read_json::<PolygonAnnotation>(&path)? {
                    out.push(a);
                }
            }
        }
        out.sort_by(|a, b| (&a.image_id, a.label_index).cmp(&(&b.image_id, b.label_index)));
        Ok(out)
    }

    fn heatmap_dir(&self, round: u32) -> PathBuf {
        self.path("heatmaps").join(format!("round_{round:04}"))
    }

    pub fn save_heatmap(&self, round: u32, image_id: &str, label: usize, grid: &Grid) -> Result<PathBuf> {
        let path = self.heatmap_dir(round).join(format!("{}.hmap", file_key(image_id, label)));
        write_atomic(&path, &encode_heatmap(grid))?;
        Ok(path)
    }

    pub fn load_heatmap(&self, round: u32, image_id: &str, label: usize) -> Result<Option<Grid>> {
        let path = self.heatmap_dir(round).join(format!("{}.hmap", file_key(image_id, label)));
        match fs::read(&path) {
            Ok(bytes) => decode_heatmap(&bytes).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    pub fn overlay_path(&self, round: u32, image_id: &str, label: usize) -> PathBuf {
        self.heatmap_dir(round).join(format!("{}.png", file_key(image_id, label)))
    }
}
