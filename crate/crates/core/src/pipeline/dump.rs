//! Raw heatmap dumps: little-endian `f32` values in row-major order next to
//! a JSON sidecar describing them.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpSidecar {
    pub shape: [usize; 2],
    pub sample_id: String,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f32"), stem.with_extension("json"))
}

/// Write `<stem>.f32` and `<stem>.json`; returns both paths.
pub fn write_heatmap(stem: &Path, map: &Array2<f64>, sidecar: &DumpSidecar) -> Result<[PathBuf; 2]> {
    let (raw, meta) = paths(stem);
    let mut bytes = Vec::with_capacity(map.len() * 4);
    for v in map.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_atomic(&raw, &bytes)?;
    write_atomic(&meta, &serde_json::to_vec_pretty(sidecar)?)?;
    Ok([raw, meta])
}

pub fn read_heatmap(stem: &Path) -> Result<(Array2<f64>, DumpSidecar)> {
    let (raw, meta) = paths(stem);
    for p in [&raw, &meta] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let sidecar: DumpSidecar = serde_json::from_slice(&fs::read(&meta)?)?;
    let bytes = fs::read(&raw)?;
    let [h, w] = sidecar.shape;
    if bytes.len() != h * w * 4 {
        return Err(Error::Shape(format!("{} holds {} bytes, expected {}", raw.display(), bytes.len(), h * w * 4)));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let map = Array2::from_shape_vec((h, w), vals).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((map, sidecar))
}
