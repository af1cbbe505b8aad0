//! Image file format: raw little-endian `f32` row-major grid plus a JSON
//! sidecar, and 8-bit greyscale renders.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub side: usize,
    pub dtype: String,
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

/// Sidecar path for a raw image file: `x.f32` → `x.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_image(path: &Path, grid: &Grid<f64>, provenance: BTreeMap<String, String>) -> Result<()> {
    let mut bytes = Vec::with_capacity(grid.len() * 4);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in grid.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
        min = min.min(v);
        max = max.max(v);
    }
    let meta = ImageMeta {
        side: grid.side(),
        dtype: "f32le".into(),
        min,
        max,
        provenance,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_image(path: &Path) -> Result<(Grid<f64>, ImageMeta)> {
    let side_path = sidecar_path(path);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let meta: ImageMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side_path, e.to_string()))?;
    if meta.dtype != "f32le" {
        return Err(Error::format(&side_path, format!("unsupported dtype {}", meta.dtype)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != meta.side * meta.side * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes for side {}, found {}", meta.side * meta.side * 4, meta.side, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((Grid::from_vec(meta.side, data)?, meta))
}

/// Greyscale levels: 0 is black, values at or above `white_point` are white.
pub fn render_levels(grid: &Grid<f64>, white_point: f64) -> Result<Vec<u8>> {
    if !(white_point > 0.0 && white_point.is_finite()) {
        return Err(Error::invalid("white point must be positive"));
    }
    Ok(grid
        .as_slice()
        .iter()
        .map(|&v| ((v / white_point).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

pub fn write_png(path: &Path, grid: &Grid<f64>, white_point: f64) -> Result<()> {
    let levels = render_levels(grid, white_point)?;
    let side = grid.side() as u32;
    image::save_buffer(path, &levels, side, side, image::ExtendedColorType::L8)
        .map_err(|e| Error::format(path, e.to_string()))
}
