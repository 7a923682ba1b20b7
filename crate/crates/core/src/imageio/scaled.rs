//! Real-valued maps stored as 16-bit PGM plus a TOML sidecar holding the
//! affine decoding `value = offset + pixel / scale`.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{read_image, write_image, BitDepth, ImageFormat, RawImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub offset: f64,
    pub scale: f64,
}

impl ScaleRecord {
    pub fn decode(&self, pixel: u16) -> f64 {
        self.offset + f64::from(pixel) / self.scale
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

/// Quantizes `values` to the full 16-bit range. The round-trip error is at
/// most `(max - min) / 131070`.
pub fn write_scaled_map(values: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<ScaleRecord> {
    let path = path.as_ref();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("values", "cannot store non-finite values"));
    }
    let min = values.min();
    let max = values.max();
    let span = max - min;
    let scale = if span > 0.0 { 65535.0 / span } else { 1.0 };
    let record = ScaleRecord { offset: min, scale };
    let img = RawImage::new(
        BitDepth::Sixteen,
        values.map(|v| ((v - min) * scale).round().clamp(0.0, 65535.0) as u16),
    )?;
    write_image(&img, path, ImageFormat::Pgm)?;
    let side = sidecar_path(path);
    let text = toml::to_string(&record).map_err(|e| Error::Record(e.to_string()))?;
    std::fs::write(&side, text).map_err(|e| Error::io(side, e))?;
    Ok(record)
}

pub fn read_scaled_map(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let record: ScaleRecord = toml::from_str(&text)
        .map_err(|e| Error::Record(format!("{}: {}", side.display(), e.message())))?;
    if !(record.scale > 0.0) || !record.offset.is_finite() {
        return Err(Error::Record(format!("{}: invalid scale record", side.display())));
    }
    let img = read_image(path)?;
    Ok(img.pixels().map(|p| record.decode(p)))
}
