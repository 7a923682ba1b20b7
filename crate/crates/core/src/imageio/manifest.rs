//! Dataset manifests (TOML).
//!
//! ```toml
//! # paths are resolved relative to the manifest's directory
//! frames = ["frames/frame_00.pgm", "frames/frame_01.pgm"]
//! reference = "truth.pgm"      # optional ground-truth image
//! reference_frame = 1          # optional registration anchor (default: middle)
//!
//! [[roi]]                      # optional, repeatable
//! name = "lesion"
//! x = 10
//! y = 20
//! width = 32
//! height = 32
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named region of interest, `(x, y)` is the top-left pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub name: String,
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub frames: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_frame: Option<usize>,
    #[serde(default, rename = "roi", skip_serializing_if = "Vec::is_empty")]
    pub rois: Vec<Roi>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Manifest(format!(
                "`frames` must list at least 2 files, found {}",
                self.frames.len()
            )));
        }
        let mut seen = HashSet::new();
        for f in &self.frames {
            if !seen.insert(f) {
                return Err(Error::Manifest(format!(
                    "frame path {} is listed twice",
                    f.display()
                )));
            }
        }
        if let Some(r) = self.reference_frame {
            if r >= self.frames.len() {
                return Err(Error::Manifest(format!(
                    "`reference_frame` {r} out of range for {} frames",
                    self.frames.len()
                )));
            }
        }
        let mut names = HashSet::new();
        for roi in &self.rois {
            if roi.width == 0 || roi.height == 0 {
                return Err(Error::Manifest(format!("roi `{}` has zero area", roi.name)));
            }
            if !names.insert(&roi.name) {
                return Err(Error::Manifest(format!("roi name `{}` is duplicated", roi.name)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::Manifest(e.message().to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Loads and validates a manifest; relative paths become relative to the
    /// manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for f in &mut m.frames {
            *f = base.join(&*f);
        }
        if let Some(r) = &mut m.reference {
            *r = base.join(&*r);
        }
        Ok(m)
    }

    /// Writes the manifest with paths made relative to its directory where
    /// possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.validate()?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &PathBuf| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.clone());
        let out = DatasetManifest {
            frames: self.frames.iter().map(rel).collect(),
            reference: self.reference.as_ref().map(rel),
            reference_frame: self.reference_frame,
            rois: self.rois.clone(),
        };
        let text = toml::to_string(&out).map_err(|e| Error::Manifest(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Anchor frame for registration; the middle frame unless overridden.
    pub fn anchor_frame(&self) -> usize {
        self.reference_frame.unwrap_or(self.frames.len() / 2)
    }
}
