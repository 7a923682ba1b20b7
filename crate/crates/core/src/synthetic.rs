//! Layered phantoms and multiplicative speckle stacks with known motion.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)`. Frame `j` draws
//! its noise from stream `j` and the jitter comes from stream `u64::MAX`, so
//! every frame can be generated independently and reproducibly.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{from_linear, to_log, write_image, write_scaled_map, BitDepth, DatasetManifest, ImageFormat, RawImage, Roi};
use crate::registration::{warp, write_transforms, RigidTransform};
use crate::volume::SigmaMap;

/// Curve `row(x) = depth + amplitude * sin(2 pi x / period + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub depth: f64,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl Boundary {
    pub fn row(&self, x: f64) -> f64 {
        self.depth + self.amplitude * (std::f64::consts::TAU * x / self.period + self.phase).sin()
    }
}

/// Everything below `top` (down to the next layer) has `intensity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub top: Boundary,
    pub intensity: f64,
}

/// Disk added on top of the layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub rows: usize,
    pub cols: usize,
    pub depth: BitDepth,
    pub background: f64,
    /// Ordered top to bottom.
    pub layers: Vec<Layer>,
    pub lesions: Vec<Lesion>,
    /// Width in pixels of the linear ramp across each boundary; 0 gives hard
    /// edges.
    pub edge_softness: f64,
}

impl PhantomSpec {
    /// Five wavy retina-like bands with five lesions, 8-bit.
    pub fn retina(rows: usize, cols: usize) -> Self {
        let (m, n) = (rows as f64, cols as f64);
        let band = |frac: f64, amp: f64, periods: f64, phase: f64, intensity: f64| Layer {
            top: Boundary {
                depth: frac * m,
                amplitude: amp * m / 128.0,
                period: n / periods,
                phase,
            },
            intensity,
        };
        PhantomSpec {
            rows,
            cols,
            depth: BitDepth::Eight,
            background: 20.0,
            layers: vec![
                band(0.22, 4.0, 2.0, 0.0, 150.0),
                band(0.38, 3.0, 3.0, 0.6, 90.0),
                band(0.52, 3.0, 2.5, 1.2, 200.0),
                band(0.68, 2.5, 3.0, 2.0, 70.0),
                band(0.84, 2.0, 4.0, 0.3, 35.0),
            ],
            lesions: vec![
                Lesion {
                    row: 0.45 * m,
                    col: 0.3 * n,
                    radius: 0.06 * m.min(n),
                    delta: 60.0,
                },
                Lesion {
                    row: 0.75 * m,
                    col: 0.68 * n,
                    radius: 0.08 * m.min(n),
                    delta: -30.0,
                },
                Lesion {
                    row: 0.6 * m,
                    col: 0.15 * n,
                    radius: 0.03 * m.min(n),
                    delta: 50.0,
                },
                Lesion {
                    row: 0.3 * m,
                    col: 0.8 * n,
                    radius: 0.04 * m.min(n),
                    delta: -40.0,
                },
                Lesion {
                    row: 0.9 * m,
                    col: 0.4 * n,
                    radius: 0.03 * m.min(n),
                    delta: 60.0,
                },
            ],
            edge_softness: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::param("rows/cols", "phantom must be at least 2x2"));
        }
        let max = f64::from(self.depth.max_value());
        let in_range = |v: f64| (1.0..=max).contains(&v);
        if !in_range(self.background) {
            return Err(Error::param("background", format!("must lie in [1, {max}]")));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if !in_range(layer.intensity) {
                return Err(Error::param("layers", format!("layer {k} intensity must lie in [1, {max}]")));
            }
            if !(layer.top.period > 0.0) || !layer.top.depth.is_finite() || !layer.top.amplitude.is_finite() {
                return Err(Error::param("layers", format!("layer {k} boundary is degenerate")));
            }
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            for j in 0..self.cols {
                let x = j as f64;
                if pair[0].top.row(x) > pair[1].top.row(x) {
                    return Err(Error::param(
                        "layers",
                        format!("layer {} crosses layer {} at column {j}", k + 1, k),
                    ));
                }
            }
        }
        if !(self.edge_softness >= 0.0) {
            return Err(Error::param("edge_softness", "must be nonnegative"));
        }
        for (k, l) in self.lesions.iter().enumerate() {
            if !(l.radius > 0.0) || !l.delta.is_finite() {
                return Err(Error::param("lesions", format!("lesion {k} needs a positive radius")));
            }
        }
        Ok(())
    }

    /// Real-valued intensity before rounding and clamping.
    pub fn intensity(&self, row: f64, col: f64) -> f64 {
        let mut v = self.background;
        for layer in &self.layers {
            let d = row - layer.top.row(col);
            let w = if self.edge_softness > 0.0 {
                (d / self.edge_softness + 0.5).clamp(0.0, 1.0)
            } else if d >= 0.0 {
                1.0
            } else {
                0.0
            };
            v += w * (layer.intensity - v);
        }
        for l in &self.lesions {
            let dist = ((row - l.row).powi(2) + (col - l.col).powi(2)).sqrt();
            v += l.delta * (l.radius - dist + 0.5).clamp(0.0, 1.0);
        }
        v
    }

    /// Index of the hard layer containing `(row, col)`; 0 is the background.
    pub fn label(&self, row: f64, col: f64) -> usize {
        self.layers.iter().take_while(|l| row >= l.top.row(col)).count()
    }

    /// Squares around the lesions with a few pixels of surrounding tissue,
    /// at least 17 pixels across before clipping, for use as evaluation
    /// regions.
    pub fn lesion_rois(&self) -> Vec<Roi> {
        self.lesions
            .iter()
            .enumerate()
            .filter_map(|(k, l)| {
                let half = (l.radius + 3.0).max(8.0);
                let x0 = (l.col - half).floor().max(0.0) as usize;
                let y0 = (l.row - half).floor().max(0.0) as usize;
                let x1 = ((l.col + half).ceil() as usize + 1).min(self.cols);
                let y1 = ((l.row + half).ceil() as usize + 1).min(self.rows);
                (x1 > x0 && y1 > y0).then(|| Roi {
                    name: format!("lesion{k}"),
                    x: x0,
                    y: y0,
                    width: x1 - x0,
                    height: y1 - y0,
                })
            })
            .collect()
    }
}

pub fn phantom(spec: &PhantomSpec) -> Result<RawImage> {
    spec.validate()?;
    let values = DMatrix::from_fn(spec.rows, spec.cols, |i, j| spec.intensity(i as f64, j as f64));
    Ok(from_linear(&values, spec.depth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeckleSpec {
    pub frames: usize,
    /// Gamma shape `L_g`; the noise has mean 1 and variance `1 / L_g`.
    pub looks: f64,
    pub max_translation: f64,
    /// Degrees.
    pub max_rotation: f64,
    pub seed: u64,
    /// Frame left unmoved so it lines up with the truth; defaults to the
    /// middle frame.
    pub anchor: Option<usize>,
}

impl Default for SpeckleSpec {
    fn default() -> Self {
        SpeckleSpec {
            frames: 8,
            looks: 4.0,
            max_translation: 5.0,
            max_rotation: 2.0,
            seed: 0,
            anchor: None,
        }
    }
}

impl SpeckleSpec {
    pub fn anchor_frame(&self) -> usize {
        self.anchor.unwrap_or(self.frames / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::param("frames", "need at least 2 frames"));
        }
        if !(self.looks > 0.0 && self.looks.is_finite()) {
            return Err(Error::param("looks", "must be positive"));
        }
        if !(self.max_translation >= 0.0 && self.max_rotation >= 0.0) {
            return Err(Error::param("max_translation/max_rotation", "must be nonnegative"));
        }
        if self.anchor_frame() >= self.frames {
            return Err(Error::param("anchor", "out of range"));
        }
        Ok(())
    }

    /// Log-domain standard deviation of the noise, `sqrt(trigamma(L_g))`.
    pub fn log_sigma(&self) -> f64 {
        trigamma(self.looks).sqrt()
    }

    /// `E[ln G] = digamma(L_g) - ln(L_g)`.
    pub fn log_mean(&self) -> f64 {
        digamma(self.looks) - self.looks.ln()
    }
}

#[derive(Debug, Clone)]
pub struct SpeckleStack {
    pub frames: Vec<RawImage>,
    /// Content map from the truth to each frame.
    pub transforms: Vec<RigidTransform>,
    pub sigma: f64,
    /// Mean of the log noise, `digamma(L_g) - ln(L_g)`.
    pub log_mean: f64,
    pub sigma_map: SigmaMap,
}

const JITTER_STREAM: u64 = u64::MAX;

fn jitter(spec: &SpeckleSpec) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(JITTER_STREAM);
    let anchor = spec.anchor_frame();
    (0..spec.frames)
        .map(|j| {
            let mut draw = |b: f64| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
            let t = RigidTransform::new(
                draw(spec.max_translation),
                draw(spec.max_translation),
                draw(spec.max_rotation),
            );
            if j == anchor {
                RigidTransform::IDENTITY
            } else {
                t
            }
        })
        .collect()
}

/// Warps the truth by a random rigid transform per frame and multiplies by
/// i.i.d. Gamma noise with mean 1. The warp interpolates `ln(max(p, 1))`, the
/// same domain registration works in.
pub fn speckle_stack(truth: &RawImage, spec: &SpeckleSpec) -> Result<SpeckleStack> {
    spec.validate()?;
    let gamma = Gamma::new(spec.looks, 1.0 / spec.looks).map_err(|e| Error::param("looks", e.to_string()))?;
    let transforms = jitter(spec);
    let grid = to_log(truth, 1.0)?;
    let frames = transforms
        .par_iter()
        .enumerate()
        .map(|(j, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(j as u64);
            let (moved, _) = warp(&grid, t);
            let noisy = moved.values().map(|v| v.exp() * gamma.sample(&mut rng));
            from_linear(&noisy, truth.depth())
        })
        .collect();
    let sigma = spec.log_sigma();
    Ok(SpeckleStack {
        frames,
        transforms,
        sigma,
        log_mean: spec.log_mean(),
        sigma_map: SigmaMap::constant(truth.rows(), truth.cols(), spec.frames, sigma)?,
    })
}

/// The image log-domain estimators converge to: the mean of the log noise
/// folded into the truth, `truth * exp(log_mean)`. A many-frame log-domain
/// average approaches it.
pub fn latent_image(truth: &RawImage, log_mean: f64) -> RawImage {
    from_linear(&(truth.to_f64() * log_mean.exp()), truth.depth())
}

/// Writes a self-contained dataset: frames, truth, manifest, jitter record and
/// the true sigma map. The manifest reference is the latent image. Returns the
/// manifest path.
pub fn write_fixture(dir: impl AsRef<Path>, truth: &RawImage, stack: &SpeckleStack, rois: &[Roi], anchor: usize) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let frame_dir = dir.join("frames");
    std::fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
    let mut frames = Vec::with_capacity(stack.frames.len());
    for (j, f) in stack.frames.iter().enumerate() {
        let path = frame_dir.join(format!("frame_{j:03}.pgm"));
        write_image(f, &path, ImageFormat::Pgm)?;
        frames.push(path);
    }
    let truth_path = dir.join("truth.pgm");
    write_image(truth, &truth_path, ImageFormat::Pgm)?;
    let reference_path = dir.join("reference.pgm");
    write_image(&latent_image(truth, stack.log_mean), &reference_path, ImageFormat::Pgm)?;
    write_transforms(dir.join("true_transforms.csv"), &stack.transforms)?;
    write_scaled_map(&stack.sigma_map.frame(0), dir.join("true_sigma.pgm"))?;
    let manifest = DatasetManifest {
        frames,
        reference: Some(reference_path),
        reference_frame: Some(anchor),
        rois: rois.to_vec(),
    };
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}

/// Digamma function, via recurrence up to x >= 20 and the asymptotic series.
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    acc + x.ln() - 0.5 / x - r * (1.0 / 12.0 - r * (1.0 / 120.0 - r * (1.0 / 252.0 - r * (1.0 / 240.0 - r / 132.0))))
}

/// Trigamma function, via recurrence up to x >= 20 and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    acc + 1.0 / x + r / 2.0 + (r / x) * (1.0 / 6.0 - r * (1.0 / 30.0 - r * (1.0 / 42.0 - r / 30.0)))
}
