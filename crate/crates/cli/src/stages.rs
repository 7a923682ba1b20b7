//! Pipeline stages. Each reads its inputs from disk and writes its outputs
//! into a work directory:
//!
//! ```text
//! stack.toml            frame sources, bit depth, anchor, reference, ROIs
//! transforms.csv        registration result per frame
//! registered/frame_NNN  aligned log frames (scaled 16-bit PGM + sidecar)
//! mask.pgm              pixels valid in every aligned frame (255)
//! sigma/frame_NNN       per-pixel log-noise sigma
//! low_rank/frame_NNN    L
//! noise/frame_NNN       N
//! denoised.pgm          exp of the mean of L
//! average.pgm           exp of the mean of the aligned log frames
//! solve_report.csv      per-iteration solver trace
//! metrics.csv           scores over the valid region and each ROI
//! provenance.toml
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use octden::imageio::{from_log, read_image, read_scaled_map, to_log, write_image, write_scaled_map, DatasetManifest, ImageFormat};
use octden::metrics::{evaluate as score, write_metrics_csv};
use octden::registration::{register_stack, write_transforms};
use octden::synthetic::{phantom, speckle_stack, write_fixture};
use octden::volume::stack_frames;
use octden::{denoise as solve, estimate_sigma, BitDepth, ImageGrid, LogVolume, Mask, RawImage, Roi, SigmaMap};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::provenance::{self, io, Inputs};
use crate::CliError;

pub const STACK: &str = "stack.toml";
pub const TRANSFORMS: &str = "transforms.csv";
pub const REGISTERED: &str = "registered";
pub const MASK: &str = "mask.pgm";
pub const SIGMA: &str = "sigma";
pub const LOW_RANK: &str = "low_rank";
pub const NOISE: &str = "noise";
pub const DENOISED: &str = "denoised.pgm";
pub const AVERAGE: &str = "average.pgm";
pub const SOLVE_REPORT: &str = "solve_report.csv";
pub const METRICS: &str = "metrics.csv";

/// What later stages need to know about the registered stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackInfo {
    pub bit_depth: u32,
    pub rows: usize,
    pub cols: usize,
    /// Anchor index within `sources`.
    pub reference_frame: usize,
    pub sources: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[serde(default, rename = "roi", skip_serializing_if = "Vec::is_empty")]
    pub rois: Vec<Roi>,
}

impl StackInfo {
    fn load(work: &Path, inputs: &mut Inputs) -> Result<Self, CliError> {
        let path = work.join(STACK);
        let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        inputs.add(&path)?;
        toml::from_str(&text).map_err(|e| CliError::Core(octden::Error::Record(format!("{}: {}", path.display(), e.message()))))
    }

    fn save(&self, work: &Path) -> Result<(), CliError> {
        let path = work.join(STACK);
        let text = toml::to_string(self).expect("stack info serializes");
        std::fs::write(&path, text).map_err(|e| io(&path, e))
    }

    fn depth(&self) -> Result<BitDepth, CliError> {
        Ok(BitDepth::from_bits(self.bit_depth)?)
    }
}

fn frame_name(j: usize) -> String {
    format!("frame_{j:03}.pgm")
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io(path, e))
}

fn write_maps(dir: &Path, frames: impl Iterator<Item = DMatrix<f64>>) -> Result<(), CliError> {
    create_dir(dir)?;
    for (j, f) in frames.enumerate() {
        write_scaled_map(&f, dir.join(frame_name(j)))?;
    }
    Ok(())
}

fn read_maps(dir: &Path, count: usize, inputs: &mut Inputs) -> Result<Vec<DMatrix<f64>>, CliError> {
    (0..count)
        .map(|j| {
            let path = dir.join(frame_name(j));
            inputs.add_scaled(&path)?;
            Ok(read_scaled_map(&path)?)
        })
        .collect()
}

fn read_mask(work: &Path, inputs: &mut Inputs) -> Result<Mask, CliError> {
    let path = work.join(MASK);
    inputs.add(&path)?;
    let img = read_image(&path)?;
    Ok(Mask::new(img.pixels().map(|p| p > 0)))
}

fn read_registered(work: &Path, info: &StackInfo, inputs: &mut Inputs) -> Result<LogVolume, CliError> {
    let frames = read_maps(&work.join(REGISTERED), info.sources.len(), inputs)?
        .into_iter()
        .map(ImageGrid::new)
        .collect::<octden::Result<Vec<_>>>()?;
    Ok(stack_frames(&frames)?)
}

/// Writes a fixture dataset into `out`; returns the manifest path.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    let spec = cfg.synth.phantom()?;
    let speckle = cfg.synth.speckle();
    let truth = phantom(&spec)?;
    let stack = speckle_stack(&truth, &speckle)?;
    let manifest = write_fixture(out, &truth, &stack, &spec.lesion_rois(), speckle.anchor_frame())?;
    provenance::record(out, "synth", cfg, &Inputs::default())?;
    Ok(manifest)
}

/// Selects `cfg.frames` manifest frames, aligns them and writes the stack.
pub fn register(cfg: &RunConfig, manifest_path: &Path, work: &Path) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    inputs.add(manifest_path)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let end = cfg.first_frame + cfg.frames;
    if end > manifest.frames.len() {
        return Err(CliError::config(
            "frames",
            format!(
                "frames {}..{end} requested but {} lists {}",
                cfg.first_frame,
                manifest_path.display(),
                manifest.frames.len()
            ),
        ));
    }
    let sources = manifest.frames[cfg.first_frame..end].to_vec();
    let anchor = cfg
        .reference_frame
        .or(manifest.reference_frame)
        .filter(|r| (cfg.first_frame..end).contains(r))
        .map_or(cfg.frames / 2, |r| r - cfg.first_frame);

    let mut raw = Vec::with_capacity(sources.len());
    for path in &sources {
        inputs.add(path)?;
        raw.push(read_image(path)?);
    }
    let first = &raw[0];
    for (img, path) in raw.iter().zip(&sources).skip(1) {
        if img.rows() != first.rows() || img.cols() != first.cols() || img.depth() != first.depth() {
            return Err(CliError::Core(octden::Error::Shape(format!(
                "{} is {}x{} at {} bits, expected {}x{} at {} bits",
                path.display(),
                img.rows(),
                img.cols(),
                img.depth().bits(),
                first.rows(),
                first.cols(),
                first.depth().bits()
            ))));
        }
    }
    let logs = raw
        .iter()
        .map(|img| to_log(img, cfg.log_floor))
        .collect::<octden::Result<Vec<_>>>()?;
    let reg = register_stack(&logs, anchor, &cfg.registration)?;

    create_dir(work)?;
    write_transforms(work.join(TRANSFORMS), &reg.transforms)?;
    write_maps(&work.join(REGISTERED), reg.volume.frames().into_iter().map(ImageGrid::into_values))?;
    let mask = RawImage::new(BitDepth::Eight, reg.mask.flags().map(|v| if v { 255 } else { 0 }))?;
    write_image(&mask, work.join(MASK), ImageFormat::Pgm)?;
    StackInfo {
        bit_depth: first.depth().bits(),
        rows: first.rows(),
        cols: first.cols(),
        reference_frame: anchor,
        sources,
        reference: manifest.reference.clone(),
        rois: manifest.rois.clone(),
    }
    .save(work)?;
    provenance::record(work, "register", cfg, &inputs)
}

pub fn estimate_noise(cfg: &RunConfig, work: &Path) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    let info = StackInfo::load(work, &mut inputs)?;
    let volume = read_registered(work, &info, &mut inputs)?;
    let mask = read_mask(work, &mut inputs)?;
    let sigma = estimate_sigma(&volume, &mask, &cfg.noise)?;
    write_maps(&work.join(SIGMA), (0..sigma.frame_count()).map(|j| sigma.frame(j)))?;
    provenance::record(work, "estimate-noise", cfg, &inputs)
}

/// Runs the solver on the first `cfg.frames` registered frames.
pub fn denoise(cfg: &RunConfig, work: &Path) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    let info = StackInfo::load(work, &mut inputs)?;
    let available = info.sources.len();
    if cfg.frames > available {
        return Err(CliError::config(
            "frames",
            format!("{} requested but the registered stack holds {available}", cfg.frames),
        ));
    }
    let used = StackInfo {
        sources: info.sources[..cfg.frames].to_vec(),
        ..info.clone()
    };
    let volume = read_registered(work, &used, &mut inputs)?;
    let sigma_frames = read_maps(&work.join(SIGMA), cfg.frames, &mut inputs)?;
    let sigma = SigmaMap::from_frames(&sigma_frames)?;
    let out = solve(&volume, &sigma, &cfg.solver)?;

    let depth = info.depth()?;
    write_maps(&work.join(LOW_RANK), out.low_rank.frames().into_iter().map(ImageGrid::into_values))?;
    write_maps(&work.join(NOISE), out.noise.frames().into_iter().map(ImageGrid::into_values))?;
    write_image(&from_log(&out.image(), depth), work.join(DENOISED), ImageFormat::Pgm)?;
    write_image(&from_log(&volume.mean_frame(), depth), work.join(AVERAGE), ImageFormat::Pgm)?;
    out.report.write_csv(work.join(SOLVE_REPORT))?;
    if !out.report.converged {
        eprintln!(
            "note: solver stopped at the iteration cap ({}) before meeting tol",
            out.report.iterations
        );
    }
    provenance::record(work, "denoise", cfg, &inputs)
}

/// Moves `roi` into the coordinates of the crop `(x, y, w, h)`, clipping it.
/// What remains must hold one `min_side` square window.
fn clip_roi(roi: &Roi, (x, y, w, h): (usize, usize, usize, usize), min_side: usize) -> Result<Roi, CliError> {
    let x0 = roi.x.max(x);
    let y0 = roi.y.max(y);
    let x1 = (roi.x + roi.width).min(x + w);
    let y1 = (roi.y + roi.height).min(y + h);
    if x1 <= x0 || y1 <= y0 {
        return Err(CliError::config(
            &format!("roi.{}", roi.name),
            "lies entirely outside the region valid in every registered frame".to_string(),
        ));
    }
    if x1 - x0 < min_side || y1 - y0 < min_side {
        return Err(CliError::config(
            &format!("roi.{}", roi.name),
            format!(
                "{}x{} inside the valid region, smaller than the {min_side}x{min_side} SSIM window",
                x1 - x0,
                y1 - y0
            ),
        ));
    }
    Ok(Roi {
        name: roi.name.clone(),
        x: x0 - x,
        y: y0 - y,
        width: x1 - x0,
        height: y1 - y0,
    })
}

/// Scores the denoised image, the plain average and the anchor frame against
/// the reference, over the largest rectangle valid in every aligned frame.
pub fn evaluate(cfg: &RunConfig, work: &Path, reference: Option<&Path>) -> Result<(), CliError> {
    let mut inputs = Inputs::default();
    let info = StackInfo::load(work, &mut inputs)?;
    let reference = reference
        .map(Path::to_path_buf)
        .or_else(|| info.reference.clone())
        .ok_or_else(|| CliError::config("reference", "no reference image given and the manifest names none".to_string()))?;
    let mask = read_mask(work, &mut inputs)?;
    let rect = mask
        .valid_rect()
        .ok_or_else(|| CliError::Core(octden::Error::Empty("no pixel is valid in every registered frame".into())))?;
    let (x, y, w, h) = rect;
    let rois = info
        .rois
        .iter()
        .map(|r| clip_roi(r, rect, cfg.metrics.ssim.window))
        .collect::<Result<Vec<_>, _>>()?;

    let mut load = |path: &Path| -> Result<RawImage, CliError> {
        inputs.add(path)?;
        Ok(read_image(path)?.crop(x, y, w, h)?)
    };
    let reference_img = load(&reference)?;
    let candidates = [
        ("denoised", load(&work.join(DENOISED))?),
        ("average", load(&work.join(AVERAGE))?),
        ("single", load(&info.sources[info.reference_frame])?),
    ];
    let mut rows = Vec::new();
    for (name, img) in &candidates {
        for r in score(img, &reference_img, &rois, &cfg.metrics)? {
            rows.push((name.to_string(), r));
        }
    }
    write_metrics_csv(work.join(METRICS), &rows)?;
    provenance::record(work, "evaluate", cfg, &inputs)
}

/// register, estimate-noise, denoise, then evaluate when a reference exists.
pub fn pipeline(cfg: &RunConfig, manifest: &Path, work: &Path, reference: Option<&Path>) -> Result<(), CliError> {
    register(cfg, manifest, work)?;
    estimate_noise(cfg, work)?;
    denoise(cfg, work)?;
    let mut inputs = Inputs::default();
    if reference.is_some() || StackInfo::load(work, &mut inputs)?.reference.is_some() {
        evaluate(cfg, work, reference)?;
    } else {
        eprintln!("note: no reference image, skipping evaluate");
    }
    Ok(())
}
