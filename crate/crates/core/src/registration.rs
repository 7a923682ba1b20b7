//! Rigid frame registration in log space.
//!
//! The cost is the mean squared difference over the pixels that stay inside
//! the moving image after warping. It is minimized coarse-to-fine on a 2x2
//! mean pyramid: an integer-shift grid search seeds the coarsest level, then
//! every level runs cyclic coordinate descent over `(dx, dy, theta)` with a
//! golden-section line search per parameter. At full resolution the cost
//! discounts the noise that bilinear resampling averages out of the moving
//! frame.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{downsample2, gaussian_blur, gaussian_kernel};
use crate::volume::{stack_frames, ImageGrid, LogVolume, Mask};

/// Translation in pixels plus a rotation in degrees about the image center.
///
/// As a content map a point `p` moves to `R(theta) (p - c) + c + (dx, dy)`,
/// with `x` along columns and `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub dx: f64,
    pub dy: f64,
    pub theta: f64,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        dx: 0.0,
        dy: 0.0,
        theta: 0.0,
    };

    pub fn new(dx: f64, dy: f64, theta: f64) -> Self {
        RigidTransform { dx, dy, theta }
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = (-self.theta).to_radians().sin_cos();
        RigidTransform {
            dx: -(c * self.dx - s * self.dy),
            dy: -(s * self.dx + c * self.dy),
            theta: -self.theta,
        }
    }

    /// The transform that applies `self` first and `next` second.
    pub fn then(&self, next: &RigidTransform) -> Self {
        let (s, c) = next.theta.to_radians().sin_cos();
        RigidTransform {
            dx: c * self.dx - s * self.dy + next.dx,
            dy: s * self.dx + c * self.dy + next.dy,
            theta: self.theta + next.theta,
        }
    }

    /// Forward content map of the point `(x, y)` in a `rows x cols` image.
    pub fn apply(&self, x: f64, y: f64, rows: usize, cols: usize) -> (f64, f64) {
        let (cx, cy) = center(rows, cols);
        let (s, c) = self.theta.to_radians().sin_cos();
        let (u, v) = (x - cx, y - cy);
        (c * u - s * v + cx + self.dx, s * u + c * v + cy + self.dy)
    }

    fn with(&self, param: usize, value: f64) -> Self {
        let mut t = *self;
        match param {
            0 => t.dx = value,
            1 => t.dy = value,
            _ => t.theta = value,
        }
        t
    }

    fn get(&self, param: usize) -> f64 {
        [self.dx, self.dy, self.theta][param]
    }

    fn scale_translation(&self, f: f64) -> Self {
        RigidTransform {
            dx: self.dx * f,
            dy: self.dy * f,
            theta: self.theta,
        }
    }
}

fn center(rows: usize, cols: usize) -> (f64, f64) {
    ((cols as f64 - 1.0) / 2.0, (rows as f64 - 1.0) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationOptions {
    /// Bound on |dx| and |dy| in pixels.
    pub max_translation: f64,
    /// Bound on |theta| in degrees.
    pub max_rotation: f64,
    pub pyramid_levels: usize,
    /// Stop once a sweep lowers the cost by less than this relative amount.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Gaussian pre-smoothing (pixels) applied to both images before the
    /// pyramid is built; 0 disables it.
    pub smoothing_sigma: f64,
    /// Extra passes in which every non-reference frame is re-registered to
    /// the mean of the other aligned frames; 0 aligns to the reference only.
    pub refine_passes: usize,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        RegistrationOptions {
            max_translation: 20.0,
            max_rotation: 5.0,
            pyramid_levels: 3,
            tol: 1e-6,
            max_sweeps: 50,
            smoothing_sigma: 1.0,
            refine_passes: 1,
        }
    }
}

impl RegistrationOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::param(name, format!("must be positive, got {v}")))
            }
        };
        positive("max_translation", self.max_translation)?;
        positive("max_rotation", self.max_rotation)?;
        positive("tol", self.tol)?;
        if self.pyramid_levels == 0 {
            return Err(Error::param("pyramid_levels", "must be at least 1"));
        }
        if self.max_sweeps == 0 {
            return Err(Error::param("max_sweeps", "must be at least 1"));
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return Err(Error::param("smoothing_sigma", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[inline]
fn bilinear(img: &DMatrix<f64>, x: f64, y: f64) -> f64 {
    let (m, n) = img.shape();
    let x = x.clamp(0.0, (n - 1) as f64);
    let y = y.clamp(0.0, (m - 1) as f64);
    let j0 = (x.floor() as usize).min(n - 2);
    let i0 = (y.floor() as usize).min(m - 2);
    let fx = x - j0 as f64;
    let fy = y - i0 as f64;
    let top = img[(i0, j0)] * (1.0 - fx) + img[(i0, j0 + 1)] * fx;
    let bottom = img[(i0 + 1, j0)] * (1.0 - fx) + img[(i0 + 1, j0 + 1)] * fx;
    top * (1.0 - fy) + bottom * fy
}

const EDGE_EPS: f64 = 1e-9;

/// Visits every output pixel with its source coordinate and in-bounds flag.
#[inline]
fn for_each_source(rows: usize, cols: usize, t: &RigidTransform, mut f: impl FnMut(usize, usize, f64, f64, bool)) {
    let (cx, cy) = center(rows, cols);
    let (s, c) = (-t.theta).to_radians().sin_cos();
    let (xmax, ymax) = ((cols - 1) as f64 + EDGE_EPS, (rows - 1) as f64 + EDGE_EPS);
    for j in 0..cols {
        for i in 0..rows {
            let u = j as f64 - cx - t.dx;
            let v = i as f64 - cy - t.dy;
            let x = c * u - s * v + cx;
            let y = s * u + c * v + cy;
            let inside = x >= -EDGE_EPS && y >= -EDGE_EPS && x <= xmax && y <= ymax;
            f(i, j, x, y, inside);
        }
    }
}

fn warp_matrix(img: &DMatrix<f64>, t: &RigidTransform) -> (DMatrix<f64>, DMatrix<bool>) {
    let (m, n) = img.shape();
    let mut out = DMatrix::zeros(m, n);
    let mut valid = DMatrix::from_element(m, n, false);
    for_each_source(m, n, t, |i, j, x, y, inside| {
        out[(i, j)] = bilinear(img, x, y);
        valid[(i, j)] = inside;
    });
    (out, valid)
}

/// Resamples `img` under `t` with bilinear interpolation. Pixels whose source
/// falls outside the image take the nearest edge value and are flagged
/// invalid in the mask.
pub fn warp(img: &ImageGrid, t: &RigidTransform) -> (ImageGrid, Mask) {
    let (out, valid) = warp_matrix(img.values(), t);
    (ImageGrid::new(out).expect("bilinear samples of finite values are finite"), Mask::new(valid))
}

/// Mean squared difference over the valid pixels of `mask`.
pub fn ssd(a: &ImageGrid, b: &ImageGrid, mask: &Mask) -> Result<f64> {
    if !a.same_shape(b) || a.rows() != mask.rows() || a.cols() != mask.cols() {
        return Err(Error::Shape(format!(
            "ssd inputs {}x{}, {}x{} and mask {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            mask.rows(),
            mask.cols()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((x, y), &ok) in a.as_slice().iter().zip(b.as_slice()).zip(mask.flags().as_slice()) {
        if ok {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(sum / count as f64)
}

/// Cost of `warp(moving, t)` against `fixed` without materializing the warp.
fn warped_cost(moving: &DMatrix<f64>, fixed: &DMatrix<f64>, t: &RigidTransform) -> Option<f64> {
    warped_cost_with(moving, fixed, t, None)
}

/// White noise in the moving image after presmoothing: its variance and the
/// correlation between neighbouring pixels.
#[derive(Debug, Clone, Copy)]
struct NoiseModel {
    variance: f64,
    r1: f64,
}

impl NoiseModel {
    /// Robust noise level from first differences, carried through the
    /// presmoothing kernel.
    fn estimate(img: &DMatrix<f64>, kernel: Option<&[f64]>) -> Self {
        let (m, n) = img.shape();
        let mut diffs = Vec::with_capacity(2 * m * n);
        for j in 0..n {
            for i in 0..m {
                if i + 1 < m {
                    diffs.push(img[(i + 1, j)] - img[(i, j)]);
                }
                if j + 1 < n {
                    diffs.push(img[(i, j + 1)] - img[(i, j)]);
                }
            }
        }
        let sigma = if diffs.is_empty() {
            0.0
        } else {
            let med = median(&mut diffs);
            diffs.iter_mut().for_each(|d| *d = (*d - med).abs());
            1.4826 * median(&mut diffs) / std::f64::consts::SQRT_2
        };
        let (gain, r1) = match kernel {
            Some(k) => {
                let g2: f64 = k.iter().map(|g| g * g).sum();
                let lag1: f64 = k.windows(2).map(|w| w[0] * w[1]).sum();
                (g2 * g2, lag1 / g2)
            }
            None => (1.0, 0.0),
        };
        NoiseModel {
            variance: sigma * sigma * gain,
            r1,
        }
    }

    /// Variance of a bilinear sample at fractional offsets `(fx, fy)` relative
    /// to a grid sample.
    #[inline]
    fn factor(&self, fx: f64, fy: f64) -> f64 {
        let a = |f: f64| (1.0 - f) * (1.0 - f) + f * f + 2.0 * f * (1.0 - f) * self.r1;
        a(fx) * a(fy)
    }
}

fn median(v: &mut [f64]) -> f64 {
    let len = v.len();
    let (lo, mid, _) = v.select_nth_unstable_by(len / 2, f64::total_cmp);
    let mid = *mid;
    if len % 2 == 1 {
        mid
    } else {
        0.5 * (mid + lo.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Mean squared difference, optionally minus the part that only reflects how
/// much bilinear resampling averages away the moving image's noise. Without
/// that term noisy frames are pulled toward half-pixel offsets.
fn warped_cost_with(moving: &DMatrix<f64>, fixed: &DMatrix<f64>, t: &RigidTransform, noise: Option<NoiseModel>) -> Option<f64> {
    let (m, n) = fixed.shape();
    let mut sum = 0.0;
    let mut shrink = 0.0;
    let mut count = 0usize;
    for_each_source(m, n, t, |i, j, x, y, inside| {
        if inside {
            let d = bilinear(moving, x, y) - fixed[(i, j)];
            sum += d * d;
            if let Some(nm) = noise {
                let (fx, fy) = fractions(m, n, x, y);
                shrink += 1.0 - nm.factor(fx, fy);
            }
            count += 1;
        }
    });
    let variance = noise.map_or(0.0, |nm| nm.variance);
    (count > 0).then(|| (sum + variance * shrink) / count as f64)
}

#[inline]
fn fractions(m: usize, n: usize, x: f64, y: f64) -> (f64, f64) {
    let x = x.clamp(0.0, (n - 1) as f64);
    let y = y.clamp(0.0, (m - 1) as f64);
    let j0 = (x.floor() as usize).min(n - 2);
    let i0 = (y.floor() as usize).min(m - 2);
    (x - j0 as f64, y - i0 as f64)
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for the minimum of `f` on `[lo, hi]`; returns the
/// best point evaluated.
fn golden_section(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, xtol: f64) -> (f64, f64) {
    let mut a = hi - INV_PHI * (hi - lo);
    let mut b = lo + INV_PHI * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    let mut best = if fa <= fb { (a, fa) } else { (b, fb) };
    for _ in 0..60 {
        if hi - lo <= xtol {
            break;
        }
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - INV_PHI * (hi - lo);
            fa = f(a);
            if fa < best.1 {
                best = (a, fa);
            }
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + INV_PHI * (hi - lo);
            fb = f(b);
            if fb < best.1 {
                best = (b, fb);
            }
        }
    }
    best
}

struct Level<'a> {
    moving: &'a DMatrix<f64>,
    fixed: &'a DMatrix<f64>,
    bounds: [f64; 3],
    noise: Option<NoiseModel>,
}

impl Level<'_> {
    fn cost(&self, t: &RigidTransform) -> f64 {
        warped_cost_with(self.moving, self.fixed, t, self.noise).unwrap_or(f64::INFINITY)
    }

    fn grid_search(&self) -> RigidTransform {
        let b = self.bounds[0].floor() as i64;
        let mut best = (RigidTransform::IDENTITY, self.cost(&RigidTransform::IDENTITY));
        for dy in -b..=b {
            for dx in -b..=b {
                let t = RigidTransform::new(dx as f64, dy as f64, 0.0);
                let c = self.cost(&t);
                if c < best.1 {
                    best = (t, c);
                }
            }
        }
        best.0
    }

    fn descend(&self, start: RigidTransform, mut radii: [f64; 3], opts: &RegistrationOptions) -> (RigidTransform, f64) {
        const XTOL: [f64; 3] = [1e-3, 1e-3, 1e-4];
        let mut t = start;
        let mut cost = self.cost(&t);
        for _ in 0..opts.max_sweeps {
            let before = cost;
            for p in 0..3 {
                let x = t.get(p);
                let lo = (x - radii[p]).max(-self.bounds[p]);
                let hi = (x + radii[p]).min(self.bounds[p]);
                if hi - lo <= XTOL[p] {
                    continue;
                }
                let (v, c) = golden_section(|v| self.cost(&t.with(p, v)), lo, hi, XTOL[p]);
                if c < cost {
                    t = t.with(p, v);
                    cost = c;
                }
            }
            radii.iter_mut().for_each(|r| *r *= 0.5);
            let scale = before.abs().max(f64::MIN_POSITIVE);
            if !cost.is_finite() || (before - cost) / scale < opts.tol {
                break;
            }
        }
        (t, cost)
    }
}

/// Finds `t` such that `warp(moving, t)` best matches `fixed`.
pub fn register_pair(moving: &ImageGrid, fixed: &ImageGrid, opts: &RegistrationOptions) -> Result<RigidTransform> {
    opts.validate()?;
    if !moving.same_shape(fixed) {
        return Err(Error::Shape(format!(
            "moving is {}x{}, fixed is {}x{}",
            moving.rows(),
            moving.cols(),
            fixed.rows(),
            fixed.cols()
        )));
    }
    let kernel = (opts.smoothing_sigma > 0.0).then(|| gaussian_kernel(opts.smoothing_sigma));
    let noise = NoiseModel::estimate(moving.values(), kernel.as_deref());
    let mut pyramid = vec![(
        gaussian_blur(moving.values(), opts.smoothing_sigma),
        gaussian_blur(fixed.values(), opts.smoothing_sigma),
    )];
    while pyramid.len() < opts.pyramid_levels {
        let (m, f) = pyramid.last().expect("nonempty");
        if m.nrows() < 32 || m.ncols() < 32 {
            break;
        }
        let next = (downsample2(m), downsample2(f));
        pyramid.push(next);
    }

    let coarsest = pyramid.len() - 1;
    let mut t = RigidTransform::IDENTITY;
    for (level, (m, f)) in pyramid.iter().enumerate().rev() {
        let factor = (1u64 << level) as f64;
        let ctx = Level {
            moving: m,
            fixed: f,
            bounds: [
                opts.max_translation / factor,
                opts.max_translation / factor,
                opts.max_rotation,
            ],
            noise: (level == 0).then_some(noise),
        };
        let radii = if level == coarsest {
            t = ctx.grid_search();
            [1.0, 1.0, opts.max_rotation]
        } else {
            t = t.scale_translation(2.0);
            [1.0, 1.0, 0.5]
        };
        if level == 0 && ctx.cost(&RigidTransform::IDENTITY) < ctx.cost(&t) {
            t = RigidTransform::IDENTITY;
        }
        let (found, cost) = ctx.descend(t, radii, opts);
        if !cost.is_finite() {
            return Err(Error::NoOverlap);
        }
        t = found;
    }

    // Never report something worse than leaving the frame alone.
    let raw = |t: &RigidTransform| warped_cost(moving.values(), fixed.values(), t);
    match (raw(&t), raw(&RigidTransform::IDENTITY)) {
        (Some(c), Some(id)) if c <= id => Ok(t),
        (_, Some(_)) => Ok(RigidTransform::IDENTITY),
        _ => Err(Error::NoOverlap),
    }
}

/// Registered stack with the region valid in every warped frame.
#[derive(Debug, Clone)]
pub struct RegisteredStack {
    pub transforms: Vec<RigidTransform>,
    pub volume: LogVolume,
    pub mask: Mask,
}

/// Registers every frame to `frames[reference]` in parallel, then refines
/// against leave-one-out means of the aligned stack.
pub fn register_stack(frames: &[ImageGrid], reference: usize, opts: &RegistrationOptions) -> Result<RegisteredStack> {
    opts.validate()?;
    if frames.len() < 2 {
        return Err(Error::param("frames", format!("need at least 2 frames, got {}", frames.len())));
    }
    if reference >= frames.len() {
        return Err(Error::param(
            "reference",
            format!("index {reference} out of range for {} frames", frames.len()),
        ));
    }
    let fixed = frames[reference].values();
    let mut transforms = register_to(frames, reference, opts, |_| fixed.clone())?;
    if opts.refine_passes > 0 && frames.len() > 2 {
        let k = frames.len() as f64;
        for _ in 0..opts.refine_passes {
            let warped: Vec<DMatrix<f64>> = frames.iter().zip(&transforms).map(|(f, t)| warp(f, t).0.into_values()).collect();
            let total = warped.iter().skip(1).fold(warped[0].clone(), |acc, w| acc + w);
            transforms = register_to(frames, reference, opts, |j| (&total - &warped[j]) / (k - 1.0))?;
        }
    }

    let mut warped = Vec::with_capacity(frames.len());
    let mut mask = Mask::all_valid(fixed.nrows(), fixed.ncols());
    for (frame, t) in frames.iter().zip(&transforms) {
        let (w, m) = warp(frame, t);
        warped.push(w);
        mask = mask.and(&m)?;
    }
    Ok(RegisteredStack {
        transforms,
        volume: stack_frames(&warped)?,
        mask,
    })
}

/// Registers every frame except `reference` to the template built for it.
fn register_to(
    frames: &[ImageGrid],
    reference: usize,
    opts: &RegistrationOptions,
    template: impl Fn(usize) -> DMatrix<f64> + Sync,
) -> Result<Vec<RigidTransform>> {
    frames
        .par_iter()
        .enumerate()
        .map(|(j, frame)| {
            if j == reference {
                return Ok(RigidTransform::IDENTITY);
            }
            let fixed = ImageGrid::new(template(j))?;
            register_pair(frame, &fixed, opts).map_err(|e| Error::Registration {
                frame: j,
                source: Box::new(e),
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformRow {
    frame: usize,
    dx: f64,
    dy: f64,
    theta_deg: f64,
}

/// Writes one CSV row `frame,dx,dy,theta_deg` per transform.
pub fn write_transforms(path: impl AsRef<Path>, transforms: &[RigidTransform]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Record(format!("{}: {e}", path.display())))?;
    for (frame, t) in transforms.iter().enumerate() {
        w.serialize(TransformRow {
            frame,
            dx: t.dx,
            dy: t.dy,
            theta_deg: t.theta,
        })
        .map_err(|e| Error::Record(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_transforms(path: impl AsRef<Path>) -> Result<Vec<RigidTransform>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Record(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (expected, row) in r.deserialize::<TransformRow>().enumerate() {
        let row = row.map_err(|e| Error::Record(format!("{}: {e}", path.display())))?;
        if row.frame != expected {
            return Err(Error::Record(format!(
                "{}: expected frame {expected}, found {}",
                path.display(),
                row.frame
            )));
        }
        out.push(RigidTransform::new(row.dx, row.dy, row.theta_deg));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(rows: usize, cols: usize) -> ImageGrid {
        let spots = [(30.0, 40.0, 9.0, 1.0), (80.0, 70.0, 14.0, -0.7), (50.0, 100.0, 6.0, 0.8), (100.0, 25.0, 11.0, 0.5)];
        ImageGrid::from_fn(rows, cols, |i, j| {
            let (y, x) = (i as f64, j as f64);
            let mut v = 2.0 + 0.004 * x + 0.3 * (y / 17.0).sin();
            for &(cy, cx, r, a) in &spots {
                v += a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp();
            }
            v
        })
        .unwrap()
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = blobs(20, 24);
        let (out, mask) = warp(&img, &RigidTransform::IDENTITY);
        assert_eq!(out, img);
        assert_eq!(mask.count(), 20 * 24);
    }

    #[test]
    fn unit_shift_moves_ramp_by_one_step() {
        let img = ImageGrid::from_fn(6, 8, |_, j| 0.5 * j as f64).unwrap();
        let (out, mask) = warp(&img, &RigidTransform::new(1.0, 0.0, 0.0));
        for i in 0..6 {
            assert!(!mask.is_valid(i, 0));
            for j in 1..8 {
                assert!(mask.is_valid(i, j));
                assert!((out.get(i, j) - 0.5 * (j - 1) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_and_then_agree_with_point_maps() {
        let a = RigidTransform::new(2.5, -1.25, 3.0);
        let b = RigidTransform::new(-0.5, 4.0, -1.2);
        let (x, y) = (17.0, 5.5);
        let (x1, y1) = a.apply(x, y, 40, 30);
        let (x2, y2) = a.inverse().apply(x1, y1, 40, 30);
        assert!((x2 - x).abs() < 1e-12 && (y2 - y).abs() < 1e-12);
        let (xb, yb) = b.apply(x1, y1, 40, 30);
        let (xc, yc) = a.then(&b).apply(x, y, 40, 30);
        assert!((xb - xc).abs() < 1e-12 && (yb - yc).abs() < 1e-12);
    }

    #[test]
    fn warp_round_trip_on_smooth_image() {
        let img = blobs(128, 128);
        let t = RigidTransform::new(2.3, -1.7, 1.1);
        let (w, m1) = warp(&img, &t);
        let (back, m2) = warp(&w, &t.inverse());
        let mask = m1.and(&m2).unwrap();
        // Points valid after the round trip that were valid in the first warp
        // as well are checked away from the border.
        let mut worst: f64 = 0.0;
        for i in 8..120 {
            for j in 8..120 {
                if mask.is_valid(i, j) {
                    worst = worst.max((back.get(i, j) - img.get(i, j)).abs());
                }
            }
        }
        // Two bilinear resamplings of a signal with curvature below ~0.02 per
        // pixel squared.
        assert!(worst < 0.01, "round-trip error {worst}");
    }

    #[test]
    fn ssd_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = ImageGrid::from_fn(16, 16, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
            let b = ImageGrid::from_fn(16, 16, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
            let flags = DMatrix::from_fn(16, 16, |_, _| rng.gen_bool(0.7));
            let mut sum = 0.0;
            let mut n = 0;
            for i in 0..16 {
                for j in 0..16 {
                    if flags[(i, j)] {
                        sum += (a.get(i, j) - b.get(i, j)).powi(2);
                        n += 1;
                    }
                }
            }
            let got = ssd(&a, &b, &Mask::new(flags)).unwrap();
            assert!((got - sum / n as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn ssd_units() {
        let a = ImageGrid::constant(4, 4, 3.0).unwrap();
        let b = ImageGrid::constant(4, 4, 1.0).unwrap();
        let full = Mask::all_valid(4, 4);
        assert_eq!(ssd(&a, &a, &full).unwrap(), 0.0);
        assert_eq!(ssd(&a, &b, &full).unwrap(), 4.0);
        let empty = Mask::new(DMatrix::from_element(4, 4, false));
        assert!(matches!(ssd(&a, &b, &empty), Err(Error::NoOverlap)));
    }

    #[test]
    fn self_registration_is_identity() {
        let img = blobs(128, 128);
        let t = register_pair(&img, &img, &RegistrationOptions::default()).unwrap();
        assert!(t.dx.abs() < 0.05 && t.dy.abs() < 0.05 && t.theta.abs() < 0.02, "{t:?}");
    }

    #[test]
    fn recovers_translation_and_rotation() {
        let fixed = blobs(128, 128);
        let opts = RegistrationOptions::default();
        for truth in [RigidTransform::new(3.0, -2.0, 0.0), RigidTransform::new(0.0, 0.0, 1.5), RigidTransform::new(-4.2, 3.6, -1.8)] {
            let (moving, _) = warp(&fixed, &truth);
            let t = register_pair(&moving, &fixed, &opts).unwrap();
            let want = truth.inverse();
            assert!(
                (t.dx - want.dx).abs() < 0.25 && (t.dy - want.dy).abs() < 0.25 && (t.theta - want.theta).abs() < 0.1,
                "recovered {t:?}, want {want:?}"
            );
            let before = ssd(&moving, &fixed, &Mask::all_valid(128, 128)).unwrap();
            let (after_img, after_mask) = warp(&moving, &t);
            assert!(ssd(&after_img, &fixed, &after_mask).unwrap() <= before);
        }
    }

    #[test]
    fn stack_registration() {
        let base = blobs(96, 96);
        let truths = [
            RigidTransform::new(1.5, -0.5, 0.4),
            RigidTransform::IDENTITY,
            RigidTransform::new(-2.0, 1.0, -0.8),
        ];
        let frames: Vec<_> = truths.iter().map(|t| warp(&base, t).0).collect();
        let out = register_stack(&frames, 1, &RegistrationOptions::default()).unwrap();
        assert_eq!(out.transforms[1], RigidTransform::IDENTITY);
        for (t, truth) in out.transforms.iter().zip(&truths) {
            let want = truth.inverse();
            assert!((t.dx - want.dx).abs() < 0.25 && (t.dy - want.dy).abs() < 0.25 && (t.theta - want.theta).abs() < 0.1);
        }
        assert!(out.mask.count() < 96 * 96);
        assert_eq!(out.volume.frame_count(), 3);

        let again = register_stack(&frames, 1, &RegistrationOptions::default()).unwrap();
        assert_eq!(again.transforms, out.transforms);

        assert!(register_stack(&frames[..1], 0, &RegistrationOptions::default()).is_err());
    }

    #[test]
    fn identical_frames_register_to_identity() {
        let base = blobs(64, 64);
        let frames = vec![base.clone(), base.clone(), base];
        let out = register_stack(&frames, 0, &RegistrationOptions::default()).unwrap();
        for t in out.transforms {
            assert!(t.dx.abs() < 0.05 && t.dy.abs() < 0.05 && t.theta.abs() < 0.02);
        }
    }

    #[test]
    fn transform_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let ts = vec![RigidTransform::IDENTITY, RigidTransform::new(0.125, -3.5, 1.0 / 3.0)];
        write_transforms(&path, &ts).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("frame,dx,dy,theta_deg\n"));
        assert_eq!(read_transforms(&path).unwrap(), ts);
    }

    #[test]
    fn invalid_options_are_rejected() {
        let opts = RegistrationOptions {
            max_rotation: 0.0,
            ..Default::default()
        };
        let img = blobs(32, 32);
        let err = register_pair(&img, &img, &opts).unwrap_err();
        assert!(err.to_string().contains("max_rotation"));
    }

    #[test]
    fn noise_model_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = DMatrix::from_fn(80, 80, |_, _| 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal));
        let raw = NoiseModel::estimate(&img, None);
        assert!((raw.variance.sqrt() / 0.3 - 1.0).abs() < 0.05, "{}", raw.variance.sqrt());
        assert_eq!(raw.factor(0.0, 0.0), 1.0);
        assert_eq!(raw.factor(0.5, 0.5), 0.25);

        // empirical variance and lag-1 correlation of the blurred noise
        let kernel = gaussian_kernel(1.0);
        let smooth = NoiseModel::estimate(&img, Some(&kernel));
        let blurred = gaussian_blur(&img, 1.0);
        let inner = blurred.view((10, 10), (60, 60)).clone_owned();
        let var = inner.map(|v| v * v).mean();
        let lag: f64 = (0..60).flat_map(|j| (0..59).map(move |i| (i, j))).map(|(i, j)| inner[(i, j)] * inner[(i + 1, j)]).sum::<f64>() / (59.0 * 60.0);
        assert!((smooth.variance / var - 1.0).abs() < 0.2, "{} vs {var}", smooth.variance);
        assert!((smooth.r1 - lag / var).abs() < 0.05, "{} vs {}", smooth.r1, lag / var);
    }

    #[test]
    fn refinement_can_be_disabled() {
        let base = blobs(64, 64);
        let truths = [RigidTransform::new(0.7, 0.2, 0.3), RigidTransform::IDENTITY, RigidTransform::new(-1.0, 0.5, -0.5)];
        let frames: Vec<_> = truths.iter().map(|t| warp(&base, t).0).collect();
        let plain = RegistrationOptions {
            refine_passes: 0,
            ..Default::default()
        };
        let once = register_stack(&frames, 1, &plain).unwrap();
        for (j, t) in once.transforms.iter().enumerate() {
            if j != 1 {
                assert_eq!(*t, register_pair(&frames[j], &frames[1], &plain).unwrap());
            }
        }
    }
}
