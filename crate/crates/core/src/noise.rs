//! Per-pixel noise level in log space.
//!
//! For every pixel a MAD estimate is taken over each inner window that fits
//! inside the outer window around it; the histogram mode of those estimates is
//! then smoothed by a separable cubic smoothing spline.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ImageGrid, LogVolume, Mask, SigmaMap};

/// Gaussian consistency factor for the median absolute deviation.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseOptions {
    /// Side of the MAD window.
    pub inner: usize,
    /// Side of the window whose contained MAD windows vote for the mode.
    pub outer: usize,
    pub bin_width: f64,
    /// Smoothing parameter in (0, 1]; 1 interpolates.
    pub spline_p: f64,
}

impl Default for NoiseOptions {
    fn default() -> Self {
        NoiseOptions {
            inner: 9,
            outer: 15,
            bin_width: 0.01,
            spline_p: 0.5,
        }
    }
}

impl NoiseOptions {
    pub fn validate(&self) -> Result<()> {
        if self.inner % 2 == 0 {
            return Err(Error::param("inner", format!("window side must be odd, got {}", self.inner)));
        }
        if self.outer % 2 == 0 || self.outer <= self.inner {
            return Err(Error::param(
                "outer",
                format!("window side must be odd and larger than inner ({}), got {}", self.inner, self.outer),
            ));
        }
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return Err(Error::param("bin_width", "must be positive"));
        }
        if !(self.spline_p > 0.0 && self.spline_p <= 1.0) {
            return Err(Error::param("spline_p", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let len = v.len();
    let (lo, m, _) = v.select_nth_unstable_by(len / 2, f64::total_cmp);
    let m = *m;
    if len % 2 == 1 {
        m
    } else {
        let below = lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}

fn mad_of(values: &mut [f64]) -> f64 {
    let med = median_in_place(values);
    values.iter_mut().for_each(|v| *v = (*v - med).abs());
    MAD_SCALE * median_in_place(values)
}

/// `1.4826 * median |x - median(x)|` over the `window x window` neighbourhood
/// of `(row, col)`, with replicate padding at the borders.
pub fn mad_sigma(grid: &ImageGrid, row: usize, col: usize, window: usize) -> f64 {
    let mut buf = Vec::with_capacity(window * window);
    mad_at(grid.values(), row, col, window, &mut buf)
}

fn mad_at(img: &DMatrix<f64>, row: usize, col: usize, window: usize, buf: &mut Vec<f64>) -> f64 {
    let (m, n) = img.shape();
    let r = (window / 2) as isize;
    buf.clear();
    for dj in -r..=r {
        let j = (col as isize + dj).clamp(0, n as isize - 1) as usize;
        for di in -r..=r {
            let i = (row as isize + di).clamp(0, m as isize - 1) as usize;
            buf.push(img[(i, j)]);
        }
    }
    mad_of(buf)
}

/// Center of the most populated bin, ties going to the lower bin. Bins have
/// width `bin_width` and are centered on its integer multiples, so a list of
/// zeros has mode exactly 0.
pub fn mode_sigma(candidates: &[f64], bin_width: f64) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty("mode of an empty candidate list".into()));
    }
    if !(bin_width > 0.0) {
        return Err(Error::param("bin_width", "must be positive"));
    }
    if let Some(v) = candidates.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::param("candidates", format!("must be finite and nonnegative, found {v}")));
    }
    let mut bins: Vec<u64> = candidates.iter().map(|v| bin_of(*v, bin_width)).collect();
    Ok(mode_of_bins(&mut bins) as f64 * bin_width)
}

fn bin_of(v: f64, bin_width: f64) -> u64 {
    (v / bin_width).round() as u64
}

fn mode_of_bins(bins: &mut [u64]) -> u64 {
    bins.sort_unstable();
    let (mut best, mut best_count) = (bins[0], 0);
    let mut start = 0;
    while start < bins.len() {
        let mut end = start;
        while end < bins.len() && bins[end] == bins[start] {
            end += 1;
        }
        if end - start > best_count {
            best = bins[start];
            best_count = end - start;
        }
        start = end;
    }
    best
}

/// MAD estimate centered at every pixel.
pub fn mad_field(frame: &ImageGrid, window: usize) -> DMatrix<f64> {
    let img = frame.values();
    let mut buf = Vec::with_capacity(window * window);
    DMatrix::from_fn(img.nrows(), img.ncols(), |i, j| mad_at(img, i, j, window, &mut buf))
}

/// Pre-smoothing field: at each pixel the mode of the MAD estimates of all
/// inner windows contained in the outer window.
pub fn mode_field(frame: &ImageGrid, opts: &NoiseOptions) -> Result<DMatrix<f64>> {
    opts.validate()?;
    check_size(frame.rows(), frame.cols(), opts)?;
    let mad = mad_field(frame, opts.inner);
    let (m, n) = mad.shape();
    let reach = ((opts.outer - opts.inner) / 2) as isize;
    let mut bins = Vec::with_capacity(((2 * reach + 1) * (2 * reach + 1)) as usize);
    Ok(DMatrix::from_fn(m, n, |i, j| {
        bins.clear();
        for dj in -reach..=reach {
            let jj = (j as isize + dj).clamp(0, n as isize - 1) as usize;
            for di in -reach..=reach {
                let ii = (i as isize + di).clamp(0, m as isize - 1) as usize;
                bins.push(bin_of(mad[(ii, jj)], opts.bin_width));
            }
        }
        mode_of_bins(&mut bins) as f64 * opts.bin_width
    }))
}

fn check_size(rows: usize, cols: usize, opts: &NoiseOptions) -> Result<()> {
    if rows < opts.outer || cols < opts.outer {
        return Err(Error::Shape(format!(
            "frame {rows}x{cols} is smaller than the {0}x{0} outer window",
            opts.outer
        )));
    }
    Ok(())
}

/// Natural cubic smoothing spline on unit-spaced samples, minimizing
/// `p * sum (y - f)^2 + (1 - p) * integral f''^2`.
///
/// Solved in Reinsch form: `(R + a Q'Q) g = Q'y`, `f = y - a Q g` with
/// `a = (1 - p) / p`, which is pentadiagonal and factored once per length.
#[derive(Debug, Clone)]
pub struct SmoothingSpline {
    len: usize,
    alpha: f64,
    /// Banded Cholesky factor: (diagonal, first subdiagonal, second subdiagonal).
    chol: Vec<[f64; 3]>,
}

impl SmoothingSpline {
    pub fn new(len: usize, p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::param("spline_p", "must lie in (0, 1]"));
        }
        let alpha = (1.0 - p) / p;
        let k = len.saturating_sub(2);
        let (d, e, f) = (2.0 / 3.0 + 6.0 * alpha, 1.0 / 6.0 - 4.0 * alpha, alpha);
        let mut chol: Vec<[f64; 3]> = Vec::with_capacity(k);
        for i in 0..k {
            let l2 = if i >= 2 { f / chol[i - 2][0] } else { 0.0 };
            let l1 = if i >= 1 {
                let prev = if i >= 2 { chol[i - 1][1] } else { 0.0 };
                (e - l2 * prev) / chol[i - 1][0]
            } else {
                0.0
            };
            chol.push([(d - l1 * l1 - l2 * l2).sqrt(), l1, l2]);
        }
        Ok(SmoothingSpline { len, alpha, chol })
    }

    pub fn smooth(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.len, "spline length mismatch");
        let k = self.chol.len();
        if k == 0 || self.alpha == 0.0 {
            return y.to_vec();
        }
        // Q'y: second differences.
        let mut g: Vec<f64> = (0..k).map(|i| y[i] - 2.0 * y[i + 1] + y[i + 2]).collect();
        for i in 0..k {
            let mut v = g[i];
            if i >= 1 {
                v -= self.chol[i][1] * g[i - 1];
            }
            if i >= 2 {
                v -= self.chol[i][2] * g[i - 2];
            }
            g[i] = v / self.chol[i][0];
        }
        for i in (0..k).rev() {
            let mut v = g[i];
            if i + 1 < k {
                v -= self.chol[i + 1][1] * g[i + 1];
            }
            if i + 2 < k {
                v -= self.chol[i + 2][2] * g[i + 2];
            }
            g[i] = v / self.chol[i][0];
        }
        // g[i] belongs to knot i + 1; knots 0 and len - 1 carry zero.
        let at = |knot: usize| if knot >= 1 && knot <= k { g[knot - 1] } else { 0.0 };
        (0..self.len)
            .map(|t| {
                let qg = at(t + 1) - 2.0 * at(t) + if t >= 1 { at(t - 1) } else { 0.0 };
                y[t] - self.alpha * qg
            })
            .collect()
    }
}

/// Smooths every row, then every column.
pub fn smooth_field(field: &DMatrix<f64>, p: f64) -> Result<DMatrix<f64>> {
    let (m, n) = field.shape();
    let along_rows = SmoothingSpline::new(n, p)?;
    let along_cols = SmoothingSpline::new(m, p)?;
    let mut out = field.clone();
    for i in 0..m {
        let row: Vec<f64> = out.row(i).iter().copied().collect();
        for (j, v) in along_rows.smooth(&row).into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    for j in 0..n {
        let col: Vec<f64> = out.column(j).iter().copied().collect();
        for (i, v) in along_cols.smooth(&col).into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Replaces invalid pixels by the value of the closest valid pixel in
/// 4-connected steps; ties go to the first pixel reached in column-major scan
/// order.
pub fn fill_invalid(field: &DMatrix<f64>, mask: &Mask) -> Result<DMatrix<f64>> {
    if field.shape() != (mask.rows(), mask.cols()) {
        return Err(Error::Shape("mask does not match the field".into()));
    }
    let (m, n) = field.shape();
    let mut out = field.clone();
    let mut done = mask.flags().clone();
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    for j in 0..n {
        for i in 0..m {
            if done[(i, j)] {
                queue.push_back((i, j));
            }
        }
    }
    if queue.is_empty() {
        return Err(Error::Empty("mask has no valid pixel".into()));
    }
    while let Some((i, j)) = queue.pop_front() {
        let v = out[(i, j)];
        let neighbours = [
            (i.wrapping_sub(1), j),
            (i + 1, j),
            (i, j.wrapping_sub(1)),
            (i, j + 1),
        ];
        for (a, b) in neighbours {
            if a < m && b < n && !done[(a, b)] {
                done[(a, b)] = true;
                out[(a, b)] = v;
                queue.push_back((a, b));
            }
        }
    }
    Ok(out)
}

/// Noise map of one frame.
pub fn estimate_frame_sigma(frame: &ImageGrid, mask: &Mask, opts: &NoiseOptions) -> Result<DMatrix<f64>> {
    let field = mode_field(frame, opts)?;
    let field = fill_invalid(&field, mask)?;
    Ok(smooth_field(&field, opts.spline_p)?.map(|v| v.max(0.0)))
}

/// Noise map for every frame of a registered volume, frames in parallel.
pub fn estimate_sigma(volume: &LogVolume, mask: &Mask, opts: &NoiseOptions) -> Result<SigmaMap> {
    opts.validate()?;
    check_size(volume.rows(), volume.cols(), opts)?;
    if (mask.rows(), mask.cols()) != (volume.rows(), volume.cols()) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match frames {}x{}",
            mask.rows(),
            mask.cols(),
            volume.rows(),
            volume.cols()
        )));
    }
    let frames: Vec<DMatrix<f64>> = (0..volume.frame_count())
        .into_par_iter()
        .map(|j| estimate_frame_sigma(&volume.frame(j), mask, opts))
        .collect::<Result<_>>()?;
    SigmaMap::from_frames(&frames)
}
