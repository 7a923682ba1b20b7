//! PSNR, SSIM and Pratt's figure of merit on Canny edges.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{gaussian_blur, gaussian_taps};
use crate::imageio::{RawImage, Roi};

fn check_pair(a: &RawImage, b: &RawImage) -> Result<()> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::Shape(format!(
            "images are {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if a.depth() != b.depth() {
        return Err(Error::Shape(format!(
            "bit depths differ: {} and {}",
            a.depth().bits(),
            b.depth().bits()
        )));
    }
    Ok(())
}

/// `10 log10(MAX^2 / MSE)` in dB; identical images give `f64::INFINITY`.
pub fn psnr(recon: &RawImage, reference: &RawImage) -> Result<f64> {
    check_pair(recon, reference)?;
    let sse: f64 = recon
        .pixels()
        .iter()
        .zip(reference.pixels().iter())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / (recon.rows() * recon.cols()) as f64;
    let max = f64::from(reference.max_value());
    Ok(10.0 * (max * max / mse).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// Separable weighted sum over every fully contained window.
fn valid_filter(img: &DMatrix<f64>, taps: &[f64]) -> DMatrix<f64> {
    let w = taps.len();
    let (m, n) = img.shape();
    let (vm, vn) = (m + 1 - w, n + 1 - w);
    let rows = DMatrix::from_fn(m, vn, |i, j| -> f64 { taps.iter().enumerate().map(|(t, k)| k * img[(i, j + t)]).sum() });
    DMatrix::from_fn(vm, vn, |i, j| -> f64 { taps.iter().enumerate().map(|(t, k)| k * rows[(i + t, j)]).sum() })
}

/// Mean structural similarity over all Gaussian-weighted windows that fit in
/// the image.
pub fn ssim(recon: &RawImage, reference: &RawImage, opts: &SsimOptions) -> Result<f64> {
    check_pair(recon, reference)?;
    if opts.window == 0 || opts.window % 2 == 0 || !(opts.sigma > 0.0) {
        return Err(Error::param("ssim.window", "window must be odd and sigma positive"));
    }
    if recon.rows() < opts.window || recon.cols() < opts.window {
        return Err(Error::Shape(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            recon.rows(),
            recon.cols(),
            opts.window,
            opts.window
        )));
    }
    let max = f64::from(reference.max_value());
    let c1 = (opts.k1 * max).powi(2);
    let c2 = (opts.k2 * max).powi(2);
    let taps = gaussian_taps(opts.sigma, opts.window / 2);
    let x = recon.to_f64();
    let y = reference.to_f64();
    let mx = valid_filter(&x, &taps);
    let my = valid_filter(&y, &taps);
    let sxx = valid_filter(&x.component_mul(&x), &taps);
    let syy = valid_filter(&y.component_mul(&y), &taps);
    let sxy = valid_filter(&x.component_mul(&y), &taps);
    let mut total = 0.0;
    for idx in 0..mx.len() {
        let (a, b) = (mx[idx], my[idx]);
        let va = sxx[idx] - a * a;
        let vb = syy[idx] - b * b;
        let cov = sxy[idx] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (va + vb + c2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CannyOptions {
    pub sigma: f64,
    /// Fraction of the nonzero gradient magnitudes below the high threshold.
    pub high_percentile: f64,
    /// Low threshold as a fraction of the high one.
    pub low_ratio: f64,
}

impl Default for CannyOptions {
    fn default() -> Self {
        CannyOptions {
            sigma: std::f64::consts::SQRT_2,
            high_percentile: 0.7,
            low_ratio: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub edges: DMatrix<bool>,
}

impl EdgeMap {
    pub fn count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Magnitudes at or below this are treated as zero.
const FLAT: f64 = 1e-9;

/// Gaussian smoothing, Sobel gradients, non-maximum suppression and 8-connected
/// hysteresis. The high threshold is the `high_percentile` nearest-rank
/// percentile of the nonzero gradient magnitudes. Along the gradient a pixel
/// survives suppression when it is strictly above the neighbour behind it and
/// not below the one ahead, so a plateau two pixels wide yields one line.
pub fn canny(img: &RawImage, opts: &CannyOptions) -> Result<EdgeMap> {
    if !(opts.sigma >= 0.0) || !(0.0..=1.0).contains(&opts.high_percentile) || !(0.0..=1.0).contains(&opts.low_ratio) {
        return Err(Error::param("canny", "sigma must be >= 0 and the percentile and ratio in [0, 1]"));
    }
    let smooth = gaussian_blur(&img.to_f64(), opts.sigma);
    let (m, n) = smooth.shape();
    let at = |i: isize, j: isize| smooth[(i.clamp(0, m as isize - 1) as usize, j.clamp(0, n as isize - 1) as usize)];
    let mut gx = DMatrix::zeros(m, n);
    let mut gy = DMatrix::zeros(m, n);
    for j in 0..n as isize {
        for i in 0..m as isize {
            let (u, v) = (i as usize, j as usize);
            gx[(u, v)] = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1)) - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            gy[(u, v)] = (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1)) - (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1));
        }
    }
    let mag = DMatrix::from_fn(m, n, |i, j| {
        let g = gx[(i, j)].hypot(gy[(i, j)]);
        if g > FLAT {
            g
        } else {
            0.0
        }
    });
    let mut nonzero: Vec<f64> = mag.iter().copied().filter(|&g| g > 0.0).collect();
    if nonzero.is_empty() {
        return Ok(EdgeMap {
            edges: DMatrix::from_element(m, n, false),
        });
    }
    nonzero.sort_by(f64::total_cmp);
    let rank = ((opts.high_percentile * nonzero.len() as f64).ceil() as usize).clamp(1, nonzero.len());
    let high = nonzero[rank - 1];
    let low = opts.low_ratio * high;

    let get = |i: isize, j: isize| {
        if i < 0 || j < 0 || i >= m as isize || j >= n as isize {
            0.0
        } else {
            mag[(i as usize, j as usize)]
        }
    };
    let mut thin = DMatrix::from_element(m, n, 0.0);
    for j in 0..n {
        for i in 0..m {
            let g = mag[(i, j)];
            if g == 0.0 {
                continue;
            }
            let angle = gy[(i, j)].atan2(gx[(i, j)]).to_degrees().rem_euclid(180.0);
            let (di, dj) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (ii, jj) = (i as isize, j as isize);
            if g > get(ii - di, jj - dj) && g >= get(ii + di, jj + dj) {
                thin[(i, j)] = g;
            }
        }
    }

    let mut edges = DMatrix::from_element(m, n, false);
    let mut stack = Vec::new();
    for j in 0..n {
        for i in 0..m {
            if thin[(i, j)] >= high && !edges[(i, j)] {
                edges[(i, j)] = true;
                stack.push((i, j));
                while let Some((a, b)) = stack.pop() {
                    for da in -1isize..=1 {
                        for db in -1isize..=1 {
                            let (x, y) = (a as isize + da, b as isize + db);
                            if x < 0 || y < 0 || x >= m as isize || y >= n as isize {
                                continue;
                            }
                            let (x, y) = (x as usize, y as usize);
                            if !edges[(x, y)] && thin[(x, y)] >= low && thin[(x, y)] > 0.0 {
                                edges[(x, y)] = true;
                                stack.push((x, y));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(EdgeMap { edges })
}

const FAR: f64 = 1e20;

/// One-dimensional squared distance transform of a sampled function (lower
/// envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance to the nearest `true` pixel.
pub fn squared_distance_transform(edges: &DMatrix<bool>) -> DMatrix<f64> {
    let (m, n) = edges.shape();
    let mut d = edges.map(|e| if e { 0.0 } else { FAR });
    let mut buf = vec![0.0; m.max(n)];
    for j in 0..n {
        let col: Vec<f64> = d.column(j).iter().copied().collect();
        edt_1d(&col, &mut buf[..m]);
        for i in 0..m {
            d[(i, j)] = buf[i];
        }
    }
    for i in 0..m {
        let row: Vec<f64> = d.row(i).iter().copied().collect();
        edt_1d(&row, &mut buf[..n]);
        for j in 0..n {
            d[(i, j)] = buf[j];
        }
    }
    d
}

/// Pratt's figure of merit
/// `sum_i 1 / (1 + gamma d_i^2) / max(n_recon, n_ref)` over the recon edges.
pub fn fom(recon: &EdgeMap, reference: &EdgeMap, gamma: f64) -> Result<f64> {
    if recon.edges.shape() != reference.edges.shape() {
        return Err(Error::Shape("edge maps differ in size".into()));
    }
    let n_ref = reference.count();
    if n_ref == 0 {
        return Err(Error::Empty("reference edge map has no edges".into()));
    }
    let n_recon = recon.count();
    if n_recon == 0 {
        return Ok(0.0);
    }
    let d2 = squared_distance_transform(&reference.edges);
    let sum: f64 = recon
        .edges
        .iter()
        .zip(d2.iter())
        .filter(|(&e, _)| e)
        .map(|(_, &d)| 1.0 / (1.0 + gamma * d))
        .sum();
    Ok(sum / n_recon.max(n_ref) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsOptions {
    pub ssim: SsimOptions,
    pub canny: CannyOptions,
    pub fom_gamma: f64,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions {
            ssim: SsimOptions::default(),
            canny: CannyOptions::default(),
            fom_gamma: 1.0 / 9.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub region: String,
    /// `inf` when the images are identical.
    pub psnr_db: f64,
    pub ssim: f64,
    /// Absent when the reference has no edges in the region.
    pub fom: Option<f64>,
}

pub fn region_metrics(name: &str, recon: &RawImage, reference: &RawImage, opts: &MetricsOptions) -> Result<MetricsReport> {
    let psnr_db = psnr(recon, reference)?;
    let ssim = ssim(recon, reference, &opts.ssim)?;
    let ref_edges = canny(reference, &opts.canny)?;
    let fom = if ref_edges.is_empty() {
        None
    } else {
        Some(fom(&canny(recon, &opts.canny)?, &ref_edges, opts.fom_gamma)?)
    };
    Ok(MetricsReport {
        region: name.to_string(),
        psnr_db,
        ssim,
        fom,
    })
}

/// Whole-image report (region `image`) followed by one report per ROI.
pub fn evaluate(recon: &RawImage, reference: &RawImage, rois: &[Roi], opts: &MetricsOptions) -> Result<Vec<MetricsReport>> {
    check_pair(recon, reference)?;
    for roi in rois {
        if roi.width == 0 || roi.height == 0 || roi.x + roi.width > recon.cols() || roi.y + roi.height > recon.rows() {
            return Err(Error::param(
                "roi",
                format!(
                    "`{}` ({}, {}, {}x{}) is outside the {}x{} image",
                    roi.name,
                    roi.x,
                    roi.y,
                    roi.width,
                    roi.height,
                    recon.cols(),
                    recon.rows()
                ),
            ));
        }
    }
    let whole = region_metrics("image", recon, reference, opts)?;
    let mut out = vec![whole];
    let parts: Vec<MetricsReport> = rois
        .par_iter()
        .map(|roi| {
            let a = recon.crop(roi.x, roi.y, roi.width, roi.height)?;
            let b = reference.crop(roi.x, roi.y, roi.width, roi.height)?;
            region_metrics(&roi.name, &a, &b, opts)
        })
        .collect::<Result<_>>()?;
    out.extend(parts);
    Ok(out)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    image: &'a str,
    region: &'a str,
    psnr_db: f64,
    ssim: f64,
    fom: Option<f64>,
}

/// Columns `image,region,psnr_db,ssim,fom`; an infinite PSNR is written as
/// `inf` and a missing FOM as an empty field.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[(String, MetricsReport)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Record(format!("{}: {e}", path.display())))?;
    for (image, r) in rows {
        w.serialize(CsvRow {
            image,
            region: &r.region,
            psnr_db: r.psnr_db,
            ssim: r.ssim,
            fom: r.fom,
        })
        .map_err(|e| Error::Record(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::BitDepth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img8(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> u16) -> RawImage {
        RawImage::from_fn(rows, cols, BitDepth::Eight, f).unwrap()
    }

    fn textured(seed: u64) -> RawImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        img8(40, 48, |i, j| ((i * 5 + j * 3) % 200) as u16 + rng.gen_range(0..40))
    }

    #[test]
    fn psnr_units() {
        let a = textured(1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let base = img8(8, 8, |i, j| (i * 8 + j) as u16);
        let plus = img8(8, 8, |i, j| (i * 8 + j) as u16 + 1);
        assert!((psnr(&plus, &base).unwrap() - 48.1308).abs() < 1e-3);
        assert!((psnr(&plus, &base).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-12);
        let wide = RawImage::from_fn(8, 8, BitDepth::Sixteen, |_, _| 1).unwrap();
        assert_eq!(psnr(&wide, &base).unwrap_err().kind(), "shape");
    }

    #[test]
    fn psnr_is_symmetric_and_falls_with_noise() {
        let a = textured(2);
        let b = textured(3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..a.rows() * a.cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [1.0, 3.0, 9.0, 27.0] {
            let values = DMatrix::from_fn(a.rows(), a.cols(), |i, j| f64::from(a.get(i, j)) + amp * noise[i + j * a.rows()]);
            let p = psnr(&crate::imageio::from_linear(&values, BitDepth::Eight), &a).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_units() {
        let a = textured(5);
        assert!((ssim(&a, &a, &SsimOptions::default()).unwrap() - 1.0).abs() < 1e-12);
        let r = img8(16, 16, |_, _| 100);
        let x = img8(16, 16, |_, _| 150);
        let (c1, c2) = (6.5025, 58.5225);
        let want = (2.0 * 100.0 * 150.0 + c1) * c2 / ((100f64.powi(2) + 150f64.powi(2) + c1) * c2);
        let got = ssim(&x, &r, &SsimOptions::default()).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.92313).abs() < 1e-4);
        assert!(ssim(&img8(10, 20, |_, _| 1), &img8(10, 20, |_, _| 1), &SsimOptions::default()).is_err());
    }

    #[test]
    fn ssim_is_symmetric() {
        let (a, b) = (textured(6), textured(7));
        let o = SsimOptions::default();
        assert!((ssim(&a, &b, &o).unwrap() - ssim(&b, &a, &o).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn canny_on_constant_and_step() {
        let flat = img8(16, 16, |_, _| 90);
        assert!(canny(&flat, &CannyOptions::default()).unwrap().is_empty());
        let step = img8(16, 16, |_, j| if j < 8 { 40 } else { 200 });
        let e = canny(&step, &CannyOptions::default()).unwrap();
        for i in 0..16 {
            let cols: Vec<usize> = (0..16).filter(|&j| e.edges[(i, j)]).collect();
            assert_eq!(cols, vec![7], "row {i}");
        }
        assert_eq!(e, canny(&step, &CannyOptions::default()).unwrap());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let edges = DMatrix::from_fn(13, 17, |_, _| rng.gen_bool(0.05));
            if !edges.iter().any(|&e| e) {
                continue;
            }
            let d = squared_distance_transform(&edges);
            for i in 0..13 {
                for j in 0..17 {
                    let mut best = usize::MAX;
                    for a in 0..13 {
                        for b in 0..17 {
                            if edges[(a, b)] {
                                best = best.min(a.abs_diff(i).pow(2) + b.abs_diff(j).pow(2));
                            }
                        }
                    }
                    assert_eq!(d[(i, j)], best as f64);
                }
            }
        }
    }

    fn single(i: usize, j: usize) -> EdgeMap {
        EdgeMap {
            edges: DMatrix::from_fn(9, 9, |a, b| (a, b) == (i, j)),
        }
    }

    #[test]
    fn fom_units() {
        let e = EdgeMap {
            edges: DMatrix::from_fn(9, 9, |a, b| a == b || a == 2),
        };
        assert_eq!(fom(&e, &e, 1.0 / 9.0).unwrap(), 1.0);
        assert!((fom(&single(4, 5), &single(4, 4), 1.0 / 9.0).unwrap() - 0.9).abs() < 1e-12);
        let none = EdgeMap {
            edges: DMatrix::from_element(9, 9, false),
        };
        assert_eq!(fom(&none, &e, 1.0 / 9.0).unwrap(), 0.0);
        assert!(fom(&e, &none, 1.0 / 9.0).is_err());
    }

    #[test]
    fn fom_falls_with_displacement() {
        let reference = single(4, 0);
        let mut last = 1.0;
        for d in 1..9 {
            let v = fom(&single(4, d), &reference, 1.0 / 9.0).unwrap();
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn evaluate_decomposes_over_regions() {
        let (a, b) = (textured(9), textured(10));
        let opts = MetricsOptions::default();
        assert_eq!(evaluate(&a, &b, &[], &opts).unwrap().len(), 1);
        let full = Roi {
            name: "all".into(),
            x: 0,
            y: 0,
            width: 48,
            height: 40,
        };
        let r = evaluate(&a, &b, &[full], &opts).unwrap();
        assert_eq!((r[0].psnr_db, r[0].ssim, r[0].fom), (r[1].psnr_db, r[1].ssim, r[1].fom));

        let left = Roi {
            name: "left".into(),
            x: 0,
            y: 0,
            width: 20,
            height: 40,
        };
        let right = Roi {
            name: "right".into(),
            x: 24,
            y: 5,
            width: 24,
            height: 30,
        };
        let both = evaluate(&a, &b, &[left.clone(), right.clone()], &opts).unwrap();
        assert_eq!(both[1], evaluate(&a, &b, &[left], &opts).unwrap()[1]);
        assert_eq!(both[2], evaluate(&a, &b, &[right], &opts).unwrap()[1]);

        let outside = Roi {
            name: "bad".into(),
            x: 40,
            y: 0,
            width: 10,
            height: 10,
        };
        assert!(evaluate(&a, &b, &[outside], &opts).unwrap_err().to_string().contains("bad"));
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            (
                "denoised".to_string(),
                MetricsReport {
                    region: "image".into(),
                    psnr_db: f64::INFINITY,
                    ssim: 1.0,
                    fom: None,
                },
            ),
            (
                "average".to_string(),
                MetricsReport {
                    region: "lesion0".into(),
                    psnr_db: 30.5,
                    ssim: 0.8,
                    fom: Some(0.7),
                },
            ),
        ];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "image,region,psnr_db,ssim,fom\ndenoised,image,inf,1.0,\naverage,lesion0,30.5,0.8,0.7\n");
    }
}
