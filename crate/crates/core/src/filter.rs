//! Small separable filters shared by registration and the metrics.

use nalgebra::DMatrix;

/// Normalized 1D Gaussian taps with radius `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    gaussian_taps(sigma, radius)
}

pub(crate) fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as f64;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Same-size separable convolution with replicate boundaries.
pub(crate) fn convolve_separable(img: &DMatrix<f64>, kernel: &[f64]) -> DMatrix<f64> {
    let (m, n) = img.shape();
    let r = kernel.len() as isize / 2;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let rows = DMatrix::from_fn(m, n, |i, j| -> f64 {
        kernel
            .iter()
            .enumerate()
            .map(|(t, w)| w * img[(i, clamp(j as isize + t as isize - r, n))])
            .sum()
    });
    DMatrix::from_fn(m, n, |i, j| -> f64 {
        kernel
            .iter()
            .enumerate()
            .map(|(t, w)| w * rows[(clamp(i as isize + t as isize - r, m), j)])
            .sum()
    })
}

pub(crate) fn gaussian_blur(img: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    convolve_separable(img, &gaussian_kernel(sigma))
}

/// 2x2 block means; a trailing odd row or column is dropped.
pub(crate) fn downsample2(img: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = (img.nrows() / 2, img.ncols() / 2);
    DMatrix::from_fn(m, n, |i, j| {
        0.25 * (img[(2 * i, 2 * j)]
            + img[(2 * i + 1, 2 * j)]
            + img[(2 * i, 2 * j + 1)]
            + img[(2 * i + 1, 2 * j + 1)])
    })
}
