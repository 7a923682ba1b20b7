//! Numeric containers for image stacks and the forward-difference gradient
//! operator `P = [H1; H2]` shared by the solver and the noise model.
//!
//! Frames are flattened column-major: pixel `(row i, col j)` of an `m x n`
//! frame lives at index `i + j * m` of its column in the stack matrix. This is
//! the native layout of `nalgebra::DMatrix`, so an `m x n` grid's backing
//! slice *is* its flattened column.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A single real-valued frame, usually in the log-intensity domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    values: DMatrix<f64>,
}

impl ImageGrid {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() < 2 {
            return Err(Error::Shape(format!(
                "image grid must be at least 2x2, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("values", "image grid contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(DMatrix::from_fn(rows, cols, f))
    }

    pub fn constant(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(rows, cols, value))
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[(row, col)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    /// Column-major flattened pixel values.
    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.rows() == other.rows() && self.cols() == other.cols()
    }
}

/// Per-pixel validity flags, `true` where a pixel carries real data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    valid: DMatrix<bool>,
}

impl Mask {
    pub fn new(valid: DMatrix<bool>) -> Self {
        Self { valid }
    }

    pub fn all_valid(rows: usize, cols: usize) -> Self {
        Self::new(DMatrix::from_element(rows, cols, true))
    }

    pub fn rows(&self) -> usize {
        self.valid.nrows()
    }

    pub fn cols(&self) -> usize {
        self.valid.ncols()
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[(row, col)]
    }

    pub fn flags(&self) -> &DMatrix<bool> {
        &self.valid
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.rows() != other.rows() || self.cols() != other.cols() {
            return Err(Error::Shape("mask geometries differ".into()));
        }
        Ok(Mask::new(self.valid.zip_map(&other.valid, |a, b| a && b)))
    }

    /// Largest-effort axis-aligned rectangle `(x, y, w, h)` containing only
    /// valid pixels, found by repeatedly trimming whichever border line holds
    /// the most invalid pixels. Returns `None` when nothing valid remains.
    pub fn valid_rect(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut top, mut left) = (0usize, 0usize);
        let (mut bottom, mut right) = (self.rows(), self.cols());
        loop {
            if top >= bottom || left >= right {
                return None;
            }
            let row_bad =
                |r: usize| (left..right).filter(|&c| !self.valid[(r, c)]).count();
            let col_bad =
                |c: usize| (top..bottom).filter(|&r| !self.valid[(r, c)]).count();
            let sides = [
                row_bad(top),
                row_bad(bottom - 1),
                col_bad(left),
                col_bad(right - 1),
            ];
            let (side, &worst) = sides
                .iter()
                .enumerate()
                .max_by_key(|&(i, v)| (*v, std::cmp::Reverse(i)))
                .expect("four sides");
            if worst == 0 {
                return Some((left, top, right - left, bottom - top));
            }
            match side {
                0 => top += 1,
                1 => bottom -= 1,
                2 => left += 1,
                _ => right -= 1,
            }
        }
    }
}

/// Registered stack: `(m*n) x k` matrix, column `j` is frame `j` flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct LogVolume {
    rows: usize,
    cols: usize,
    data: DMatrix<f64>,
}

impl LogVolume {
    pub fn from_matrix(rows: usize, cols: usize, data: DMatrix<f64>) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::Shape(format!("frames must be at least 2x2, got {rows}x{cols}")));
        }
        if data.nrows() != rows * cols {
            return Err(Error::Shape(format!(
                "volume has {} rows, expected {} for {rows}x{cols} frames",
                data.nrows(),
                rows * cols
            )));
        }
        if data.ncols() < 2 {
            return Err(Error::Shape(format!(
                "a volume needs at least 2 frames, got {}",
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("data", "volume contains non-finite values"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn frame_count(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    /// Extracts frame `j` as an image (the inverse of [`stack_frames`]).
    pub fn frame(&self, j: usize) -> ImageGrid {
        column_to_grid(self.rows, self.cols, &self.data, j)
    }

    pub fn frames(&self) -> Vec<ImageGrid> {
        (0..self.frame_count()).map(|j| self.frame(j)).collect()
    }

    /// Per-pixel mean over frames.
    pub fn mean_frame(&self) -> ImageGrid {
        let k = self.frame_count() as f64;
        let mean = self.data.column_sum() / k;
        ImageGrid {
            values: DMatrix::from_column_slice(self.rows, self.cols, mean.as_slice()),
        }
    }
}

/// Packs frames column-major into a `(m*n) x k` volume.
pub fn stack_frames(frames: &[ImageGrid]) -> Result<LogVolume> {
    if frames.len() < 2 {
        return Err(Error::Shape(format!(
            "a volume needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let (rows, cols) = (frames[0].rows(), frames[0].cols());
    if let Some((j, f)) = frames
        .iter()
        .enumerate()
        .find(|(_, f)| f.rows() != rows || f.cols() != cols)
    {
        return Err(Error::Shape(format!(
            "frame {j} is {}x{}, frame 0 is {rows}x{cols}",
            f.rows(),
            f.cols()
        )));
    }
    let mut data = DMatrix::zeros(rows * cols, frames.len());
    for (j, f) in frames.iter().enumerate() {
        data.column_mut(j).copy_from_slice(f.as_slice());
    }
    Ok(LogVolume { rows, cols, data })
}

pub(crate) fn column_to_grid(rows: usize, cols: usize, data: &DMatrix<f64>, j: usize) -> ImageGrid {
    ImageGrid {
        values: DMatrix::from_column_slice(rows, cols, data.column(j).as_slice()),
    }
}

/// Per-pixel noise standard deviation, same layout as [`LogVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaMap {
    rows: usize,
    cols: usize,
    data: DMatrix<f64>,
}

impl SigmaMap {
    pub fn from_matrix(rows: usize, cols: usize, data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() != rows * cols {
            return Err(Error::Shape(format!(
                "sigma map has {} rows, expected {}",
                data.nrows(),
                rows * cols
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::param("sigma", "entries must be finite and non-negative"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn constant(rows: usize, cols: usize, frames: usize, sigma: f64) -> Result<Self> {
        Self::from_matrix(rows, cols, DMatrix::from_element(rows * cols, frames, sigma))
    }

    pub fn from_frames(frames: &[DMatrix<f64>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Empty("no sigma frames".into()))?;
        let (rows, cols) = first.shape();
        let mut data = DMatrix::zeros(rows * cols, frames.len());
        for (j, f) in frames.iter().enumerate() {
            if f.shape() != (rows, cols) {
                return Err(Error::Shape(format!("sigma frame {j} has a different geometry")));
            }
            data.column_mut(j).copy_from_slice(f.as_slice());
        }
        Self::from_matrix(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn frame_count(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn frame(&self, j: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, self.cols, self.data.column(j).as_slice())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// Stacked gradients, `(2*m*n) x k`: horizontal differences above vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVolume {
    rows: usize,
    cols: usize,
    data: DMatrix<f64>,
}

impl GradVolume {
    pub fn from_matrix(rows: usize, cols: usize, data: DMatrix<f64>) -> Result<Self> {
        if rows < 2 || cols < 2 || data.nrows() != 2 * rows * cols {
            return Err(Error::Shape(format!(
                "gradient volume has {} rows, expected {} for {rows}x{cols} frames",
                data.nrows(),
                2 * rows * cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }
}

/// `P * v`, frame by frame.
pub fn grad(v: &LogVolume) -> GradVolume {
    GradVolume {
        rows: v.rows,
        cols: v.cols,
        data: grad_columns(v.rows, v.cols, &v.data),
    }
}

/// `P^T * g`, frame by frame.
pub fn grad_adjoint(g: &GradVolume) -> Result<LogVolume> {
    let data = grad_adjoint_columns(g.rows, g.cols, &g.data)?;
    LogVolume::from_matrix(g.rows, g.cols, data)
}

/// Forward differences with replicate padding applied to every column of `x`
/// (each column an `rows x cols` frame). The last column/row difference is 0.
pub fn grad_columns(rows: usize, cols: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
    let len = rows * cols;
    debug_assert_eq!(x.nrows(), len);
    let mut out = DMatrix::zeros(2 * len, x.ncols());
    for k in 0..x.ncols() {
        let src = x.column(k);
        let src = src.as_slice();
        let mut dst = out.column_mut(k);
        let dst = dst.as_mut_slice();
        let (h, v) = dst.split_at_mut(len);
        for j in 0..cols {
            let col = &src[j * rows..(j + 1) * rows];
            if j + 1 < cols {
                let next = &src[(j + 1) * rows..(j + 2) * rows];
                for i in 0..rows {
                    h[j * rows + i] = next[i] - col[i];
                }
            }
            for i in 0..rows - 1 {
                v[j * rows + i] = col[i + 1] - col[i];
            }
        }
    }
    out
}

/// Exact adjoint of [`grad_columns`].
pub fn grad_adjoint_columns(rows: usize, cols: usize, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let len = rows * cols;
    if g.nrows() != 2 * len {
        return Err(Error::Shape(format!(
            "gradient input has {} rows, expected {} (2*{rows}*{cols})",
            g.nrows(),
            2 * len
        )));
    }
    let mut out = DMatrix::zeros(len, g.ncols());
    for k in 0..g.ncols() {
        let src = g.column(k);
        let (h, v) = src.as_slice().split_at(len);
        let mut dst = out.column_mut(k);
        let dst = dst.as_mut_slice();
        for j in 0..cols {
            for i in 0..rows {
                let idx = j * rows + i;
                let mut acc = 0.0;
                if j >= 1 {
                    acc += h[idx - rows];
                }
                if j + 1 < cols {
                    acc -= h[idx];
                }
                if i >= 1 {
                    acc += v[idx - 1];
                }
                if i + 1 < rows {
                    acc -= v[idx];
                }
                dst[idx] = acc;
            }
        }
    }
    Ok(out)
}
