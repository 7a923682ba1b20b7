//! Grayscale image files and the logarithmic transform that turns
//! multiplicative speckle into additive noise.

mod manifest;
mod png_io;
mod pnm;
mod scaled;

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::volume::ImageGrid;

pub use manifest::{DatasetManifest, Roi};
pub use scaled::{read_scaled_map, write_scaled_map, ScaleRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn bits(self) -> u32 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }

    pub fn max_value(self) -> u16 {
        match self {
            BitDepth::Eight => u8::MAX as u16,
            BitDepth::Sixteen => u16::MAX,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(Error::param("bit_depth", format!("{other} (expected 8 or 16)"))),
        }
    }
}

/// Integer grayscale image as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    depth: BitDepth,
    pixels: DMatrix<u16>,
}

impl RawImage {
    pub fn new(depth: BitDepth, pixels: DMatrix<u16>) -> Result<Self> {
        let max = depth.max_value();
        if let Some(p) = pixels.iter().find(|&&p| p > max) {
            return Err(Error::param(
                "pixels",
                format!("value {p} exceeds the {}-bit maximum {max}", depth.bits()),
            ));
        }
        if pixels.is_empty() {
            return Err(Error::Shape("image has no pixels".into()));
        }
        Ok(Self { depth, pixels })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        depth: BitDepth,
        f: impl FnMut(usize, usize) -> u16,
    ) -> Result<Self> {
        Self::new(depth, DMatrix::from_fn(rows, cols, f))
    }

    pub fn rows(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn cols(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn depth(&self) -> BitDepth {
        self.depth
    }

    /// `2^b - 1` for a `b`-bit image.
    pub fn max_value(&self) -> u16 {
        self.depth.max_value()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.pixels[(row, col)]
    }

    pub fn pixels(&self) -> &DMatrix<u16> {
        &self.pixels
    }

    /// Sub-image with top-left corner `(x, y)` and size `w x h`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RawImage> {
        if w == 0 || h == 0 || x + w > self.cols() || y + h > self.rows() {
            return Err(Error::Shape(format!(
                "crop ({x}, {y}, {w}x{h}) outside {}x{} image",
                self.cols(),
                self.rows()
            )));
        }
        Ok(RawImage {
            depth: self.depth,
            pixels: self.pixels.view((y, x), (h, w)).into_owned(),
        })
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.pixels.map(f64::from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl ImageFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("pgm") => Ok(ImageFormat::Pgm),
            Some("png") => Ok(ImageFormat::Png),
            _ => Err(Error::UnsupportedFormat(format!(
                "cannot infer image format from {}",
                path.display()
            ))),
        }
    }
}

/// Reads a binary PGM (P5) or grayscale PNG; the format is detected from the
/// file's magic bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<RawImage> {
    if bytes.starts_with(b"P5") {
        pnm::decode(bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        png_io::decode(bytes)
    } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
        Err(Error::UnsupportedFormat(format!(
            "netpbm variant P{} (only binary P5 is supported)",
            bytes[1] as char
        )))
    } else {
        Err(Error::UnsupportedFormat("unrecognised file signature".into()))
    }
}

pub fn encode_image(img: &RawImage, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Pgm => Ok(pnm::encode(img)),
        ImageFormat::Png => png_io::encode(img),
    }
}

pub fn write_image(img: &RawImage, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(img, format)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Natural log of each pixel, clamped below at `floor` so zeros stay finite.
pub fn to_log(img: &RawImage, floor: f64) -> Result<ImageGrid> {
    if !(floor >= 1.0) || !floor.is_finite() {
        return Err(Error::param("floor", format!("{floor} (must be a finite value >= 1)")));
    }
    ImageGrid::new(img.pixels.map(|p| f64::from(p).max(floor).ln()))
}

/// `round(exp(v))` clamped to the representable range of `depth`.
pub fn from_log(grid: &ImageGrid, depth: BitDepth) -> RawImage {
    let max = f64::from(depth.max_value());
    let pixels = grid
        .values()
        .map(|v| v.exp().round().clamp(0.0, max) as u16);
    RawImage { depth, pixels }
}

/// Quantizes linear intensities to `depth`, rounding and clamping.
pub fn from_linear(values: &DMatrix<f64>, depth: BitDepth) -> RawImage {
    let max = f64::from(depth.max_value());
    RawImage {
        depth,
        pixels: values.map(|v| v.round().clamp(0.0, max) as u16),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, depth: BitDepth) -> RawImage {
        let (m, n) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let max = depth.max_value();
        RawImage::from_fn(m, n, depth, |_, _| rng.gen_range(0..=max)).unwrap()
    }

    #[test]
    fn decodes_tiny_pgm() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 7]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.depth(), BitDepth::Eight);
        assert_eq!(img.get(0, 0), 0);
        assert_eq!(img.get(0, 1), 128);
        assert_eq!(img.get(1, 0), 255);
        assert_eq!(img.get(1, 1), 7);
    }

    #[test]
    fn maxval_65535_is_sixteen_bit() {
        let mut bytes = b"P5 1 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0x12, 0x34]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.depth(), BitDepth::Sixteen);
        assert_eq!(img.get(0, 0), 0x1234);
    }

    #[test]
    fn color_png_is_unsupported() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[1, 2, 3]).unwrap();
        }
        assert!(matches!(decode_image(&out), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn distinct_error_kinds() {
        assert!(matches!(decode_image(b"P2\n1 1\n255\n0"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_image(b"GIF89a"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_image(b"P5\n2 x\n255\n"), Err(Error::CorruptHeader(_))));
        assert!(matches!(decode_image(b"P5\n2 2\n0\n"), Err(Error::CorruptHeader(_))));
        assert!(matches!(
            decode_image(b"P5\n2 2\n255\n\x01\x02"),
            Err(Error::Truncated(_))
        ));
        let img = RawImage::from_fn(4, 4, BitDepth::Eight, |i, j| (i * j) as u16).unwrap();
        let png = encode_image(&img, ImageFormat::Png).unwrap();
        assert!(matches!(
            decode_image(&png[..png.len() / 2]),
            Err(Error::Truncated(_) | Error::CorruptHeader(_))
        ));
    }

    #[test]
    fn round_trips_random_eight_bit_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let img = random_image(&mut rng, BitDepth::Eight);
            for format in [ImageFormat::Pgm, ImageFormat::Png] {
                let bytes = encode_image(&img, format).unwrap();
                assert_eq!(decode_image(&bytes).unwrap(), img);
                assert_eq!(encode_image(&decode_image(&bytes).unwrap(), format).unwrap(), bytes);
            }
        }
    }

    #[test]
    fn round_trips_sixteen_bit_through_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(&mut rng, BitDepth::Sixteen);
        for (name, format) in [("a.pgm", ImageFormat::Pgm), ("a.png", ImageFormat::Png)] {
            let path = dir.path().join(name);
            write_image(&img, &path, format).unwrap();
            assert_eq!(read_image(&path).unwrap(), img);
        }
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = RawImage::from_fn(2, 2, BitDepth::Eight, |_, _| 1).unwrap();
        let path = dir.path().join("missing-dir").join("x.pgm");
        assert!(matches!(
            write_image(&img, path, ImageFormat::Pgm),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn log_transform_values() {
        let img = RawImage::from_fn(2, 2, BitDepth::Eight, |i, j| [[255, 0], [1, 10]][i][j]).unwrap();
        let g = to_log(&img, 1.0).unwrap();
        assert!((g.get(0, 0) - 5.541_263_545_158_426).abs() < 1e-12);
        assert_eq!(g.get(0, 1), 0.0);
        assert_eq!(g.get(1, 0), 0.0);
        assert!(to_log(&img, 0.5).is_err());
    }

    #[test]
    fn inverse_log_values() {
        let g = ImageGrid::from_fn(2, 2, |i, j| [[255f64.ln(), 20.0], [0.0, -3.0]][i][j]).unwrap();
        let img = from_log(&g, BitDepth::Eight);
        assert_eq!(img.get(0, 0), 255);
        assert_eq!(img.get(0, 1), 255);
        assert_eq!(img.get(1, 0), 1);
        assert_eq!(img.get(1, 1), 0);
    }

    #[test]
    fn crop_extracts_window() {
        let img = RawImage::from_fn(4, 5, BitDepth::Eight, |i, j| (10 * i + j) as u16).unwrap();
        let c = img.crop(1, 2, 3, 2).unwrap();
        assert_eq!((c.rows(), c.cols()), (2, 3));
        assert_eq!(c.get(0, 0), 21);
        assert!(img.crop(3, 0, 3, 1).is_err());
    }

    proptest! {
        #[test]
        fn log_round_trip_above_floor(p in 1u16..=u16::MAX) {
            let img = RawImage::from_fn(2, 2, BitDepth::Sixteen, |_, _| p).unwrap();
            let back = from_log(&to_log(&img, 1.0).unwrap(), BitDepth::Sixteen);
            prop_assert_eq!(back, img);
        }

        #[test]
        fn log_is_monotone(a in 0u16..=255, b in 0u16..=255) {
            let img = RawImage::from_fn(2, 2, BitDepth::Eight, |i, _| if i == 0 { a } else { b }).unwrap();
            let g = to_log(&img, 1.0).unwrap();
            prop_assert!(a > b || g.get(0, 0) <= g.get(1, 0));
        }
    }
}
