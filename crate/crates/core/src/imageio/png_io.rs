use nalgebra::DMatrix;

use super::{BitDepth, RawImage};
use crate::error::{Error, Result};

fn decoding_error(err: png::DecodingError) -> Error {
    match err {
        png::DecodingError::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Truncated("PNG stream ends early".into())
        }
        other => Error::CorruptHeader(other.to_string()),
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<RawImage> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(decoding_error)?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Grayscale {
        return Err(Error::UnsupportedFormat(format!(
            "PNG color type {color:?} (only grayscale is supported)"
        )));
    }
    let depth = match depth {
        png::BitDepth::Eight => BitDepth::Eight,
        png::BitDepth::Sixteen => BitDepth::Sixteen,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "PNG bit depth {other:?} (only 8 and 16 are supported)"
            )))
        }
    };
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(decoding_error)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = info.line_size;
    let pixels = DMatrix::from_fn(h, w, |r, c| match depth {
        BitDepth::Eight => u16::from(buf[r * stride + c]),
        BitDepth::Sixteen => {
            let at = r * stride + 2 * c;
            u16::from_be_bytes([buf[at], buf[at + 1]])
        }
    });
    RawImage::new(depth, pixels)
}

pub(super) fn encode(img: &RawImage) -> Result<Vec<u8>> {
    let (rows, cols) = (img.rows(), img.cols());
    let mut data = Vec::with_capacity(rows * cols * 2);
    for r in 0..rows {
        for c in 0..cols {
            match img.depth() {
                BitDepth::Eight => data.push(img.get(r, c) as u8),
                BitDepth::Sixteen => data.extend_from_slice(&img.get(r, c).to_be_bytes()),
            }
        }
    }
    let mut out = Vec::new();
    let encoding_error = |e: png::EncodingError| Error::Record(format!("PNG encoding failed: {e}"));
    {
        let mut enc = png::Encoder::new(&mut out, cols as u32, rows as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(match img.depth() {
            BitDepth::Eight => png::BitDepth::Eight,
            BitDepth::Sixteen => png::BitDepth::Sixteen,
        });
        let mut writer = enc.write_header().map_err(encoding_error)?;
        writer.write_image_data(&data).map_err(encoding_error)?;
    }
    Ok(out)
}
