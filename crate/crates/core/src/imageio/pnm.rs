//! Binary PGM (P5). 8-bit samples for maxval < 256, otherwise 16-bit
//! big-endian. Writers always emit maxval 255 or 65535.

use nalgebra::DMatrix;

use super::{BitDepth, RawImage};
use crate::error::{Error, Result};

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 2; // after "P5"
    let mut fields = [0u32; 3];
    for (idx, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::CorruptHeader("header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::CorruptHeader(format!("expected a number for header field {idx}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::CorruptHeader(format!("header field {idx} out of range")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::CorruptHeader("missing separator after maxval".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::CorruptHeader(format!("zero-sized image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::CorruptHeader(format!("maxval {maxval} outside 1..=65535")));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        data_offset: pos,
    })
}

pub(super) fn decode(bytes: &[u8]) -> Result<RawImage> {
    let h = parse_header(bytes)?;
    let (depth, sample_bytes) = if h.maxval < 256 {
        (BitDepth::Eight, 1)
    } else {
        (BitDepth::Sixteen, 2)
    };
    let expected = h.width * h.height * sample_bytes;
    let raster = &bytes[h.data_offset..];
    if raster.len() < expected {
        return Err(Error::Truncated(format!(
            "expected {expected} raster bytes, found {}",
            raster.len()
        )));
    }
    let pixels = DMatrix::from_fn(h.height, h.width, |r, c| {
        let at = (r * h.width + c) * sample_bytes;
        if sample_bytes == 1 {
            u16::from(raster[at])
        } else {
            u16::from_be_bytes([raster[at], raster[at + 1]])
        }
    });
    if let Some(p) = pixels.iter().find(|&&p| u32::from(p) > h.maxval) {
        return Err(Error::CorruptHeader(format!(
            "sample {p} exceeds declared maxval {}",
            h.maxval
        )));
    }
    RawImage::new(depth, pixels)
}

pub(super) fn encode(img: &RawImage) -> Vec<u8> {
    let (rows, cols) = (img.rows(), img.cols());
    let maxval = img.max_value();
    let mut out = format!("P5\n{cols} {rows}\n{maxval}\n").into_bytes();
    let sample_bytes = if img.depth() == BitDepth::Eight { 1 } else { 2 };
    out.reserve(rows * cols * sample_bytes);
    for r in 0..rows {
        for c in 0..cols {
            let p = img.get(r, c);
            match img.depth() {
                BitDepth::Eight => out.push(p as u8),
                BitDepth::Sixteen => out.extend_from_slice(&p.to_be_bytes()),
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n3 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.rows(), img.cols()), (1, 3));
        assert_eq!(img.get(0, 2), 7);
    }

    #[test]
    fn sample_above_maxval_is_rejected() {
        let bytes = b"P5 1 1 100\n\xff".to_vec();
        assert!(matches!(decode(&bytes), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn encoder_writes_canonical_header() {
        let img = RawImage::from_fn(1, 2, BitDepth::Sixteen, |_, c| c as u16 * 300).unwrap();
        let bytes = encode(&img);
        assert_eq!(&bytes[..15], b"P5\n2 1\n65535\n\x00\x00");
        assert_eq!(&bytes[15..], &300u16.to_be_bytes());
    }
}
