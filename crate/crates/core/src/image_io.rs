//! Minimal image decoding: binary PPM (P6, 8-bit) and 8-bit RGB/RGBA PNG.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

use crate::preprocess::{PreprocessError, RawImage};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format (expected binary PPM 'P6' or PNG)")]
    UnknownFormat,
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("unsupported bit depth: {0} bits per sample (only 8-bit images are supported)")]
    BitDepth(u32),
    #[error("unsupported PNG color type {0} (expected RGB or RGBA)")]
    ColorType(String),
    #[error("PNG decode failed: {0}")]
    Png(String),
    #[error(transparent)]
    Image(#[from] PreprocessError),
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RawImage, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes)
}

/// Decode by content sniffing.
pub fn decode_image(bytes: &[u8]) -> Result<RawImage, ImageError> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        Err(ImageError::UnknownFormat)
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, ImageError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::Ppm(format!("missing or invalid {what}")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RawImage, ImageError> {
    if !bytes.starts_with(b"P6") {
        return Err(ImageError::Ppm("missing P6 magic".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")? as usize;
    let height = h.number("height")? as usize;
    let maxval = h.number("maxval")?;
    if maxval == 0 {
        return Err(ImageError::Ppm("maxval must be positive".into()));
    }
    if maxval > 255 {
        return Err(ImageError::BitDepth(16));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(ImageError::Ppm("missing whitespace after maxval".into())),
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| ImageError::Ppm("dimensions overflow".into()))?;
    let raster = bytes
        .get(h.pos..h.pos + len)
        .ok_or_else(|| ImageError::Ppm(format!("raster truncated: need {len} bytes")))?;
    let data = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| ((v.min(maxval as u8) as u32 * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    Ok(RawImage::new(width, height, data)?)
}

pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RawImage) -> Result<(), ImageError> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn decode_png(bytes: &[u8]) -> Result<RawImage, ImageError> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| ImageError::Png(e.to_string()))?;
    let info = reader.info();
    let (width, height) = (info.width as usize, info.height as usize);
    let depth = info.bit_depth as u8 as u32;
    if depth != 8 {
        return Err(ImageError::BitDepth(depth));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(ImageError::ColorType(format!("{other:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::Png(e.to_string()))?;
    let stride = frame.line_size;
    let mut data = Vec::with_capacity(width * height * 3);
    for row in buf.chunks(stride).take(height) {
        for px in row[..width * channels].chunks_exact(channels) {
            data.extend_from_slice(&px[..3]);
        }
    }
    Ok(RawImage::new(width, height, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode_png(width: u32, height: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, width, height);
            enc.set_color(color);
            enc.set_depth(depth);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(data).unwrap();
        }
        out
    }

    #[test]
    fn decodes_known_ppm() {
        let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
        let raster: Vec<u8> = (0..12).map(|i| i * 20).collect();
        bytes.extend_from_slice(&raster);
        let img = decode_image(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.data(), raster.as_slice());
    }

    #[test]
    fn ppm_errors() {
        assert!(matches!(
            decode_image(b"P3\n1 1\n255\n0 0 0"),
            Err(ImageError::UnknownFormat)
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(ImageError::BitDepth(16))
        ));
        let err = decode_ppm(b"P6\n2 2\n255\n\0\0\0").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(matches!(decode_ppm(b"P6\nx 2\n255\n"), Err(ImageError::Ppm(_))));
    }

    #[test]
    fn ppm_low_maxval_rescales() {
        let img = decode_ppm(b"P6 1 1 15 \x00\x0f\x07").unwrap();
        assert_eq!(img.data(), &[0, 255, 119]);
    }

    #[test]
    fn ppm_round_trip() {
        let data: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = RawImage::new(5, 3, data).unwrap();
        assert_eq!(decode_image(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn png_rgb_and_rgba() {
        let rgb: Vec<u8> = (0..2 * 2 * 3).map(|i| i as u8 * 10).collect();
        let img = decode_image(&encode_png(2, 2, png::ColorType::Rgb, png::BitDepth::Eight, &rgb)).unwrap();
        assert_eq!(img.data(), rgb.as_slice());

        let rgba: Vec<u8> = (0..3 * 4).map(|i| i as u8).collect();
        let img = decode_image(&encode_png(3, 1, png::ColorType::Rgba, png::BitDepth::Eight, &rgba)).unwrap();
        assert_eq!(img.data(), &[0, 1, 2, 4, 5, 6, 8, 9, 10]);
    }

    #[test]
    fn png_unsupported() {
        let deep = encode_png(1, 1, png::ColorType::Rgb, png::BitDepth::Sixteen, &[0; 6]);
        let err = decode_image(&deep).unwrap_err();
        assert!(matches!(err, ImageError::BitDepth(16)), "{err}");
        let gray = encode_png(1, 1, png::ColorType::Grayscale, png::BitDepth::Eight, &[0]);
        assert!(matches!(decode_image(&gray), Err(ImageError::ColorType(_))));
    }
}
