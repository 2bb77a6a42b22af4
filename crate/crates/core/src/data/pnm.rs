//! Binary Netpbm images: 8-bit grayscale PGM (`P5`) and RGB PPM (`P6`).
//!
//! Values in `[0, 1]` map to bytes as `round(v · 255)`; bytes map back as
//! `b / 255`. Patches produced by the generator are already quantised to
//! that grid, so a write/read cycle is bit-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Patch;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

/// Snaps a value in `[0, 1]` onto the 8-bit grid.
pub fn snap(v: f64) -> f64 {
    dequantize(quantize(v))
}

/// Decoded Netpbm raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn patch_to_pgm(patch: &Patch) -> Vec<u8> {
    let bytes: Vec<u8> = patch.data().iter().map(|&v| quantize(v)).collect();
    encode_pgm(patch.size(), patch.size(), &bytes)
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
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Parses a binary PGM or PPM with `maxval <= 255`.
pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM (expected P5 or P6 magic)".into()),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number().ok_or("bad width")?;
    let height = h.number().ok_or("bad height")?;
    let maxval = h.number().ok_or("bad maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err("missing raster separator".into()),
    }
    let expected = width * height * channels;
    let pixels = &bytes[h.pos..];
    if pixels.len() < expected {
        return Err(format!("raster has {} bytes, expected {expected}", pixels.len()));
    }
    Ok(Image {
        width,
        height,
        channels,
        maxval: maxval as u16,
        pixels: pixels[..expected].to_vec(),
    })
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::parse(path, reason))
}

/// Loads a square grayscale PGM as a patch.
pub fn read_patch(path: &Path) -> Result<Patch> {
    let img = read_image(path)?;
    if img.channels != 1 || img.width != img.height {
        return Err(Error::parse(
            path,
            format!(
                "expected a square grayscale image, got {}x{} with {} channel(s)",
                img.width, img.height, img.channels
            ),
        ));
    }
    let data = img
        .pixels
        .iter()
        .map(|&b| {
            if img.maxval == 255 {
                dequantize(b)
            } else {
                b as f64 / img.maxval as f64
            }
        })
        .collect();
    Patch::new(img.width, data)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_layout() {
        let bytes = encode_pgm(2, 1, &[0, 255]);
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn decode_handles_comments() {
        let mut bytes = b"P5\n# made by hand\n2 2\n# max\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 1));
        assert_eq!(img.pixels, vec![1, 2, 3, 4]);
    }

    #[test]
    fn decode_rejects_truncated_and_foreign_files() {
        assert!(decode(b"P5\n2 2\n255\n\x01").is_err());
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn quantization_grid_is_fixed_point_of_snap() {
        for b in 0..=255u8 {
            assert_eq!(quantize(dequantize(b)), b);
            assert_eq!(snap(dequantize(b)).to_bits(), dequantize(b).to_bits());
        }
    }

    #[test]
    fn ppm_roundtrip() {
        let rgb: Vec<u8> = (0..12).collect();
        let img = decode(&encode_ppm(2, 2, &rgb)).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(img.pixels, rgb);
    }
}
