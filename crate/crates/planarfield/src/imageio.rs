//! Raster file formats: binary PPM (P6, 8-bit) for color images and
//! grayscale PFM (32-bit float, scale −1.0 = little-endian) for depth maps.
//!
//! PPM rows are stored top-down, PFM rows bottom-up, both per their format
//! conventions. Writers are byte-deterministic; readers report the byte
//! offset of the first malformed element.

use std::path::Path;
use thiserror::Error;

use crate::raster::{ColorMap, ScalarMap};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{format} file damaged at byte {offset}: {reason}")]
    Malformed { format: &'static str, offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(format: &'static str, offset: usize, reason: impl Into<String>) -> ImageIoError {
    ImageIoError::Malformed { format, offset, reason: reason.into() }
}

/// Encodes an image whose channels lie in [0, 1] as binary PPM; channels are
/// clamped, scaled to 255, and rounded half away from zero.
pub fn ppm_bytes(img: &ColorMap) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in img.at(x, y) {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn write_ppm(path: &Path, img: &ColorMap) -> Result<(), ImageIoError> {
    std::fs::write(path, ppm_bytes(img))?;
    Ok(())
}

/// Whitespace- and comment-skipping ASCII token scanner over a header.
struct TokenScanner<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> TokenScanner<'a> {
    fn skip_separators(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str, ImageIoError> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.buf.len() && !self.buf[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(malformed(self.format, start, format!("missing {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .map_err(|_| malformed(self.format, start, format!("non-ASCII {what}")))
    }

    fn dimension(&mut self, what: &str) -> Result<usize, ImageIoError> {
        let at = {
            self.skip_separators();
            self.pos
        };
        let tok = self.token(what)?;
        let v: usize = tok
            .parse()
            .map_err(|_| malformed(self.format, at, format!("bad {what} {tok:?}")))?;
        if v == 0 {
            return Err(malformed(self.format, at, format!("{what} must be positive")));
        }
        Ok(v)
    }
}

pub fn parse_ppm(bytes: &[u8]) -> Result<ColorMap, ImageIoError> {
    const F: &str = "PPM";
    let mut sc = TokenScanner { buf: bytes, pos: 0, format: F };
    let magic = sc.token("magic")?;
    if magic != "P6" {
        return Err(malformed(F, 0, format!("magic {magic:?}, expected \"P6\"")));
    }
    let w = sc.dimension("width")?;
    let h = sc.dimension("height")?;
    let at = {
        sc.skip_separators();
        sc.pos
    };
    let maxval = sc.dimension("maxval")?;
    if maxval != 255 {
        return Err(malformed(F, at, format!("maxval {maxval}, only 255 supported")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    let data_at = sc.pos + 1;
    let need = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| malformed(F, 0, "implausible dimensions"))?;
    let data = bytes
        .get(data_at..data_at + need)
        .ok_or_else(|| malformed(F, bytes.len(), format!("truncated: need {need} pixel bytes")))?;
    if data_at + need != bytes.len() {
        return Err(malformed(F, data_at + need, "trailing bytes"));
    }
    let mut img = ColorMap::black(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 3;
            img.set(x, y, [
                data[i] as f64 / 255.0,
                data[i + 1] as f64 / 255.0,
                data[i + 2] as f64 / 255.0,
            ]);
        }
    }
    Ok(img)
}

pub fn read_ppm(path: &Path) -> Result<ColorMap, ImageIoError> {
    parse_ppm(&std::fs::read(path)?)
}

/// Encodes a scalar map as grayscale PFM: header "Pf", then 32-bit
/// little-endian floats, rows bottom-up. Values pass through an f32 cast.
pub fn pfm_bytes(map: &ScalarMap) -> Vec<u8> {
    let (w, h) = (map.width(), map.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(map.at(x, y) as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, map: &ScalarMap) -> Result<(), ImageIoError> {
    std::fs::write(path, pfm_bytes(map))?;
    Ok(())
}

pub fn parse_pfm(bytes: &[u8]) -> Result<ScalarMap, ImageIoError> {
    const F: &str = "PFM";
    let mut sc = TokenScanner { buf: bytes, pos: 0, format: F };
    let magic = sc.token("magic")?;
    if magic != "Pf" {
        let reason = if magic == "PF" {
            "color PFM not supported, expected grayscale \"Pf\"".to_string()
        } else {
            format!("magic {magic:?}, expected \"Pf\"")
        };
        return Err(malformed(F, 0, reason));
    }
    let w = sc.dimension("width")?;
    let h = sc.dimension("height")?;
    let at = {
        sc.skip_separators();
        sc.pos
    };
    let scale_tok = sc.token("scale")?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| malformed(F, at, format!("bad scale {scale_tok:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(malformed(F, at, format!("scale must be finite and nonzero, got {scale}")));
    }
    let little_endian = scale < 0.0;
    let data_at = sc.pos + 1;
    let need = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| malformed(F, 0, "implausible dimensions"))?;
    let data = bytes
        .get(data_at..data_at + need)
        .ok_or_else(|| malformed(F, bytes.len(), format!("truncated: need {need} sample bytes")))?;
    if data_at + need != bytes.len() {
        return Err(malformed(F, data_at + need, "trailing bytes"));
    }
    let mut map = ScalarMap::zeros(w, h);
    for row in 0..h {
        let y = h - 1 - row; // rows are stored bottom-up
        for x in 0..w {
            let i = (row * w + x) * 4;
            let raw: [u8; 4] = data[i..i + 4].try_into().unwrap();
            let v = if little_endian { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            map.set(x, y, v as f64);
        }
    }
    Ok(map)
}

pub fn read_pfm(path: &Path) -> Result<ScalarMap, ImageIoError> {
    parse_pfm(&std::fs::read(path)?)
}
