//! Grayscale images with unit-interval intensities and 8-bit PGM (P5) I/O.

use std::path::Path;

use crate::binfmt::{read_file, write_file};
use crate::error::{Error, Result, ResultExt};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from row-major intensities, all of which must lie in [0, 1].
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Format(format!(
                "image {width}x{height} needs {} intensities, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format(format!(
                "intensity {} at pixel {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    /// Samples `f(x, y)` over the grid, clamping results into [0, 1].
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.data
    }

    /// Parses binary PGM bytes. Samples are mapped to [0, 1] by dividing by 255.
    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = pgm_token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::Format("not a binary PGM (expected P5)".into()));
        }
        let width = pgm_number(bytes, &mut pos, "width")?;
        let height = pgm_number(bytes, &mut pos, "height")?;
        let maxval = pgm_number(bytes, &mut pos, "maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!(
                "unsupported PGM maxval {maxval}; only 8-bit images are accepted"
            )));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Format("missing PGM raster".into()));
        }
        pos += 1;
        let expected = width
            .checked_mul(height)
            .ok_or_else(|| Error::Format("PGM dimensions overflow".into()))?;
        let raster = &bytes[pos..];
        if raster.len() < expected {
            return Err(Error::Format(format!(
                "truncated PGM raster: expected {expected} bytes, found {}",
                raster.len()
            )));
        }
        if let Some(&b) = raster[..expected].iter().find(|&&b| usize::from(b) > maxval) {
            return Err(Error::Format(format!("PGM sample {b} exceeds maxval {maxval}")));
        }
        let scale = maxval as f64;
        let data = raster[..expected]
            .iter()
            .map(|&b| f64::from(b) / scale)
            .collect();
        Image::new(width, height, data)
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v * 255.0).round() as u8));
        out
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_pgm_bytes(&bytes).in_file(path)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_pgm_bytes())
    }
}

fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    skip_ws_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad PGM {what} {:?}", String::from_utf8_lossy(tok))))
}
