//! Dense local features: a gradient-orientation extractor over a regular cell
//! grid, and the PFM1 container for loading maps produced elsewhere.
//!
//! PFM1 layout (little-endian): `"PFM1"`, then `u32` rows, cols, dim,
//! stride_px, cell_px, then `rows * cols * dim` `f32` values stored cell-major
//! in row-major cell order.

use std::f64::consts::TAU;
use std::path::Path;

use rayon::prelude::*;

use crate::binfmt::{checked_volume, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result, ResultExt};
use crate::image::Image;

const PFM_MAGIC: &[u8; 4] = b"PFM1";

/// Histogram entries are clipped at this value after the first normalization.
pub const HISTOGRAM_CLIP: f64 = 0.2;

/// Smallest image side accepted by the extractor.
pub const MIN_IMAGE_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub cell_px: usize,
    pub stride_px: usize,
    pub orientation_bins: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            cell_px: 8,
            stride_px: 8,
            orientation_bins: 8,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.orientation_bins < 2 {
            return Err(Error::InvalidConfig(format!(
                "orientation_bins must be at least 2, got {}",
                self.orientation_bins
            )));
        }
        if self.stride_px == 0 {
            return Err(Error::InvalidConfig("stride_px must be positive".into()));
        }
        if self.cell_px == 0 {
            return Err(Error::InvalidConfig("cell_px must be positive".into()));
        }
        Ok(())
    }

    /// Number of cells along an axis of `len` pixels.
    pub fn cells_along(&self, len: usize) -> usize {
        (len - self.cell_px) / self.stride_px + 1
    }
}

/// A `rows x cols` grid of `dim`-dimensional feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap {
    rows: usize,
    cols: usize,
    dim: usize,
    stride_px: usize,
    cell_px: usize,
    data: Vec<f32>,
}

impl DenseFeatureMap {
    pub fn new(
        rows: usize,
        cols: usize,
        dim: usize,
        stride_px: usize,
        cell_px: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::Format(format!(
                "feature map dimensions must be positive, got {rows}x{cols}x{dim}"
            )));
        }
        let expected = checked_volume(&[rows, cols, dim], "feature map")?;
        if data.len() != expected {
            return Err(Error::Format(format!(
                "feature map {rows}x{cols}x{dim} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite feature value at {i}")));
        }
        Ok(DenseFeatureMap {
            rows,
            cols,
            dim,
            stride_px,
            cell_px,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stride_px(&self) -> usize {
        self.stride_px
    }

    pub fn cell_px(&self) -> usize {
        self.cell_px
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn feature(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Features in row-major cell order.
    pub fn features(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(PFM_MAGIC);
        w.u32(self.rows);
        w.u32(self.cols);
        w.u32(self.dim);
        w.u32(self.stride_px);
        w.u32(self.cell_px);
        for &v in &self.data {
            w.f32(v);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, PFM_MAGIC, "PFM1")?;
        let rows = r.u32("header")?;
        let cols = r.u32("header")?;
        let dim = r.u32("header")?;
        let stride_px = r.u32("header")?;
        let cell_px = r.u32("header")?;
        let count = checked_volume(&[rows, cols, dim], "PFM1")?;
        let payload = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format("PFM1 payload size overflows".into()))?;
        if r.remaining() != payload {
            return Err(Error::Format(format!(
                "PFM1 payload size mismatch: expected {payload} bytes, found {}",
                r.remaining()
            )));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f32()?);
        }
        r.finish()?;
        DenseFeatureMap::new(rows, cols, dim, stride_px, cell_px, data)
    }
}

pub fn save_feature_map(map: &DenseFeatureMap, path: &Path) -> Result<()> {
    write_file(path, &map.to_bytes())
}

pub fn load_feature_map(path: &Path) -> Result<DenseFeatureMap> {
    let bytes = read_file(path)?;
    DenseFeatureMap::from_bytes(&bytes).in_file(path)
}

/// Per-pixel gradients: central differences inside, one-sided at the border.
fn gradients(image: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (image.width(), image.height());
    let px = |x: usize, y: usize| image.get(x, y);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            gx[y * w + x] = if x == 0 {
                px(1, y) - px(0, y)
            } else if x == w - 1 {
                px(w - 1, y) - px(w - 2, y)
            } else {
                (px(x + 1, y) - px(x - 1, y)) / 2.0
            };
            gy[y * w + x] = if y == 0 {
                px(x, 1) - px(x, 0)
            } else if y == h - 1 {
                px(x, h - 1) - px(x, h - 2)
            } else {
                (px(x, y + 1) - px(x, y - 1)) / 2.0
            };
        }
    }
    (gx, gy)
}

/// Normalizes to unit length, clips, and renormalizes. Zero vectors stay zero.
fn clip_normalize(hist: &mut [f64]) {
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    for v in hist.iter_mut() {
        *v = (*v / norm).min(HISTOGRAM_CLIP);
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in hist.iter_mut() {
        *v /= norm;
    }
}

/// Computes a magnitude-weighted orientation histogram for every cell.
///
/// Orientation is signed and covers the full circle; bin `b` is centered on
/// `b * 2π / B`, and each pixel splits its vote linearly between the two
/// nearest bin centers.
pub fn extract_dense_features(image: &Image, cfg: &ExtractorConfig) -> Result<DenseFeatureMap> {
    cfg.validate()?;
    let (w, h) = (image.width(), image.height());
    if w < MIN_IMAGE_SIDE || h < MIN_IMAGE_SIDE || cfg.cell_px > w || cfg.cell_px > h {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            cell_px: cfg.cell_px.max(MIN_IMAGE_SIDE),
        });
    }
    let bins = cfg.orientation_bins;
    let (gx, gy) = gradients(image);
    let magnitude: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let bin_pos: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| b.atan2(*a).rem_euclid(TAU) / TAU * bins as f64)
        .collect();

    let rows = cfg.cells_along(h);
    let cols = cfg.cells_along(w);
    let data: Vec<f32> = (0..rows * cols)
        .into_par_iter()
        .flat_map_iter(|cell| {
            let (r, c) = (cell / cols, cell % cols);
            let mut hist = vec![0.0f64; bins];
            for y in r * cfg.stride_px..r * cfg.stride_px + cfg.cell_px {
                for x in c * cfg.stride_px..c * cfg.stride_px + cfg.cell_px {
                    let i = y * w + x;
                    let m = magnitude[i];
                    if m == 0.0 {
                        continue;
                    }
                    let lo = bin_pos[i].floor();
                    let frac = bin_pos[i] - lo;
                    let lo = lo as usize % bins;
                    hist[lo] += m * (1.0 - frac);
                    hist[(lo + 1) % bins] += m * frac;
                }
            }
            clip_normalize(&mut hist);
            hist.into_iter().map(|v| v as f32)
        })
        .collect();
    DenseFeatureMap::new(rows, cols, bins, cfg.stride_px, cfg.cell_px, data)
}
