//! Locally-global patch descriptors read out of an integral residual grid.
//!
//! Every cell contributes its soft-assigned residual vector (the `K * D`
//! vector whose k-th block is `w_k(x) * (x - c_k)`). The grid stores inclusive
//! 2-D prefix sums of these vectors with a zero guard row and column, so the raw
//! VLAD sum over any axis-aligned rectangle of cells costs four table reads
//! per channel no matter how large the rectangle is.
//!
//! Patch sets serialize to the PPS1 container: `"PPS1"`, `u32` K, `u32` D,
//! `u32` set count, then per set `u32` patch_h, patch_w, stride, entry count
//! followed by entries of `f64` center_row, `f64` center_col and `K * D` `f64`
//! descriptor values.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::binfmt::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result, ResultExt};
use crate::features::DenseFeatureMap;
use crate::vlad::{accumulate_residual, normalize_vlad, Vocabulary};

const PPS_MAGIC: &[u8; 4] = b"PPS1";

#[derive(Debug)]
pub struct IntegralResidualGrid {
    cells_h: usize,
    cells_w: usize,
    k: usize,
    dim: usize,
    table: Vec<f64>,
    lookups: AtomicU64,
}

impl Clone for IntegralResidualGrid {
    fn clone(&self) -> Self {
        IntegralResidualGrid {
            cells_h: self.cells_h,
            cells_w: self.cells_w,
            k: self.k,
            dim: self.dim,
            table: self.table.clone(),
            lookups: AtomicU64::new(0),
        }
    }
}

/// Per-cell residual contributions in row-major cell order.
pub fn cell_residuals(map: &DenseFeatureMap, vocab: &Vocabulary) -> Result<Vec<f64>> {
    if map.dim() != vocab.dim() {
        return Err(Error::DimMismatch {
            expected: vocab.dim(),
            found: map.dim(),
        });
    }
    let channels = vocab.descriptor_len();
    let mut out = vec![0.0; map.cell_count() * channels];
    out.par_chunks_exact_mut(channels)
        .zip(map.as_slice().par_chunks_exact(map.dim()))
        .for_each_init(
            || vec![0.0; vocab.k()],
            |weights, (acc, x)| accumulate_residual(x, vocab, weights, acc),
        );
    Ok(out)
}

impl IntegralResidualGrid {
    /// Builds the prefix-sum table in double precision, row by row.
    pub fn build(map: &DenseFeatureMap, vocab: &Vocabulary) -> Result<Self> {
        let residuals = cell_residuals(map, vocab)?;
        Ok(Self::from_cell_residuals(
            map.rows(),
            map.cols(),
            vocab.k(),
            vocab.dim(),
            &residuals,
        ))
    }

    /// `residuals` holds `rows * cols` consecutive vectors of length `k * dim`.
    pub fn from_cell_residuals(
        rows: usize,
        cols: usize,
        k: usize,
        dim: usize,
        residuals: &[f64],
    ) -> Self {
        let ch = k * dim;
        assert_eq!(residuals.len(), rows * cols * ch, "residual buffer size");
        let stride = (cols + 1) * ch;
        let mut table = vec![0.0; (rows + 1) * stride];
        let mut running = vec![0.0; ch];
        for r in 0..rows {
            running.iter_mut().for_each(|v| *v = 0.0);
            let (above, below) = table.split_at_mut((r + 1) * stride);
            let prev = &above[r * stride..];
            let cur = &mut below[..stride];
            for c in 0..cols {
                let cell = &residuals[(r * cols + c) * ch..(r * cols + c + 1) * ch];
                let at = (c + 1) * ch;
                for i in 0..ch {
                    running[i] += cell[i];
                    cur[at + i] = prev[at + i] + running[i];
                }
            }
        }
        IntegralResidualGrid {
            cells_h: rows,
            cells_w: cols,
            k,
            dim,
            table,
            lookups: AtomicU64::new(0),
        }
    }

    /// Map height in cells; the table has one more row.
    pub fn cells_h(&self) -> usize {
        self.cells_h
    }

    pub fn cells_w(&self) -> usize {
        self.cells_w
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> usize {
        self.k * self.dim
    }

    /// Table entry at `(row, col)` with `row <= cells_h`, `col <= cells_w`.
    pub fn entry(&self, row: usize, col: usize) -> &[f64] {
        let ch = self.channels();
        let at = (row * (self.cells_w + 1) + col) * ch;
        &self.table[at..at + ch]
    }

    /// Raw residual sum over the whole map.
    pub fn total(&self) -> &[f64] {
        self.entry(self.cells_h, self.cells_w)
    }

    /// Number of individual table values read by [`Self::rect_sum_into`] since
    /// construction or the last reset.
    pub fn lookup_count(&self) -> u64 {
        self.lookups.load(Ordering::Relaxed)
    }

    pub fn reset_lookup_count(&self) {
        self.lookups.store(0, Ordering::Relaxed);
    }

    /// Sums cells `top..top+h` by `left..left+w` into `out` from four corners.
    pub fn rect_sum_into(&self, top: usize, left: usize, h: usize, w: usize, out: &mut [f64]) {
        assert!(top + h <= self.cells_h && left + w <= self.cells_w, "rectangle out of grid");
        let a = self.entry(top + h, left + w);
        let b = self.entry(top, left + w);
        let c = self.entry(top + h, left);
        let d = self.entry(top, left);
        for (i, o) in out.iter_mut().enumerate() {
            *o = (a[i] - b[i]) - (c[i] - d[i]);
        }
        let touched = a.len() + b.len() + c.len() + d.len();
        self.lookups.fetch_add(touched as u64, Ordering::Relaxed);
    }

    pub fn rect_sum(&self, top: usize, left: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.channels()];
        self.rect_sum_into(top, left, h, w, &mut out);
        out
    }
}

pub fn build_integral_grid(map: &DenseFeatureMap, vocab: &Vocabulary) -> Result<IntegralResidualGrid> {
    IntegralResidualGrid::build(map, vocab)
}

/// Patch geometry in cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchScale {
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride: usize,
}

impl PatchScale {
    pub fn square(size: usize, stride: usize) -> Self {
        PatchScale {
            patch_h: size,
            patch_w: size,
            stride,
        }
    }

    pub fn validate(&self, cells_h: usize, cells_w: usize) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidStride(self.stride));
        }
        if self.patch_h == 0 || self.patch_w == 0 || self.patch_h > cells_h || self.patch_w > cells_w {
            return Err(Error::PatchTooLarge {
                patch_h: self.patch_h,
                patch_w: self.patch_w,
                rows: cells_h,
                cols: cells_w,
            });
        }
        Ok(())
    }

    /// Placements along each axis, `(rows, cols)`.
    pub fn placements(&self, cells_h: usize, cells_w: usize) -> (usize, usize) {
        (
            (cells_h - self.patch_h) / self.stride + 1,
            (cells_w - self.patch_w) / self.stride + 1,
        )
    }
}

impl std::fmt::Display for PatchScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}/{}", self.patch_h, self.patch_w, self.stride)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEntry {
    pub center_row: f64,
    pub center_col: f64,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDescriptorSet {
    pub scale: PatchScale,
    pub k: usize,
    pub dim: usize,
    pub entries: Vec<PatchEntry>,
}

impl PatchDescriptorSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn descriptor_len(&self) -> usize {
        self.k * self.dim
    }
}

/// One descriptor per patch placement, in row-major placement order.
pub fn extract_patch_descriptors(
    grid: &IntegralResidualGrid,
    scale: PatchScale,
) -> Result<PatchDescriptorSet> {
    scale.validate(grid.cells_h, grid.cells_w)?;
    let (prow, pcol) = scale.placements(grid.cells_h, grid.cells_w);
    let entries = (0..prow * pcol)
        .into_par_iter()
        .map(|p| {
            let top = (p / pcol) * scale.stride;
            let left = (p % pcol) * scale.stride;
            let mut descriptor = vec![0.0; grid.channels()];
            grid.rect_sum_into(top, left, scale.patch_h, scale.patch_w, &mut descriptor);
            normalize_vlad(&mut descriptor, grid.dim);
            PatchEntry {
                center_row: top as f64 + (scale.patch_h as f64 - 1.0) / 2.0,
                center_col: left as f64 + (scale.patch_w as f64 - 1.0) / 2.0,
                descriptor,
            }
        })
        .collect();
    Ok(PatchDescriptorSet {
        scale,
        k: grid.k,
        dim: grid.dim,
        entries,
    })
}

/// Extracts every scale from the same grid, preserving order.
pub fn multiscale_patches(
    grid: &IntegralResidualGrid,
    scales: &[PatchScale],
) -> Result<Vec<PatchDescriptorSet>> {
    scales
        .iter()
        .enumerate()
        .map(|(index, &s)| {
            extract_patch_descriptors(grid, s).map_err(|e| Error::Scale {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn patch_sets_to_bytes(sets: &[PatchDescriptorSet]) -> Vec<u8> {
    let (k, dim) = sets.first().map_or((0, 0), |s| (s.k, s.dim));
    let mut w = Writer::new(PPS_MAGIC);
    w.u32(k);
    w.u32(dim);
    w.u32(sets.len());
    for set in sets {
        assert_eq!((set.k, set.dim), (k, dim), "patch sets must share K and D");
        w.u32(set.scale.patch_h);
        w.u32(set.scale.patch_w);
        w.u32(set.scale.stride);
        w.u32(set.entries.len());
        for e in &set.entries {
            w.f64(e.center_row);
            w.f64(e.center_col);
            for &v in &e.descriptor {
                w.f64(v);
            }
        }
    }
    w.finish()
}

pub fn patch_sets_from_bytes(bytes: &[u8]) -> Result<Vec<PatchDescriptorSet>> {
    let mut r = Reader::new(bytes, PPS_MAGIC, "PPS1")?;
    let k = r.u32("header")?;
    let dim = r.u32("header")?;
    let n_sets = r.u32("header")?;
    let ch = k
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("PPS1 dimensions overflow".into()))?;
    let entry_bytes = ch
        .checked_add(2)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format("PPS1 dimensions overflow".into()))?;
    let mut sets = Vec::new();
    for _ in 0..n_sets {
        let scale = PatchScale {
            patch_h: r.u32("scale header")?,
            patch_w: r.u32("scale header")?,
            stride: r.u32("scale header")?,
        };
        let n = r.u32("scale header")?;
        let need = n
            .checked_mul(entry_bytes)
            .ok_or_else(|| Error::Format("PPS1 entry count overflows".into()))?;
        r.expect(need, "entries")?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let center_row = r.f64("entry")?;
            let center_col = r.f64("entry")?;
            let mut descriptor = Vec::with_capacity(ch);
            for _ in 0..ch {
                descriptor.push(r.f64("entry")?);
            }
            entries.push(PatchEntry {
                center_row,
                center_col,
                descriptor,
            });
        }
        sets.push(PatchDescriptorSet {
            scale,
            k,
            dim,
            entries,
        });
    }
    r.finish()?;
    Ok(sets)
}

pub fn save_patch_sets(sets: &[PatchDescriptorSet], path: &Path) -> Result<()> {
    write_file(path, &patch_sets_to_bytes(sets))
}

pub fn load_patch_sets(path: &Path) -> Result<Vec<PatchDescriptorSet>> {
    let bytes = read_file(path)?;
    patch_sets_from_bytes(&bytes).in_file(path)
}
