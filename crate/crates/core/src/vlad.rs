//! Vocabulary training and VLAD aggregation with soft-assigned residuals.
//!
//! The vocabulary file (`"PVC1"`, `u32` K, `u32` D, `f64` alpha, `K * D` `f32`
//! centers) stores exactly what [`Vocabulary`] holds in memory, so a reloaded
//! vocabulary produces bit-identical descriptors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binfmt::{checked_volume, read_file, write_file, Reader, Writer};
use crate::error::{Error, Result, ResultExt};
use crate::features::DenseFeatureMap;

const PVC_MAGIC: &[u8; 4] = b"PVC1";

pub const DEFAULT_ALPHA: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    k: usize,
    dim: usize,
    alpha: f64,
    centers: Vec<f32>,
}

impl Vocabulary {
    pub fn new(k: usize, dim: usize, alpha: f64, centers: Vec<f32>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Format(format!(
                "vocabulary needs K >= 1 and D >= 1, got K={k} D={dim}"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be a positive finite number, got {alpha}"
            )));
        }
        if centers.len() != k * dim {
            return Err(Error::Format(format!(
                "vocabulary {k}x{dim} needs {} center values, got {}",
                k * dim,
                centers.len()
            )));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite vocabulary center".into()));
        }
        Ok(Vocabulary {
            k,
            dim,
            alpha,
            centers,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Length of descriptors built from this vocabulary.
    pub fn descriptor_len(&self) -> usize {
        self.k * self.dim
    }

    pub fn center(&self, k: usize) -> &[f32] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    pub fn centers(&self) -> &[f32] {
        &self.centers
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(PVC_MAGIC);
        w.u32(self.k);
        w.u32(self.dim);
        w.f64(self.alpha);
        for &c in &self.centers {
            w.f32(c);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, PVC_MAGIC, "PVC1")?;
        let k = r.u32("header")?;
        let dim = r.u32("header")?;
        let alpha = r.f64("header")?;
        let count = checked_volume(&[k, dim, 4], "PVC1")?;
        if r.remaining() != count {
            return Err(Error::Format(format!(
                "PVC1 payload size mismatch: expected {count} bytes, found {}",
                r.remaining()
            )));
        }
        let mut centers = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            centers.push(r.f32()?);
        }
        r.finish()?;
        Vocabulary::new(k, dim, alpha, centers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes).in_file(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: 16,
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    /// Row-major `k x dim` centers.
    pub centers: Vec<f64>,
    /// Quantization error of the initial centers followed by the error after
    /// each Lloyd update. The last entry is the error of `centers`.
    pub errors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansOutcome {
    pub fn final_error(&self) -> f64 {
        *self.errors.last().expect("at least the initial error is recorded")
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center (lowest index on ties) and its squared distance.
fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(points: &[f64], centers: &[f64], dim: usize) -> Vec<(usize, f64)> {
    points
        .par_chunks_exact(dim)
        .map(|p| nearest(p, centers, dim))
        .collect()
}

fn kmeans_plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(k * dim);
    centers.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = points
        .par_chunks_exact(dim)
        .map(|p| sq_dist(p, &centers[..dim]))
        .collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave the running sum just short of the target
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(point(pick));
        let newest = &centers[start..];
        d2.par_iter_mut()
            .zip(points.par_chunks_exact(dim))
            .for_each(|(d, p)| *d = d.min(sq_dist(p, newest)));
    }
    centers
}

/// Lloyd's algorithm with k-means++ seeding over row-major `points`.
///
/// Assignment runs data-parallel, but every reduction walks the points in
/// index order, so the outcome does not depend on the thread count.
pub fn kmeans(points: &[f64], dim: usize, params: &KMeansParams) -> Result<KMeansOutcome> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            found: points.len(),
        });
    }
    let n = points.len() / dim;
    if params.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if n < params.k {
        return Err(Error::InsufficientData {
            available: n,
            required: params.k,
        });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite training feature".into()));
    }
    let k = params.k;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centers = kmeans_plus_plus(points, dim, k, &mut rng);

    let mut labels = assign(points, &centers, dim);
    let mut errors = vec![labels.iter().map(|l| l.1).sum::<f64>()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iters {
        iterations += 1;
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &(label, _)) in points.chunks_exact(dim).zip(&labels) {
            counts[label] += 1;
            for (s, v) in sums[label * dim..(label + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next = centers.clone();
        let mut taken = vec![false; n];
        for c in 0..k {
            let dst = &mut next[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                let inv = counts[c] as f64;
                for (d, s) in dst.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *d = s / inv;
                }
            } else {
                // re-seed on the point farthest from its current center
                let mut far = None;
                let mut far_d = -1.0;
                for (i, &(_, d)) in labels.iter().enumerate() {
                    if !taken[i] && d > far_d {
                        far = Some(i);
                        far_d = d;
                    }
                }
                if let Some(i) = far {
                    taken[i] = true;
                    dst.copy_from_slice(&points[i * dim..(i + 1) * dim]);
                }
            }
        }
        let shift = centers
            .chunks_exact(dim)
            .zip(next.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0f64, f64::max);
        centers = next;
        labels = assign(points, &centers, dim);
        errors.push(labels.iter().map(|l| l.1).sum::<f64>());
        if shift < params.tol {
            converged = true;
            break;
        }
    }

    Ok(KMeansOutcome {
        centers,
        errors,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedVocabulary {
    pub vocabulary: Vocabulary,
    pub outcome: KMeansOutcome,
    pub feature_count: usize,
}

/// Clusters every feature of every map into a `params.k`-word vocabulary.
pub fn train_vocabulary(
    maps: &[DenseFeatureMap],
    params: &KMeansParams,
    alpha: f64,
) -> Result<TrainedVocabulary> {
    let dim = match maps.first() {
        Some(m) => m.dim(),
        None => {
            return Err(Error::InsufficientData {
                available: 0,
                required: params.k,
            })
        }
    };
    if let Some(bad) = maps.iter().find(|m| m.dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    let points: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.as_slice().iter().map(|&v| f64::from(v)))
        .collect();
    let outcome = kmeans(&points, dim, params)?;
    let centers = outcome.centers.iter().map(|&v| v as f32).collect();
    let vocabulary = Vocabulary::new(params.k, dim, alpha, centers)?;
    Ok(TrainedVocabulary {
        vocabulary,
        outcome,
        feature_count: points.len() / dim,
    })
}

fn check_dim(x: &[f32], vocab: &Vocabulary) -> Result<()> {
    if x.len() != vocab.dim {
        return Err(Error::DimMismatch {
            expected: vocab.dim,
            found: x.len(),
        });
    }
    Ok(())
}

/// Writes `exp(-alpha * |x - c_k|^2)` weights normalized to sum to one.
/// The smallest distance is subtracted before exponentiating.
pub(crate) fn soft_assign_into(x: &[f32], vocab: &Vocabulary, weights: &mut [f64]) {
    let mut min_d = f64::INFINITY;
    for (w, c) in weights.iter_mut().zip(vocab.centers.chunks_exact(vocab.dim)) {
        let d: f64 = x
            .iter()
            .zip(c)
            .map(|(&a, &b)| {
                let diff = f64::from(a) - f64::from(b);
                diff * diff
            })
            .sum();
        *w = d;
        min_d = min_d.min(d);
    }
    let mut total = 0.0;
    for w in weights.iter_mut() {
        *w = (-vocab.alpha * (*w - min_d)).exp();
        total += *w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
}

pub fn soft_assign(x: &[f32], vocab: &Vocabulary) -> Result<Vec<f64>> {
    check_dim(x, vocab)?;
    let mut weights = vec![0.0; vocab.k];
    soft_assign_into(x, vocab, &mut weights);
    Ok(weights)
}

/// Adds the soft-assigned residual of `x` to `acc` (length `K * D`).
/// `weights` is scratch space of length K.
pub(crate) fn accumulate_residual(
    x: &[f32],
    vocab: &Vocabulary,
    weights: &mut [f64],
    acc: &mut [f64],
) {
    soft_assign_into(x, vocab, weights);
    for ((block, c), &w) in acc
        .chunks_exact_mut(vocab.dim)
        .zip(vocab.centers.chunks_exact(vocab.dim))
        .zip(weights.iter())
    {
        for ((a, &xv), &cv) in block.iter_mut().zip(x).zip(c) {
            *a += w * (f64::from(xv) - f64::from(cv));
        }
    }
}

/// Blocks whose residual norm falls below this are treated as empty words.
/// Prefix-sum differences cannot resolve residuals that small, and
/// intra-normalization would otherwise inflate rounding noise to unit length.
pub const BLOCK_NORM_FLOOR: f64 = 1e-10;

/// Intra-normalizes each `dim`-sized block, then L2-normalizes the whole
/// vector. Blocks with norm at most [`BLOCK_NORM_FLOOR`] become zero; an
/// all-zero vector is left untouched.
pub fn normalize_vlad(values: &mut [f64], dim: usize) {
    for block in values.chunks_exact_mut(dim) {
        let n = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > BLOCK_NORM_FLOOR {
            block.iter_mut().for_each(|v| *v /= n);
        } else {
            block.fill(0.0);
        }
    }
    let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        values.iter_mut().for_each(|v| *v /= n);
    }
}

/// A normalized, flattened `K x D` VLAD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VladDescriptor {
    k: usize,
    dim: usize,
    values: Vec<f64>,
}

impl VladDescriptor {
    /// Normalizes raw residual sums into a descriptor.
    pub fn from_residual_sums(k: usize, dim: usize, mut values: Vec<f64>) -> Self {
        assert_eq!(values.len(), k * dim, "residual sums must be K x D");
        normalize_vlad(&mut values, dim);
        VladDescriptor { k, dim, values }
    }

    /// Wraps values that are already normalized, e.g. read back from disk.
    pub fn from_normalized(k: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != k * dim {
            return Err(Error::DimMismatch {
                expected: k * dim,
                found: values.len(),
            });
        }
        Ok(VladDescriptor { k, dim, values })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Unnormalized residual sums over every cell of `map`.
pub fn residual_sums(map: &DenseFeatureMap, vocab: &Vocabulary) -> Result<Vec<f64>> {
    if map.dim() != vocab.dim {
        return Err(Error::DimMismatch {
            expected: vocab.dim,
            found: map.dim(),
        });
    }
    let mut acc = vec![0.0; vocab.descriptor_len()];
    let mut weights = vec![0.0; vocab.k];
    for x in map.features() {
        accumulate_residual(x, vocab, &mut weights, &mut acc);
    }
    Ok(acc)
}

pub fn aggregate_vlad(map: &DenseFeatureMap, vocab: &Vocabulary) -> Result<VladDescriptor> {
    let sums = residual_sums(map, vocab)?;
    Ok(VladDescriptor::from_residual_sums(vocab.k, vocab.dim, sums))
}

const PGD_MAGIC: &[u8; 4] = b"PGD1";

/// Serializes descriptors sharing one shape: `"PGD1"`, `u32` count, `u32` K,
/// `u32` D, then every descriptor's `f64` values in order.
pub fn descriptors_to_bytes(k: usize, dim: usize, descriptors: &[VladDescriptor]) -> Vec<u8> {
    let mut w = Writer::new(PGD_MAGIC);
    w.u32(descriptors.len());
    w.u32(k);
    w.u32(dim);
    for d in descriptors {
        assert_eq!((d.k, d.dim), (k, dim), "descriptor shape");
        for &v in &d.values {
            w.f64(v);
        }
    }
    w.finish()
}

pub fn descriptors_from_bytes(bytes: &[u8]) -> Result<Vec<VladDescriptor>> {
    let mut r = Reader::new(bytes, PGD_MAGIC, "PGD1")?;
    let n = r.u32("header")?;
    let k = r.u32("header")?;
    let dim = r.u32("header")?;
    let payload = checked_volume(&[n, k, dim, 8], "PGD1")?;
    if r.remaining() != payload {
        return Err(Error::Format(format!(
            "PGD1 payload size mismatch: expected {payload} bytes, found {}",
            r.remaining()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut values = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            values.push(r.f64("payload")?);
        }
        out.push(VladDescriptor { k, dim, values });
    }
    r.finish()?;
    Ok(out)
}
