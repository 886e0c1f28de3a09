#![allow(dead_code)]

use patchplace::features::DenseFeatureMap;
use patchplace::vlad::Vocabulary;
use patchplace::vlad::KMeansParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use patchplace::synthetic::rng;

pub fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize, dim: usize) -> DenseFeatureMap {
    let data = (0..rows * cols * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    DenseFeatureMap::new(rows, cols, dim, 1, 1, data).unwrap()
}

pub fn random_vocab(rng: &mut ChaCha8Rng, k: usize, dim: usize, alpha: f64) -> Vocabulary {
    let centers = (0..k * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Vocabulary::new(k, dim, alpha, centers).unwrap()
}

/// Soft-assigned residual of one feature, written out from the definition.
pub fn residual_oracle(x: &[f32], vocab: &Vocabulary) -> Vec<f64> {
    let d: Vec<f64> = (0..vocab.k())
        .map(|k| {
            x.iter()
                .zip(vocab.center(k))
                .map(|(&a, &c)| (a as f64 - c as f64).powi(2))
                .sum()
        })
        .collect();
    let mut out = Vec::with_capacity(vocab.k() * vocab.dim());
    for k in 0..vocab.k() {
        // w_k = 1 / sum_j exp(-alpha (d_j - d_k))
        let denom: f64 = d.iter().map(|dj| (-vocab.alpha() * (dj - d[k])).exp()).sum();
        let w = 1.0 / denom;
        for (a, c) in x.iter().zip(vocab.center(k)) {
            out.push(w * (*a as f64 - *c as f64));
        }
    }
    out
}

/// Raw residual sum over cells `top..top+h` x `left..left+w`.
pub fn rect_oracle(
    map: &DenseFeatureMap,
    vocab: &Vocabulary,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut acc = vec![0.0; vocab.k() * vocab.dim()];
    for r in top..top + h {
        for c in left..left + w {
            for (a, v) in acc.iter_mut().zip(residual_oracle(map.feature(r, c), vocab)) {
                *a += v;
            }
        }
    }
    acc
}

/// Block-wise then global L2 normalization, written independently. Blocks
/// at or under the floor count as empty.
pub fn normalize_oracle(raw: &[f64], dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = raw
        .chunks(dim)
        .flat_map(|b| {
            let n = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            b.iter()
                .map(move |x| if n > patchplace::vlad::BLOCK_NORM_FLOOR { x / n } else { 0.0 })
                .collect::<Vec<_>>()
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / (1.0 + w.abs()))
        .fold(0.0, f64::max)
}

pub fn max_abs_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
}

/// Gaussian blobs of `per` 2-D points around each mean.
pub fn blobs(seed: u64, per: usize, means: &[[f64; 2]], sigma: f64) -> Vec<f64> {
    let mut rng = rng(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut pts = Vec::new();
    for m in means {
        for _ in 0..per {
            pts.push(m[0] + noise.sample(&mut rng));
            pts.push(m[1] + noise.sample(&mut rng));
        }
    }
    pts
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Single-threaded textbook Lloyd with the same seeding protocol.
pub fn lloyd_oracle(points: &[f64], dim: usize, p: &KMeansParams) -> (Vec<Vec<f64>>, Vec<f64>) {
    let pts: Vec<&[f64]> = points.chunks(dim).collect();
    let n = pts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut centers: Vec<Vec<f64>> = vec![pts[rng.random_range(0..n)].to_vec()];
    while centers.len() < p.k {
        let dist: Vec<f64> = pts
            .iter()
            .map(|x| centers.iter().map(|c| d2(x, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > u {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..n)
        };
        centers.push(pts[pick].to_vec());
    }
    let label = |centers: &[Vec<f64>], x: &[f64]| {
        let mut best = (0, f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let d = d2(x, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    };
    let error = |centers: &[Vec<f64>]| pts.iter().map(|x| label(centers, x).1).sum::<f64>();
    let mut errors = vec![error(&centers)];
    for _ in 0..p.max_iters {
        let labels: Vec<(usize, f64)> = pts.iter().map(|x| label(&centers, x)).collect();
        let mut next = centers.clone();
        let mut taken = vec![false; n];
        for (k, c) in next.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i].0 == k).collect();
            if members.is_empty() {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |b: Option<usize>, i| match b {
                        Some(j) if labels[j].1 >= labels[i].1 => Some(j),
                        _ => Some(i),
                    });
                if let Some(i) = far {
                    taken[i] = true;
                    *c = pts[i].to_vec();
                }
                continue;
            }
            for (j, cv) in c.iter_mut().enumerate() {
                *cv = members.iter().map(|&i| pts[i][j]).sum::<f64>() / members.len() as f64;
            }
        }
        let shift = centers.iter().zip(&next).map(|(a, b)| d2(a, b).sqrt()).fold(0.0, f64::max);
        centers = next;
        errors.push(error(&centers));
        if shift < p.tol {
            break;
        }
    }
    (centers, errors)
}
