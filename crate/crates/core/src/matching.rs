//! Retrieve-then-rerank: exact global nearest-neighbor search followed by
//! patch-level mutual nearest-neighbor matching, translation-consistency
//! scoring and score-level fusion over patch scales.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::patchgrid::PatchDescriptorSet;
use crate::vlad::VladDescriptor;

pub const RESULTS_CSV_HEADER: &str = "query_index,rank,ref_index,final_score,global_distance";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub ref_index: usize,
    pub global_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedRef {
    pub ref_index: usize,
    pub final_score: f64,
    pub global_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub query_index: usize,
    /// Best first.
    pub ranked: Vec<RankedRef>,
    /// False when the ranking comes from global distances alone.
    pub reranked: bool,
}

impl MatchResult {
    /// Ranks candidates by global distance. Scores are `1 - d^2 / 2`, the
    /// cosine similarity of unit-norm descriptors.
    pub fn global_only(query_index: usize, candidates: &[Candidate]) -> Self {
        let ranked = candidates
            .iter()
            .map(|c| RankedRef {
                ref_index: c.ref_index,
                final_score: 1.0 - c.global_distance * c.global_distance / 2.0,
                global_distance: c.global_distance,
            })
            .collect();
        MatchResult {
            query_index,
            ranked,
            reranked: false,
        }
    }

    pub fn top(&self) -> Option<&RankedRef> {
        self.ranked.first()
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

fn by_distance_then_index(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.global_distance
        .total_cmp(&b.global_distance)
        .then(a.ref_index.cmp(&b.ref_index))
}

/// Exact top-k search by Euclidean distance; ties resolve to the lower index.
pub fn global_retrieve(
    query: &VladDescriptor,
    refs: &[VladDescriptor],
    top_k: usize,
) -> Result<Vec<Candidate>> {
    if refs.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    if let Some(bad) = refs.iter().find(|r| r.len() != query.len()) {
        return Err(Error::DimMismatch {
            expected: query.len(),
            found: bad.len(),
        });
    }
    let mut all: Vec<Candidate> = refs
        .iter()
        .enumerate()
        .map(|(ref_index, r)| Candidate {
            ref_index,
            global_distance: euclidean_distance(query.values(), r.values()),
        })
        .collect();
    let keep = top_k.min(all.len());
    if keep < all.len() {
        all.select_nth_unstable_by(keep - 1, by_distance_then_index);
        all.truncate(keep);
    }
    all.sort_by(by_distance_then_index);
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMatch {
    pub query_entry: usize,
    pub ref_entry: usize,
    pub distance: f64,
    pub query_center: (f64, f64),
    pub ref_center: (f64, f64),
}

impl PatchMatch {
    /// Reference center minus query center, `(rows, cols)`.
    pub fn displacement(&self) -> (f64, f64) {
        (
            self.ref_center.0 - self.query_center.0,
            self.ref_center.1 - self.query_center.1,
        )
    }
}

/// Pairs of patches that are each other's nearest neighbor.
///
/// Every nearest neighbor at the minimal distance counts, so duplicated
/// descriptors stay matchable. Pairs are then accepted one-to-one in order of
/// `(max(i, j), min(i, j))`; this keeps identical sets paired with themselves
/// and makes `mutual_nn_matches(b, a)` the exact transpose of
/// `mutual_nn_matches(a, b)`.
pub fn mutual_nn_matches(
    queries: &PatchDescriptorSet,
    refs: &PatchDescriptorSet,
) -> Result<Vec<PatchMatch>> {
    if queries.is_empty() || refs.is_empty() {
        return Ok(Vec::new());
    }
    if queries.descriptor_len() != refs.descriptor_len() {
        return Err(Error::DimMismatch {
            expected: queries.descriptor_len(),
            found: refs.descriptor_len(),
        });
    }
    let (nq, nr) = (queries.len(), refs.len());
    let dist: Vec<f64> = queries
        .entries
        .par_iter()
        .flat_map_iter(|q| {
            refs.entries
                .iter()
                .map(move |r| squared_distance(&q.descriptor, &r.descriptor))
        })
        .collect();
    let row_min: Vec<f64> = dist
        .chunks_exact(nr)
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let mut col_min = vec![f64::INFINITY; nr];
    for row in dist.chunks_exact(nr) {
        for (m, &d) in col_min.iter_mut().zip(row) {
            *m = m.min(d);
        }
    }
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 0..nq {
        for j in 0..nr {
            let d = dist[i * nr + j];
            if d == row_min[i] && d == col_min[j] {
                edges.push((i, j));
            }
        }
    }
    edges.sort_by_key(|&(i, j)| (i.max(j), i.min(j), i));
    let mut q_used = vec![false; nq];
    let mut r_used = vec![false; nr];
    let mut out = Vec::new();
    for (i, j) in edges {
        if q_used[i] || r_used[j] {
            continue;
        }
        q_used[i] = true;
        r_used[j] = true;
        let (q, r) = (&queries.entries[i], &refs.entries[j]);
        out.push(PatchMatch {
            query_entry: i,
            ref_entry: j,
            distance: dist[i * nr + j].sqrt(),
            query_center: (q.center_row, q.center_col),
            ref_center: (r.center_row, r.center_col),
        });
    }
    out.sort_by_key(|m| (m.query_entry, m.ref_entry));
    Ok(out)
}

/// Largest set of pairs agreeing on one 2-D translation.
///
/// Every pair's own displacement is tried as a hypothesis; a pair is an inlier
/// when its displacement lies within `inlier_tol_cells` of the hypothesis in
/// Chebyshev distance.
pub fn spatial_score(pairs: &[PatchMatch], inlier_tol_cells: f64) -> usize {
    pairs
        .iter()
        .map(|h| {
            let (hr, hc) = h.displacement();
            pairs
                .iter()
                .filter(|p| {
                    let (dr, dc) = p.displacement();
                    (dr - hr).abs().max((dc - hc).abs()) <= inlier_tol_cells
                })
                .count()
        })
        .max()
        .unwrap_or(0)
}

/// Inlier count at one patch scale together with the most it could have been.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleScore {
    pub inliers: usize,
    /// Smaller of the two patch counts.
    pub capacity: usize,
}

impl ScaleScore {
    pub fn normalized(&self) -> f64 {
        if self.capacity == 0 {
            0.0
        } else {
            self.inliers as f64 / self.capacity as f64
        }
    }
}

pub(crate) fn validate_weights(weights: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &w in weights {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::InvalidWeight(w));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    Ok(total)
}

/// Weighted mean of per-scale normalized scores.
pub fn multiscale_fuse(scores: &[ScaleScore], weights: &[f64]) -> Result<f64> {
    if scores.len() != weights.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: weights.len(),
        });
    }
    let total = validate_weights(weights)?;
    let acc: f64 = scores
        .iter()
        .zip(weights)
        .map(|(s, w)| w * s.normalized())
        .sum();
    Ok(acc / total)
}

/// Somewhere to look up a reference's patch sets by reference index.
pub trait PatchSource: Sync {
    fn patch_sets(&self, ref_index: usize) -> Option<&[PatchDescriptorSet]>;
}

impl PatchSource for [Vec<PatchDescriptorSet>] {
    fn patch_sets(&self, ref_index: usize) -> Option<&[PatchDescriptorSet]> {
        self.get(ref_index).map(Vec::as_slice)
    }
}

impl PatchSource for Vec<Vec<PatchDescriptorSet>> {
    fn patch_sets(&self, ref_index: usize) -> Option<&[PatchDescriptorSet]> {
        self.as_slice().patch_sets(ref_index)
    }
}

impl PatchSource for HashMap<usize, Vec<PatchDescriptorSet>> {
    fn patch_sets(&self, ref_index: usize) -> Option<&[PatchDescriptorSet]> {
        self.get(&ref_index).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankConfig {
    /// One weight per patch scale.
    pub weights: Vec<f64>,
    pub inlier_tol_cells: f64,
}

/// Per-scale inlier scores of one query against one reference.
pub fn scale_scores(
    query_sets: &[PatchDescriptorSet],
    ref_sets: &[PatchDescriptorSet],
    inlier_tol_cells: f64,
) -> Result<Vec<ScaleScore>> {
    if query_sets.len() != ref_sets.len() {
        return Err(Error::LengthMismatch {
            left: query_sets.len(),
            right: ref_sets.len(),
        });
    }
    query_sets
        .iter()
        .zip(ref_sets)
        .enumerate()
        .map(|(index, (q, r))| {
            if q.scale != r.scale {
                return Err(Error::Scale {
                    index,
                    source: Box::new(Error::Format(format!(
                        "query patches are {} but reference patches are {}",
                        q.scale, r.scale
                    ))),
                });
            }
            let pairs = mutual_nn_matches(q, r)?;
            Ok(ScaleScore {
                inliers: spatial_score(&pairs, inlier_tol_cells),
                capacity: q.len().min(r.len()),
            })
        })
        .collect()
}

fn rank_order(a: &RankedRef, b: &RankedRef) -> std::cmp::Ordering {
    b.final_score
        .total_cmp(&a.final_score)
        .then(a.global_distance.total_cmp(&b.global_distance))
        .then(a.ref_index.cmp(&b.ref_index))
}

/// Rescores global candidates with fused patch-match scores.
///
/// Ranking is by fused score, then smaller global distance, then lower index.
pub fn rerank<S: PatchSource + ?Sized>(
    query_index: usize,
    query_sets: &[PatchDescriptorSet],
    ref_sets: &S,
    candidates: &[Candidate],
    cfg: &RerankConfig,
) -> Result<MatchResult> {
    if query_sets.len() != cfg.weights.len() {
        return Err(Error::LengthMismatch {
            left: query_sets.len(),
            right: cfg.weights.len(),
        });
    }
    validate_weights(&cfg.weights)?;
    let mut ranked = candidates
        .par_iter()
        .map(|c| {
            let sets = ref_sets
                .patch_sets(c.ref_index)
                .ok_or(Error::MissingPatchSet(c.ref_index))?;
            let scores = scale_scores(query_sets, sets, cfg.inlier_tol_cells)?;
            Ok(RankedRef {
                ref_index: c.ref_index,
                final_score: multiscale_fuse(&scores, &cfg.weights)?,
                global_distance: c.global_distance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(rank_order);
    Ok(MatchResult {
        query_index,
        ranked,
        reranked: true,
    })
}

pub fn write_results_csv<W: Write>(results: &[MatchResult], mut out: W) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "{RESULTS_CSV_HEADER}").unwrap();
    for r in results {
        for (rank, e) in r.ranked.iter().enumerate() {
            writeln!(
                text,
                "{},{},{},{},{}",
                r.query_index,
                rank + 1,
                e.ref_index,
                e.final_score,
                e.global_distance
            )
            .unwrap();
        }
    }
    out.write_all(text.as_bytes())?;
    Ok(())
}

/// Reads results back, grouping rows by query in order of first appearance.
pub fn read_results_csv<R: BufRead>(input: R) -> Result<Vec<MatchResult>> {
    let mut results: Vec<MatchResult> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = n + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if line_no == 1 && trimmed.starts_with("query_index") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::BadRecord {
                line: line_no,
                detail: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let bad = |what: &str| Error::BadRecord {
            line: line_no,
            detail: format!("bad {what}"),
        };
        let query_index: usize = fields[0].parse().map_err(|_| bad("query_index"))?;
        let rank: usize = fields[1].parse().map_err(|_| bad("rank"))?;
        let ref_index: usize = fields[2].parse().map_err(|_| bad("ref_index"))?;
        let final_score: f64 = fields[3].parse().map_err(|_| bad("final_score"))?;
        let global_distance: f64 = fields[4].parse().map_err(|_| bad("global_distance"))?;
        let at = *slot.entry(query_index).or_insert_with(|| {
            results.push(MatchResult {
                query_index,
                ranked: Vec::new(),
                reranked: false,
            });
            results.len() - 1
        });
        let entry = &mut results[at];
        if rank != entry.ranked.len() + 1 {
            return Err(Error::BadRecord {
                line: line_no,
                detail: format!("rank {rank} out of sequence for query {query_index}"),
            });
        }
        entry.ranked.push(RankedRef {
            ref_index,
            final_score,
            global_distance,
        });
    }
    Ok(results)
}
