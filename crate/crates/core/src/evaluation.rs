//! Ground truth construction and retrieval metrics.
//!
//! Queries whose truth set is empty have no correct answer in the reference
//! database. They are left out of every denominator and reported separately.
//! When no query fires at a threshold, precision is defined as 1.0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result, ResultExt};
use crate::matching::MatchResult;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruthSource {
    /// References within `radius_m` meters of the query position.
    Positions { radius_m: f64 },
    /// References whose index is within `tolerance` of the query index.
    IndexWindow { tolerance: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub ref_count: usize,
    pub source: TruthSource,
    sets: Vec<BTreeSet<usize>>,
}

impl GroundTruth {
    pub fn from_sets(ref_count: usize, source: TruthSource, sets: Vec<BTreeSet<usize>>) -> Result<Self> {
        for (q, s) in sets.iter().enumerate() {
            if let Some(&bad) = s.iter().find(|&&r| r >= ref_count) {
                return Err(Error::Format(format!(
                    "query {q}: reference {bad} outside 0..{ref_count}"
                )));
            }
        }
        Ok(GroundTruth {
            ref_count,
            source,
            sets,
        })
    }

    pub fn query_count(&self) -> usize {
        self.sets.len()
    }

    pub fn correct(&self, query: usize) -> Option<&BTreeSet<usize>> {
        self.sets.get(query)
    }

    /// Queries with no correct reference.
    pub fn unmatched(&self) -> Vec<usize> {
        (0..self.sets.len()).filter(|&q| self.sets[q].is_empty()).collect()
    }
}

pub type Position = (f64, f64);

pub fn build_ground_truth_by_position(
    queries: &[Position],
    refs: &[Position],
    radius_m: f64,
) -> Result<GroundTruth> {
    if !(radius_m >= 0.0 && radius_m.is_finite()) {
        return Err(Error::InvalidConfig(format!("radius must be nonnegative, got {radius_m}")));
    }
    let finite = |p: &Position| p.0.is_finite() && p.1.is_finite();
    if let Some(i) = queries.iter().position(|p| !finite(p)) {
        return Err(Error::NonFinitePosition(i));
    }
    if let Some(i) = refs.iter().position(|p| !finite(p)) {
        return Err(Error::NonFinitePosition(i));
    }
    let sets = queries
        .iter()
        .map(|q| {
            refs.iter()
                .enumerate()
                .filter(|(_, r)| (q.0 - r.0).hypot(q.1 - r.1) <= radius_m)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    GroundTruth::from_sets(refs.len(), TruthSource::Positions { radius_m }, sets)
}

pub fn build_ground_truth_by_index(query_count: usize, ref_count: usize, tolerance: usize) -> GroundTruth {
    let sets = (0..query_count)
        .map(|q| {
            let lo = q.saturating_sub(tolerance);
            let hi = (q + tolerance + 1).min(ref_count);
            (lo..hi).collect()
        })
        .collect();
    GroundTruth {
        ref_count,
        source: TruthSource::IndexWindow { tolerance },
        sets,
    }
}

/// Reads `index,x_m,y_m` rows; an optional header line is skipped. Rows must
/// be listed in index order starting at zero.
pub fn read_positions<R: BufRead>(input: R) -> Result<Vec<Position>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = n + 1;
        let t = line.trim();
        if t.is_empty() || (line_no == 1 && t.starts_with(|c: char| c.is_ascii_alphabetic())) {
            continue;
        }
        let f: Vec<&str> = t.split(',').map(str::trim).collect();
        let bad = |detail: String| Error::BadRecord { line: line_no, detail };
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", f.len())));
        }
        let idx: usize = f[0].parse().map_err(|_| bad(format!("bad index {:?}", f[0])))?;
        if idx != out.len() {
            return Err(bad(format!("index {idx} out of sequence, expected {}", out.len())));
        }
        let x: f64 = f[1].parse().map_err(|_| bad(format!("bad x {:?}", f[1])))?;
        let y: f64 = f[2].parse().map_err(|_| bad(format!("bad y {:?}", f[2])))?;
        out.push((x, y));
    }
    Ok(out)
}

pub fn load_positions(path: &Path) -> Result<Vec<Position>> {
    let file = File::open(path).map_err(Error::from).in_file(path)?;
    read_positions(BufReader::new(file)).in_file(path)
}

pub fn positions_to_csv(positions: &[Position]) -> String {
    let mut s = String::from("index,x_m,y_m\n");
    for (i, p) in positions.iter().enumerate() {
        writeln!(s, "{i},{},{}", p.0, p.1).unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    /// k -> recall@k.
    pub recall: BTreeMap<usize, f64>,
    /// Queries with a non-empty truth set.
    pub evaluated: usize,
    /// Queries skipped because nothing in the database is correct for them.
    pub unmatched: usize,
}

fn truth_for<'a>(gt: &'a GroundTruth, r: &MatchResult) -> Result<&'a BTreeSet<usize>> {
    gt.correct(r.query_index)
        .ok_or(Error::MissingGroundTruth(r.query_index))
}

pub fn recall_at_k(results: &[MatchResult], gt: &GroundTruth, ks: &[usize]) -> Result<RecallReport> {
    let mut hits = vec![0usize; ks.len()];
    let mut evaluated = 0;
    let mut unmatched = 0;
    for r in results {
        let truth = truth_for(gt, r)?;
        if truth.is_empty() {
            unmatched += 1;
            continue;
        }
        evaluated += 1;
        let first_hit = r.ranked.iter().position(|e| truth.contains(&e.ref_index));
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first_hit.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    let recall = ks
        .iter()
        .zip(&hits)
        .map(|(&k, &h)| {
            let v = if evaluated == 0 { 0.0 } else { h as f64 / evaluated as f64 };
            (k, v)
        })
        .collect();
    Ok(RecallReport {
        recall,
        evaluated,
        unmatched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall of accepting each query's top match when its score
/// reaches the threshold. Thresholds must be given in descending order.
pub fn precision_recall(results: &[MatchResult], gt: &GroundTruth, thresholds: &[f64]) -> Result<Vec<PrPoint>> {
    if thresholds.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::UnsortedThresholds);
    }
    let mut tops: Vec<(Option<f64>, bool)> = Vec::new();
    for r in results {
        let truth = truth_for(gt, r)?;
        if truth.is_empty() {
            continue;
        }
        tops.push(match r.top() {
            Some(t) => (Some(t.final_score), truth.contains(&t.ref_index)),
            None => (None, false),
        });
    }
    let evaluated = tops.len();
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let mut fired = 0;
            let mut correct = 0;
            for &(score, ok) in &tops {
                if score.is_some_and(|s| s >= threshold) {
                    fired += 1;
                    correct += usize::from(ok);
                }
            }
            PrPoint {
                threshold,
                precision: if fired == 0 { 1.0 } else { correct as f64 / fired as f64 },
                recall: if evaluated == 0 { 0.0 } else { correct as f64 / evaluated as f64 },
            }
        })
        .collect())
}

pub fn recall_csv(report: &RecallReport) -> String {
    let mut s = String::from("k,recall\n");
    for (k, v) in &report.recall {
        writeln!(s, "{k},{v}").unwrap();
    }
    s
}

pub fn recall_table(report: &RecallReport) -> String {
    let mut s = String::new();
    writeln!(s, "{:>8}  {:>8}", "k", "recall").unwrap();
    for (k, v) in &report.recall {
        writeln!(s, "{k:>8}  {v:>8.4}").unwrap();
    }
    writeln!(s, "evaluated queries: {}", report.evaluated).unwrap();
    writeln!(s, "queries without a correct reference: {}", report.unmatched).unwrap();
    s
}

/// Whitespace-separated columns for plotting tools such as gnuplot.
pub fn pr_curve_data(points: &[PrPoint]) -> String {
    let mut s = String::from("# threshold precision recall\n");
    for p in points {
        writeln!(s, "{} {} {}", p.threshold, p.precision, p.recall).unwrap();
    }
    s
}
