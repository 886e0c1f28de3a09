//! Event streams, frame reconstruction at several temporal scales, and the
//! ensemble that fuses per-scale retrieval.
//!
//! Events are read from CSV lines `t_us,x,y,p` with an optional `t,x,y,p`
//! header. Timestamps must not decrease. Polarity is stored as -1/+1; files
//! that record decreases as `0` are accepted and mapped to -1.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result, ResultExt};
use crate::image::Image;
use crate::matching::{validate_weights, MatchResult, RankedRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    /// Intensity decreased, p = -1.
    Negative,
    /// Intensity increased, p = +1.
    Positive,
}

impl Polarity {
    pub fn value(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    /// Accepts -1 and +1, and 0 as the alternative spelling of -1.
    pub fn from_recorded(v: i64) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 | 0 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub p: Polarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    width: usize,
    height: usize,
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: usize, height: usize, events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "sensor geometry must be positive, got {width}x{height}"
            )));
        }
        for (i, pair) in events.windows(2).enumerate() {
            if pair[1].t < pair[0].t {
                return Err(Error::OutOfOrder {
                    line: i + 2,
                    t: pair[1].t,
                });
            }
        }
        if let Some((i, e)) = events
            .iter()
            .enumerate()
            .find(|(_, e)| e.x as usize >= width || e.y as usize >= height)
        {
            return Err(Error::OutOfBounds {
                line: i + 1,
                x: e.x.into(),
                y: e.y.into(),
                width,
                height,
            });
        }
        Ok(EventStream {
            width,
            height,
            events,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// First and last timestamps, if any.
    pub fn time_range(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }

    /// Covered time in microseconds, counting both end points:
    /// `t_last - t_first + 1`. Zero for an empty stream.
    pub fn span(&self) -> u64 {
        self.time_range().map_or(0, |(a, b)| b - a + 1)
    }

    /// Events with `t_start <= t < t_start + window_len`.
    pub fn window(&self, t_start: u64, window_len: u64) -> &[Event] {
        let end = t_start.saturating_add(window_len);
        let lo = self.events.partition_point(|e| e.t < t_start);
        let hi = self.events.partition_point(|e| e.t < end);
        &self.events[lo..hi.max(lo)]
    }
}

fn parse_field<T: FromStr>(field: Option<&str>, line: usize, what: &str) -> Result<T> {
    let raw = field.ok_or_else(|| Error::BadRecord {
        line,
        detail: format!("missing {what}"),
    })?;
    raw.trim().parse().map_err(|_| Error::BadRecord {
        line,
        detail: format!("bad {what} {:?}", raw.trim()),
    })
}

fn is_header(line: &str) -> bool {
    let cols: Vec<String> = line.split(',').map(|s| s.trim().to_ascii_lowercase()).collect();
    cols.len() == 4 && (cols[0] == "t" || cols[0] == "t_us") && cols[1] == "x" && cols[2] == "y" && cols[3] == "p"
}

/// Parses CSV events, validating order, polarity and sensor bounds.
/// Line numbers in errors are 1-based and count the header.
pub fn parse_events<R: BufRead>(mut input: R, width: usize, height: usize) -> Result<EventStream> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig(format!(
            "sensor geometry must be positive, got {width}x{height}"
        )));
    }
    let mut events = Vec::new();
    let mut buf = String::new();
    let mut line_no = 0;
    let mut last_t = 0u64;
    loop {
        buf.clear();
        if input.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let line = buf.trim();
        if line.is_empty() {
            continue;
        }
        if line_no == 1 && is_header(line) {
            continue;
        }
        let mut fields = line.split(',');
        let t: u64 = parse_field(fields.next(), line_no, "timestamp")?;
        let x: u64 = parse_field(fields.next(), line_no, "x")?;
        let y: u64 = parse_field(fields.next(), line_no, "y")?;
        let p_raw = fields.next().map(str::trim).ok_or_else(|| Error::BadRecord {
            line: line_no,
            detail: "missing polarity".into(),
        })?;
        if fields.next().is_some() {
            return Err(Error::BadRecord {
                line: line_no,
                detail: "expected 4 fields".into(),
            });
        }
        let p = p_raw
            .parse::<i64>()
            .ok()
            .and_then(Polarity::from_recorded)
            .ok_or_else(|| Error::BadPolarity {
                line: line_no,
                value: p_raw.to_string(),
            })?;
        if t < last_t {
            return Err(Error::OutOfOrder { line: line_no, t });
        }
        if x >= width as u64 || y >= height as u64 {
            return Err(Error::OutOfBounds {
                line: line_no,
                x,
                y,
                width,
                height,
            });
        }
        last_t = t;
        events.push(Event {
            t,
            x: x as u32,
            y: y as u32,
            p,
        });
    }
    Ok(EventStream {
        width,
        height,
        events,
    })
}

pub fn parse_event_stream(path: &Path, width: usize, height: usize) -> Result<EventStream> {
    let file = File::open(path).map_err(Error::from).in_file(path)?;
    parse_events(BufReader::new(file), width, height).in_file(path)
}

pub fn events_to_csv(stream: &EventStream) -> String {
    let mut out = String::from("t,x,y,p\n");
    for e in stream.events() {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p.value()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReconstructionMethod {
    /// Per-pixel event counts scaled by the window maximum.
    Count,
    /// `exp(-(t_end - t_latest) / tau_us)` of the latest event per pixel.
    TimeSurface { tau_us: f64 },
}

impl ReconstructionMethod {
    pub fn from_name(name: &str, tau_us: f64) -> Result<Self> {
        match name {
            "count" => Ok(ReconstructionMethod::Count),
            "timesurface" | "time_surface" => {
                if !(tau_us > 0.0 && tau_us.is_finite()) {
                    return Err(Error::InvalidConfig(format!("tau must be positive, got {tau_us}")));
                }
                Ok(ReconstructionMethod::TimeSurface { tau_us })
            }
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReconstructionMethod::Count => "count",
            ReconstructionMethod::TimeSurface { .. } => "timesurface",
        }
    }
}

/// Raw per-pixel event counts for `[t_start, t_start + window_len)`.
pub fn count_frame(stream: &EventStream, t_start: u64, window_len: u64) -> Vec<u32> {
    let mut counts = vec![0u32; stream.width * stream.height];
    for e in stream.window(t_start, window_len) {
        counts[e.y as usize * stream.width + e.x as usize] += 1;
    }
    counts
}

pub fn reconstruct_frame(
    stream: &EventStream,
    t_start: u64,
    window_len: u64,
    method: ReconstructionMethod,
) -> Image {
    let (w, h) = (stream.width, stream.height);
    let data = match method {
        ReconstructionMethod::Count => {
            let counts = count_frame(stream, t_start, window_len);
            let max = counts.iter().copied().max().unwrap_or(0);
            if max == 0 {
                vec![0.0; w * h]
            } else {
                counts.iter().map(|&c| f64::from(c) / f64::from(max)).collect()
            }
        }
        ReconstructionMethod::TimeSurface { tau_us } => {
            let t_end = t_start.saturating_add(window_len);
            let mut latest: Vec<Option<u64>> = vec![None; w * h];
            for e in stream.window(t_start, window_len) {
                latest[e.y as usize * w + e.x as usize] = Some(e.t);
            }
            latest
                .into_iter()
                .map(|t| t.map_or(0.0, |t| (-((t_end - t) as f64) / tau_us).exp()))
                .collect()
        }
    };
    Image::new(w, h, data).expect("reconstructed intensities lie in [0, 1]")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t_start: u64,
    pub event_count: usize,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleFrames {
    pub window_us: u64,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalScaleSet {
    pub t_first: u64,
    pub span: u64,
    pub method: ReconstructionMethod,
    pub scales: Vec<ScaleFrames>,
}

/// Frames needed to tile `span` microseconds with windows of `window_us`.
pub fn frame_count(span: u64, window_us: u64) -> usize {
    span.div_ceil(window_us) as usize
}

/// Tiles the stream with back-to-back windows at every scale and renders
/// each window. An event exactly on a boundary belongs to the later window.
pub fn multiscale_reconstruct(
    stream: &EventStream,
    scales: &[u64],
    method: ReconstructionMethod,
) -> Result<TemporalScaleSet> {
    if scales.is_empty() {
        return Err(Error::EmptyScales);
    }
    if let Some(&bad) = scales.iter().find(|&&s| s == 0) {
        return Err(Error::InvalidConfig(format!("temporal scale must be positive, got {bad}")));
    }
    let (t_first, _) = stream.time_range().ok_or(Error::EmptyStream)?;
    let span = stream.span();
    let scales = scales
        .iter()
        .map(|&window_us| {
            let frames = (0..frame_count(span, window_us))
                .into_par_iter()
                .map(|i| {
                    let t_start = t_first + i as u64 * window_us;
                    Frame {
                        t_start,
                        event_count: stream.window(t_start, window_us).len(),
                        image: reconstruct_frame(stream, t_start, window_us, method),
                    }
                })
                .collect();
            ScaleFrames { window_us, frames }
        })
        .collect();
    Ok(TemporalScaleSet {
        t_first,
        span,
        method,
        scales,
    })
}

/// Dense row-major `rows x cols` matrix of query-to-reference distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite distance".into()));
        }
        Ok(DistanceMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimMismatch {
                expected: cols,
                found: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Rescales all entries to [0, 1]; a constant matrix becomes all zeros.
    pub fn min_max_normalized(&self) -> DistanceMatrix {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let data = if self.data.is_empty() || range <= 0.0 {
            vec![0.0; self.data.len()]
        } else {
            self.data.iter().map(|v| (v - lo) / range).collect()
        };
        DistanceMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

/// Weighted mean of min-max normalized matrices.
pub fn fuse_distance_matrices(matrices: &[DistanceMatrix], weights: &[f64]) -> Result<DistanceMatrix> {
    let first = matrices.first().ok_or(Error::EmptyScales)?;
    if matrices.len() != weights.len() {
        return Err(Error::LengthMismatch {
            left: matrices.len(),
            right: weights.len(),
        });
    }
    if let Some(bad) = matrices.iter().find(|m| m.shape() != first.shape()) {
        return Err(Error::ShapeMismatch {
            expected: first.shape(),
            found: bad.shape(),
        });
    }
    let total = validate_weights(weights)?;
    let mut fused = vec![0.0; first.data.len()];
    for (m, &w) in matrices.iter().zip(weights) {
        for (f, v) in fused.iter_mut().zip(&m.min_max_normalized().data) {
            *f += w * v;
        }
    }
    fused.iter_mut().for_each(|v| *v /= total);
    DistanceMatrix::new(first.rows, first.cols, fused)
}

/// Ranks every reference for every query by fused distance.
///
/// Each ranked entry carries the fused distance in `global_distance` and
/// `1 - fused` as its score; ties go to the lower reference index.
pub fn ensemble_retrieve(matrices: &[DistanceMatrix], weights: &[f64]) -> Result<Vec<MatchResult>> {
    let fused = fuse_distance_matrices(matrices, weights)?;
    Ok((0..fused.rows)
        .map(|q| {
            let mut ranked: Vec<RankedRef> = fused
                .row(q)
                .iter()
                .enumerate()
                .map(|(ref_index, &d)| RankedRef {
                    ref_index,
                    final_score: 1.0 - d,
                    global_distance: d,
                })
                .collect();
            ranked.sort_by(|a, b| {
                b.final_score
                    .total_cmp(&a.final_score)
                    .then(a.ref_index.cmp(&b.ref_index))
            });
            MatchResult {
                query_index: q,
                ranked,
                reranked: false,
            }
        })
        .collect())
}
