//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, repeating a key or using an unknown key is an error, and lists are
//! comma separated. Patch scales are written `HxW/stride`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result, ResultExt};
use crate::events::ReconstructionMethod;
use crate::features::ExtractorConfig;
use crate::matching::RerankConfig;
use crate::patchgrid::PatchScale;
use crate::vlad::{KMeansParams, DEFAULT_ALPHA};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruthMode {
    IndexWindow,
    Positions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub extractor: ExtractorConfig,
    pub vocab_k: usize,
    pub vocab_alpha: f64,
    pub vocab_max_iters: usize,
    pub vocab_tol: f64,
    pub vocab_path: Option<PathBuf>,
    pub patch_scales: Vec<PatchScale>,
    pub match_top_k: usize,
    pub match_inlier_tol: f64,
    pub match_weights: Vec<f64>,
    pub match_rerank: bool,
    pub sensor_width: usize,
    pub sensor_height: usize,
    pub event_scales_us: Vec<u64>,
    pub event_method: String,
    pub event_tau_us: f64,
    pub event_weights: Vec<f64>,
    pub eval_ks: Vec<usize>,
    pub eval_ground_truth: GroundTruthMode,
    pub eval_tolerance: usize,
    pub eval_radius_m: f64,
    pub eval_query_positions: Option<PathBuf>,
    pub eval_ref_positions: Option<PathBuf>,
    pub eval_pr_steps: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            extractor: ExtractorConfig::default(),
            vocab_k: 16,
            vocab_alpha: DEFAULT_ALPHA,
            vocab_max_iters: 100,
            vocab_tol: 1e-6,
            vocab_path: None,
            patch_scales: vec![
                PatchScale::square(2, 1),
                PatchScale::square(5, 1),
                PatchScale::square(8, 1),
            ],
            match_top_k: 10,
            match_inlier_tol: 1.0,
            match_weights: vec![1.0; 3],
            match_rerank: true,
            sensor_width: 64,
            sensor_height: 64,
            event_scales_us: vec![50_000, 100_000, 200_000],
            event_method: "count".into(),
            event_tau_us: 10_000.0,
            event_weights: vec![1.0; 3],
            eval_ks: vec![1, 5, 10],
            eval_ground_truth: GroundTruthMode::IndexWindow,
            eval_tolerance: 0,
            eval_radius_m: 25.0,
            eval_query_positions: None,
            eval_ref_positions: None,
            eval_pr_steps: 20,
        }
    }
}

fn cfg_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| cfg_err(line, format!("key {key:?}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim(), line)).collect()
}

fn parse_bool(key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(cfg_err(line, format!("key {key:?}: expected true or false, got {v:?}"))),
    }
}

fn parse_scale(s: &str, line: usize) -> Result<PatchScale> {
    let bad = || cfg_err(line, format!("bad patch scale {s:?}, expected HxW/stride"));
    let (size, stride) = s.split_once('/').ok_or_else(bad)?;
    let (h, w) = size.split_once('x').ok_or_else(bad)?;
    Ok(PatchScale {
        patch_h: h.trim().parse().map_err(|_| bad())?,
        patch_w: w.trim().parse().map_err(|_| bad())?,
        stride: stride.trim().parse().map_err(|_| bad())?,
    })
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Parses `text`, resolving relative paths against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = std::collections::HashSet::new();
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (key, value) = t
                .split_once('=')
                .ok_or_else(|| cfg_err(line, format!("expected key = value, got {t:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(cfg_err(line, format!("duplicate key {key:?}")));
            }
            match key {
                "seed" => cfg.seed = parse_num(key, v, line)?,
                "extractor.cell_px" => cfg.extractor.cell_px = parse_num(key, v, line)?,
                "extractor.stride_px" => cfg.extractor.stride_px = parse_num(key, v, line)?,
                "extractor.bins" => cfg.extractor.orientation_bins = parse_num(key, v, line)?,
                "vocab.k" => cfg.vocab_k = parse_num(key, v, line)?,
                "vocab.alpha" => cfg.vocab_alpha = parse_num(key, v, line)?,
                "vocab.max_iters" => cfg.vocab_max_iters = parse_num(key, v, line)?,
                "vocab.tol" => cfg.vocab_tol = parse_num(key, v, line)?,
                "vocab.path" => cfg.vocab_path = Some(path(v)),
                "patch.scales" => {
                    cfg.patch_scales = v
                        .split(',')
                        .map(|s| parse_scale(s.trim(), line))
                        .collect::<Result<_>>()?
                }
                "match.top_k" => cfg.match_top_k = parse_num(key, v, line)?,
                "match.inlier_tol" => cfg.match_inlier_tol = parse_num(key, v, line)?,
                "match.weights" => cfg.match_weights = parse_list(key, v, line)?,
                "match.rerank" => cfg.match_rerank = parse_bool(key, v, line)?,
                "events.sensor_width" => cfg.sensor_width = parse_num(key, v, line)?,
                "events.sensor_height" => cfg.sensor_height = parse_num(key, v, line)?,
                "events.scales_us" => cfg.event_scales_us = parse_list(key, v, line)?,
                "events.method" => cfg.event_method = v.to_string(),
                "events.tau_us" => cfg.event_tau_us = parse_num(key, v, line)?,
                "events.weights" => cfg.event_weights = parse_list(key, v, line)?,
                "eval.ks" => cfg.eval_ks = parse_list(key, v, line)?,
                "eval.ground_truth" => {
                    cfg.eval_ground_truth = match v {
                        "index" => GroundTruthMode::IndexWindow,
                        "positions" => GroundTruthMode::Positions,
                        _ => return Err(cfg_err(line, format!("eval.ground_truth must be index or positions, got {v:?}"))),
                    }
                }
                "eval.tolerance" => cfg.eval_tolerance = parse_num(key, v, line)?,
                "eval.radius_m" => cfg.eval_radius_m = parse_num(key, v, line)?,
                "eval.query_positions" => cfg.eval_query_positions = Some(path(v)),
                "eval.ref_positions" => cfg.eval_ref_positions = Some(path(v)),
                "eval.pr_steps" => cfg.eval_pr_steps = parse_num(key, v, line)?,
                _ => return Err(cfg_err(line, format!("unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::from).in_file(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        Self::parse(&text, base).in_file(path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.extractor.validate()?;
        if self.vocab_k == 0 {
            return bad("vocab.k must be at least 1".into());
        }
        if !(self.vocab_alpha > 0.0 && self.vocab_alpha.is_finite()) {
            return bad(format!("vocab.alpha must be positive, got {}", self.vocab_alpha));
        }
        if self.vocab_tol.is_nan() || self.vocab_tol < 0.0 {
            return bad(format!("vocab.tol must be nonnegative, got {}", self.vocab_tol));
        }
        if self.patch_scales.is_empty() {
            return bad("patch.scales must list at least one scale".into());
        }
        if let Some(s) = self.patch_scales.iter().find(|s| s.stride == 0 || s.patch_h == 0 || s.patch_w == 0) {
            return bad(format!("patch scale {s} must have positive size and stride"));
        }
        if self.match_weights.len() != self.patch_scales.len() {
            return bad(format!(
                "match.weights has {} entries but patch.scales has {}",
                self.match_weights.len(),
                self.patch_scales.len()
            ));
        }
        crate::matching::validate_weights(&self.match_weights)?;
        if self.match_top_k == 0 {
            return bad("match.top_k must be at least 1".into());
        }
        if !(self.match_inlier_tol >= 0.0 && self.match_inlier_tol.is_finite()) {
            return bad(format!("match.inlier_tol must be nonnegative, got {}", self.match_inlier_tol));
        }
        if self.sensor_width == 0 || self.sensor_height == 0 {
            return bad("sensor geometry must be positive".into());
        }
        if self.event_scales_us.is_empty() || self.event_scales_us.contains(&0) {
            return bad("events.scales_us must list positive window lengths".into());
        }
        if self.event_weights.len() != self.event_scales_us.len() {
            return bad(format!(
                "events.weights has {} entries but events.scales_us has {}",
                self.event_weights.len(),
                self.event_scales_us.len()
            ));
        }
        crate::matching::validate_weights(&self.event_weights)?;
        self.reconstruction_method()?;
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return bad("eval.ks must list positive cutoffs".into());
        }
        if !(self.eval_radius_m >= 0.0 && self.eval_radius_m.is_finite()) {
            return bad(format!("eval.radius_m must be nonnegative, got {}", self.eval_radius_m));
        }
        if self.eval_pr_steps == 0 {
            return bad("eval.pr_steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            k: self.vocab_k,
            seed: self.seed,
            max_iters: self.vocab_max_iters,
            tol: self.vocab_tol,
        }
    }

    pub fn rerank_config(&self) -> RerankConfig {
        RerankConfig {
            weights: self.match_weights.clone(),
            inlier_tol_cells: self.match_inlier_tol,
        }
    }

    pub fn reconstruction_method(&self) -> Result<ReconstructionMethod> {
        ReconstructionMethod::from_name(&self.event_method, self.event_tau_us)
    }

    /// The effective configuration; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("extractor.cell_px", self.extractor.cell_px.to_string());
        kv("extractor.stride_px", self.extractor.stride_px.to_string());
        kv("extractor.bins", self.extractor.orientation_bins.to_string());
        kv("vocab.k", self.vocab_k.to_string());
        kv("vocab.alpha", self.vocab_alpha.to_string());
        kv("vocab.max_iters", self.vocab_max_iters.to_string());
        kv("vocab.tol", self.vocab_tol.to_string());
        if let Some(p) = &self.vocab_path {
            kv("vocab.path", p.display().to_string());
        }
        kv("patch.scales", join(&self.patch_scales));
        kv("match.top_k", self.match_top_k.to_string());
        kv("match.inlier_tol", self.match_inlier_tol.to_string());
        kv("match.weights", join(&self.match_weights));
        kv("match.rerank", self.match_rerank.to_string());
        kv("events.sensor_width", self.sensor_width.to_string());
        kv("events.sensor_height", self.sensor_height.to_string());
        kv("events.scales_us", join(&self.event_scales_us));
        kv("events.method", self.event_method.clone());
        kv("events.tau_us", self.event_tau_us.to_string());
        kv("events.weights", join(&self.event_weights));
        kv("eval.ks", join(&self.eval_ks));
        kv(
            "eval.ground_truth",
            match self.eval_ground_truth {
                GroundTruthMode::IndexWindow => "index",
                GroundTruthMode::Positions => "positions",
            }
            .into(),
        );
        kv("eval.tolerance", self.eval_tolerance.to_string());
        kv("eval.radius_m", self.eval_radius_m.to_string());
        if let Some(p) = &self.eval_query_positions {
            kv("eval.query_positions", p.display().to_string());
        }
        if let Some(p) = &self.eval_ref_positions {
            kv("eval.ref_positions", p.display().to_string());
        }
        kv("eval.pr_steps", self.eval_pr_steps.to_string());
        s
    }
}
