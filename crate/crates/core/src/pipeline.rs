//! End-to-end commands: vocabulary training, reference indexing, image and
//! event queries, and evaluation.
//!
//! An index directory holds:
//!
//! ```text
//! manifest.tsv     reference order, settings and content hashes
//! config.txt       effective configuration used to build it
//! vocab.pvc        the vocabulary
//! globals.pgd      global descriptors of all references
//! refs/NNNNNN.pfm  feature map per reference
//! refs/NNNNNN.pps  patch descriptor sets per reference
//! ```
//!
//! All work is parallelized with rayon; results never depend on the thread
//! count because every parallel stage collects in input order.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binfmt::{read_file, write_file};
use crate::config::{GroundTruthMode, PipelineConfig};
use crate::error::{Error, Result, ResultExt};
use crate::evaluation::{
    build_ground_truth_by_index, build_ground_truth_by_position, load_positions, precision_recall,
    recall_at_k, GroundTruth, PrPoint, RecallReport,
};
use crate::events::{multiscale_reconstruct, parse_event_stream, DistanceMatrix, EventStream, TemporalScaleSet};
use crate::features::{extract_dense_features, load_feature_map, save_feature_map, DenseFeatureMap};
use crate::image::Image;
use crate::matching::{euclidean_distance, global_retrieve, read_results_csv, rerank, MatchResult};
use crate::patchgrid::{
    load_patch_sets, multiscale_patches, patch_sets_to_bytes, IntegralResidualGrid, PatchDescriptorSet,
};
use crate::vlad::{
    aggregate_vlad, descriptors_from_bytes, descriptors_to_bytes, train_vocabulary, TrainedVocabulary,
    VladDescriptor, Vocabulary,
};

const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "# patchplace index v1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Files in `dir` with the given extension, sorted by file name.
pub fn list_files(dir: &Path, extension: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::from).in_file(dir)? {
        let path = entry.map_err(Error::from).in_file(dir)?.path();
        if path.is_file()
            && path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case(extension))
        {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Global and patch descriptors of one image.
#[derive(Debug, Clone)]
pub struct ImageDescription {
    pub map: DenseFeatureMap,
    pub global: VladDescriptor,
    pub patches: Vec<PatchDescriptorSet>,
}

pub fn describe_map(map: DenseFeatureMap, vocab: &Vocabulary, cfg: &PipelineConfig) -> Result<ImageDescription> {
    let global = aggregate_vlad(&map, vocab)?;
    let grid = IntegralResidualGrid::build(&map, vocab)?;
    let patches = multiscale_patches(&grid, &cfg.patch_scales)?;
    Ok(ImageDescription { map, global, patches })
}

pub fn describe_image(image: &Image, vocab: &Vocabulary, cfg: &PipelineConfig) -> Result<ImageDescription> {
    let map = extract_dense_features(image, &cfg.extractor)?;
    describe_map(map, vocab, cfg)
}

fn describe_files(files: &[PathBuf], vocab: &Vocabulary, cfg: &PipelineConfig) -> Result<Vec<(Vec<u8>, ImageDescription)>> {
    files
        .par_iter()
        .map(|path| {
            let bytes = read_file(path)?;
            let image = Image::from_pgm_bytes(&bytes).in_file(path)?;
            let desc = describe_image(&image, vocab, cfg).in_file(path)?;
            Ok((bytes, desc))
        })
        .collect()
}

pub enum VocabSource<'a> {
    Images(&'a Path),
    Features(&'a Path),
}

pub fn build_vocab(cfg: &PipelineConfig, source: VocabSource<'_>, out: &Path) -> Result<TrainedVocabulary> {
    let maps: Vec<DenseFeatureMap> = match source {
        VocabSource::Images(dir) => list_files(dir, "pgm")?
            .par_iter()
            .map(|p| {
                let img = Image::load_pgm(p)?;
                extract_dense_features(&img, &cfg.extractor).in_file(p)
            })
            .collect::<Result<_>>()?,
        VocabSource::Features(dir) => list_files(dir, "pfm")?
            .par_iter()
            .map(|p| load_feature_map(p))
            .collect::<Result<_>>()?,
    };
    let trained = train_vocabulary(&maps, &cfg.kmeans_params(), cfg.vocab_alpha)?;
    trained.vocabulary.save(out)?;
    Ok(trained)
}

fn require_vocab(cfg: &PipelineConfig) -> Result<Vocabulary> {
    let path = cfg
        .vocab_path
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("vocab.path is required to build an index".into()))?;
    if !path.exists() {
        return Err(Error::InvalidConfig(format!("vocab.path {} does not exist", path.display())));
    }
    Vocabulary::load(path)?.with_alpha(cfg.vocab_alpha)
}

fn settings_lines(cfg: &PipelineConfig) -> String {
    let e = &cfg.extractor;
    let scales: Vec<String> = cfg.patch_scales.iter().map(ToString::to_string).collect();
    format!(
        "extractor\t{}\t{}\t{}\nscales\t{}\nalpha\t{}\n",
        e.cell_px,
        e.stride_px,
        e.orientation_bins,
        scales.join(","),
        cfg.vocab_alpha
    )
}

#[derive(Debug, Clone)]
pub struct IndexSummary {
    pub references: Vec<String>,
    pub manifest: String,
}

/// Describes every `.pgm` in `ref_dir` and writes the index to `out_dir`.
pub fn build_index(cfg: &PipelineConfig, ref_dir: &Path, out_dir: &Path) -> Result<IndexSummary> {
    let vocab = require_vocab(cfg)?;
    let files = list_files(ref_dir, "pgm")?;
    let described = describe_files(&files, &vocab, cfg)?;

    let refs_dir = out_dir.join("refs");
    fs::create_dir_all(&refs_dir).map_err(Error::from).in_file(&refs_dir)?;
    let vocab_bytes = vocab.to_bytes();
    write_file(&out_dir.join("vocab.pvc"), &vocab_bytes)?;
    write_file(&out_dir.join("config.txt"), cfg.to_text().as_bytes())?;

    let mut manifest = format!("{MANIFEST_HEADER}\nvocab\t{}\n", sha256_hex(&vocab_bytes));
    manifest.push_str(&settings_lines(cfg));
    let mut names = Vec::with_capacity(files.len());
    let pps_hashes: Vec<String> = described
        .par_iter()
        .enumerate()
        .map(|(i, (_, d))| {
            save_feature_map(&d.map, &refs_dir.join(format!("{i:06}.pfm")))?;
            let bytes = patch_sets_to_bytes(&d.patches);
            write_file(&refs_dir.join(format!("{i:06}.pps")), &bytes)?;
            Ok(sha256_hex(&bytes))
        })
        .collect::<Result<_>>()?;
    for (i, ((path, (input, _)), pps)) in files.iter().zip(&described).zip(&pps_hashes).enumerate() {
        let name = file_name(path);
        writeln!(manifest, "ref\t{i}\t{name}\t{}\t{pps}", sha256_hex(input)).unwrap();
        names.push(name);
    }
    let globals: Vec<VladDescriptor> = described.into_iter().map(|(_, d)| d.global).collect();
    write_file(
        &out_dir.join("globals.pgd"),
        &descriptors_to_bytes(vocab.k(), vocab.dim(), &globals),
    )?;
    write_file(&out_dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(IndexSummary {
        references: names,
        manifest,
    })
}

/// A loaded reference index.
#[derive(Debug, Clone)]
pub struct Index {
    pub vocab: Vocabulary,
    pub names: Vec<String>,
    pub globals: Vec<VladDescriptor>,
    pub patches: Vec<Vec<PatchDescriptorSet>>,
    settings: String,
}

impl Index {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let manifest = fs::read_to_string(&manifest_path).map_err(Error::from).in_file(&manifest_path)?;
        let mut lines = manifest.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format("not a patchplace index manifest".into()).in_file(&manifest_path));
        }
        let mut names = Vec::new();
        let mut settings = String::new();
        for line in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.first() {
                Some(&"ref") if fields.len() == 5 => {
                    if fields[1].parse::<usize>().ok() != Some(names.len()) {
                        return Err(Error::Format(format!("manifest reference out of order: {line}")).in_file(&manifest_path));
                    }
                    names.push(fields[2].to_string());
                }
                Some(&"vocab") => {}
                Some(&"extractor") | Some(&"scales") | Some(&"alpha") => {
                    settings.push_str(line);
                    settings.push('\n');
                }
                _ => return Err(Error::Format(format!("bad manifest line {line:?}")).in_file(&manifest_path)),
            }
        }
        let vocab = Vocabulary::load(&dir.join("vocab.pvc"))?;
        let globals_path = dir.join("globals.pgd");
        let globals = descriptors_from_bytes(&read_file(&globals_path)?).in_file(&globals_path)?;
        if globals.len() != names.len() {
            return Err(Error::Format(format!(
                "index lists {} references but stores {} global descriptors",
                names.len(),
                globals.len()
            ))
            .in_file(&globals_path));
        }
        let patches = (0..names.len())
            .into_par_iter()
            .map(|i| load_patch_sets(&dir.join("refs").join(format!("{i:06}.pps"))))
            .collect::<Result<_>>()?;
        Ok(Index {
            vocab,
            names,
            globals,
            patches,
            settings,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Fails when the index was built with settings that differ from `cfg`.
    pub fn check_compatible(&self, cfg: &PipelineConfig) -> Result<()> {
        if self.settings != settings_lines(cfg) {
            return Err(Error::InvalidConfig(format!(
                "index was built with different settings:\n{}",
                self.settings
            )));
        }
        Ok(())
    }
}

/// Global retrieval followed, when enabled, by patch reranking.
pub fn retrieve(cfg: &PipelineConfig, index: &Index, query_index: usize, desc: &ImageDescription) -> Result<MatchResult> {
    let candidates = global_retrieve(&desc.global, &index.globals, cfg.match_top_k)?;
    if cfg.match_rerank {
        rerank(query_index, &desc.patches, &index.patches, &candidates, &cfg.rerank_config())
    } else {
        Ok(MatchResult::global_only(query_index, &candidates))
    }
}

pub fn query_images(cfg: &PipelineConfig, index: &Index, images: &[Image]) -> Result<Vec<MatchResult>> {
    index.check_compatible(cfg)?;
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| retrieve(cfg, index, i, &describe_image(img, &index.vocab, cfg)?))
        .collect()
}

/// Queries every `.pgm` in `query_dir` (filename order) against the index.
pub fn query_dir(cfg: &PipelineConfig, index: &Index, query_dir: &Path) -> Result<Vec<MatchResult>> {
    index.check_compatible(cfg)?;
    let files = list_files(query_dir, "pgm")?;
    let described = describe_files(&files, &index.vocab, cfg)?;
    described
        .par_iter()
        .enumerate()
        .map(|(i, (_, d))| retrieve(cfg, index, i, d))
        .collect()
}

/// Frame indices at every scale that correspond to each query.
///
/// Queries follow the frames of the first scale. At other scales a query uses
/// the frame whose window contains the midpoint of the query's window.
pub fn align_frames(set: &TemporalScaleSet) -> Vec<Vec<usize>> {
    let base = &set.scales[0];
    base.frames
        .iter()
        .map(|f| {
            let mid = (f.t_start + base.window_us / 2).min(set.t_first + set.span - 1);
            set.scales
                .iter()
                .map(|s| (((mid - set.t_first) / s.window_us) as usize).min(s.frames.len() - 1))
                .collect()
        })
        .collect()
}

/// Query-by-reference global distances at every temporal scale.
pub fn event_distance_matrices(cfg: &PipelineConfig, index: &Index, set: &TemporalScaleSet) -> Result<Vec<DistanceMatrix>> {
    if index.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    let per_scale: Vec<Vec<VladDescriptor>> = set
        .scales
        .iter()
        .map(|s| {
            s.frames
                .par_iter()
                .map(|f| {
                    let map = extract_dense_features(&f.image, &cfg.extractor)?;
                    aggregate_vlad(&map, &index.vocab)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let alignment = align_frames(set);
    (0..set.scales.len())
        .map(|s| {
            let rows: Vec<Vec<f64>> = alignment
                .par_iter()
                .map(|frames| {
                    let q = &per_scale[s][frames[s]];
                    index
                        .globals
                        .iter()
                        .map(|r| euclidean_distance(q.values(), r.values()))
                        .collect()
                })
                .collect();
            DistanceMatrix::from_rows(&rows)
        })
        .collect()
}

pub fn event_query(cfg: &PipelineConfig, index: &Index, stream: &EventStream) -> Result<Vec<MatchResult>> {
    index.check_compatible(cfg)?;
    if stream.is_empty() {
        return Err(Error::EmptyStream);
    }
    let set = multiscale_reconstruct(stream, &cfg.event_scales_us, cfg.reconstruction_method()?)?;
    let matrices = event_distance_matrices(cfg, index, &set)?;
    let mut results = crate::events::ensemble_retrieve(&matrices, &cfg.event_weights)?;
    for r in &mut results {
        r.ranked.truncate(cfg.match_top_k);
    }
    Ok(results)
}

pub fn event_query_file(cfg: &PipelineConfig, index: &Index, events_csv: &Path) -> Result<Vec<MatchResult>> {
    let stream = parse_event_stream(events_csv, cfg.sensor_width, cfg.sensor_height)?;
    event_query(cfg, index, &stream).in_file(events_csv)
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub recall: RecallReport,
    pub pr: Vec<PrPoint>,
}

pub fn ground_truth_for(cfg: &PipelineConfig, results: &[MatchResult]) -> Result<GroundTruth> {
    match cfg.eval_ground_truth {
        GroundTruthMode::IndexWindow => {
            let queries = results.iter().map(|r| r.query_index + 1).max().unwrap_or(0);
            let refs = results
                .iter()
                .flat_map(|r| r.ranked.iter().map(|e| e.ref_index + 1))
                .max()
                .unwrap_or(0);
            Ok(build_ground_truth_by_index(queries, refs, cfg.eval_tolerance))
        }
        GroundTruthMode::Positions => {
            let need = |p: &Option<PathBuf>, key: &str| {
                p.clone()
                    .ok_or_else(|| Error::InvalidConfig(format!("{key} is required for positions ground truth")))
            };
            let qp = need(&cfg.eval_query_positions, "eval.query_positions")?;
            let rp = need(&cfg.eval_ref_positions, "eval.ref_positions")?;
            build_ground_truth_by_position(&load_positions(&qp)?, &load_positions(&rp)?, cfg.eval_radius_m)
        }
    }
}

/// Evenly spaced thresholds from 1 down to 0.
pub fn pr_thresholds(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
}

pub fn evaluate(cfg: &PipelineConfig, results: &[MatchResult], ks: &[usize]) -> Result<EvalOutput> {
    let gt = ground_truth_for(cfg, results)?;
    Ok(EvalOutput {
        recall: recall_at_k(results, &gt, ks)?,
        pr: precision_recall(results, &gt, &pr_thresholds(cfg.eval_pr_steps))?,
    })
}

pub fn evaluate_file(cfg: &PipelineConfig, results_csv: &Path, ks: &[usize]) -> Result<EvalOutput> {
    let file = fs::File::open(results_csv).map_err(Error::from).in_file(results_csv)?;
    let results = read_results_csv(BufReader::new(file)).in_file(results_csv)?;
    evaluate(cfg, &results, ks)
}
