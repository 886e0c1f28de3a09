use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use patchplace::config::PipelineConfig;
use patchplace::evaluation::{pr_curve_data, recall_csv, recall_table};
use patchplace::matching::{write_results_csv, MatchResult};
use patchplace::pipeline::{self, Index, VocabSource};
use patchplace::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "patchplace", version, about = "Visual place recognition with patch-level VLAD reranking")]
struct Cli {
    /// Pipeline configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output format for reports printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a vocabulary from PGM images or PFM1 feature maps.
    BuildVocab {
        #[arg(long, conflicts_with = "features", required_unless_present = "features")]
        images: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe reference images and write an index directory.
    Index {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve and rerank query images against an index.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct frames from an event CSV and fuse retrieval over temporal scales.
    Event {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute recall@k and precision-recall for a results CSV.
    Eval {
        #[arg(long)]
        results: PathBuf,
        /// Comma-separated cutoffs; defaults to eval.ks from the config.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Writes precision-recall curve data for plotting.
        #[arg(long)]
        pr_out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    DumpConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_results(results: &[MatchResult], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::from(e).in_file(path))?;
    let mut out = BufWriter::new(file);
    write_results_csv(results, &mut out).map_err(|e| e.in_file(path))?;
    out.flush().map_err(|e| Error::from(e).in_file(path))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let stdout = io::stdout();
    let mut stdout = stdout.lock();
    match &cli.command {
        Command::BuildVocab { images, features, out } => {
            let source = match (images, features) {
                (Some(dir), _) => VocabSource::Images(dir),
                (None, Some(dir)) => VocabSource::Features(dir),
                (None, None) => unreachable!("clap requires one source"),
            };
            let trained = pipeline::build_vocab(&cfg, source, out)?;
            let err = trained.outcome.final_error();
            writeln!(
                stdout,
                "vocabulary K={} D={} from {} features in {} iterations",
                trained.vocabulary.k(),
                trained.vocabulary.dim(),
                trained.feature_count,
                trained.outcome.iterations
            )?;
            writeln!(
                stdout,
                "quantization error {err} (mean {})",
                err / trained.feature_count as f64
            )?;
        }
        Command::Index { refs, out } => {
            let summary = pipeline::build_index(&cfg, refs, out)?;
            writeln!(stdout, "indexed {} references into {}", summary.references.len(), out.display())?;
        }
        Command::Query { index, queries, out } => {
            let index = Index::load(index)?;
            let results = pipeline::query_dir(&cfg, &index, queries)?;
            write_results(&results, out)?;
            writeln!(stdout, "wrote {} query results to {}", results.len(), out.display())?;
        }
        Command::Event { events, index, out } => {
            let index = Index::load(index)?;
            let results = pipeline::event_query_file(&cfg, &index, events)?;
            write_results(&results, out)?;
            writeln!(stdout, "wrote {} event query results to {}", results.len(), out.display())?;
        }
        Command::Eval { results, ks, pr_out } => {
            let ks = ks.clone().unwrap_or_else(|| cfg.eval_ks.clone());
            if ks.is_empty() || ks.contains(&0) {
                return Err(Error::InvalidConfig("--ks must list positive cutoffs".into()));
            }
            let report = pipeline::evaluate_file(&cfg, results, &ks)?;
            match cli.format {
                Format::Csv => write!(stdout, "{}", recall_csv(&report.recall))?,
                Format::Table => write!(stdout, "{}", recall_table(&report.recall))?,
            }
            if let Some(path) = pr_out {
                std::fs::write(path, pr_curve_data(&report.pr)).map_err(|e| Error::from(e).in_file(path))?;
            }
        }
        Command::DumpConfig => write!(stdout, "{}", cfg.to_text())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error");
            eprintln!("ERROR 2: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("ERROR 2: cannot start {} threads: {e}", cli.threads);
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("ERROR {code}: {e}");
            ExitCode::from(code as u8)
        }
    }
}
