//! Command-line pipeline runner and evaluation harness.
//!
//! Exit codes are a stable contract: 0 success, 1 validation or quality
//! failure (corpus violations, more than half the images failing), 2 usage
//! or IO error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use granurag::backends::{BackendRegistry, RoleAssignment};
use granurag::evaluate::Tokenization;
use granurag::generate::PipelineMode;
use granurag::pipeline::{self, RunConfig};

#[derive(Parser)]
#[command(
    name = "granurag",
    about = "Element-grounded multimodal RAG pipeline and evaluation harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus document (and optional image sidecar); writes the
    /// full violation report.
    CorpusCheck {
        corpus: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
        /// Report destination (default: validation.json next to the corpus).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Embed every corpus image and build the flat L2 index with metadata.
    IndexBuild {
        #[command(flatten)]
        args: RunArgs,
        /// Index output path (metadata sidecar lands at <out>.meta.json).
        #[arg(long)]
        out_index: PathBuf,
        /// Store raw vectors instead of L2-normalizing on insert.
        #[arg(long)]
        no_normalize: bool,
    },
    /// Run the detect-ground-generate-evaluate pipeline over every image.
    Run {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Run the pipeline once per overlap threshold and tabulate aggregates.
    Sweep {
        #[command(flatten)]
        args: RunArgs,
        /// Comma-separated thresholds (default 0.70,0.75,0.80,0.85,0.90,1.00).
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Aggregate per-stage error diagnosis over a completed run directory.
    Diagnose { run_dir: PathBuf },
    /// Win/loss rates and Fleiss' kappa over a pairwise votes file, or
    /// kappa alone over a raw rating matrix ({"counts": [[..]], "raters": n}).
    EvalVotes { votes: PathBuf },
    /// Corpus statistics summary.
    Stats {
        #[command(flatten)]
        args: RunArgs,
    },
}

/// Flags mirroring the run-config fields. A `--config` file supplies
/// defaults; explicit flags always win.
#[derive(Args, Default)]
struct RunArgs {
    /// JSON run-config file (same field names as the flags).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    synonyms: Option<PathBuf>,
    /// Newline-separated detector vocabulary file.
    #[arg(long)]
    vocabulary: Option<PathBuf>,
    /// Backends config file (providers and credentials by id).
    #[arg(long)]
    backends: Option<PathBuf>,
    /// Output directory for stage artifacts and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pipeline setting: a, b, c, gold, or t1..t4.
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    overlap_threshold: Option<f64>,
    #[arg(long)]
    confidence_threshold: Option<f64>,
    #[arg(long)]
    detector: Option<String>,
    #[arg(long)]
    matcher: Option<String>,
    #[arg(long)]
    generator: Option<String>,
    /// Comma-separated judge backend ids.
    #[arg(long, value_delimiter = ',')]
    judges: Option<Vec<String>>,
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Subsample this many images (seeded).
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    no_cache: bool,
    /// Token unit for text metrics: character or whitespace.
    #[arg(long)]
    tokenization: Option<String>,
}

/// File form of the flags; every field optional so flags can override.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    corpus: Option<PathBuf>,
    images: Option<PathBuf>,
    synonyms: Option<PathBuf>,
    vocabulary: Option<PathBuf>,
    backends: Option<PathBuf>,
    out: Option<PathBuf>,
    setting: Option<String>,
    overlap_threshold: Option<f64>,
    confidence_threshold: Option<f64>,
    detector: Option<String>,
    matcher: Option<String>,
    generator: Option<String>,
    judges: Option<Vec<String>>,
    embedder: Option<String>,
    seed: Option<u64>,
    sample: Option<usize>,
    workers: Option<usize>,
    no_cache: Option<bool>,
    tokenization: Option<String>,
}

fn parse_setting(value: &str) -> Result<PipelineMode> {
    match value.to_ascii_lowercase().as_str() {
        "a" => Ok(PipelineMode::setting_a()),
        "b" => Ok(PipelineMode::setting_b()),
        "c" => Ok(PipelineMode::setting_c()),
        "gold" | "text-only" | "text_only_gold" => Ok(PipelineMode::text_only_gold()),
        "t1" => Ok(PipelineMode::ablation(1)?),
        "t2" => Ok(PipelineMode::ablation(2)?),
        "t3" => Ok(PipelineMode::ablation(3)?),
        "t4" => Ok(PipelineMode::ablation(4)?),
        other => Err(anyhow!(
            "unknown setting {other:?} (expected a, b, c, gold, or t1..t4)"
        )),
    }
}

fn parse_tokenization(value: &str) -> Result<Tokenization> {
    match value.to_ascii_lowercase().as_str() {
        "character" | "char" => Ok(Tokenization::Character),
        "whitespace" | "word" => Ok(Tokenization::Whitespace),
        other => Err(anyhow!(
            "unknown tokenization {other:?} (expected character or whitespace)"
        )),
    }
}

struct Resolved {
    config: RunConfig,
    backends_path: PathBuf,
}

impl RunArgs {
    /// Merges the optional config file with the flags (flags win) and
    /// builds the run configuration.
    fn resolve(&self) -> Result<Resolved> {
        let file: FileConfig = match &self.config {
            Some(path) => {
                let bytes = std::fs::read(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?;
                serde_json::from_slice(&bytes)
                    .with_context(|| format!("cannot parse config {}", path.display()))?
            }
            None => FileConfig::default(),
        };
        let pick = |flag: &Option<PathBuf>, file_value: Option<PathBuf>, name: &str| {
            flag.clone()
                .or(file_value)
                .ok_or_else(|| anyhow!("missing required option --{name}"))
        };
        let corpus = pick(&self.corpus, file.corpus, "corpus")?;
        let images = pick(&self.images, file.images, "images")?;
        let output_dir = pick(&self.out, file.out, "out")?;
        let backends_path = pick(&self.backends, file.backends, "backends")?;

        let mode = match self.setting.as_deref().or(file.setting.as_deref()) {
            Some(value) => parse_setting(value)?,
            None => PipelineMode::setting_c(),
        };
        let tokenization = match self
            .tokenization
            .as_deref()
            .or(file.tokenization.as_deref())
        {
            Some(value) => parse_tokenization(value)?,
            None => Tokenization::Character,
        };
        let mut filter = granurag::FilterConfig::default();
        if let Some(t) = self.overlap_threshold.or(file.overlap_threshold) {
            filter.overlap_threshold = t;
        }
        if let Some(t) = self.confidence_threshold.or(file.confidence_threshold) {
            filter.confidence_threshold = t;
        }
        let roles = RoleAssignment {
            detector: self
                .detector
                .clone()
                .or(file.detector)
                .unwrap_or_else(|| "detector".into()),
            matcher: self
                .matcher
                .clone()
                .or(file.matcher)
                .unwrap_or_else(|| "matcher".into()),
            generator: self
                .generator
                .clone()
                .or(file.generator)
                .unwrap_or_else(|| "generator".into()),
            judges: self.judges.clone().or(file.judges).unwrap_or_default(),
            embedder: self.embedder.clone().or(file.embedder),
        };
        Ok(Resolved {
            config: RunConfig {
                corpus,
                images,
                synonyms: self.synonyms.clone().or(file.synonyms),
                vocabulary: self.vocabulary.clone().or(file.vocabulary),
                mode,
                filter,
                backends: roles,
                output_dir,
                cache_dir: None,
                no_cache: self.no_cache || file.no_cache.unwrap_or(false),
                sweep: None,
                seed: self.seed.or(file.seed).unwrap_or(0),
                sample: self.sample.or(file.sample),
                workers: self.workers.or(file.workers).unwrap_or(1),
                tokenization,
                stop_after: None,
            },
            backends_path,
        })
    }

    fn registry(&self, backends_path: &Path) -> Result<BackendRegistry> {
        let bytes = std::fs::read(backends_path)
            .with_context(|| format!("cannot read backends {}", backends_path.display()))?;
        Ok(BackendRegistry::from_file_bytes(&bytes)?)
    }
}

/// 0 success, 1 validation/quality failure, 2 usage/IO error.
enum Outcome {
    Ok,
    QualityFailure(String),
}

fn run_command(command: Command) -> Result<Outcome> {
    match command {
        Command::CorpusCheck {
            corpus,
            images,
            report,
        } => {
            let report_path = report.unwrap_or_else(|| {
                corpus
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join("validation.json")
            });
            let result = pipeline::corpus_check(&corpus, images.as_deref(), &report_path)?;
            println!(
                "{} violation(s); report written to {}",
                result.violations.len(),
                report_path.display()
            );
            for violation in &result.violations {
                println!("  {}: {}", violation.path, violation.message);
            }
            if result.is_clean() {
                Ok(Outcome::Ok)
            } else {
                Ok(Outcome::QualityFailure(format!(
                    "{} corpus violation(s)",
                    result.violations.len()
                )))
            }
        }
        Command::IndexBuild {
            args,
            out_index,
            no_normalize,
        } => {
            let resolved = args.resolve()?;
            let registry = args.registry(&resolved.backends_path)?;
            let count =
                pipeline::index_build(&resolved.config, &registry, &out_index, !no_normalize)?;
            println!("indexed {count} image vectors into {}", out_index.display());
            Ok(Outcome::Ok)
        }
        Command::Run { args } => {
            let resolved = args.resolve()?;
            let registry = args.registry(&resolved.backends_path)?;
            let summary = pipeline::run(&resolved.config, &registry)?;
            println!(
                "processed {} image(s): {} succeeded, {} failed",
                summary.processed, summary.succeeded, summary.failed
            );
            let report = std::fs::read_to_string(summary.output_dir.join("report.txt"))?;
            print!("{report}");
            if summary.acceptable() {
                Ok(Outcome::Ok)
            } else {
                Ok(Outcome::QualityFailure(format!(
                    "{} of {} images failed",
                    summary.failed, summary.processed
                )))
            }
        }
        Command::Sweep { args, thresholds } => {
            let resolved = args.resolve()?;
            let registry = args.registry(&resolved.backends_path)?;
            let mut config = resolved.config;
            config.sweep = thresholds.or(config.sweep);
            let table = pipeline::sweep(&config, &registry)?;
            print!("{}", table.render_text());
            Ok(Outcome::Ok)
        }
        Command::Diagnose { run_dir } => {
            let diagnosis = pipeline::diagnose_run(&run_dir)?;
            print!("{}", diagnosis.render_text());
            Ok(Outcome::Ok)
        }
        Command::EvalVotes { votes } => {
            let bytes = std::fs::read(&votes)
                .with_context(|| format!("cannot read votes {}", votes.display()))?;
            // A top-level object is a raw rating matrix; an array is votes.
            if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') {
                let kappa = pipeline::eval_matrix(&bytes)?;
                println!("fleiss kappa {kappa:.4}");
                return Ok(Outcome::Ok);
            }
            let report = pipeline::eval_votes(&bytes)?;
            println!(
                "win rate {:.2}%  loss rate {:.2}%  ({} votes)",
                report.win_loss.win_rate, report.win_loss.loss_rate, report.win_loss.total_votes
            );
            match (report.kappa, &report.kappa_note) {
                (Some(kappa), _) => println!("fleiss kappa {kappa:.4}"),
                (None, Some(note)) => println!("fleiss kappa unavailable: {note}"),
                (None, None) => {}
            }
            Ok(Outcome::Ok)
        }
        Command::Stats { args } => {
            let resolved = args.resolve()?;
            let (_, text) = pipeline::stats(&resolved.config)?;
            print!("{text}");
            Ok(Outcome::Ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::QualityFailure(reason)) => {
            eprintln!("quality failure: {reason}");
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
