//! Command-line driver: configuration, model bundle format, and the
//! `train-dict` / `fit-balls` / `encode` / `train-clf` / `eval` /
//! `retrieve` commands.

pub mod bundle;
pub mod config;
pub mod workflow;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use bundle::{read_matrix, write_matrix, ModelBundle};
use config::PipelineConfig;
use workflow::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "csvddnet", version, about = "C-SVDDNet feature learning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration file
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Worker threads; 1 gives bitwise reproducible output
    #[arg(long, value_name = "N", default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    threads: u16,
    /// Overrides the configured seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    Retrieval,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn whitening and a dictionary for every receptive field
    TrainDict {
        #[command(flatten)]
        common: Common,
        /// Output model bundle
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Fit one ball per dictionary atom
    FitBalls {
        #[command(flatten)]
        common: Common,
        /// Input model bundle
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Write the concatenated view descriptors of a dataset split
    Encode {
        #[command(flatten)]
        common: Common,
        /// Model bundle
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Dataset split to describe
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        /// Output descriptor matrix
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train per-view classifiers and stacking weights
    TrainClf {
        #[command(flatten)]
        common: Common,
        /// Model bundle
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Precomputed training descriptors from `encode --split train`
        #[arg(long, value_name = "PATH")]
        features: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Print per-view and ensemble test accuracy
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model bundle
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Precomputed test descriptors from `encode --split test`
        #[arg(long, value_name = "PATH")]
        features: Option<PathBuf>,
        /// Also write the report here
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Print retrieval mAP for the full descriptors and each PCA dimension
    Retrieve {
        #[command(flatten)]
        common: Common,
        /// Model bundle
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Precomputed descriptors from `encode --split retrieval`
        #[arg(long, value_name = "PATH")]
        features: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::TrainDict { common, .. }
            | Command::FitBalls { common, .. }
            | Command::Encode { common, .. }
            | Command::TrainClf { common, .. }
            | Command::Eval { common, .. }
            | Command::Retrieve { common, .. } => common,
        }
    }
}

/// Failure split by exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Failure> {
    let p = path
        .as_deref()
        .ok_or_else(|| Failure::Usage(format!("config has no {key}")))?;
    if !p.exists() {
        return Err(Failure::Usage(format!("{key} {} does not exist", p.display())));
    }
    Ok(p)
}

fn existing(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn train_set(cfg: &PipelineConfig) -> Result<crate::ingest::LabeledSet, Failure> {
    let images = required(&cfg.train_images, "train_images")?;
    let labels = required(&cfg.train_labels, "train_labels")?;
    Ok(load_split(images, labels, cfg.train_limit)?)
}

fn test_set(cfg: &PipelineConfig) -> Result<crate::ingest::LabeledSet, Failure> {
    let images = required(&cfg.test_images, "test_images")?;
    let labels = required(&cfg.test_labels, "test_labels")?;
    Ok(load_split(images, labels, cfg.test_limit)?)
}

/// Unlabeled images for dictionary and ball learning: the IDX training
/// images, or the retrieval directory when no training set is configured.
fn unlabeled_images(cfg: &PipelineConfig) -> Result<Vec<crate::ingest::GrayImage>, Failure> {
    if cfg.train_images.is_none() && cfg.retrieval_images.is_some() {
        return Ok(load_image_dir(required(&cfg.retrieval_images, "retrieval_images")?)?.1);
    }
    Ok(load_images(
        required(&cfg.train_images, "train_images")?,
        cfg.train_limit,
    )?)
}

fn load_bundle(path: &Path) -> Result<ModelBundle, Failure> {
    existing(path, "model")?;
    Ok(ModelBundle::load(path)?)
}

fn views_for(
    bundle: &ModelBundle,
    features: &Option<PathBuf>,
    images: impl FnOnce() -> Result<Vec<crate::ingest::GrayImage>, Failure>,
) -> Result<Vec<crate::matrix::Matrix>, Failure> {
    match features {
        Some(path) => {
            existing(path, "features")?;
            Ok(split_views(bundle, &read_matrix(path)?)?)
        }
        None => Ok(describe_views(bundle, &images()?)?),
    }
}

/// Runs one command; returns the report to print, if any.
fn execute(command: &Command, cfg: &PipelineConfig) -> Result<String, Failure> {
    let mut report = String::new();
    match command {
        Command::TrainDict { out, .. } => {
            let images = unlabeled_images(cfg)?;
            train_dictionaries(cfg, &images)?.save(out)?;
        }
        Command::FitBalls { model, out, .. } => {
            let mut bundle = load_bundle(model)?;
            let images = unlabeled_images(cfg)?;
            fit_balls(cfg, &mut bundle, &images)?;
            bundle.save(out)?;
        }
        Command::Encode { model, split, out, .. } => {
            let bundle = load_bundle(model)?;
            let images = match split {
                Split::Train => load_images(required(&cfg.train_images, "train_images")?, cfg.train_limit)?,
                Split::Test => load_images(required(&cfg.test_images, "test_images")?, cfg.test_limit)?,
                Split::Retrieval => load_image_dir(required(&cfg.retrieval_images, "retrieval_images")?)?.1,
            };
            let views = describe_views(&bundle, &images)?;
            let refs: Vec<&crate::matrix::Matrix> = views.iter().collect();
            write_matrix(out, &crate::matrix::Matrix::hconcat(&refs)?)?;
        }
        Command::TrainClf {
            model, features, out, ..
        } => {
            let mut bundle = load_bundle(model)?;
            let set = train_set(cfg)?;
            let classes = set.num_classes();
            let views = views_for(&bundle, features, || Ok(set.images.clone()))?;
            train_classifiers(cfg, &mut bundle, &views, &set.labels, classes)?;
            bundle.save(out)?;
        }
        Command::Eval {
            model, features, out, ..
        } => {
            let bundle = load_bundle(model)?;
            let set = test_set(cfg)?;
            let views = views_for(&bundle, features, || Ok(set.images.clone()))?;
            report = evaluate(&bundle, &views, &set.labels)?.to_text();
            save_report(&report, out.as_deref())?;
        }
        Command::Retrieve {
            model, features, out, ..
        } => {
            let bundle = load_bundle(model)?;
            let dir = required(&cfg.retrieval_images, "retrieval_images")?;
            let truth = crate::retrieval::GroundTruth::load(required(&cfg.retrieval_truth, "retrieval_truth")?)?;
            let (ids, images) = load_image_dir(dir)?;
            let views = views_for(&bundle, features, || Ok(images))?;
            let descriptors = retrieval_descriptors(&views, cfg.retrieval_normalize)?;
            let maps = retrieval_map(&descriptors, &ids, &truth, &cfg.retrieval_dims)?;
            report = retrieval_report(&maps);
            save_report(&report, out.as_deref())?;
        }
    }
    Ok(report)
}

fn save_report(report: &str, out: Option<&Path>) -> crate::error::Result<()> {
    if let Some(path) = out {
        std::fs::write(path, report)?;
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code. Reports go to `stdout`, diagnostics to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = stdout.write_all(text.as_bytes());
            } else {
                let _ = stderr.write_all(text.as_bytes());
            }
            return code;
        }
    };
    let common = cli.command.common();
    let result = (|| {
        let mut cfg = PipelineConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads as usize)
            .build()
            .map_err(|e| Failure::Runtime(Error::InvalidArgument(e.to_string())))?;
        pool.install(|| execute(&cli.command, &cfg))
    })();
    match result {
        Ok(report) => {
            if stdout.write_all(report.as_bytes()).is_err() {
                return EXIT_FAILURE;
            }
            EXIT_OK
        }
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_FAILURE
        }
    }
}
