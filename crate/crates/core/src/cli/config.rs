//! Flat `key = value` pipeline configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::balls::{BallKind, SvddParams, DEFAULT_SVDD_MAX_ITERS, DEFAULT_SVDD_TOL};
use crate::dictionary::{DictionaryInit, DEFAULT_KMEANS_ITERS};
use crate::encoder::EncodingKind;
use crate::error::{Error, Result};
use crate::learner::{Regularizer, StackingMode, SvmParams, DEFAULT_EPOCHS, DEFAULT_LR_GRID, DEFAULT_REG};
use crate::pipeline::{DescriptorParams, HistogramParams, View, DEFAULT_HIST_CLIP};
use crate::preprocess::{ZcaEpsilon, DEFAULT_NORM_EPSILON, DEFAULT_ZCA_RELATIVE_EPSILON};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub receptive_fields: Vec<usize>,
    pub pooling_sizes: Vec<usize>,
    pub sift_blocks: usize,
    pub dictionary_size: usize,
    pub lambda: f64,
    pub encoding: EncodingKind,
    pub ball_kind: BallKind,
    pub dictionary_init: DictionaryInit,
    pub kmeans_iters: usize,
    pub patches: usize,
    pub seed: u64,

    pub norm_epsilon: f64,
    pub zca_epsilon: ZcaEpsilon,
    pub hist_clip: f64,
    pub hist_normalize: bool,
    pub hist_interpolate: bool,
    pub svdd_tol: f64,
    pub svdd_max_iters: usize,

    pub svm_reg: f64,
    pub svm_epochs: usize,
    pub svm_lr_grid: Vec<f64>,
    pub svm_regularizer: Regularizer,
    pub stacking: StackingMode,
    pub stack_reg: f64,
    pub stack_epochs: usize,
    pub stack_folds: usize,
    pub stack_regularizer: Regularizer,

    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,

    pub retrieval_images: Option<PathBuf>,
    pub retrieval_truth: Option<PathBuf>,
    pub retrieval_dims: Vec<usize>,
    pub retrieval_normalize: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            receptive_fields: vec![5],
            pooling_sizes: vec![4],
            sift_blocks: 3,
            dictionary_size: 500,
            lambda: 1.0,
            encoding: EncodingKind::Csvdd,
            ball_kind: BallKind::Csvdd,
            dictionary_init: DictionaryInit::KMeansPlusPlus,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
            patches: 100_000,
            seed: 0,
            norm_epsilon: DEFAULT_NORM_EPSILON,
            zca_epsilon: ZcaEpsilon::Relative(DEFAULT_ZCA_RELATIVE_EPSILON),
            hist_clip: DEFAULT_HIST_CLIP,
            hist_normalize: true,
            hist_interpolate: false,
            svdd_tol: DEFAULT_SVDD_TOL,
            svdd_max_iters: DEFAULT_SVDD_MAX_ITERS,
            svm_reg: DEFAULT_REG,
            svm_epochs: DEFAULT_EPOCHS,
            svm_lr_grid: DEFAULT_LR_GRID.to_vec(),
            svm_regularizer: Regularizer::Squared,
            stacking: StackingMode::Full,
            stack_reg: DEFAULT_REG,
            stack_epochs: DEFAULT_EPOCHS,
            stack_folds: 3,
            stack_regularizer: Regularizer::Squared,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: None,
            test_limit: None,
            retrieval_images: None,
            retrieval_truth: None,
            retrieval_dims: vec![512, 128, 64, 32],
            retrieval_normalize: true,
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: expected {what}"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn parse_positive(key: &str, v: &str) -> Result<usize> {
    match parse_usize(key, v)? {
        0 => Err(bad(key, v, "an integer >= 1")),
        n => Ok(n),
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| bad(key, v, "a finite number"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn parse_list<T>(key: &str, v: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .map(|s| item(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(bad(key, v, "a non-empty list"));
    }
    Ok(items)
}

fn parse_regularizer(key: &str, v: &str) -> Result<Regularizer> {
    match v {
        "squared" => Ok(Regularizer::Squared),
        "norm" => Ok(Regularizer::Norm),
        _ => Err(bad(key, v, "squared or norm")),
    }
}

impl PipelineConfig {
    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        let path = |v: &str| -> PathBuf {
            let p = Path::new(v);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", no + 1)));
            }
            let k = key;
            match k {
                "receptive_fields" => cfg.receptive_fields = parse_list(k, value, parse_positive)?,
                "pooling_sizes" => cfg.pooling_sizes = parse_list(k, value, parse_positive)?,
                "sift_blocks" => cfg.sift_blocks = parse_positive(k, value)?,
                "dictionary_size" => cfg.dictionary_size = parse_positive(k, value)?,
                "lambda" => cfg.lambda = parse_f64(k, value)?,
                "encoding" => cfg.encoding = value.parse()?,
                "ball_kind" => {
                    cfg.ball_kind = match value {
                        "csvdd" => BallKind::Csvdd,
                        "svdd" => BallKind::Svdd,
                        _ => return Err(bad(k, value, "csvdd or svdd")),
                    }
                }
                "dictionary_init" => {
                    cfg.dictionary_init = match value {
                        "kmeans++" => DictionaryInit::KMeansPlusPlus,
                        "random" => DictionaryInit::Random,
                        _ => return Err(bad(k, value, "kmeans++ or random")),
                    }
                }
                "kmeans_iters" => cfg.kmeans_iters = parse_positive(k, value)?,
                "patches" => cfg.patches = parse_positive(k, value)?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(k, value, "an unsigned integer"))?,
                "norm_epsilon" => cfg.norm_epsilon = parse_f64(k, value)?,
                "zca_epsilon" => {
                    let (mode, amount) = value.split_once(':').unwrap_or(("relative", value));
                    let amount = parse_f64(k, amount.trim())?;
                    cfg.zca_epsilon = match mode.trim() {
                        "relative" => ZcaEpsilon::Relative(amount),
                        "absolute" => ZcaEpsilon::Absolute(amount),
                        _ => return Err(bad(k, value, "[relative:|absolute:]number")),
                    };
                }
                "hist_clip" => cfg.hist_clip = parse_f64(k, value)?,
                "hist_normalize" => cfg.hist_normalize = parse_bool(k, value)?,
                "hist_interpolate" => cfg.hist_interpolate = parse_bool(k, value)?,
                "svdd_tol" => cfg.svdd_tol = parse_f64(k, value)?,
                "svdd_max_iters" => cfg.svdd_max_iters = parse_positive(k, value)?,
                "svm_reg" => cfg.svm_reg = parse_f64(k, value)?,
                "svm_epochs" => cfg.svm_epochs = parse_positive(k, value)?,
                "svm_lr_grid" => cfg.svm_lr_grid = parse_list(k, value, parse_f64)?,
                "svm_regularizer" => cfg.svm_regularizer = parse_regularizer(k, value)?,
                "stacking" => {
                    cfg.stacking = match value {
                        "full" => StackingMode::Full,
                        "per_view" => StackingMode::PerView,
                        _ => return Err(bad(k, value, "full or per_view")),
                    }
                }
                "stack_reg" => cfg.stack_reg = parse_f64(k, value)?,
                "stack_epochs" => cfg.stack_epochs = parse_positive(k, value)?,
                "stack_folds" => cfg.stack_folds = parse_usize(k, value)?,
                "stack_regularizer" => cfg.stack_regularizer = parse_regularizer(k, value)?,
                "train_images" => cfg.train_images = Some(path(value)),
                "train_labels" => cfg.train_labels = Some(path(value)),
                "test_images" => cfg.test_images = Some(path(value)),
                "test_labels" => cfg.test_labels = Some(path(value)),
                "train_limit" => cfg.train_limit = Some(parse_positive(k, value)?),
                "test_limit" => cfg.test_limit = Some(parse_positive(k, value)?),
                "retrieval_images" => cfg.retrieval_images = Some(path(value)),
                "retrieval_truth" => cfg.retrieval_truth = Some(path(value)),
                "retrieval_dims" => cfg.retrieval_dims = parse_list(k, value, parse_positive)?,
                "retrieval_normalize" => cfg.retrieval_normalize = parse_bool(k, value)?,
                _ => return Err(Error::Config(format!("line {}: unknown key {key}", no + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.svm_reg > 0.0) || !(self.stack_reg > 0.0) {
            return Err(Error::Config("svm_reg and stack_reg must be positive".into()));
        }
        if self.svm_lr_grid.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::Config("svm_lr_grid entries must be positive".into()));
        }
        if self.views().len() > 1 && self.stack_folds < 2 {
            return Err(Error::Config("stack_folds must be at least 2".into()));
        }
        let mut seen = HashSet::new();
        if self.receptive_fields.iter().any(|r| !seen.insert(*r)) {
            return Err(Error::Config("receptive_fields must be distinct".into()));
        }
        let mut seen = HashSet::new();
        if self.pooling_sizes.iter().any(|p| !seen.insert(*p)) {
            return Err(Error::Config("pooling_sizes must be distinct".into()));
        }
        match self.zca_epsilon {
            ZcaEpsilon::Absolute(e) | ZcaEpsilon::Relative(e) if e < 0.0 => {
                return Err(Error::Config("zca_epsilon must be non-negative".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Every (receptive field, pooling size) pair, receptive field major.
    pub fn views(&self) -> Vec<View> {
        self.receptive_fields
            .iter()
            .flat_map(|&r| {
                self.pooling_sizes.iter().map(move |&p| View {
                    r,
                    p,
                    m: self.sift_blocks,
                    encoding: self.encoding,
                })
            })
            .collect()
    }

    pub fn descriptor_params(&self) -> DescriptorParams {
        DescriptorParams {
            eps_norm: self.norm_epsilon,
            hist: HistogramParams {
                clip: self.hist_clip,
                normalize: self.hist_normalize,
                interpolate: self.hist_interpolate,
            },
        }
    }

    pub fn svdd_params(&self) -> SvddParams {
        SvddParams {
            tol: self.svdd_tol,
            max_iters: self.svdd_max_iters,
        }
    }

    pub fn svm_params(&self) -> SvmParams {
        SvmParams {
            reg: self.svm_reg,
            epochs: self.svm_epochs,
            lr_grid: self.svm_lr_grid.clone(),
            seed: self.seed,
            regularizer: self.svm_regularizer,
        }
    }

    pub fn stack_params(&self) -> SvmParams {
        SvmParams {
            reg: self.stack_reg,
            epochs: self.stack_epochs,
            lr_grid: self.svm_lr_grid.clone(),
            seed: self.seed,
            regularizer: self.stack_regularizer,
        }
    }
}
