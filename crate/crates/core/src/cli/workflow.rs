//! The pipeline stages behind each command, usable without the binary.

use std::path::{Path, PathBuf};

use crate::balls::fit_all;
use crate::cli::bundle::{ModelBundle, ModelParams};
use crate::cli::config::PipelineConfig;
use crate::dictionary::{kmeans_fit, random_dictionary, DictionaryInit};
use crate::error::{Error, Result};
use crate::ingest::{read_pgm, sample_patches, GrayImage, LabeledSet, PatchBatch};
use crate::learner::{out_of_fold_softmax, stack_train, svm_train, StackingModel};
use crate::matrix::{l2_normalize, Matrix};
use crate::pipeline::{describe_images, ScaleModel};
use crate::preprocess::{apply_whitening, fit_zca, normalize_batch, WhiteningTransform};
use crate::retrieval::{evaluate_index, GroundTruth, RetrievalIndex};

/// Seed for the patch sample of receptive field `r`.
fn patch_seed(seed: u64, r: usize) -> u64 {
    seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn model_params(cfg: &PipelineConfig) -> ModelParams {
    ModelParams {
        views: cfg.views(),
        dictionary_size: cfg.dictionary_size,
        lambda: cfg.lambda,
        ball_kind: cfg.ball_kind,
        descriptor: cfg.descriptor_params(),
        seed: cfg.seed,
    }
}

/// Normalized, whitened patch sample for one scale.
fn whitened_sample(cfg: &PipelineConfig, images: &[GrayImage], r: usize, t: &WhiteningTransform) -> Result<PatchBatch> {
    let raw = sample_patches(images, r, cfg.patches, patch_seed(cfg.seed, r))?;
    apply_whitening(t, &normalize_batch(&raw, cfg.norm_epsilon))
}

/// Patch sampling, normalization, whitening and dictionary learning for
/// every receptive field.
pub fn train_dictionaries(cfg: &PipelineConfig, images: &[GrayImage]) -> Result<ModelBundle> {
    let params = model_params(cfg);
    let mut scales = Vec::new();
    for r in params.receptive_fields() {
        let raw = sample_patches(images, r, cfg.patches, patch_seed(cfg.seed, r))?;
        let normalized = normalize_batch(&raw, cfg.norm_epsilon);
        let whitening = fit_zca(&normalized, cfg.zca_epsilon)?;
        let white = apply_whitening(&whitening, &normalized)?;
        let dictionary = match cfg.dictionary_init {
            DictionaryInit::KMeansPlusPlus => kmeans_fit(&white, cfg.dictionary_size, cfg.kmeans_iters, cfg.seed)?,
            DictionaryInit::Random => random_dictionary(&white, cfg.dictionary_size, cfg.seed)?,
        };
        scales.push(ScaleModel {
            whitening,
            dictionary,
            balls: None,
        });
    }
    let bundle = ModelBundle {
        params,
        scales,
        classifiers: Vec::new(),
        stacking: None,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Fits one ball per atom at every scale, on the same patch sample the
/// dictionaries were learned from.
pub fn fit_balls(cfg: &PipelineConfig, bundle: &mut ModelBundle, images: &[GrayImage]) -> Result<()> {
    for scale in &mut bundle.scales {
        let white = whitened_sample(cfg, images, scale.r(), &scale.whitening)?;
        let balls = fit_all(&scale.dictionary, &white, cfg.lambda, cfg.ball_kind, cfg.svdd_params())?;
        scale.balls = Some(balls);
    }
    bundle.params.lambda = cfg.lambda;
    bundle.params.ball_kind = cfg.ball_kind;
    bundle.validate()
}

/// One descriptor matrix per view, rows in image order.
pub fn describe_views(bundle: &ModelBundle, images: &[GrayImage]) -> Result<Vec<Matrix>> {
    bundle
        .params
        .views
        .iter()
        .map(|&view| describe_images(images, bundle.scale(view.r)?, view, &bundle.params.descriptor))
        .collect()
}

/// Column widths of each view inside a concatenated descriptor matrix.
pub fn view_widths(bundle: &ModelBundle) -> Vec<usize> {
    let k = bundle.params.dictionary_size;
    bundle
        .params
        .views
        .iter()
        .map(|v| v.descriptor_dim(v.encoding.output_dim(k, v.r * v.r)))
        .collect()
}

/// Splits a concatenated descriptor matrix back into per-view blocks.
pub fn split_views(bundle: &ModelBundle, all: &Matrix) -> Result<Vec<Matrix>> {
    let widths = view_widths(bundle);
    let total: usize = widths.iter().sum();
    if all.cols() != total {
        return Err(Error::DimensionMismatch(format!(
            "descriptor file has {} columns, the bundle's views need {total}",
            all.cols()
        )));
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(widths.len());
    for w in widths {
        let rows: Vec<&[f64]> = all.iter_rows().map(|r| &r[start..start + w]).collect();
        out.push(if rows.is_empty() {
            Matrix::zeros(0, w)
        } else {
            Matrix::from_rows(&rows)?
        });
        start += w;
    }
    Ok(out)
}

/// Per-view one-vs-rest SVMs, then stacking weights learned on
/// out-of-fold softmax outputs (identity stacking for a single view).
pub fn train_classifiers(
    cfg: &PipelineConfig,
    bundle: &mut ModelBundle,
    views: &[Matrix],
    labels: &[usize],
    classes: usize,
) -> Result<()> {
    if views.len() != bundle.params.views.len() {
        return Err(Error::MissingView(views.len()));
    }
    let params = cfg.svm_params();
    let classifiers = views
        .iter()
        .map(|x| svm_train(x, labels, classes, &params))
        .collect::<Result<Vec<_>>>()?;
    let stacking = if views.len() == 1 {
        StackingModel::identity(1, classes)
    } else {
        let oof = views
            .iter()
            .map(|x| out_of_fold_softmax(x, labels, classes, cfg.stack_folds, &params))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = oof.iter().collect();
        stack_train(
            &Matrix::hconcat(&refs)?,
            labels,
            views.len(),
            classes,
            cfg.stacking,
            &cfg.stack_params(),
        )?
    };
    bundle.classifiers = classifiers;
    bundle.stacking = Some(stacking);
    bundle.validate()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `(r, p, accuracy)` per view.
    pub views: Vec<(usize, usize, f64)>,
    pub ensemble: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (r, p, acc) in &self.views {
            out.push_str(&format!("view r={r} p={p} acc={acc:.4}\n"));
        }
        out.push_str(&format!("ensemble acc={:.4}\n", self.ensemble));
        out
    }
}

pub fn evaluate(bundle: &ModelBundle, views: &[Matrix], labels: &[usize]) -> Result<EvalReport> {
    let ensemble = bundle.ensemble()?;
    if views.len() != ensemble.views.len() {
        return Err(Error::MissingView(views.len()));
    }
    if views.iter().any(|v| v.rows() != labels.len()) || labels.is_empty() {
        return Err(Error::DimensionMismatch(
            "descriptor rows do not match the labels".into(),
        ));
    }
    let n = labels.len() as f64;
    let per_view = bundle
        .params
        .views
        .iter()
        .zip(&ensemble.views)
        .zip(views)
        .map(|((v, model), x)| {
            let hits = x
                .iter_rows()
                .zip(labels)
                .filter(|(row, &l)| model.predict(row) == l)
                .count();
            (v.r, v.p, hits as f64 / n)
        })
        .collect();
    let mut hits = 0;
    for (i, &l) in labels.iter().enumerate() {
        let rows: Vec<&[f64]> = views.iter().map(|x| x.row(i)).collect();
        if crate::learner::ensemble_predict(&ensemble, &rows)? == l {
            hits += 1;
        }
    }
    Ok(EvalReport {
        views: per_view,
        ensemble: hits as f64 / n,
    })
}

/// Concatenated per-view descriptors, each view L2-normalized first when
/// `normalize` is set.
pub fn retrieval_descriptors(views: &[Matrix], normalize: bool) -> Result<Matrix> {
    let mut parts = views.to_vec();
    if normalize {
        for m in &mut parts {
            let cols = m.cols();
            if cols > 0 {
                m.as_mut_slice().chunks_exact_mut(cols).for_each(l2_normalize);
            }
        }
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Matrix::hconcat(&refs)
}

/// mAP of the uncompressed descriptors (`None`) and after PCA to every
/// requested dimension.
pub fn retrieval_map(
    descriptors: &Matrix,
    ids: &[String],
    truth: &GroundTruth,
    dims: &[usize],
) -> Result<Vec<(Option<usize>, f64)>> {
    let mut out = vec![(
        None,
        evaluate_index(&RetrievalIndex::new(descriptors.clone(), ids.to_vec())?, truth)?,
    )];
    for &d in dims {
        let pca = crate::learner::pca_fit(descriptors, d)?;
        let rows = descriptors
            .iter_rows()
            .map(|r| crate::learner::pca_apply(&pca, r))
            .collect::<Result<Vec<_>>>()?;
        let index = RetrievalIndex::new(Matrix::from_rows(&rows)?, ids.to_vec())?;
        out.push((Some(d), evaluate_index(&index, truth)?));
    }
    Ok(out)
}

pub fn retrieval_report(maps: &[(Option<usize>, f64)]) -> String {
    let mut out = String::new();
    for (d, map) in maps {
        match d {
            Some(d) => out.push_str(&format!("dim={d} map={map:.4}\n")),
            None => out.push_str(&format!("dim=full map={map:.4}\n")),
        }
    }
    out
}

/// Images in a directory (`.pgm`, `.ppm`, `.pnm`), sorted by file name;
/// ids are the file stems.
pub fn load_image_dir(dir: &Path) -> Result<(Vec<String>, Vec<GrayImage>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm")));
    paths.sort();
    let mut ids = Vec::with_capacity(paths.len());
    let mut images = Vec::with_capacity(paths.len());
    for p in paths {
        ids.push(p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string());
        images.push(read_pgm(&p)?);
    }
    Ok((ids, images))
}

/// Loads an IDX split, keeping only the first `limit` items when given.
pub fn load_split(images: &Path, labels: &Path, limit: Option<usize>) -> Result<LabeledSet> {
    let mut set = LabeledSet::load_idx(images, labels)?;
    if let Some(n) = limit {
        set.images.truncate(n);
        set.labels.truncate(n);
    }
    Ok(set)
}

/// Loads an IDX image file without labels.
pub fn load_images(path: &Path, limit: Option<usize>) -> Result<Vec<GrayImage>> {
    match crate::ingest::read_idx(path)? {
        crate::ingest::IdxData::Images(mut v) => {
            if let Some(n) = limit {
                v.truncate(n);
            }
            Ok(v)
        }
        crate::ingest::IdxData::Labels(_) => Err(Error::DimensionMismatch(format!(
            "{} holds labels, expected images",
            path.display()
        ))),
    }
}
