//! Supervised head: one-vs-rest squared-hinge linear SVMs, softmax
//! normalization, stacked multi-view combination, and PCA.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{column_mean, dot, Matrix};

pub const DEFAULT_REG: f64 = 1.0;
pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_LR_GRID: [f64; 3] = [1.0, 0.1, 0.01];

/// Penalty applied to the weight vector (never to the bias).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    /// `reg * ||w||^2`
    Squared,
    /// `reg * ||w||`
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmParams {
    pub reg: f64,
    pub epochs: usize,
    /// Base step sizes, relative to the inverse smoothness constant of the
    /// per-sample loss.
    pub lr_grid: Vec<f64>,
    pub seed: u64,
    pub regularizer: Regularizer,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            reg: DEFAULT_REG,
            epochs: DEFAULT_EPOCHS,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            seed: 0,
            regularizer: Regularizer::Squared,
        }
    }
}

/// One binary squared-hinge problem with its objective trace.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Objective at every epoch boundary, starting from the zero model.
    pub trace: Vec<f64>,
    /// The grid step that produced this fit.
    pub lr: f64,
}

impl BinaryFit {
    pub fn objective(&self) -> f64 {
        *self.trace.last().unwrap_or(&f64::INFINITY)
    }
}

/// `sum_i max(0, 1 - s_i (w.x_i + b))^2 + reg * R(w)`.
pub fn squared_hinge_objective(
    x: &Matrix,
    signs: &[f64],
    w: &[f64],
    b: f64,
    reg: f64,
    regularizer: Regularizer,
) -> f64 {
    let loss: f64 = x
        .iter_rows()
        .zip(signs)
        .map(|(row, s)| {
            let slack = (1.0 - s * (dot(w, row) + b)).max(0.0);
            slack * slack
        })
        .sum();
    let penalty = match regularizer {
        Regularizer::Squared => dot(w, w),
        Regularizer::Norm => dot(w, w).sqrt(),
    };
    loss + reg * penalty
}

/// Averaged stochastic subgradient descent with step
/// `eta / (1 + eta * mu * t)`, `eta = lr / L`. An epoch's averaged iterate
/// is kept only if it lowers the full objective; otherwise the epoch is
/// discarded and `lr` is halved, so the epoch-boundary trace never rises.
fn train_binary_lr(
    x: &Matrix,
    signs: &[f64],
    reg: f64,
    regularizer: Regularizer,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> BinaryFit {
    let n = x.rows();
    let d = x.cols();
    let max_sq = x.iter_rows().map(|r| dot(r, r)).fold(0.0, f64::max);
    let per_sample_reg = reg / n as f64;
    let smooth = 2.0 * (max_sq + 1.0) + 2.0 * per_sample_reg;
    let mu = 2.0 * per_sample_reg;

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut best = squared_hinge_objective(x, signs, &w, b, reg, regularizer);
    let mut trace = vec![best];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut base = lr / smooth;
    let mut t = 0usize;

    let mut cur_w = vec![0.0; d];
    let mut avg_w = vec![0.0; d];
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        cur_w.copy_from_slice(&w);
        let mut cur_b = b;
        avg_w.copy_from_slice(&w);
        let mut avg_b = b;
        for (step, &i) in order.iter().enumerate() {
            let eta = base / (1.0 + base * mu * t as f64);
            t += 1;
            let row = x.row(i);
            let s = signs[i];
            let margin = s * (dot(&cur_w, row) + cur_b);
            let shrink = match regularizer {
                Regularizer::Squared => 1.0 - eta * 2.0 * per_sample_reg,
                Regularizer::Norm => {
                    let norm = dot(&cur_w, &cur_w).sqrt();
                    if norm > 0.0 {
                        (1.0 - eta * per_sample_reg / norm).max(0.0)
                    } else {
                        1.0
                    }
                }
            };
            let coef = if margin < 1.0 {
                eta * 2.0 * (1.0 - margin) * s
            } else {
                0.0
            };
            let frac = 1.0 / (step + 2) as f64;
            if coef != 0.0 {
                for ((cw, aw), v) in cur_w.iter_mut().zip(avg_w.iter_mut()).zip(row) {
                    *cw = *cw * shrink + coef * v;
                    *aw += (*cw - *aw) * frac;
                }
                cur_b += coef;
            } else {
                for (cw, aw) in cur_w.iter_mut().zip(avg_w.iter_mut()) {
                    *cw *= shrink;
                    *aw += (*cw - *aw) * frac;
                }
            }
            avg_b += (cur_b - avg_b) * frac;
        }
        let value = squared_hinge_objective(x, signs, &avg_w, avg_b, reg, regularizer);
        if value < best {
            best = value;
            w.copy_from_slice(&avg_w);
            b = avg_b;
        } else {
            base /= 2.0;
        }
        trace.push(best);
    }
    BinaryFit {
        weights: w,
        bias: b,
        trace,
        lr,
    }
}

/// Trains one binary problem at every grid step and keeps the lowest
/// final objective (earliest grid entry on ties).
pub fn train_binary(x: &Matrix, signs: &[f64], params: &SvmParams) -> Result<BinaryFit> {
    if !(params.reg > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reg must be positive, got {}",
            params.reg
        )));
    }
    if params.lr_grid.is_empty() {
        return Err(Error::InvalidArgument("empty learning-rate grid".into()));
    }
    if x.rows() != signs.len() || x.rows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} samples with {} targets",
            x.rows(),
            signs.len()
        )));
    }
    let mut best: Option<BinaryFit> = None;
    for &lr in &params.lr_grid {
        let fit = train_binary_lr(x, signs, params.reg, params.regularizer, params.epochs, lr, params.seed);
        if best.as_ref().is_none_or(|b| fit.objective() < b.objective()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Per-class linear scorer; row `c` of `weights` is the class-`c` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    weights: Matrix,
    bias: Vec<f64>,
}

impl LinearModel {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weight rows with {} biases",
                weights.rows(),
                bias.len()
            )));
        }
        if weights.as_slice().iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("linear model is not finite".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.scores(x))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn check_labels(y: &[usize], classes: usize) -> Result<()> {
    if let Some(&label) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// One-vs-rest squared-hinge SVMs, one per class.
pub fn svm_train(x: &Matrix, y: &[usize], classes: usize, params: &SvmParams) -> Result<LinearModel> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    check_labels(y, classes)?;
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} samples with {} labels",
            x.rows(),
            y.len()
        )));
    }
    if x.rows() < classes {
        return Err(Error::TooFewPoints {
            needed: classes,
            got: x.rows(),
        });
    }
    let fits = (0..classes)
        .into_par_iter()
        .map(|c| {
            let signs: Vec<f64> = y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
            train_binary(x, &signs, params)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut weights = Matrix::zeros(classes, x.cols());
    let mut bias = Vec::with_capacity(classes);
    for (c, fit) in fits.into_iter().enumerate() {
        weights.row_mut(c).copy_from_slice(&fit.weights);
        bias.push(fit.bias);
    }
    LinearModel::new(weights, bias)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax over the class scores of `model`.
pub fn softmax_outputs(model: &LinearModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{}-dim input for a {}-dim model",
            x.len(),
            model.dim()
        )));
    }
    Ok(softmax(&model.scores(x)))
}

/// Softmax rows for every sample, each from a model that never saw it.
pub fn out_of_fold_softmax(
    x: &Matrix,
    y: &[usize],
    classes: usize,
    folds: usize,
    params: &SvmParams,
) -> Result<Matrix> {
    let n = x.rows();
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} samples into {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed ^ 0x5eed_f01d));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut out = Matrix::zeros(n, classes);
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let held: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let ty: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let model = svm_train(&x.select_rows(&train), &ty, classes, params)?;
        for &i in &held {
            out.row_mut(i).copy_from_slice(&softmax(&model.scores(x.row(i))));
        }
    }
    Ok(out)
}

/// How per-view softmax vectors are combined into class scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackingMode {
    /// Class `c` scores `sum_t a_tc . f_t` with a full `C`-vector `a_tc`.
    Full,
    /// Class `c` scores `sum_t b_tc f_tc` with one scalar per view and class.
    PerView,
}

impl StackingMode {
    pub fn code(self) -> u64 {
        match self {
            StackingMode::Full => 0,
            StackingMode::PerView => 1,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(StackingMode::Full),
            1 => Some(StackingMode::PerView),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackingModel {
    mode: StackingMode,
    views: usize,
    classes: usize,
    /// Row `c` holds class `c`'s weights: `T*C` values for `Full`, `T` for
    /// `PerView`.
    weights: Matrix,
    bias: Vec<f64>,
}

impl StackingModel {
    pub fn new(mode: StackingMode, views: usize, classes: usize, weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        let cols = match mode {
            StackingMode::Full => views * classes,
            StackingMode::PerView => views,
        };
        if views == 0 || weights.rows() != classes || weights.cols() != cols || bias.len() != classes {
            return Err(Error::DimensionMismatch(format!(
                "stacking weights {}x{} for {views} views and {classes} classes",
                weights.rows(),
                weights.cols()
            )));
        }
        Ok(Self {
            mode,
            views,
            classes,
            weights,
            bias,
        })
    }

    /// `a_tc = e_c` for every view.
    pub fn identity(views: usize, classes: usize) -> Self {
        let mut weights = Matrix::zeros(classes, views * classes);
        for c in 0..classes {
            for t in 0..views {
                weights.row_mut(c)[t * classes + c] = 1.0;
            }
        }
        Self {
            mode: StackingMode::Full,
            views,
            classes,
            weights,
            bias: vec![0.0; classes],
        }
    }

    pub fn mode(&self) -> StackingMode {
        self.mode
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Class scores from the concatenated per-view softmax vectors.
    pub fn scores(&self, stacked: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let w = self.weights.row(c);
                let s = match self.mode {
                    StackingMode::Full => dot(w, stacked),
                    StackingMode::PerView => (0..self.views).map(|t| w[t] * stacked[t * self.classes + c]).sum(),
                };
                s + self.bias[c]
            })
            .collect()
    }

    /// Norm of the weights that read view `t`'s block.
    pub fn view_weight_norm(&self, t: usize) -> f64 {
        let mut sq = 0.0;
        for c in 0..self.classes {
            let row = self.weights.row(c);
            sq += match self.mode {
                StackingMode::Full => row[t * self.classes..(t + 1) * self.classes]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>(),
                StackingMode::PerView => row[t] * row[t],
            };
        }
        sq.sqrt()
    }
}

/// Learns stacking weights from per-sample concatenated softmax vectors
/// (`n x T*C`) with the same one-vs-rest squared-hinge routine.
pub fn stack_train(
    stacked: &Matrix,
    y: &[usize],
    views: usize,
    classes: usize,
    mode: StackingMode,
    params: &SvmParams,
) -> Result<StackingModel> {
    if views == 0 {
        return Err(Error::InvalidArgument("stacking needs at least one view".into()));
    }
    if stacked.cols() != views * classes {
        return Err(Error::DimensionMismatch(format!(
            "{} stacked columns for {views} views of {classes} classes",
            stacked.cols()
        )));
    }
    match mode {
        StackingMode::Full => {
            let lin = svm_train(stacked, y, classes, params)?;
            StackingModel::new(mode, views, classes, lin.weights, lin.bias)
        }
        StackingMode::PerView => {
            check_labels(y, classes)?;
            let mut weights = Matrix::zeros(classes, views);
            let mut bias = Vec::with_capacity(classes);
            for c in 0..classes {
                let cols: Vec<Vec<f64>> = stacked
                    .iter_rows()
                    .map(|r| (0..views).map(|t| r[t * classes + c]).collect())
                    .collect();
                let signs: Vec<f64> = y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
                let fit = train_binary(&Matrix::from_rows(&cols)?, &signs, params)?;
                weights.row_mut(c).copy_from_slice(&fit.weights);
                bias.push(fit.bias);
            }
            StackingModel::new(mode, views, classes, weights, bias)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub views: Vec<LinearModel>,
    pub stacking: StackingModel,
}

impl EnsembleModel {
    pub fn new(views: Vec<LinearModel>, stacking: StackingModel) -> Result<Self> {
        if views.len() != stacking.views() || views.iter().any(|v| v.classes() != stacking.classes()) {
            return Err(Error::DimensionMismatch(
                "per-view classifiers disagree with the stacking model".into(),
            ));
        }
        Ok(Self { views, stacking })
    }

    pub fn stacked_softmax(&self, views: &[&[f64]]) -> Result<Vec<f64>> {
        if views.len() < self.views.len() {
            return Err(Error::MissingView(views.len()));
        }
        let mut out = Vec::with_capacity(self.views.len() * self.stacking.classes());
        for (model, x) in self.views.iter().zip(views) {
            out.extend(softmax_outputs(model, x)?);
        }
        Ok(out)
    }

    pub fn scores(&self, views: &[&[f64]]) -> Result<Vec<f64>> {
        Ok(self.stacking.scores(&self.stacked_softmax(views)?))
    }
}

/// `argmax_c sum_t a_tc . f_t(x)`, lowest class on ties.
pub fn ensemble_predict(model: &EnsembleModel, views: &[&[f64]]) -> Result<usize> {
    Ok(argmax(&model.scores(views)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// One orthonormal component per row.
    components: Matrix,
}

impl PcaModel {
    pub fn new(mean: Vec<f64>, components: Matrix) -> Result<Self> {
        if components.cols() != mean.len() {
            return Err(Error::DimensionMismatch("PCA basis does not match the mean".into()));
        }
        Ok(Self { mean, components })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &Matrix {
        &self.components
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }
}

/// Relative eigenvalue floor below which a direction counts as null.
const PCA_RANK_TOL: f64 = 1e-10;

/// Top-`d_out` principal directions of `x` (rows are samples).
pub fn pca_fit(x: &Matrix, d_out: usize) -> Result<PcaModel> {
    let (n, d) = (x.rows(), x.cols());
    if d_out == 0 || d_out > n.min(d) {
        return Err(Error::RankDeficient {
            requested: d_out,
            rank: n.min(d),
        });
    }
    let mean = column_mean(x);
    let centered: Vec<Vec<f64>> = x
        .iter_rows()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    // eigen-decompose whichever of X X^T and X^T X is smaller
    let dual = n < d;
    let size = if dual { n } else { d };
    let mut g = DMatrix::<f64>::zeros(size, size);
    if dual {
        for i in 0..n {
            for j in i..n {
                let v = dot(&centered[i], &centered[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
    } else {
        for row in &centered {
            for i in 0..d {
                if row[i] == 0.0 {
                    continue;
                }
                for j in i..d {
                    g[(i, j)] += row[i] * row[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                g[(i, j)] = g[(j, i)];
            }
        }
    }
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..size).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > PCA_RANK_TOL * top)
        .count();
    if d_out > rank {
        return Err(Error::RankDeficient { requested: d_out, rank });
    }

    let mut components = Matrix::zeros(d_out, d);
    for (row, &idx) in order.iter().take(d_out).enumerate() {
        let v = components.row_mut(row);
        if dual {
            for (i, c) in centered.iter().enumerate() {
                let u = eig.eigenvectors[(i, idx)];
                for (vj, cj) in v.iter_mut().zip(c.iter()) {
                    *vj += u * cj;
                }
            }
        } else {
            for (j, vj) in v.iter_mut().enumerate() {
                *vj = eig.eigenvectors[(j, idx)];
            }
        }
    }
    orthonormalize(&mut components);
    Ok(PcaModel { mean, components })
}

/// Two passes of modified Gram-Schmidt, then a sign flip so each row's
/// largest-magnitude entry is positive.
fn orthonormalize(m: &mut Matrix) {
    let cols = m.cols();
    for _ in 0..2 {
        for i in 0..m.rows() {
            let (done, rest) = m.as_mut_slice().split_at_mut(i * cols);
            let row = &mut rest[..cols];
            for prev in done.chunks_exact(cols) {
                let proj = dot(prev, row);
                for (t, h) in row.iter_mut().zip(prev) {
                    *t -= proj * h;
                }
            }
            crate::matrix::l2_normalize(row);
        }
    }
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let mut lead = 0;
        for (k, v) in row.iter().enumerate() {
            if v.abs() > row[lead].abs() {
                lead = k;
            }
        }
        if row[lead] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// Projection of the centered input onto the principal directions.
pub fn pca_apply(model: &PcaModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}-dim input for a {}-dim PCA model",
            x.len(),
            model.mean.len()
        )));
    }
    let centered: Vec<f64> = x.iter().zip(&model.mean).map(|(v, m)| v - m).collect();
    Ok(model.components.iter_rows().map(|c| dot(c, &centered)).collect())
}
