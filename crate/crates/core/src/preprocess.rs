//! Per-patch contrast normalization and ZCA whitening.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::ingest::PatchBatch;
use crate::matrix::{column_mean, Matrix};

/// Default normalization regularizer for `[0, 1]`-scaled pixels.
pub const DEFAULT_NORM_EPSILON: f64 = 10.0 / (255.0 * 255.0);
/// Default ZCA regularizer, relative to the mean covariance eigenvalue.
pub const DEFAULT_ZCA_RELATIVE_EPSILON: f64 = 0.1;

/// Subtracts the patch mean and divides by `sqrt(var + eps_norm)`, with the
/// population variance.
pub fn normalize_patch(p: &[f64], eps_norm: f64) -> Vec<f64> {
    let mut out = p.to_vec();
    normalize_in_place(&mut out, eps_norm);
    out
}

pub fn normalize_in_place(p: &mut [f64], eps_norm: f64) {
    if p.is_empty() {
        return;
    }
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = (var + eps_norm).sqrt();
    for v in p.iter_mut() {
        let centered = *v - mean;
        *v = if centered == 0.0 { 0.0 } else { centered / scale };
    }
}

pub fn normalize_batch(batch: &PatchBatch, eps_norm: f64) -> PatchBatch {
    let mut data = batch.matrix().clone();
    for i in 0..data.rows() {
        normalize_in_place(data.row_mut(i), eps_norm);
    }
    PatchBatch::new(batch.r(), data).unwrap_or_else(|_| unreachable!("shape preserved"))
}

/// How the eigenvalue regularizer of the whitening map is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZcaEpsilon {
    Absolute(f64),
    /// Multiple of the mean covariance eigenvalue.
    Relative(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    mean: Vec<f64>,
    /// Symmetric `dim x dim`, row-major.
    matrix: Matrix,
    epsilon: f64,
}

impl WhiteningTransform {
    pub fn new(mean: Vec<f64>, matrix: Matrix, epsilon: f64) -> Result<Self> {
        if matrix.rows() != mean.len() || matrix.cols() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "whitening matrix {}x{} with a {}-dim mean",
                matrix.rows(),
                matrix.cols(),
                mean.len()
            )));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} < 0")));
        }
        Ok(Self { mean, matrix, epsilon })
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m.row_mut(i)[i] = 1.0;
        }
        Self {
            mean: vec![0.0; dim],
            matrix: m,
            epsilon: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `out = W (x - mean)`; `scratch` must hold `dim` values.
    pub fn apply_into(&self, x: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        for ((s, v), m) in scratch.iter_mut().zip(x).zip(&self.mean) {
            *s = v - m;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = crate::matrix::dot(self.matrix.row(i), scratch);
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{}-dim input to a {}-dim whitening transform",
                x.len(),
                self.dim()
            )));
        }
        let mut scratch = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut scratch, &mut out);
        Ok(out)
    }
}

/// Covariance with `1/(n-1)` normalization (`1/n` when `n == 1`).
pub fn covariance(data: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let mean = column_mean(data);
    let d = data.cols();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in data.iter_rows() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = (data.rows().max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Fits `W = V (L + eps I)^(-1/2) V^T` from the batch covariance.
pub fn fit_zca(batch: &PatchBatch, epsilon: ZcaEpsilon) -> Result<WhiteningTransform> {
    fit_zca_matrix(batch.matrix(), epsilon)
}

pub fn fit_zca_matrix(data: &Matrix, epsilon: ZcaEpsilon) -> Result<WhiteningTransform> {
    if data.rows() == 0 || data.cols() == 0 {
        return Err(Error::InvalidArgument("cannot whiten an empty batch".into()));
    }
    let (mean, cov) = covariance(data);
    let d = data.cols();
    let eig = SymmetricEigen::try_new(cov, f64::EPSILON, 0)
        .ok_or_else(|| Error::DegenerateCovariance("eigensolver did not converge".into()))?;
    let eps = match epsilon {
        ZcaEpsilon::Absolute(e) => e,
        ZcaEpsilon::Relative(rel) => rel * eig.eigenvalues.iter().sum::<f64>() / d as f64,
    };
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {eps} < 0")));
    }
    let largest = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let floor = d as f64 * f64::EPSILON * largest;
    let mut scales = Vec::with_capacity(d);
    for &l in eig.eigenvalues.iter() {
        let shifted = l.max(0.0) + eps;
        if !(shifted > floor) || !shifted.is_finite() {
            return Err(Error::DegenerateCovariance(format!(
                "eigenvalue {l:e} with epsilon {eps:e} cannot be inverted"
            )));
        }
        scales.push(1.0 / shifted.sqrt());
    }
    let v = &eig.eigenvectors;
    let mut w = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let s: f64 = (0..d).map(|k| v[(i, k)] * scales[k] * v[(j, k)]).sum();
            w.row_mut(i)[j] = s;
            w.row_mut(j)[i] = s;
        }
    }
    WhiteningTransform::new(mean, w, eps)
}

pub fn apply_whitening(t: &WhiteningTransform, batch: &PatchBatch) -> Result<PatchBatch> {
    if batch.dim() != t.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{}-dim patches for a {}-dim whitening transform",
            batch.dim(),
            t.dim()
        )));
    }
    let d = t.dim();
    let mut out = Matrix::zeros(batch.n(), d);
    let mut scratch = vec![0.0; d];
    for (i, row) in batch.iter().enumerate() {
        t.apply_into(row, &mut scratch, out.row_mut(i));
    }
    Ok(match batch.r() {
        0 => PatchBatch::from_points(out),
        r => PatchBatch::new(r, out)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(rows: &[&[f64]]) -> PatchBatch {
        PatchBatch::from_points(Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn constant_patch_normalizes_to_zero() {
        assert_eq!(normalize_patch(&[0.3; 9], 1e-3), vec![0.0; 9]);
    }

    #[test]
    fn two_value_patch() {
        let out = normalize_patch(&[0.0, 2.0], 1e-300);
        assert!((out[0] + 1.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
            let out = normalize_patch(&p, DEFAULT_NORM_EPSILON);
            assert!(out.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn identity_covariance_gives_identity() {
        // rows (+-1, 0) and (0, +-1): mean 0, covariance I with 1/(n-1)
        let s = (1.5f64).sqrt();
        let b = points(&[&[s, 0.0], &[-s, 0.0], &[0.0, s], &[0.0, -s]]);
        let t = fit_zca(&b, ZcaEpsilon::Absolute(0.0)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((t.matrix().get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diagonal_covariance() {
        // var(x) = 4, var(y) = 1 with 1/(n-1)
        let a = (6.0f64).sqrt();
        let b = (1.5f64).sqrt();
        let batch = points(&[&[a, 0.0], &[-a, 0.0], &[0.0, b], &[0.0, -b]]);
        let t = fit_zca(&batch, ZcaEpsilon::Absolute(0.0)).unwrap();
        assert!((t.matrix().get(0, 0) - 0.5).abs() < 1e-12);
        assert!((t.matrix().get(1, 1) - 1.0).abs() < 1e-12);
        assert!(t.matrix().get(0, 1).abs() < 1e-12);
    }

    #[test]
    fn whitening_identity_and_centering() {
        let t = WhiteningTransform::identity(3);
        assert_eq!(t.apply(&[1.0, -2.0, 3.0]).unwrap(), vec![1.0, -2.0, 3.0]);
        let t = WhiteningTransform::new(
            vec![1.0, 2.0],
            Matrix::from_rows(&[[2.0, 1.0], [1.0, 3.0]]).unwrap(),
            0.0,
        )
        .unwrap();
        assert_eq!(t.apply(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            apply_whitening(&t, &points(&[&[1.0, 2.0, 3.0]])),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn rank_deficient_without_epsilon_is_degenerate() {
        let b = points(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        assert!(matches!(
            fit_zca(&b, ZcaEpsilon::Absolute(0.0)),
            Err(Error::DegenerateCovariance(_))
        ));
        assert!(fit_zca(&b, ZcaEpsilon::Relative(0.1)).is_ok());
    }
}
