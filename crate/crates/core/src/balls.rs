//! SVDD and centered-SVDD (C-SVDD) balls around K-means clusters.
//!
//! With the center pinned to the cluster centroid `a`, the C-SVDD dual
//!
//! ```text
//! max  sum_i alpha_i ||x_i - a||^2   s.t.  sum_i alpha_i = 1,  0 <= alpha_i <= lambda
//! ```
//!
//! is linear over the capped simplex, so its optimum puts the full cap
//! `lambda` on the `k = floor(1/lambda)` farthest points and the remainder
//! `1 - k lambda` on the next one. The matching primal radius is the
//! `(k+1)`-th largest distance, which [`csvdd_fit`] finds with one sort.
//! [`csvdd_oracle`] checks it independently by evaluating the primal
//! `R^2 + lambda sum_i max(0, d_i^2 - R^2)` at every breakpoint.
//!
//! Plain SVDD keeps the quadratic term of the dual and is solved by
//! accelerated projected gradient ascent in [`svdd_fit`].

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::dictionary::{assign, Dictionary};
use crate::error::{Error, Result};
use crate::ingest::PatchBatch;
use crate::matrix::{column_mean, dot, sq_dist, Matrix};

pub const DEFAULT_SVDD_TOL: f64 = 1e-6;
pub const DEFAULT_SVDD_MAX_ITERS: usize = 10_000;

/// Slack used when deciding how many full caps fit into the unit budget.
const CAP_COUNT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BallKind {
    Svdd,
    Csvdd,
}

impl BallKind {
    pub fn code(self) -> u64 {
        match self {
            BallKind::Svdd => 0,
            BallKind::Csvdd => 1,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(BallKind::Svdd),
            1 => Some(BallKind::Csvdd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallFit {
    pub center: Vec<f64>,
    pub radius: f64,
    pub dual: DualSolution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallModel {
    centers: Matrix,
    radii: Vec<f64>,
    lambda: f64,
    kind: BallKind,
}

impl BallModel {
    pub fn new(centers: Matrix, radii: Vec<f64>, lambda: f64, kind: BallKind) -> Result<Self> {
        if centers.rows() != radii.len() {
            return Err(Error::BallMismatch(format!(
                "{} centers but {} radii",
                centers.rows(),
                radii.len()
            )));
        }
        if let Some(r) = radii.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid radius {r}")));
        }
        check_lambda(lambda)?;
        Ok(Self {
            centers,
            radii,
            lambda,
            kind,
        })
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn center(&self, k: usize) -> &[f64] {
        self.centers.row(k)
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kind(&self) -> BallKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.radii.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Number of points that receive the full cap: the largest `k` with
/// `k * lambda <= 1`.
fn full_caps(lambda: f64, n: usize) -> usize {
    let mut k = (1.0 / lambda).floor() as usize;
    while (k + 1) as f64 * lambda <= 1.0 + CAP_COUNT_SLACK {
        k += 1;
    }
    while k > 0 && k as f64 * lambda > 1.0 + CAP_COUNT_SLACK {
        k -= 1;
    }
    k.min(n)
}

/// Greedy capped assignment over Euclidean distances to a fixed center.
///
/// Returns the minimal optimal radius and the dual multipliers. When
/// `lambda * n < 1` every point receives the cap and the radius is 0.
pub fn csvdd_from_distances(distances: &[f64], lambda: f64) -> Result<(f64, DualSolution)> {
    check_lambda(lambda)?;
    let n = distances.len();
    if n == 0 {
        return Err(Error::EmptyCluster);
    }
    let mut order: Vec<usize> = (0..n).collect();
    // descending distance, lowest index first among equals
    order.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));

    let k = full_caps(lambda, n);
    let mut alpha = vec![0.0; n];
    for &i in &order[..k] {
        alpha[i] = lambda;
    }
    let radius = if k < n {
        alpha[order[k]] = (1.0 - k as f64 * lambda).max(0.0);
        distances[order[k]]
    } else {
        0.0
    };
    let objective = alpha.iter().zip(distances).map(|(a, d)| a * d * d).sum();
    Ok((radius, DualSolution { alpha, objective }))
}

/// C-SVDD ball around an explicit center.
pub fn csvdd_fit_about(cluster: &PatchBatch, center: &[f64], lambda: f64) -> Result<BallFit> {
    if cluster.n() == 0 {
        return Err(Error::EmptyCluster);
    }
    if center.len() != cluster.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{}-dim center for {}-dim points",
            center.len(),
            cluster.dim()
        )));
    }
    let distances: Vec<f64> = cluster.iter().map(|x| sq_dist(x, center).sqrt()).collect();
    let (radius, dual) = csvdd_from_distances(&distances, lambda)?;
    Ok(BallFit {
        center: center.to_vec(),
        radius,
        dual,
    })
}

/// C-SVDD ball centered on the cluster centroid.
pub fn csvdd_fit(cluster: &PatchBatch, lambda: f64) -> Result<BallFit> {
    if cluster.n() == 0 {
        return Err(Error::EmptyCluster);
    }
    check_lambda(lambda)?;
    let center = column_mean(cluster.matrix());
    csvdd_fit_about(cluster, &center, lambda)
}

/// Brute-force C-SVDD radius: evaluates `u + lambda * sum_i max(0, d_i^2 - u)`
/// at `u = 0` and at every `u = d_i^2` and returns `sqrt` of the smallest
/// minimizing `u`.
pub fn csvdd_oracle(cluster: &PatchBatch, lambda: f64) -> Result<f64> {
    let n = cluster.n();
    if n == 0 {
        return Err(Error::EmptyCluster);
    }
    check_lambda(lambda)?;
    let dim = cluster.dim();
    let mut centroid = vec![0.0; dim];
    for x in cluster.iter() {
        for j in 0..dim {
            centroid[j] += x[j];
        }
    }
    for c in centroid.iter_mut() {
        *c /= n as f64;
    }
    let d2: Vec<f64> = cluster
        .iter()
        .map(|x| (0..dim).map(|j| (x[j] - centroid[j]).powi(2)).sum())
        .collect();
    let primal = |u: f64| u + lambda * d2.iter().map(|&d| (d - u).max(0.0)).sum::<f64>();

    let candidates: Vec<(f64, f64)> = std::iter::once(0.0)
        .chain(d2.iter().copied())
        .map(|u| (u, primal(u)))
        .collect();
    let best = candidates.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let tie = 1e-12 * (1.0 + best.abs());
    let u = candidates
        .iter()
        .filter(|c| c.1 <= best + tie)
        .map(|c| c.0)
        .fold(f64::INFINITY, f64::min);
    Ok(u.sqrt())
}

/// Euclidean projection onto `{a : sum a = 1, 0 <= a_i <= cap}`.
///
/// The projection is `clip(v_i - tau, 0, cap)` for the unique threshold
/// `tau` making the sum equal one; `tau` is found exactly by scanning the
/// sorted breakpoints of the piecewise-linear sum.
pub fn project_capped_simplex(v: &[f64], cap: f64) -> Result<Vec<f64>> {
    let n = v.len();
    check_lambda(cap)?;
    if n == 0 || (n as f64) * cap < 1.0 - CAP_COUNT_SLACK {
        return Err(Error::InfeasibleLambda { lambda: cap, n });
    }
    let mass = |tau: f64| -> f64 { v.iter().map(|&x| (x - tau).clamp(0.0, cap)).sum() };
    let mut breaks: Vec<f64> = v.iter().flat_map(|&x| [x - cap, x]).collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    // mass is non-increasing in tau: n*cap at the first breakpoint, 0 at the last
    let mut tau = breaks[0];
    let mut prev = (breaks[0], mass(breaks[0]));
    if prev.1 > 1.0 {
        for &b in &breaks[1..] {
            let m = mass(b);
            if m <= 1.0 {
                // mass is linear between consecutive breakpoints
                tau = if prev.1 == m {
                    b
                } else {
                    prev.0 + (prev.1 - 1.0) * (b - prev.0) / (prev.1 - m)
                };
                break;
            }
            prev = (b, m);
        }
    }
    Ok(v.iter().map(|&x| (x - tau).clamp(0.0, cap)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvddParams {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SvddParams {
    fn default() -> Self {
        Self {
            tol: DEFAULT_SVDD_TOL,
            max_iters: DEFAULT_SVDD_MAX_ITERS,
        }
    }
}

/// SVDD by accelerated projected gradient ascent on the dual
/// `sum_i a_i <x_i, x_i> - sum_ij a_i a_j <x_i, x_j>` over the capped
/// simplex. The center is `sum_i a_i x_i`; the radius is the mean distance
/// of the boundary support vectors (`tol < a_i < lambda - tol`).
pub fn svdd_fit(cluster: &PatchBatch, lambda: f64, params: SvddParams) -> Result<BallFit> {
    let n = cluster.n();
    if n == 0 {
        return Err(Error::EmptyCluster);
    }
    check_lambda(lambda)?;
    if (n as f64) * lambda < 1.0 - CAP_COUNT_SLACK {
        return Err(Error::InfeasibleLambda { lambda, n });
    }
    let dim = cluster.dim();
    // the dual is translation invariant under sum(a) = 1; center for conditioning
    let mean = column_mean(cluster.matrix());
    let xs: Vec<Vec<f64>> = cluster
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let sq_norms: Vec<f64> = xs.iter().map(|x| dot(x, x)).collect();

    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    for x in &xs {
        for i in 0..dim {
            for j in 0..dim {
                gram[(i, j)] += x[i] * x[j];
            }
        }
    }
    let top = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    let lipschitz = 2.0 * top;

    let combine = |alpha: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; dim];
        for (a, x) in alpha.iter().zip(&xs) {
            if *a != 0.0 {
                for j in 0..dim {
                    c[j] += a * x[j];
                }
            }
        }
        c
    };
    let gradient = |alpha: &[f64]| -> Vec<f64> {
        let c = combine(alpha);
        xs.iter().zip(&sq_norms).map(|(x, s)| s - 2.0 * dot(x, &c)).collect()
    };
    let objective = |alpha: &[f64]| -> f64 {
        let c = combine(alpha);
        alpha.iter().zip(&sq_norms).map(|(a, s)| a * s).sum::<f64>() - dot(&c, &c)
    };
    let step = |alpha: &[f64]| -> Result<Vec<f64>> {
        let g = gradient(alpha);
        let moved: Vec<f64> = alpha.iter().zip(&g).map(|(a, gi)| a + gi / lipschitz).collect();
        project_capped_simplex(&moved, lambda)
    };
    let residual = |alpha: &[f64]| -> Result<f64> {
        Ok(step(alpha)?
            .iter()
            .zip(alpha)
            .map(|(p, a)| (p - a).abs())
            .fold(0.0, f64::max))
    };

    let mut alpha = project_capped_simplex(&vec![1.0 / n as f64; n], lambda)?;
    let mut res = if lipschitz > 0.0 { residual(&alpha)? } else { 0.0 };
    let mut iters = 0;
    if res > params.tol {
        let mut prev = alpha.clone();
        let mut momentum = 1.0f64;
        let mut value = objective(&alpha);
        while iters < params.max_iters {
            iters += 1;
            let next_m = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            let beta = (momentum - 1.0) / next_m;
            let y: Vec<f64> = alpha.iter().zip(&prev).map(|(a, p)| a + beta * (a - p)).collect();
            let candidate = step(&y)?;
            let cand_value = objective(&candidate);
            if cand_value < value {
                // adaptive restart: drop momentum and take a plain step
                momentum = 1.0;
                prev = alpha.clone();
                alpha = step(&alpha)?;
                value = objective(&alpha);
            } else {
                momentum = next_m;
                prev = std::mem::replace(&mut alpha, candidate);
                value = cand_value;
            }
            if iters % 10 == 0 || iters == params.max_iters {
                res = residual(&alpha)?;
                if res <= params.tol {
                    break;
                }
            }
        }
        if res > params.tol {
            return Err(Error::NotConverged { iters, residual: res });
        }
    }

    let shifted = combine(&alpha);
    let center: Vec<f64> = shifted.iter().zip(&mean).map(|(c, m)| c + m).collect();
    let distances: Vec<f64> = xs.iter().map(|x| sq_dist(x, &shifted).sqrt()).collect();
    let boundary: Vec<f64> = alpha
        .iter()
        .zip(&distances)
        .filter(|(a, _)| **a > params.tol && **a < lambda - params.tol)
        .map(|(_, d)| *d)
        .collect();
    let radius = if boundary.is_empty() {
        // all multipliers at a bound: smallest radius covering the zero-multiplier points
        alpha
            .iter()
            .zip(&distances)
            .filter(|(a, _)| **a <= params.tol)
            .map(|(_, d)| *d)
            .fold(0.0, f64::max)
    } else {
        boundary.iter().sum::<f64>() / boundary.len() as f64
    };
    let objective = objective(&alpha);
    Ok(BallFit {
        center,
        radius,
        dual: DualSolution { alpha, objective },
    })
}

/// Primal SVDD objective `R^2 + lambda sum_i max(0, ||x_i - a||^2 - R^2)`.
pub fn svdd_primal(cluster: &PatchBatch, center: &[f64], radius: f64, lambda: f64) -> f64 {
    let r2 = radius * radius;
    r2 + lambda * cluster.iter().map(|x| (sq_dist(x, center) - r2).max(0.0)).sum::<f64>()
}

/// Partitions `batch` by nearest atom and fits one ball per cluster.
///
/// C-SVDD balls are centered on the dictionary atoms themselves; SVDD
/// balls carry their solved centers. Empty clusters get radius 0 at the
/// atom.
pub fn fit_all(
    dict: &Dictionary,
    batch: &PatchBatch,
    lambda: f64,
    kind: BallKind,
    params: SvddParams,
) -> Result<BallModel> {
    check_lambda(lambda)?;
    let labels = assign(batch, dict)?;
    let k = dict.k();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, a) in labels.iter().enumerate() {
        members[a.cluster].push(i);
    }
    let fits: Vec<(Vec<f64>, f64)> = members
        .par_iter()
        .enumerate()
        .map(|(c, idx)| {
            let atom = dict.atom(c);
            if idx.is_empty() {
                return Ok((atom.to_vec(), 0.0));
            }
            let cluster = PatchBatch::from_points(batch.matrix().select_rows(idx));
            let fit = match kind {
                BallKind::Csvdd => csvdd_fit_about(&cluster, atom, lambda),
                BallKind::Svdd if cluster.n() == 1 => Ok(BallFit {
                    center: cluster.row(0).to_vec(),
                    radius: 0.0,
                    dual: DualSolution {
                        alpha: vec![1.0],
                        objective: 0.0,
                    },
                }),
                BallKind::Svdd => svdd_fit(&cluster, lambda, params),
            }
            .map_err(|e| e.in_cluster(c))?;
            Ok((fit.center, fit.radius))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let mut centers = Matrix::zeros(k, dict.dim());
    let mut radii = Vec::with_capacity(k);
    for (c, (center, radius)) in fits.into_iter().enumerate() {
        centers.row_mut(c).copy_from_slice(&center);
        radii.push(radius);
    }
    BallModel::new(centers, radii, lambda, kind)
}
