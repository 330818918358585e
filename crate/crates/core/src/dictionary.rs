//! K-means filter banks over whitened patches.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::PatchBatch;
use crate::matrix::{sq_dist, Matrix};

pub const DEFAULT_KMEANS_ITERS: usize = 50;
/// Lloyd iterations stop once the relative distortion change drops below this.
pub const KMEANS_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DictionaryInit {
    KMeansPlusPlus,
    Random,
}

impl DictionaryInit {
    pub fn code(self) -> u64 {
        match self {
            DictionaryInit::KMeansPlusPlus => 0,
            DictionaryInit::Random => 1,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(DictionaryInit::KMeansPlusPlus),
            1 => Some(DictionaryInit::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Matrix,
    r: usize,
    init: DictionaryInit,
    seed: u64,
}

impl Dictionary {
    pub fn new(atoms: Matrix, r: usize, init: DictionaryInit, seed: u64) -> Result<Self> {
        if atoms.rows() == 0 {
            return Err(Error::InvalidArgument("dictionary needs at least one atom".into()));
        }
        if r != 0 && atoms.cols() != r * r {
            return Err(Error::DimensionMismatch(format!(
                "{}-dim atoms for receptive field {r}",
                atoms.cols()
            )));
        }
        if atoms.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dictionary atoms must be finite".into()));
        }
        Ok(Self { atoms, r, init, seed })
    }

    pub fn atoms(&self) -> &Matrix {
        &self.atoms
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        self.atoms.row(k)
    }

    pub fn k(&self) -> usize {
        self.atoms.rows()
    }

    pub fn dim(&self) -> usize {
        self.atoms.cols()
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn init(&self) -> DictionaryInit {
        self.init
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Index and squared distance of the nearest atom, lowest index on ties.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, atom) in self.atoms.iter_rows().enumerate() {
            let d = sq_dist(x, atom);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{dim}-dim input for a {}-dim dictionary",
                self.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub cluster: usize,
    /// Euclidean distance to the assigned atom.
    pub distance: f64,
}

pub fn assign(batch: &PatchBatch, dict: &Dictionary) -> Result<Vec<Assignment>> {
    dict.check_dim(batch.dim())?;
    Ok(assign_rows(batch.matrix(), dict.atoms())
        .into_iter()
        .map(|(cluster, d2)| Assignment {
            cluster,
            distance: d2.sqrt(),
        })
        .collect())
}

/// Nearest atom and squared distance for every row; output order matches
/// input order regardless of scheduling.
fn assign_rows(data: &Matrix, atoms: &Matrix) -> Vec<(usize, f64)> {
    (0..data.rows())
        .into_par_iter()
        .with_min_len(256)
        .map(|i| {
            let x = data.row(i);
            let mut best = (0, f64::INFINITY);
            for (k, atom) in atoms.iter_rows().enumerate() {
                let d = sq_dist(x, atom);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .collect()
}

/// Result of a K-means fit along with its distortion trace.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub dictionary: Dictionary,
    /// Sum of squared distances after each assignment step.
    pub distortion: Vec<f64>,
}

fn kmeanspp_seed(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = data.rows();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = data.iter_rows().map(|x| sq_dist(x, data.row(first))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every remaining point duplicates a chosen one
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        taken[next] = true;
        let c = data.row(next);
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = sq_dist(data.row(i), c);
            if nd < *d {
                *d = nd;
            }
        }
    }
    chosen
}

/// Lloyd's algorithm from k-means++ seeding.
pub fn kmeans_fit(batch: &PatchBatch, k: usize, iters: usize, seed: u64) -> Result<Dictionary> {
    kmeans_fit_traced(batch, k, iters, seed).map(|f| f.dictionary)
}

pub fn kmeans_fit_traced(batch: &PatchBatch, k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    let data = batch.matrix();
    let n = data.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { needed: k, got: n });
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    let dim = data.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut atoms = data.select_rows(&kmeanspp_seed(data, k, &mut rng));
    let mut trace = Vec::with_capacity(iters + 1);
    let mut labels = assign_rows(data, &atoms);
    trace.push(labels.iter().map(|l| l.1).sum::<f64>());

    for _ in 0..iters {
        // update step, reduced sequentially in row order
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        let mut residual: Vec<f64> = labels.iter().map(|l| l.1).collect();
        for c in 0..k {
            let atom = atoms.row_mut(c);
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (a, s) in atom.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *a = s * inv;
                }
            } else {
                // reseed with the point farthest from its centroid
                let mut far = 0;
                for (i, &r) in residual.iter().enumerate() {
                    if r > residual[far] {
                        far = i;
                    }
                }
                atom.copy_from_slice(data.row(far));
                residual[far] = 0.0;
            }
        }
        labels = assign_rows(data, &atoms);
        let distortion = labels.iter().map(|l| l.1).sum::<f64>();
        let prev = *trace.last().unwrap_or(&distortion);
        trace.push(distortion);
        if prev == 0.0 || (prev - distortion).abs() / prev < KMEANS_REL_TOL {
            break;
        }
    }
    Ok(KMeansFit {
        dictionary: Dictionary::new(atoms, batch.r(), DictionaryInit::KMeansPlusPlus, seed)?,
        distortion: trace,
    })
}

/// `k` distinct rows sampled without replacement.
pub fn random_dictionary(batch: &PatchBatch, k: usize, seed: u64) -> Result<Dictionary> {
    let n = batch.n();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { needed: k, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, n, k).into_vec();
    Dictionary::new(
        batch.matrix().select_rows(&picks),
        batch.r(),
        DictionaryInit::Random,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[&[f64]]) -> PatchBatch {
        PatchBatch::from_points(Matrix::from_rows(rows).unwrap())
    }

    fn blobs(seed: u64) -> (PatchBatch, [[f64; 2]; 2]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[0.0, 0.0], [10.0, 10.0]];
        let mut rows = Vec::new();
        for i in 0..200 {
            let c = centers[i % 2];
            rows.push(vec![
                c[0] + rng.random_range(-1.0..1.0),
                c[1] + rng.random_range(-1.0..1.0),
            ]);
        }
        (PatchBatch::from_points(Matrix::from_rows(&rows).unwrap()), centers)
    }

    #[test]
    fn k_equals_n_recovers_points() {
        let b = pts(&[&[0.0, 1.0], &[3.0, 4.0], &[-2.0, 5.0], &[7.0, 7.0]]);
        let fit = kmeans_fit_traced(&b, 4, 10, 1).unwrap();
        assert_eq!(*fit.distortion.last().unwrap(), 0.0);
        let mut atoms: Vec<Vec<f64>> = fit.dictionary.atoms().iter_rows().map(<[f64]>::to_vec).collect();
        let mut rows: Vec<Vec<f64>> = b.iter().map(<[f64]>::to_vec).collect();
        atoms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(atoms, rows);
    }

    #[test]
    fn k_one_is_the_mean() {
        let b = pts(&[&[0.0, 1.0], &[3.0, 4.0], &[-3.0, 1.0]]);
        let d = kmeans_fit(&b, 1, 5, 9).unwrap();
        assert!((d.atom(0)[0] - 0.0).abs() < 1e-12);
        assert!((d.atom(0)[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn separated_blobs() {
        let (b, centers) = blobs(11);
        let d = kmeans_fit(&b, 2, 50, 3).unwrap();
        // every point must land on its own blob's atom
        let labels = assign(&b, &d).unwrap();
        let blob_atom = [labels[0].cluster, labels[1].cluster];
        assert_ne!(blob_atom[0], blob_atom[1]);
        for (i, l) in labels.iter().enumerate() {
            assert_eq!(l.cluster, blob_atom[i % 2]);
        }
        for (blob, &atom) in blob_atom.iter().enumerate() {
            let members: Vec<&[f64]> = b.iter().skip(blob).step_by(2).collect();
            for j in 0..2 {
                let mean = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                assert!((d.atom(atom)[j] - mean).abs() < 0.1);
                assert!((mean - centers[blob][j]).abs() < 0.3);
            }
        }
    }

    #[test]
    fn too_few_points() {
        let b = pts(&[&[0.0], &[1.0]]);
        assert!(matches!(
            kmeans_fit(&b, 3, 5, 0),
            Err(Error::TooFewPoints { needed: 3, got: 2 })
        ));
        assert!(matches!(random_dictionary(&b, 3, 0), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn duplicate_points_still_seed() {
        let b = pts(&[&[1.0], &[1.0], &[1.0]]);
        let d = kmeans_fit(&b, 3, 5, 2).unwrap();
        assert_eq!(d.k(), 3);
    }

    #[test]
    fn random_atoms_are_rows() {
        let b = pts(&[&[0.0, 1.0], &[3.0, 4.0], &[-2.0, 5.0], &[7.0, 7.0], &[1.0, 1.0]]);
        let d1 = random_dictionary(&b, 3, 5).unwrap();
        let d2 = random_dictionary(&b, 3, 5).unwrap();
        assert_eq!(d1, d2);
        let rows: Vec<&[f64]> = b.iter().collect();
        let mut seen = Vec::new();
        for atom in d1.atoms().iter_rows() {
            let idx = rows.iter().position(|r| *r == atom).expect("atom is a batch row");
            assert!(!seen.contains(&idx));
            seen.push(idx);
        }
        let all = random_dictionary(&b, 5, 1).unwrap();
        assert_eq!(all.k(), 5);
    }

    #[test]
    fn assign_ties_and_exact_hits() {
        let d = Dictionary::new(
            Matrix::from_rows(&[[9.0, 9.0], [-1.0, 0.0], [1.0, 0.0], [5.0, 5.0]]).unwrap(),
            0,
            DictionaryInit::Random,
            0,
        )
        .unwrap();
        let a = assign(&pts(&[&[5.0, 5.0], &[0.0, 0.0]]), &d).unwrap();
        assert_eq!(
            a[0],
            Assignment {
                cluster: 3,
                distance: 0.0
            }
        );
        assert_eq!(a[1].cluster, 1);
        assert!(matches!(assign(&pts(&[&[1.0]]), &d), Err(Error::DimensionMismatch(_))));
    }
}
