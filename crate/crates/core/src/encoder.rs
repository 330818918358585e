//! Patch encodings against a dictionary: hard voting, VLAD residuals,
//! triangle activations, and ball-surface triangle activations.

use std::fmt;
use std::str::FromStr;

use crate::balls::BallModel;
use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::matrix::{l2_normalize, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncodingKind {
    Bow,
    Vlad,
    Triangle,
    Csvdd,
}

impl EncodingKind {
    pub fn code(self) -> u64 {
        match self {
            EncodingKind::Bow => 0,
            EncodingKind::Vlad => 1,
            EncodingKind::Triangle => 2,
            EncodingKind::Csvdd => 3,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(EncodingKind::Bow),
            1 => Some(EncodingKind::Vlad),
            2 => Some(EncodingKind::Triangle),
            3 => Some(EncodingKind::Csvdd),
            _ => None,
        }
    }

    pub fn output_dim(self, k: usize, dim: usize) -> usize {
        match self {
            EncodingKind::Vlad => k * dim,
            _ => k,
        }
    }
}

impl fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncodingKind::Bow => "bow",
            EncodingKind::Vlad => "vlad",
            EncodingKind::Triangle => "triangle",
            EncodingKind::Csvdd => "csvdd",
        })
    }
}

impl FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bow" => Ok(EncodingKind::Bow),
            "vlad" => Ok(EncodingKind::Vlad),
            "triangle" | "kmeans" => Ok(EncodingKind::Triangle),
            "csvdd" => Ok(EncodingKind::Csvdd),
            other => Err(Error::Config(format!("unknown encoding {other:?}"))),
        }
    }
}

/// A validated (encoding, dictionary, balls) triple that writes codes into
/// caller-provided buffers.
#[derive(Debug, Clone, Copy)]
pub struct Encoder<'a> {
    kind: EncodingKind,
    dict: &'a Dictionary,
    balls: Option<&'a BallModel>,
}

impl<'a> Encoder<'a> {
    pub fn new(kind: EncodingKind, dict: &'a Dictionary, balls: Option<&'a BallModel>) -> Result<Self> {
        if kind == EncodingKind::Csvdd {
            let b = balls.ok_or_else(|| Error::BallMismatch("ball-surface encoding needs a ball model".into()))?;
            if b.k() != dict.k() || b.dim() != dict.dim() {
                return Err(Error::BallMismatch(format!(
                    "{} balls of dim {} for {} atoms of dim {}",
                    b.k(),
                    b.dim(),
                    dict.k(),
                    dict.dim()
                )));
            }
        }
        Ok(Self { kind, dict, balls })
    }

    pub fn kind(&self) -> EncodingKind {
        self.kind
    }

    pub fn output_dim(&self) -> usize {
        self.kind.output_dim(self.dict.k(), self.dict.dim())
    }

    pub fn input_dim(&self) -> usize {
        self.dict.dim()
    }

    /// Encodes `x` into `out` (`output_dim` values); `x` must match the
    /// dictionary dimension.
    pub fn encode_into(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            EncodingKind::Bow => {
                out.fill(0.0);
                out[self.dict.nearest(x).0] = 1.0;
            }
            EncodingKind::Vlad => {
                out.fill(0.0);
                let k = self.dict.nearest(x).0;
                let dim = self.dict.dim();
                for ((o, v), c) in out[k * dim..(k + 1) * dim].iter_mut().zip(x).zip(self.dict.atom(k)) {
                    *o = v - c;
                }
            }
            EncodingKind::Triangle => {
                for (o, atom) in out.iter_mut().zip(self.dict.atoms().iter_rows()) {
                    *o = sq_dist(x, atom).sqrt();
                }
                triangle_in_place(out);
            }
            EncodingKind::Csvdd => {
                let balls = self.balls.expect("checked in Encoder::new");
                for (k, o) in out.iter_mut().enumerate() {
                    *o = sq_dist(x, balls.center(k)).sqrt() - balls.radii()[k];
                }
                triangle_in_place(out);
            }
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.dict.check_dim(x.len())?;
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(x, &mut out);
        Ok(out)
    }
}

/// Replaces distances `z` with `max(0, mean(z) - z_k)`.
fn triangle_in_place(z: &mut [f64]) {
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    for v in z.iter_mut() {
        *v = (mean - *v).max(0.0);
    }
}

pub fn encode_bow(x: &[f64], dict: &Dictionary) -> Result<Vec<f64>> {
    Encoder::new(EncodingKind::Bow, dict, None)?.encode(x)
}

pub fn encode_vlad(x: &[f64], dict: &Dictionary) -> Result<Vec<f64>> {
    Encoder::new(EncodingKind::Vlad, dict, None)?.encode(x)
}

pub fn encode_triangle(x: &[f64], dict: &Dictionary) -> Result<Vec<f64>> {
    Encoder::new(EncodingKind::Triangle, dict, None)?.encode(x)
}

/// Triangle activation over signed ball-surface distances
/// `h_k = ||x - c_k|| - R_k`.
pub fn encode_csvdd(x: &[f64], dict: &Dictionary, balls: &BallModel) -> Result<Vec<f64>> {
    Encoder::new(EncodingKind::Csvdd, dict, Some(balls))?.encode(x)
}

/// Image-level VLAD: per-atom residual sums, globally L2-normalized.
pub fn vlad_aggregate<'p, I>(patches: I, dict: &Dictionary) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'p [f64]>,
{
    let enc = Encoder::new(EncodingKind::Vlad, dict, None)?;
    let mut acc = vec![0.0; enc.output_dim()];
    let mut code = vec![0.0; enc.output_dim()];
    for x in patches {
        dict.check_dim(x.len())?;
        enc.encode_into(x, &mut code);
        for (a, c) in acc.iter_mut().zip(&code) {
            *a += c;
        }
    }
    l2_normalize(&mut acc);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balls::BallKind;
    use crate::dictionary::DictionaryInit;
    use crate::matrix::Matrix;

    fn dict(rows: &[&[f64]]) -> Dictionary {
        Dictionary::new(Matrix::from_rows(rows).unwrap(), 0, DictionaryInit::Random, 0).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn bow_hot_index() {
        let d = dict(&[&[0.0, 0.0], &[-1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(encode_bow(&[1.0, 0.0], &d).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(encode_bow(&[0.0, 5.0], &d).unwrap(), vec![1.0, 0.0, 0.0]);
        // equidistant to atoms 1 and 2
        let d = dict(&[&[9.0, 9.0], &[-1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(encode_bow(&[0.0, 0.0], &d).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn vlad_blocks() {
        let d = dict(&[&[0.0, 0.0], &[4.0, 4.0]]);
        assert_eq!(encode_vlad(&[4.0, 4.0], &d).unwrap(), vec![0.0; 4]);
        assert_eq!(encode_vlad(&[3.0, 5.0], &d).unwrap(), vec![0.0, 0.0, -1.0, 1.0]);
        let single = dict(&[&[1.0, 2.0]]);
        assert_eq!(encode_vlad(&[0.5, 0.0], &single).unwrap(), vec![-0.5, -2.0]);
    }

    #[test]
    fn vlad_toy_aggregate() {
        let d = dict(&[&[0.0], &[10.0]]);
        let pts: [&[f64]; 3] = [&[1.0], &[-3.0], &[12.0]];
        // residual sums: atom 0 -> 1 - 3 = -2, atom 1 -> 2; normalized by sqrt(8)
        let v = vlad_aggregate(pts, &d).unwrap();
        let s = 8f64.sqrt();
        assert!(close(&v, &[-2.0 / s, 2.0 / s]));
    }

    #[test]
    fn triangle_examples() {
        let d = dict(&[&[0.0, 0.0], &[4.0, 0.0]]);
        assert!(close(&encode_triangle(&[0.0, 0.0], &d).unwrap(), &[2.0, 0.0]));
        let d = dict(&[&[0.0], &[1.0], &[3.0]]);
        assert!(close(
            &encode_triangle(&[2.0], &d).unwrap(),
            &[0.0, 1.0 / 3.0, 1.0 / 3.0]
        ));
        let d = dict(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(encode_triangle(&[0.0, 0.0], &d).unwrap(), vec![0.0; 3]);
        let one = dict(&[&[1.0, 1.0]]);
        assert_eq!(encode_triangle(&[5.0, 0.0], &one).unwrap(), vec![0.0]);
    }

    #[test]
    fn ball_surface_example() {
        let d = dict(&[&[0.0, 0.0], &[6.0, 0.0]]);
        let balls = BallModel::new(d.atoms().clone(), vec![2.0, 0.5], 1.0, BallKind::Csvdd).unwrap();
        let out = encode_csvdd(&[3.0, 0.0], &d, &balls).unwrap();
        assert!(close(&out, &[0.75, 0.0]));
    }

    #[test]
    fn on_every_surface_is_zero() {
        let d = dict(&[&[0.0, 0.0], &[6.0, 0.0], &[0.0, 8.0]]);
        let x = [3.0, 4.0];
        let radii: Vec<f64> = d.atoms().iter_rows().map(|c| sq_dist(&x, c).sqrt()).collect();
        let balls = BallModel::new(d.atoms().clone(), radii, 1.0, BallKind::Csvdd).unwrap();
        assert_eq!(encode_csvdd(&x, &d, &balls).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn zero_radii_match_triangle() {
        let d = dict(&[&[0.3, 0.1], &[-2.0, 4.0], &[5.0, -1.0]]);
        let balls = BallModel::new(d.atoms().clone(), vec![0.0; 3], 0.1, BallKind::Csvdd).unwrap();
        let x = [0.7, 1.9];
        assert_eq!(encode_csvdd(&x, &d, &balls).unwrap(), encode_triangle(&x, &d).unwrap());
    }

    #[test]
    fn mismatches() {
        let d = dict(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let wrong = BallModel::new(Matrix::zeros(3, 2), vec![0.0; 3], 1.0, BallKind::Csvdd).unwrap();
        assert!(matches!(
            encode_csvdd(&[0.0, 0.0], &d, &wrong),
            Err(Error::BallMismatch(_))
        ));
        assert!(matches!(encode_triangle(&[0.0], &d), Err(Error::DimensionMismatch(_))));
        assert!(matches!(
            Encoder::new(EncodingKind::Csvdd, &d, None),
            Err(Error::BallMismatch(_))
        ));
    }
}
