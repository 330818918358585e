//! Single-file model bundle and descriptor matrix file.
//!
//! Bundle layout: the 8-byte magic `CSVDDNET`, a little-endian `u32` format
//! version, then sections of `tag: [u8; 8]`, `len: u64`, `payload`. Every
//! number in a payload is a little-endian 64-bit integer or float.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::balls::{BallKind, BallModel};
use crate::dictionary::{Dictionary, DictionaryInit};
use crate::encoder::EncodingKind;
use crate::error::{Error, Result};
use crate::learner::{EnsembleModel, LinearModel, StackingMode, StackingModel};
use crate::matrix::Matrix;
use crate::pipeline::{DescriptorParams, HistogramParams, ScaleModel, View};
use crate::preprocess::WhiteningTransform;

pub const MAGIC: &[u8; 8] = b"CSVDDNET";
pub const FORMAT_VERSION: u32 = 1;

const TAG_PARAMS: &[u8; 8] = b"PARAMS  ";
const TAG_SCALE: &[u8; 8] = b"SCALE   ";
const TAG_BALLS: &[u8; 8] = b"BALLS   ";
const TAG_CLASSIF: &[u8; 8] = b"CLASSIF ";
const TAG_STACKING: &[u8; 8] = b"STACKING";

/// Settings that every later stage must agree with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub views: Vec<View>,
    pub dictionary_size: usize,
    pub lambda: f64,
    pub ball_kind: BallKind,
    pub descriptor: DescriptorParams,
    pub seed: u64,
}

impl ModelParams {
    /// Distinct receptive fields in first-appearance order.
    pub fn receptive_fields(&self) -> Vec<usize> {
        let mut seen = HashSet::new();
        self.views.iter().map(|v| v.r).filter(|r| seen.insert(*r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub params: ModelParams,
    /// One per receptive field, in `params.receptive_fields()` order.
    pub scales: Vec<ScaleModel>,
    /// One per view once classifiers are trained, otherwise empty.
    pub classifiers: Vec<LinearModel>,
    pub stacking: Option<StackingModel>,
}

impl ModelBundle {
    pub fn scale(&self, r: usize) -> Result<&ScaleModel> {
        self.scales
            .iter()
            .find(|s| s.r() == r)
            .ok_or_else(|| Error::MissingMember(format!("models for receptive field {r}")))
    }

    pub fn ensemble(&self) -> Result<EnsembleModel> {
        if self.classifiers.is_empty() {
            return Err(Error::MissingMember("classifiers".into()));
        }
        let stacking = self
            .stacking
            .clone()
            .ok_or_else(|| Error::MissingMember("stacking weights".into()))?;
        EnsembleModel::new(self.classifiers.clone(), stacking)
    }

    /// Cross-reference checks between members.
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if p.views.is_empty() {
            return Err(Error::Format("bundle defines no views".into()));
        }
        let rs = p.receptive_fields();
        if self.scales.len() != rs.len() {
            return Err(Error::Format(format!(
                "{} scale models for {} receptive fields",
                self.scales.len(),
                rs.len()
            )));
        }
        for (scale, &r) in self.scales.iter().zip(&rs) {
            let d = &scale.dictionary;
            if d.r() != r || d.dim() != r * r || scale.whitening.dim() != r * r {
                return Err(Error::Format(format!("scale model does not fit receptive field {r}")));
            }
            if d.k() != p.dictionary_size {
                return Err(Error::Format(format!(
                    "dictionary for r={r} has {} atoms, bundle expects {}",
                    d.k(),
                    p.dictionary_size
                )));
            }
            if let Some(b) = &scale.balls {
                if b.k() != d.k() || b.dim() != d.dim() {
                    return Err(Error::Format(format!("balls for r={r} do not match the dictionary")));
                }
            }
        }
        if !self.classifiers.is_empty() {
            if self.classifiers.len() != p.views.len() {
                return Err(Error::Format(format!(
                    "{} classifiers for {} views",
                    self.classifiers.len(),
                    p.views.len()
                )));
            }
            let classes = self.classifiers[0].classes();
            for (c, v) in self.classifiers.iter().zip(&p.views) {
                let code = v.encoding.output_dim(p.dictionary_size, v.r * v.r);
                if c.dim() != v.descriptor_dim(code) || c.classes() != classes {
                    return Err(Error::Format(format!(
                        "classifier for view r={} p={} has the wrong shape",
                        v.r, v.p
                    )));
                }
            }
            if let Some(s) = &self.stacking {
                if s.views() != p.views.len() || s.classes() != classes {
                    return Err(Error::Format("stacking weights do not match the classifiers".into()));
                }
            }
        } else if self.stacking.is_some() {
            return Err(Error::Format("stacking weights without classifiers".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        let p = &self.params;
        let mut w = Writer::default();
        w.u64(p.views.len());
        for v in &p.views {
            w.u64(v.r);
            w.u64(v.p);
            w.u64(v.m);
            w.u64(v.encoding.code() as usize);
        }
        w.u64(p.dictionary_size);
        w.f64(p.lambda);
        w.u64(p.ball_kind.code() as usize);
        w.f64(p.descriptor.eps_norm);
        w.f64(p.descriptor.hist.clip);
        w.u64(p.descriptor.hist.normalize as usize);
        w.u64(p.descriptor.hist.interpolate as usize);
        w.raw_u64(p.seed);
        w.section(TAG_PARAMS, &mut out);

        for scale in &self.scales {
            let t = &scale.whitening;
            let d = &scale.dictionary;
            w.u64(d.r());
            w.u64(t.dim());
            w.f64(t.epsilon());
            w.f64s(t.mean());
            w.f64s(t.matrix().as_slice());
            w.u64(d.k());
            w.u64(d.init().code() as usize);
            w.raw_u64(d.seed());
            w.f64s(d.atoms().as_slice());
            w.section(TAG_SCALE, &mut out);
        }
        for scale in &self.scales {
            if let Some(b) = &scale.balls {
                w.u64(scale.r());
                w.u64(b.kind().code() as usize);
                w.f64(b.lambda());
                w.u64(b.k());
                w.u64(b.dim());
                w.f64s(b.centers().as_slice());
                w.f64s(b.radii());
                w.section(TAG_BALLS, &mut out);
            }
        }
        for (i, c) in self.classifiers.iter().enumerate() {
            w.u64(i);
            w.u64(c.classes());
            w.u64(c.dim());
            w.f64s(c.weights().as_slice());
            w.f64s(c.bias());
            w.section(TAG_CLASSIF, &mut out);
        }
        if let Some(s) = &self.stacking {
            w.u64(s.mode().code() as usize);
            w.u64(s.views());
            w.u64(s.classes());
            w.u64(s.weights().rows());
            w.u64(s.weights().cols());
            w.f64s(s.weights().as_slice());
            w.f64s(s.bias());
            w.section(TAG_STACKING, &mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a model bundle (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mut sections = Reader::new(&bytes[12..], "bundle");
        let mut params: Option<ModelParams> = None;
        let mut scales: Vec<ScaleModel> = Vec::new();
        let mut classifiers: Vec<LinearModel> = Vec::new();
        let mut stacking: Option<StackingModel> = None;
        while !sections.is_empty() {
            let tag: [u8; 8] = sections.take(8)?.try_into().expect("8 bytes");
            let len = sections.u64()?;
            let payload = sections.take(len)?;
            let name = String::from_utf8_lossy(&tag).trim_end().to_string();
            let mut r = Reader::new(payload, &name);
            if &tag != TAG_PARAMS && params.is_none() {
                return Err(Error::Format(format!("section {name} before PARAMS")));
            }
            match &tag {
                TAG_PARAMS => {
                    if params.is_some() {
                        return Err(Error::Format("duplicate PARAMS section".into()));
                    }
                    params = Some(read_params(&mut r)?);
                }
                TAG_SCALE => {
                    let rf = r.u64()?;
                    let dim = r.u64()?;
                    let eps = r.f64()?;
                    let mean = r.f64s(dim)?;
                    let mat = Matrix::from_vec(dim, dim, r.f64s(dim * dim)?)?;
                    let k = r.u64()?;
                    let init = DictionaryInit::from_code(r.u64()? as u64)
                        .ok_or_else(|| Error::Format("unknown dictionary init".into()))?;
                    let seed = r.raw_u64()?;
                    let atoms = Matrix::from_vec(k, dim, r.f64s(k * dim)?)?;
                    if scales.iter().any(|s| s.r() == rf) {
                        return Err(Error::Format(format!("duplicate scale section for r={rf}")));
                    }
                    scales.push(ScaleModel {
                        whitening: WhiteningTransform::new(mean, mat, eps)?,
                        dictionary: Dictionary::new(atoms, rf, init, seed)?,
                        balls: None,
                    });
                }
                TAG_BALLS => {
                    let rf = r.u64()?;
                    let kind = BallKind::from_code(r.u64()? as u64)
                        .ok_or_else(|| Error::Format("unknown ball kind".into()))?;
                    let lambda = r.f64()?;
                    let k = r.u64()?;
                    let dim = r.u64()?;
                    let centers = Matrix::from_vec(k, dim, r.f64s(k * dim)?)?;
                    let radii = r.f64s(k)?;
                    let scale = scales
                        .iter_mut()
                        .find(|s| s.r() == rf)
                        .ok_or_else(|| Error::Format(format!("balls for unknown receptive field {rf}")))?;
                    if scale.balls.is_some() {
                        return Err(Error::Format(format!("duplicate balls for r={rf}")));
                    }
                    scale.balls = Some(BallModel::new(centers, radii, lambda, kind)?);
                }
                TAG_CLASSIF => {
                    let idx = r.u64()?;
                    if idx != classifiers.len() {
                        return Err(Error::Format(format!("classifier {idx} out of order")));
                    }
                    let classes = r.u64()?;
                    let dim = r.u64()?;
                    let weights = Matrix::from_vec(classes, dim, r.f64s(classes * dim)?)?;
                    classifiers.push(LinearModel::new(weights, r.f64s(classes)?)?);
                }
                TAG_STACKING => {
                    if stacking.is_some() {
                        return Err(Error::Format("duplicate STACKING section".into()));
                    }
                    let mode = StackingMode::from_code(r.u64()? as u64)
                        .ok_or_else(|| Error::Format("unknown stacking mode".into()))?;
                    let views = r.u64()?;
                    let classes = r.u64()?;
                    let rows = r.u64()?;
                    let cols = r.u64()?;
                    let weights = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)?;
                    stacking = Some(StackingModel::new(mode, views, classes, weights, r.f64s(classes)?)?);
                }
                _ => return Err(Error::Format(format!("unknown section {name:?}"))),
            }
            r.finish()?;
        }
        let params = params.ok_or_else(|| Error::MissingMember("PARAMS section".into()))?;
        // store scales in receptive-field order regardless of file order
        let mut ordered = Vec::with_capacity(scales.len());
        for rf in params.receptive_fields() {
            let pos = scales
                .iter()
                .position(|s| s.r() == rf)
                .ok_or_else(|| Error::MissingMember(format!("models for receptive field {rf}")))?;
            ordered.push(scales.swap_remove(pos));
        }
        if !scales.is_empty() {
            return Err(Error::Format("scale model for a receptive field no view uses".into()));
        }
        let bundle = ModelBundle {
            params,
            scales: ordered,
            classifiers,
            stacking,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_params(r: &mut Reader<'_>) -> Result<ModelParams> {
    let n = r.u64()?;
    let mut views = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let (rf, p, m) = (r.u64()?, r.u64()?, r.u64()?);
        let encoding =
            EncodingKind::from_code(r.u64()? as u64).ok_or_else(|| Error::Format("unknown encoding".into()))?;
        if rf == 0 || p == 0 || m == 0 {
            return Err(Error::Format("view sizes must be at least 1".into()));
        }
        views.push(View { r: rf, p, m, encoding });
    }
    let dictionary_size = r.u64()?;
    let lambda = r.f64()?;
    let ball_kind = BallKind::from_code(r.u64()? as u64).ok_or_else(|| Error::Format("unknown ball kind".into()))?;
    let eps_norm = r.f64()?;
    let clip = r.f64()?;
    let normalize = r.u64()? != 0;
    let interpolate = r.u64()? != 0;
    let seed = r.raw_u64()?;
    Ok(ModelParams {
        views,
        dictionary_size,
        lambda,
        ball_kind,
        descriptor: DescriptorParams {
            eps_norm,
            hist: HistogramParams {
                clip,
                normalize,
                interpolate,
            },
        },
        seed,
    })
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u64(&mut self, v: usize) {
        self.raw_u64(v as u64);
    }

    fn raw_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }

    /// Appends the buffered payload as a section and clears the buffer.
    fn section(&mut self, tag: &[u8; 8], out: &mut Vec<u8>) {
        out.extend_from_slice(tag);
        out.extend_from_slice(&(self.buf.len() as u64).to_le_bytes());
        out.append(&mut self.buf);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'a str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("{} is truncated", self.what)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn raw_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = self.raw_u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{} holds an oversized count", self.what)))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("oversized array".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{} has {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )))
        }
    }
}

/// `rows cols\n` header followed by row-major little-endian `f64`s.
pub fn matrix_to_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = format!("{} {}\n", m.rows(), m.cols()).into_bytes();
    out.reserve(m.as_slice().len() * 8);
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    let nl = bytes
        .iter()
        .take(64)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("matrix file has no header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("matrix header is not text".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Format(format!("bad matrix header {header:?}")))
        })
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Format(format!("bad matrix header {header:?}")));
    };
    let body = &bytes[nl + 1..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("oversized matrix".into()))?;
    if body.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: body.len(),
        });
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, matrix_to_bytes(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    matrix_from_bytes(&fs::read(path)?)
}
