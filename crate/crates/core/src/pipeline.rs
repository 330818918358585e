//! Image to view descriptor: dense encoding into K feature maps, average
//! pooling, then an 8-bin gradient orientation histogram per block of every
//! pooled map.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::balls::BallModel;
use crate::dictionary::Dictionary;
use crate::encoder::{Encoder, EncodingKind};
use crate::error::{Error, Result};
use crate::ingest::GrayImage;
use crate::matrix::Matrix;
use crate::preprocess::{normalize_in_place, WhiteningTransform, DEFAULT_NORM_EPSILON};

pub const ORIENTATION_BINS: usize = 8;
pub const DEFAULT_HIST_CLIP: f64 = 0.2;

/// One (receptive field, pooling, blocks, encoding) configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct View {
    pub r: usize,
    pub p: usize,
    pub m: usize,
    pub encoding: EncodingKind,
}

impl View {
    /// Descriptor length for `k` encoding outputs per patch.
    pub fn descriptor_dim(&self, code_dim: usize) -> usize {
        code_dim * self.m * self.m * ORIENTATION_BINS
    }

    /// Pooled map side for an input side `d`.
    pub fn pooled_side(&self, d: usize) -> usize {
        pooled_len(d + 1 - self.r, self.p)
    }
}

pub fn pooled_len(s: usize, p: usize) -> usize {
    s.div_ceil(p)
}

/// The learned models for one receptive-field size.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleModel {
    pub whitening: WhiteningTransform,
    pub dictionary: Dictionary,
    pub balls: Option<BallModel>,
}

impl ScaleModel {
    pub fn r(&self) -> usize {
        self.dictionary.r()
    }

    pub fn encoder(&self, kind: EncodingKind) -> Result<Encoder<'_>> {
        if self.whitening.dim() != self.dictionary.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{}-dim whitening with {}-dim dictionary",
                self.whitening.dim(),
                self.dictionary.dim()
            )));
        }
        Encoder::new(kind, &self.dictionary, self.balls.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramParams {
    /// SIFT-style clipping after the first normalization; values `>= 1`
    /// disable clipping.
    pub clip: f64,
    /// Per-block L2 normalization.
    pub normalize: bool,
    /// Split votes linearly between the two nearest bin centers instead of
    /// hard assignment.
    pub interpolate: bool,
}

impl Default for HistogramParams {
    fn default() -> Self {
        Self {
            clip: DEFAULT_HIST_CLIP,
            normalize: true,
            interpolate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorParams {
    pub eps_norm: f64,
    pub hist: HistogramParams,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        Self {
            eps_norm: DEFAULT_NORM_EPSILON,
            hist: HistogramParams::default(),
        }
    }
}

/// A stack of equally sized maps stored map-major, each row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    count: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMaps {
    pub fn new(count: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != count * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {count} maps of {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            count,
            height,
            width,
            data,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn map(&self, k: usize) -> &[f64] {
        let size = self.height * self.width;
        &self.data[k * size..(k + 1) * size]
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.map(k)[i * self.width + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledMaps {
    pub maps: FeatureMaps,
    pub p: usize,
}

/// Normalizes, whitens, and encodes every dense patch; code coordinate `k`
/// at patch position `(i, j)` lands in map `k` at `(i, j)`.
pub fn make_feature_maps(
    image: &GrayImage,
    scale: &ScaleModel,
    encoding: EncodingKind,
    eps_norm: f64,
) -> Result<FeatureMaps> {
    let r = scale.r();
    let enc = scale.encoder(encoding)?;
    if r == 0 || image.width() < r || image.height() < r {
        return Err(Error::ImageTooSmall {
            width: image.width(),
            height: image.height(),
            r,
        });
    }
    let sh = image.height() - r + 1;
    let sw = image.width() - r + 1;
    let count = enc.output_dim();
    let dim = r * r;
    let mut data = vec![0.0; count * sh * sw];
    let mut patch = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    let mut white = vec![0.0; dim];
    let mut code = vec![0.0; count];
    let values = image.values();
    let plane = sh * sw;
    for i in 0..sh {
        for j in 0..sw {
            for dr in 0..r {
                let start = (i + dr) * image.width() + j;
                patch[dr * r..(dr + 1) * r].copy_from_slice(&values[start..start + r]);
            }
            normalize_in_place(&mut patch, eps_norm);
            scale.whitening.apply_into(&patch, &mut scratch, &mut white);
            enc.encode_into(&white, &mut code);
            let pos = i * sw + j;
            for (k, c) in code.iter().enumerate() {
                data[k * plane + pos] = *c;
            }
        }
    }
    FeatureMaps::new(count, sh, sw, data)
}

/// Non-overlapping `p`x`p` block means; ragged edge blocks average only the
/// pixels they contain.
pub fn average_pool(maps: &FeatureMaps, p: usize) -> Result<PooledMaps> {
    if p == 0 {
        return Err(Error::InvalidArgument("pooling size must be at least 1".into()));
    }
    let (h, w) = (maps.height, maps.width);
    let (ph, pw) = (pooled_len(h, p), pooled_len(w, p));
    let mut data = vec![0.0; maps.count * ph * pw];
    for k in 0..maps.count {
        let src = maps.map(k);
        let dst = &mut data[k * ph * pw..(k + 1) * ph * pw];
        for bi in 0..ph {
            let rows = bi * p..((bi + 1) * p).min(h);
            for bj in 0..pw {
                let cols = bj * p..((bj + 1) * p).min(w);
                let mut sum = 0.0;
                for i in rows.clone() {
                    sum += src[i * w + cols.start..i * w + cols.end].iter().sum::<f64>();
                }
                dst[bi * pw + bj] = sum / (rows.len() * cols.len()) as f64;
            }
        }
    }
    Ok(PooledMaps {
        maps: FeatureMaps::new(maps.count, ph, pw, data)?,
        p,
    })
}

/// Derivative along one axis: central differences inside, one-sided at the
/// borders, zero along an axis of length 1.
#[inline]
fn axis_diff(at: impl Fn(usize) -> f64, idx: usize, len: usize) -> f64 {
    if len < 2 {
        0.0
    } else if idx == 0 {
        at(1) - at(0)
    } else if idx == len - 1 {
        at(len - 1) - at(len - 2)
    } else {
        (at(idx + 1) - at(idx - 1)) / 2.0
    }
}

/// `m`x`m` blocks of 8-bin gradient orientation histograms over one map.
///
/// Orientation `atan2(d/drow, d/dcol)` in `[0, 2 pi)` is split into eight
/// equal bins, votes are weighted by gradient magnitude, and each block
/// histogram is L2-normalized, clipped, and renormalized.
pub fn block_gradient_histogram(
    map: &[f64],
    height: usize,
    width: usize,
    m: usize,
    params: &HistogramParams,
) -> Result<Vec<f64>> {
    if height < 2 || width < 2 {
        return Err(Error::MapTooSmall { width, height });
    }
    if m == 0 {
        return Err(Error::InvalidArgument("block count must be at least 1".into()));
    }
    if map.len() != height * width {
        return Err(Error::DimensionMismatch(format!(
            "{} values for a {height}x{width} map",
            map.len()
        )));
    }
    let bin_width = 2.0 * PI / ORIENTATION_BINS as f64;
    let mut out = vec![0.0; m * m * ORIENTATION_BINS];
    for i in 0..height {
        let bi = i * m / height;
        for j in 0..width {
            let gx = axis_diff(|c| map[i * width + c], j, width);
            let gy = axis_diff(|rr| map[rr * width + j], i, height);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += 2.0 * PI;
            }
            let bj = j * m / width;
            let hist = &mut out[(bi * m + bj) * ORIENTATION_BINS..(bi * m + bj + 1) * ORIENTATION_BINS];
            if params.interpolate {
                let pos = theta / bin_width - 0.5;
                let lo = pos.floor();
                let frac = pos - lo;
                let lo = (lo as i64).rem_euclid(ORIENTATION_BINS as i64) as usize;
                hist[lo] += mag * (1.0 - frac);
                hist[(lo + 1) % ORIENTATION_BINS] += mag * frac;
            } else {
                let bin = ((theta / bin_width) as usize).min(ORIENTATION_BINS - 1);
                hist[bin] += mag;
            }
        }
    }
    if params.normalize {
        for hist in out.chunks_exact_mut(ORIENTATION_BINS) {
            normalize_histogram(hist, params.clip);
        }
    }
    Ok(out)
}

fn normalize_histogram(hist: &mut [f64], clip: f64) {
    let n = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return;
    }
    hist.iter_mut().for_each(|v| *v /= n);
    if clip < 1.0 {
        hist.iter_mut().for_each(|v| *v = v.min(clip));
        let n = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            hist.iter_mut().for_each(|v| *v /= n);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewDescriptor {
    pub view: View,
    pub values: Vec<f64>,
}

pub fn make_view_descriptor(
    image: &GrayImage,
    scale: &ScaleModel,
    view: View,
    params: &DescriptorParams,
) -> Result<ViewDescriptor> {
    if scale.r() != view.r {
        return Err(Error::DimensionMismatch(format!(
            "view r={} with models for r={}",
            view.r,
            scale.r()
        )));
    }
    let maps = make_feature_maps(image, scale, view.encoding, params.eps_norm)?;
    let pooled = average_pool(&maps, view.p)?.maps;
    let mut values = Vec::with_capacity(view.descriptor_dim(pooled.count()));
    for k in 0..pooled.count() {
        values.extend(block_gradient_histogram(
            pooled.map(k),
            pooled.height(),
            pooled.width(),
            view.m,
            &params.hist,
        )?);
    }
    Ok(ViewDescriptor { view, values })
}

/// Descriptors for many images, one row per image in input order.
pub fn describe_images(
    images: &[GrayImage],
    scale: &ScaleModel,
    view: View,
    params: &DescriptorParams,
) -> Result<Matrix> {
    let rows = images
        .par_iter()
        .map(|im| make_view_descriptor(im, scale, view, params).map(|d| d.values))
        .collect::<Vec<Result<Vec<f64>>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps_from(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> FeatureMaps {
        let data = (0..h * w).map(|idx| f(idx / w, idx % w)).collect();
        FeatureMaps::new(1, h, w, data).unwrap()
    }

    #[test]
    fn pooling_sizes() {
        let maps = FeatureMaps::new(2, 92, 92, vec![1.0; 2 * 92 * 92]).unwrap();
        let pooled = average_pool(&maps, 4).unwrap().maps;
        assert_eq!((pooled.height(), pooled.width()), (23, 23));
        let maps = maps_from(7, 5, |i, j| (i * 5 + j) as f64);
        assert_eq!(average_pool(&maps, 1).unwrap().maps, maps);
    }

    #[test]
    fn ragged_pooling() {
        let maps = maps_from(24, 24, |i, j| (i * 24 + j) as f64);
        let pooled = average_pool(&maps, 5).unwrap().maps;
        assert_eq!((pooled.height(), pooled.width()), (5, 5));
        // last block covers rows 20..24, cols 20..24
        let want: f64 = (20..24)
            .flat_map(|i| (20..24).map(move |j| (i * 24 + j) as f64))
            .sum::<f64>()
            / 16.0;
        assert_eq!(pooled.get(0, 4, 4), want);
        // last column of the first block row: rows 0..5, cols 20..24
        let want: f64 = (0..5)
            .flat_map(|i| (20..24).map(move |j| (i * 24 + j) as f64))
            .sum::<f64>()
            / 20.0;
        assert_eq!(pooled.get(0, 0, 4), want);
    }

    #[test]
    fn constant_map_has_no_gradient() {
        let h = block_gradient_histogram(&[0.7; 36], 6, 6, 3, &HistogramParams::default()).unwrap();
        assert_eq!(h, vec![0.0; 72]);
    }

    #[test]
    fn horizontal_ramp_votes_bin_zero() {
        let maps = maps_from(6, 6, |_, j| j as f64);
        let h = block_gradient_histogram(maps.map(0), 6, 6, 2, &HistogramParams::default()).unwrap();
        for block in h.chunks_exact(8) {
            assert_eq!(block[0], 1.0);
            assert!(block[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn vertical_ramp_votes_quarter_turn() {
        let maps = maps_from(5, 5, |i, _| 2.0 * i as f64);
        let h = block_gradient_histogram(maps.map(0), 5, 5, 1, &HistogramParams::default()).unwrap();
        assert_eq!(h[2], 1.0);
    }

    #[test]
    fn interpolated_votes_split() {
        let maps = maps_from(4, 4, |_, j| j as f64);
        let params = HistogramParams {
            normalize: false,
            interpolate: true,
            ..HistogramParams::default()
        };
        let h = block_gradient_histogram(maps.map(0), 4, 4, 1, &params).unwrap();
        // theta = 0 sits halfway between the centers of bins 7 and 0
        assert!((h[0] - h[7]).abs() < 1e-12 && h[0] > 0.0);
    }

    #[test]
    fn histogram_errors() {
        let p = HistogramParams::default();
        assert!(matches!(
            block_gradient_histogram(&[1.0, 2.0], 1, 2, 1, &p),
            Err(Error::MapTooSmall { .. })
        ));
        assert!(matches!(
            block_gradient_histogram(&[0.0; 4], 2, 2, 0, &p),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn clipping_caps_dominant_bin() {
        let mut hist = [10.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        normalize_histogram(&mut hist, 0.2);
        let n: f64 = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(hist[0] < 0.99);
    }

    #[test]
    fn descriptor_dimensions() {
        let v = View {
            r: 5,
            p: 4,
            m: 3,
            encoding: EncodingKind::Csvdd,
        };
        assert_eq!(v.pooled_side(96), 23);
        assert_eq!(v.descriptor_dim(500), 36_000);
        assert_eq!(View { m: 2, ..v }.descriptor_dim(256), 8_192);
        assert_eq!(v.descriptor_dim(400), 28_800);
    }
}
