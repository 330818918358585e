//! Dataset and image readers (IDX, binary PGM/PPM) and patch extraction.
//!
//! IDX files follow the published MNIST layout: a big-endian `u32` magic
//! (`0x00000803` for `u8` images, `0x00000801` for `u8` labels), one
//! big-endian `u32` per dimension, then the payload. Pixel bytes are scaled
//! to `[0, 1]` by dividing by 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl GrayImage {
    /// Builds an image from row-major intensities in `[0, 1]`.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} image",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel intensity {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Copies the `r`x`r` window with top-left corner `(row, col)` into `out`.
    fn copy_patch(&self, row: usize, col: usize, r: usize, out: &mut [f64]) {
        for dr in 0..r {
            let start = (row + dr) * self.width + col;
            out[dr * r..(dr + 1) * r].copy_from_slice(&self.values[start..start + r]);
        }
    }

    fn check_fits(&self, r: usize) -> Result<()> {
        if r == 0 || self.width < r || self.height < r {
            return Err(Error::ImageTooSmall {
                width: self.width,
                height: self.height,
                r,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<GrayImage>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Vec<GrayImage>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    /// Loads an IDX image file and its companion label file.
    pub fn load_idx(images: &Path, labels: &Path) -> Result<Self> {
        let images = match read_idx(images)? {
            IdxData::Images(v) => v,
            IdxData::Labels(_) => {
                return Err(Error::DimensionMismatch(format!(
                    "{} holds labels, expected images",
                    images.display()
                )))
            }
        };
        let labels = match read_idx(labels)? {
            IdxData::Labels(v) => v.into_iter().map(usize::from).collect(),
            IdxData::Images(_) => {
                return Err(Error::DimensionMismatch(format!(
                    "{} holds images, expected labels",
                    labels.display()
                )))
            }
        };
        Self::new(images, labels)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }
}

/// A set of `r`x`r` patches stored one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    r: usize,
    data: Matrix,
}

impl PatchBatch {
    pub fn new(r: usize, data: Matrix) -> Result<Self> {
        if data.cols() != r * r {
            return Err(Error::DimensionMismatch(format!(
                "patch dim {} is not {r}^2",
                data.cols()
            )));
        }
        Ok(Self { r, data })
    }

    /// A batch of arbitrary-dimensional points that do not come from square
    /// patches (`r` is reported as 0).
    pub fn from_points(data: Matrix) -> Self {
        Self { r: 0, data }
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.iter_rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    Images(Vec<GrayImage>),
    Labels(Vec<u8>),
}

pub fn read_idx(path: &Path) -> Result<IdxData> {
    parse_idx(&fs::read(path)?)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::TruncatedPayload {
            expected: at + 4,
            found: bytes.len(),
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = be_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => return Err(Error::BadMagic(other)),
    };
    let dims = (0..ndims)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimensionMismatch("IDX dimensions overflow".into()))?;
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "header declares {expected} payload bytes but file holds {}",
            payload.len()
        )));
    }
    if magic == IDX_LABELS_MAGIC {
        return Ok(IdxData::Labels(payload.to_vec()));
    }
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let size = rows * cols;
    let images = (0..count)
        .map(|i| GrayImage {
            width: cols,
            height: rows,
            values: payload[i * size..(i + 1) * size]
                .iter()
                .map(|&b| f64::from(b) / 255.0)
                .collect(),
        })
        .collect();
    Ok(IdxData::Images(images))
}

/// Serializes images as an IDX3 `u8` file. All images must share one size;
/// intensities are quantized to `round(v * 255)`.
pub fn write_idx_images(path: &Path, images: &[GrayImage]) -> Result<()> {
    let (w, h) = images.first().map_or((0, 0), |im| (im.width, im.height));
    let mut out = Vec::with_capacity(16 + images.len() * w * h);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for im in images {
        if im.width != w || im.height != h {
            return Err(Error::DimensionMismatch(
                "IDX image files need equally sized images".into(),
            ));
        }
        out.extend(im.values.iter().map(|&v| quantize(v)));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    parse_pnm(&fs::read(path)?)
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::TruncatedPayload {
            expected: start + 1,
            found: bytes.len(),
        });
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::UnsupportedFormat(format!("malformed header field {:?}", String::from_utf8_lossy(tok))))
}

/// Parses binary `P5` graymaps and `P6` pixmaps (converted to luma
/// `0.299 R + 0.587 G + 0.114 B`).
pub fn parse_pnm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos)? {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let expected = width * height * channels;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: raster.len(),
        });
    }
    let scale = maxval as f64;
    let values = if channels == 1 {
        raster[..expected]
            .iter()
            .map(|&b| (f64::from(b) / scale).min(1.0))
            .collect()
    } else {
        raster[..expected]
            .chunks_exact(3)
            .map(|px| {
                let y = 0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2]);
                (y / scale).min(1.0)
            })
            .collect()
    };
    GrayImage::new(width, height, values)
}

/// Writes a binary `P5` graymap with maxval 255.
pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", image.width, image.height)?;
    let raster: Vec<u8> = image.values.iter().map(|&v| quantize(v)).collect();
    f.write_all(&raster)?;
    Ok(())
}

/// Draws `n` patches uniformly over all (image, row, col) positions.
pub fn sample_patches(images: &[GrayImage], r: usize, n: usize, seed: u64) -> Result<PatchBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("patch count must be at least 1".into()));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to sample from".into()));
    }
    // cumulative position counts for mapping a flat index back to an image
    let mut cumulative = Vec::with_capacity(images.len());
    let mut total = 0usize;
    for im in images {
        im.check_fits(r)?;
        total += (im.height - r + 1) * (im.width - r + 1);
        cumulative.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = r * r;
    let mut data = vec![0.0; n * dim];
    for out in data.chunks_exact_mut(dim) {
        let flat = rng.random_range(0..total);
        let which = cumulative.partition_point(|&c| c <= flat);
        let offset = flat - if which == 0 { 0 } else { cumulative[which - 1] };
        let im = &images[which];
        let cols = im.width - r + 1;
        im.copy_patch(offset / cols, offset % cols, r, out);
    }
    PatchBatch::new(r, Matrix::from_vec(n, dim, data)?)
}

/// All `r`x`r` patches at stride 1, in row-major order of their top-left
/// corner.
pub fn extract_dense_patches(image: &GrayImage, r: usize) -> Result<PatchBatch> {
    image.check_fits(r)?;
    let sh = image.height - r + 1;
    let sw = image.width - r + 1;
    let dim = r * r;
    let mut data = vec![0.0; sh * sw * dim];
    for (idx, out) in data.chunks_exact_mut(dim).enumerate() {
        image.copy_patch(idx / sw, idx % sw, r, out);
    }
    PatchBatch::new(r, Matrix::from_vec(sh * sw, dim, data)?)
}
