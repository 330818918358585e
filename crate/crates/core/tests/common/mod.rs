#![allow(dead_code)]

use std::path::{Path, PathBuf};

use csvddnet::ingest::{write_pgm, GrayImage};
use csvddnet::retrieval::GroundTruth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 40;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk")
}

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Random blobs and bars on a grey background.
fn base_image(rng: &mut ChaCha8Rng, shapes: usize) -> Vec<f64> {
    let mut img = vec![0.5; SIDE * SIDE];
    for _ in 0..shapes {
        let (cy, cx) = (rng.random_range(0.0..SIDE as f64), rng.random_range(0.0..SIDE as f64));
        let amp = rng.random_range(-0.45..0.45);
        if rng.random_bool(0.5) {
            let s = rng.random_range(2.0..6.0);
            for i in 0..SIDE {
                for j in 0..SIDE {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    img[i * SIDE + j] += amp * (-d2 / (2.0 * s * s)).exp();
                }
            }
        } else {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (sn, cs) = theta.sin_cos();
            let (len, half_w) = (rng.random_range(6.0..18.0), rng.random_range(0.8..2.5));
            for i in 0..SIDE {
                for j in 0..SIDE {
                    let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                    let along = dx * cs + dy * sn;
                    let across = -dx * sn + dy * cs;
                    if along.abs() <= len / 2.0 && across.abs() <= half_w {
                        img[i * SIDE + j] += amp;
                    }
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn bilinear(img: &[f64], y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (SIDE - 1) as f64);
    let x = x.clamp(0.0, (SIDE - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(SIDE - 1), (x0 + 1).min(SIDE - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |i: usize, j: usize| img[i * SIDE + j];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// A random crop rescaled to full size, plus uniform noise.
fn near_duplicate(img: &[f64], rng: &mut ChaCha8Rng, t: &Transform) -> Vec<f64> {
    let crop = rng.random_range(t.crop.0..t.crop.1);
    let oy = rng.random_range(0.0..SIDE as f64 - crop);
    let ox = rng.random_range(0.0..SIDE as f64 - crop);
    let scale = (crop - 1.0) / (SIDE - 1) as f64;
    let mut out = Vec::with_capacity(SIDE * SIDE);
    for i in 0..SIDE {
        for j in 0..SIDE {
            let v = bilinear(img, oy + i as f64 * scale, ox + j as f64 * scale) + rng.random_range(-t.noise..=t.noise);
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// `pairs` originals and one transformed copy of each; every image's only
/// relevant item is its partner.
#[derive(Debug, Clone, Copy)]
pub struct Transform {
    pub shapes: usize,
    pub crop: (f64, f64),
    pub noise: f64,
}

impl Default for Transform {
    fn default() -> Self {
        Self {
            shapes: 40,
            crop: (30.0, 36.0),
            noise: 0.02,
        }
    }
}

pub fn near_duplicate_set(pairs: usize, seed: u64) -> (Vec<String>, Vec<GrayImage>, GroundTruth) {
    near_duplicate_set_with(pairs, seed, &Transform::default())
}

pub fn near_duplicate_set_with(pairs: usize, seed: u64, t: &Transform) -> (Vec<String>, Vec<GrayImage>, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut truth = GroundTruth::new();
    for p in 0..pairs {
        let base = base_image(&mut rng, t.shapes);
        let dup = near_duplicate(&base, &mut rng, t);
        let (a, b) = (format!("img{p:02}a"), format!("img{p:02}b"));
        truth.insert(&a, [b.clone()]).unwrap();
        truth.insert(&b, [a.clone()]).unwrap();
        ids.push(a);
        images.push(GrayImage::new(SIDE, SIDE, base).unwrap());
        ids.push(b);
        images.push(GrayImage::new(SIDE, SIDE, dup).unwrap());
    }
    (ids, images, truth)
}

/// Writes the set as PGM files plus a ground-truth file; returns the
/// image directory and the truth path.
pub fn write_near_duplicate_set(root: &Path, pairs: usize, seed: u64) -> (PathBuf, PathBuf) {
    let (ids, images, truth) = near_duplicate_set(pairs, seed);
    let dir = root.join("images");
    std::fs::create_dir_all(&dir).unwrap();
    for (id, im) in ids.iter().zip(&images) {
        write_pgm(&dir.join(format!("{id}.pgm")), im).unwrap();
    }
    let gt = root.join("truth.txt");
    std::fs::write(&gt, truth.to_text()).unwrap();
    (dir, gt)
}
