//! Deterministic stand-in corpus built from real 8x8 handwritten digits.
//!
//! The embedded asset is the UCI optical-recognition digit set (1797 samples,
//! 8x8 grayscale, ten classes). Each output image picks a source digit from
//! a disjoint train/test pool and renders it to the requested raster through
//! a seeded random affine map (shift, scale, rotation, intensity), giving an
//! MNIST-shaped corpus of arbitrary size with no source leakage between the
//! train and test files.

use crate::data::{write_idx, ImageSet};
use crate::error::{Error, Result};
use flate2::bufread::GzDecoder;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

static DIGITS_GZ: &[u8] = include_bytes!("../../assets/digits8x8.bin.gz");

struct SourceDigits {
    pixels: Vec<f64>, // n * 64, in [0, 1]
    labels: Vec<u8>,
}

fn decode_source() -> Result<SourceDigits> {
    let mut raw = Vec::new();
    GzDecoder::new(DIGITS_GZ)
        .read_to_end(&mut raw)
        .map_err(|e| Error::IdxFormat(format!("embedded digit asset: {e}")))?;
    if raw.len() < 8 || &raw[..4] != b"D8X8" {
        return Err(Error::IdxFormat("embedded digit asset header".into()));
    }
    let n = u32::from_be_bytes([raw[4], raw[5], raw[6], raw[7]]) as usize;
    if raw.len() != 8 + n * 65 {
        return Err(Error::IdxFormat(format!(
            "embedded digit asset length {} for {n} records",
            raw.len()
        )));
    }
    let mut pixels = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &raw[8 + i * 65..8 + (i + 1) * 65];
        pixels.extend(rec[..64].iter().map(|&b| b.min(16) as f64 / 16.0));
        labels.push(rec[64]);
    }
    Ok(SourceDigits { pixels, labels })
}

/// Bilinear sample of an 8x8 field with pixel centers at integer+0.5;
/// outside the field the image is black.
fn sample_source(src: &[f64], y: f64, x: f64) -> f64 {
    let gx = x - 0.5;
    let gy = y - 0.5;
    let x0 = gx.floor() as isize;
    let y0 = gy.floor() as isize;
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    let at = |yy: isize, xx: isize| -> f64 {
        if (0..8).contains(&yy) && (0..8).contains(&xx) {
            src[(yy * 8 + xx) as usize]
        } else {
            0.0
        }
    };
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1) * (1.0 - fy) * fx
        + at(y0 + 1, x0) * fy * (1.0 - fx)
        + at(y0 + 1, x0 + 1) * fy * fx
}

fn render(src: &[f64], out: &mut [f64], side: usize, rng: &mut ChaCha8Rng) {
    let zoom = side as f64 / 8.0;
    let scale = rng.gen_range(0.75..1.2);
    let theta = rng.gen_range(-0.42..0.42f64);
    let shear = rng.gen_range(-0.28..0.28);
    let dx = rng.gen_range(-3.0..3.0);
    let dy = rng.gen_range(-3.0..3.0);
    let gain = rng.gen_range(0.65..1.0);
    // per-image stroke thinning: remap values upward from a random floor so
    // the fat 8x8 blobs become pen-like strokes of varying weight
    let floor = rng.gen_range(0.25..0.55);
    let (sin, cos) = theta.sin_cos();
    let c = side as f64 / 2.0;
    for r in 0..side {
        for q in 0..side {
            let u = (q as f64 + 0.5 - c - dx) / (zoom * scale);
            let v = (r as f64 + 0.5 - c - dy) / (zoom * scale);
            let us = cos * u + sin * v + shear * v;
            let vs = -sin * u + cos * v;
            let val = sample_source(src, vs + 4.0, us + 4.0);
            let thinned = ((val - floor) / (1.0 - floor)).max(0.0);
            out[r * side + q] = (gain * thinned).clamp(0.0, 1.0);
        }
    }
}

/// Source pool membership: every fifth record feeds the test pool, the rest
/// feed the train pool.
fn is_test_source(index: usize) -> bool {
    index % 5 == 4
}

fn build_set(
    src: &SourceDigits,
    pool: &[usize],
    count: usize,
    side: usize,
    seed: u64,
) -> Result<ImageSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = vec![0.0; count * side * side];
    let mut labels = vec![0u8; count];
    for i in 0..count {
        let pick = pool[rng.gen_range(0..pool.len())];
        let digit = &src.pixels[pick * 64..(pick + 1) * 64];
        render(
            digit,
            &mut images[i * side * side..(i + 1) * side * side],
            side,
            &mut rng,
        );
        labels[i] = src.labels[pick];
    }
    ImageSet::new(images, labels, side, side)
}

/// In-memory corpus of `train`/`test` images at 28x28.
pub fn generate_sets(train: usize, test: usize, seed: u64) -> Result<(ImageSet, ImageSet)> {
    let src = decode_source()?;
    let n = src.labels.len();
    let train_pool: Vec<usize> = (0..n).filter(|i| !is_test_source(*i)).collect();
    let test_pool: Vec<usize> = (0..n).filter(|i| is_test_source(*i)).collect();
    let train_set = build_set(
        &src,
        &train_pool,
        train,
        28,
        crate::derive_seed(seed, "synth-train", 0),
    )?;
    let test_set = build_set(
        &src,
        &test_pool,
        test,
        28,
        crate::derive_seed(seed, "synth-test", 0),
    )?;
    Ok((train_set, test_set))
}

/// Writes the corpus under `dir` with MNIST file names (gzipped IDX).
pub fn generate_into(dir: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (train_set, test_set) = generate_sets(train, test, seed)?;
    let [(ti, tl), (si, sl)] = crate::data::mnist_paths(dir);
    write_idx(&ti, &tl, &train_set)?;
    write_idx(&si, &sl, &test_set)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dir;
    use tempfile::tempdir;

    #[test]
    fn source_asset_decodes() {
        let src = decode_source().unwrap();
        assert_eq!(src.labels.len(), 1797);
        assert!(src.labels.iter().all(|l| *l <= 9));
        assert!(src.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn generated_corpus_shape_and_determinism() {
        let (a_train, a_test) = generate_sets(120, 40, 5).unwrap();
        assert_eq!(a_train.len(), 120);
        assert_eq!(a_test.len(), 40);
        assert_eq!(a_train.rows(), 28);
        let (b_train, _) = generate_sets(120, 40, 5).unwrap();
        assert_eq!(a_train.images(), b_train.images());
        // all ten classes present in a modest sample
        let mut seen = [false; 10];
        for &l in a_train.labels() {
            seen[l as usize] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn written_corpus_roundtrips_through_idx() {
        let dir = tempdir().unwrap();
        generate_into(dir.path(), 50, 20, 9).unwrap();
        let (train, test) = load_dir(dir.path(), 50, 20).unwrap();
        assert_eq!(train.len(), 50);
        assert_eq!(test.len(), 20);
        assert!(train.images().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
