//! IDX-format image datasets, noise injectors, and split helpers.
//!
//! Training data flows through [`TrainSet`], which is the only type the
//! noise injectors accept; the clean test set lives in [`TestSet`], so "test
//! data is never noised" holds at compile time.

pub mod synth;

use crate::error::{Error, Result};
use flate2::bufread::GzDecoder;
use flate2::write::GzEncoder;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Where a dataset came from and which noise has been applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub pixel_noise_std: Option<f64>,
    pub label_flip_frac: Option<f64>,
}

/// Labeled image collection. Pixels are row-major reals, `[0, 1]` before
/// noise, unclamped after pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    images: Vec<f64>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
    provenance: Provenance,
}

impl ImageSet {
    pub fn new(images: Vec<f64>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self> {
        if images.len() != labels.len() * rows * cols {
            return Err(Error::InvalidArgument(format!(
                "image buffer length {} does not match {} labels of {rows}x{cols}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l > 9) {
            return Err(Error::IdxFormat(format!("label {bad} outside 0..=9")));
        }
        Ok(ImageSet {
            images,
            labels,
            rows,
            cols,
            provenance: Provenance::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.pixels_per_image();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Subset by index order given.
    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let n = self.pixels_per_image();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        ImageSet {
            images,
            labels,
            rows: self.rows,
            cols: self.cols,
            provenance: self.provenance.clone(),
        }
    }

    pub fn truncate(&self, limit: usize) -> ImageSet {
        let keep = limit.min(self.len());
        let indices: Vec<usize> = (0..keep).collect();
        self.select(&indices)
    }
}

/// Training images; the only carrier the noise injectors accept.
#[derive(Debug, Clone)]
pub struct TrainSet(pub ImageSet);

/// Clean evaluation images. No noise path exists for this type.
#[derive(Debug, Clone)]
pub struct TestSet(pub ImageSet);

impl std::ops::Deref for TrainSet {
    type Target = ImageSet;
    fn deref(&self) -> &ImageSet {
        &self.0
    }
}

impl std::ops::Deref for TestSet {
    type Target = ImageSet;
    fn deref(&self) -> &ImageSet {
        &self.0
    }
}

impl TrainSet {
    /// Adds iid `Normal(0, std^2)` to every pixel. `std = 0` is the identity,
    /// bit for bit. Outputs are deliberately not clamped to `[0, 1]`.
    pub fn with_pixel_noise(&self, std: f64, seed: u64) -> Result<TrainSet> {
        if std < 0.0 || !std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "pixel noise std must be >= 0, got {std}"
            )));
        }
        let mut out = self.0.clone();
        out.provenance.pixel_noise_std = Some(std);
        if std == 0.0 {
            return Ok(TrainSet(out));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("validated std");
        for p in out.images.iter_mut() {
            *p += rng.sample(dist);
        }
        Ok(TrainSet(out))
    }

    /// Reassigns exactly `round(frac * n)` labels, chosen uniformly without
    /// replacement, each to a uniformly chosen *different* class.
    pub fn with_flipped_labels(&self, frac: f64, seed: u64) -> Result<TrainSet> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::InvalidArgument(format!(
                "label flip fraction must lie in [0,1], got {frac}"
            )));
        }
        let mut out = self.0.clone();
        out.provenance.label_flip_frac = Some(frac);
        let n = out.labels.len();
        let count = (frac * n as f64).round() as usize;
        if count == 0 {
            return Ok(TrainSet(out));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // partial Fisher-Yates: first `count` entries are the chosen indices
        let mut indices: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = rng.gen_range(i..n);
            indices.swap(i, j);
        }
        for &i in &indices[..count] {
            let old = out.labels[i];
            out.labels[i] = (old + 1 + rng.gen_range(0..9u8)) % 10;
        }
        Ok(TrainSet(out))
    }

    /// Seeded split into (train, validation); validation takes
    /// `round(frac * n)` samples.
    pub fn split_validation(&self, frac: f64, seed: u64) -> Result<(TrainSet, TrainSet)> {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must lie in [0,1), got {frac}"
            )));
        }
        let n = self.0.len();
        let val_n = (frac * n as f64).round() as usize;
        let mut indices: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        let val_idx = &indices[..val_n];
        let train_idx = &indices[val_n..];
        Ok((
            TrainSet(self.0.select(train_idx)),
            TrainSet(self.0.select(val_idx)),
        ))
    }
}

/// Reads a file fully, inflating transparently when it starts with the gzip
/// magic bytes.
fn read_all_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path)
        .map_err(|e| Error::IdxFormat(format!("cannot open {}: {e}", path.display())))?;
    let mut raw = Vec::new();
    BufReader::new(file).read_to_end(&mut raw)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(BufReader::new(&raw[..]))
            .read_to_end(&mut out)
            .map_err(|e| Error::IdxFormat(format!("gzip decode of {}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_u32_be(r: &mut dyn Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::IdxFormat(format!("truncated {what}: {e}")))?;
    Ok(u32::from_be_bytes(b))
}

/// Decodes the big-endian IDX pair (plain or gzip): image magic `0x00000803`
/// with dims `(n, rows, cols)`, label magic `0x00000801` with dim `(n)`.
/// Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageSet> {
    let img_bytes = read_all_maybe_gz(images_path)?;
    let mut ir: &[u8] = &img_bytes;
    let ir = &mut ir as &mut dyn Read;
    let magic = read_u32_be(ir, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::IdxFormat(format!(
            "bad image magic {magic:#010x} in {} (want {IMAGE_MAGIC:#010x})",
            images_path.display()
        )));
    }
    let n = read_u32_be(ir, "image count")? as usize;
    let rows = read_u32_be(ir, "image rows")? as usize;
    let cols = read_u32_be(ir, "image cols")? as usize;
    let mut raw = vec![0u8; n * rows * cols];
    ir.read_exact(&mut raw)
        .map_err(|e| Error::IdxFormat(format!("truncated image data: {e}")))?;

    let lbl_bytes = read_all_maybe_gz(labels_path)?;
    let mut lr: &[u8] = &lbl_bytes;
    let lr = &mut lr as &mut dyn Read;
    let magic = read_u32_be(lr, "label header")?;
    if magic != LABEL_MAGIC {
        return Err(Error::IdxFormat(format!(
            "bad label magic {magic:#010x} in {} (want {LABEL_MAGIC:#010x})",
            labels_path.display()
        )));
    }
    let ln = read_u32_be(lr, "label count")? as usize;
    if ln != n {
        return Err(Error::IdxFormat(format!(
            "{n} images but {ln} labels"
        )));
    }
    let mut labels = vec![0u8; ln];
    lr.read_exact(&mut labels)
        .map_err(|e| Error::IdxFormat(format!("truncated label data: {e}")))?;

    let images: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
    let mut set = ImageSet::new(images, labels, rows, cols)?;
    set.provenance.source = format!("{} + {}", images_path.display(), labels_path.display());
    Ok(set)
}

/// Writes the IDX pair (gzipped when the filename ends in `.gz`). Pixels must
/// be in `[0, 1]`; they are quantized to bytes.
pub fn write_idx(images_path: &Path, labels_path: &Path, set: &ImageSet) -> Result<()> {
    let mut img_bytes = Vec::with_capacity(16 + set.images.len());
    img_bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img_bytes.extend_from_slice(&(set.len() as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(set.rows as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(set.cols as u32).to_be_bytes());
    for &p in &set.images {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "write_idx requires pixels in [0,1], got {p}"
            )));
        }
        img_bytes.push((p * 255.0).round() as u8);
    }
    let mut lbl_bytes = Vec::with_capacity(8 + set.len());
    lbl_bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl_bytes.extend_from_slice(&(set.len() as u32).to_be_bytes());
    lbl_bytes.extend_from_slice(&set.labels);

    write_maybe_gz(images_path, &img_bytes)?;
    write_maybe_gz(labels_path, &lbl_bytes)?;
    Ok(())
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(&mut w, flate2::Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        w.write_all(bytes)?;
    }
    w.flush()?;
    Ok(())
}

/// Standard MNIST-style file names under a directory.
pub fn mnist_paths(dir: &Path) -> [(PathBuf, PathBuf); 2] {
    [
        (
            dir.join("train-images-idx3-ubyte.gz"),
            dir.join("train-labels-idx1-ubyte.gz"),
        ),
        (
            dir.join("t10k-images-idx3-ubyte.gz"),
            dir.join("t10k-labels-idx1-ubyte.gz"),
        ),
    ]
}

fn resolve_pair(images: PathBuf, labels: PathBuf) -> (PathBuf, PathBuf) {
    // accept uncompressed variants when the .gz files are absent
    let strip = |p: &PathBuf| p.with_extension("");
    let i = if images.exists() { images.clone() } else { strip(&images) };
    let l = if labels.exists() { labels.clone() } else { strip(&labels) };
    (i, l)
}

/// Loads the train/test pair from a dataset directory laid out with MNIST
/// file names, truncating to the requested sizes.
pub fn load_dir(dir: &Path, train_limit: usize, test_limit: usize) -> Result<(TrainSet, TestSet)> {
    let [(ti, tl), (si, sl)] = mnist_paths(dir);
    let (ti, tl) = resolve_pair(ti, tl);
    let (si, sl) = resolve_pair(si, sl);
    let train = load_idx(&ti, &tl)?.truncate(train_limit);
    let test = load_idx(&si, &sl)?.truncate(test_limit);
    Ok((TrainSet(train), TestSet(test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_set(n: usize) -> ImageSet {
        let rows = 4;
        let cols = 4;
        let images: Vec<f64> = (0..n * rows * cols).map(|i| (i % 256) as f64 / 255.0).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        ImageSet::new(images, labels, rows, cols).unwrap()
    }

    #[test]
    fn idx_roundtrip_plain_and_gz() {
        let dir = tempdir().unwrap();
        let set = tiny_set(17);
        for ext in ["idx", "gz"] {
            let ip = dir.path().join(format!("imgs.{ext}"));
            let lp = dir.path().join(format!("lbls.{ext}"));
            write_idx(&ip, &lp, &set).unwrap();
            let loaded = load_idx(&ip, &lp).unwrap();
            assert_eq!(loaded.len(), 17);
            assert_eq!(loaded.labels(), set.labels());
            for (a, b) in loaded.images().iter().zip(set.images()) {
                assert!((a - b).abs() <= 0.5 / 255.0);
            }
        }
    }

    #[test]
    fn byte_255_maps_to_one() {
        let dir = tempdir().unwrap();
        let set = ImageSet::new(vec![1.0, 0.0, 0.5, 1.0], vec![3], 2, 2).unwrap();
        let ip = dir.path().join("i.gz");
        let lp = dir.path().join("l.gz");
        write_idx(&ip, &lp, &set).unwrap();
        let loaded = load_idx(&ip, &lp).unwrap();
        assert_eq!(loaded.images()[0], 1.0);
        assert_eq!(loaded.images()[3], 1.0);
    }

    #[test]
    fn wrong_magic_and_count_mismatch() {
        let dir = tempdir().unwrap();
        let ip = dir.path().join("i.idx");
        let lp = dir.path().join("l.idx");
        // label file with image magic
        std::fs::write(&ip, 0x0803u32.to_be_bytes()).unwrap();
        let err = load_idx(&ip, &ip).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        let set = tiny_set(3);
        write_idx(&ip, &lp, &set).unwrap();
        let err = load_idx(&lp, &ip).unwrap_err().to_string();
        assert!(err.contains("bad image magic"), "{err}");

        // count mismatch: write labels of a smaller set
        let small = tiny_set(2);
        let lp2 = dir.path().join("l2.idx");
        let ip2 = dir.path().join("i2.idx");
        write_idx(&ip2, &lp2, &small).unwrap();
        let err = load_idx(&ip, &lp2).unwrap_err().to_string();
        assert!(err.contains("3 images but 2 labels"), "{err}");
    }

    #[test]
    fn pixel_noise_zero_is_identity() {
        let train = TrainSet(tiny_set(5));
        let noised = train.with_pixel_noise(0.0, 9).unwrap();
        assert_eq!(noised.images(), train.images());
        assert_eq!(noised.provenance().pixel_noise_std, Some(0.0));
    }

    #[test]
    fn pixel_noise_deterministic_and_centered() {
        let train = TrainSet(tiny_set(400));
        let a = train.with_pixel_noise(1.0, 7).unwrap();
        let b = train.with_pixel_noise(1.0, 7).unwrap();
        assert_eq!(a.images(), b.images());
        let n = train.images().len();
        let mean: f64 = a
            .images()
            .iter()
            .zip(train.images())
            .map(|(x, y)| x - y)
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        let c = train.with_pixel_noise(1.0, 8).unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn label_flip_counts_and_guaranteed_change() {
        let train = TrainSet(tiny_set(5000));
        let same = train.with_flipped_labels(0.0, 3).unwrap();
        assert_eq!(same.labels(), train.labels());

        let flipped = train.with_flipped_labels(0.1, 3).unwrap();
        let changed = flipped
            .labels()
            .iter()
            .zip(train.labels())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 500);

        let all = train.with_flipped_labels(1.0, 3).unwrap();
        assert!(all
            .labels()
            .iter()
            .zip(train.labels())
            .all(|(a, b)| a != b));
        for l in all.labels() {
            assert!(*l <= 9);
        }
    }

    #[test]
    fn validation_split_partitions() {
        let train = TrainSet(tiny_set(100));
        let (tr, val) = train.split_validation(0.1, 5).unwrap();
        assert_eq!(tr.len(), 90);
        assert_eq!(val.len(), 10);
        // determinism
        let (tr2, val2) = train.split_validation(0.1, 5).unwrap();
        assert_eq!(tr.images(), tr2.images());
        assert_eq!(val.labels(), val2.labels());
    }
}
