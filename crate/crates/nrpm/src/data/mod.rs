//! Dataset ingestion, deterministic subsetting/batching, and result files.
//!
//! Images are stored as f64 in [0,1], scaled by exactly 1/255 from the byte
//! format with no further normalization — attack budgets are expressed in
//! these raw pixel units. Loading never fetches anything: file paths come
//! from configuration, and the synthetic generators cover everything else.

mod report;
mod synth;

pub use report::{ExperimentReport, ReportRow};
pub use synth::{synth_digits, SyntheticTask};

use crate::tensor::Tensor;
use crate::{Error, Result};
use std::io::Read;
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// A labeled image set. `images` is `[N,1,H,W]` (or `[N,D]` for flat
/// synthetic tasks); labels are class indices below `class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sample_stride(&self) -> usize {
        self.images.shape[1..].iter().product()
    }

    /// Rows `indices` as a new dataset (clones the pixels).
    pub fn gather(&self, indices: &[usize]) -> Result<Dataset> {
        let stride = self.sample_stride();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Validation(format!("index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape.clone();
        shape[0] = indices.len();
        Ok(Dataset { images: Tensor::new(shape, data)?, labels, class_count: self.class_count })
    }
}

struct BigEndianReader<R: Read> {
    inner: R,
    path: String,
}

impl<R: Read> BigEndianReader<R> {
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::Format(format!("{}: truncated header", self.path)))?;
        Ok(u32::from_be_bytes(b))
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            Error::Format(format!("{}: truncated payload, wanted {n} bytes", self.path))
        })?;
        Ok(buf)
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::Format(format!("{}: trailing bytes after payload", self.path))),
            Err(e) => Err(e.into()),
        }
    }
}

/// Parse a big-endian IDX image/label pair: image magic 0x00000803 with dims
/// `[N,H,W]`, label magic 0x00000801 with dim `[N]`; pixel bytes scale to
/// [0,1] by exactly 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ir = BigEndianReader {
        inner: std::fs::File::open(images_path)?,
        path: images_path.display().to_string(),
    };
    let magic = ir.u32()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic, expected {IMAGE_MAGIC:#010x}, got {magic:#010x}",
            images_path.display()
        )));
    }
    let n = ir.u32()? as usize;
    let h = ir.u32()? as usize;
    let w = ir.u32()? as usize;
    let pixels = ir.bytes(n * h * w)?;
    ir.expect_eof()?;

    let mut lr = BigEndianReader {
        inner: std::fs::File::open(labels_path)?,
        path: labels_path.display().to_string(),
    };
    let magic = lr.u32()?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic, expected {LABEL_MAGIC:#010x}, got {magic:#010x}",
            labels_path.display()
        )));
    }
    let ln = lr.u32()? as usize;
    if ln != n {
        return Err(Error::Format(format!(
            "image count {n} does not match label count {ln}"
        )));
    }
    let label_bytes = lr.bytes(ln)?;
    lr.expect_eof()?;

    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(1, |&m| m + 1);
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        class_count,
    })
}

/// Serialize a dataset back to the IDX byte format (images and labels files).
/// Pixels are rounded to the nearest byte; synthetic corpora are generated
/// pre-quantized so this is lossless for them.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = &ds.images.shape;
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Validation(format!(
            "IDX export wants [N,1,H,W] images, got {shape:?}"
        )));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend(ds.images.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    std::fs::write(images_path, img)?;

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    std::fs::write(labels_path, lab)?;
    Ok(())
}

/// One training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Draw a seeded, class-stratified subset of `n` samples and split it into
/// batches in a fixed order. Per-class counts differ by at most one from the
/// even split `n / class_count`.
pub fn subset_and_batch(
    ds: &Dataset,
    n: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    use rand::seq::SliceRandom;
    use rand_chacha::rand_core::SeedableRng;
    if n > ds.len() {
        return Err(Error::Validation(format!(
            "subset of {n} from a dataset of {}",
            ds.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let classes = ds.class_count;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut chosen = Vec::with_capacity(n);
    let mut leftovers = Vec::new();
    for (c, group) in by_class.iter_mut().enumerate() {
        group.shuffle(&mut rng);
        let quota = n / classes + usize::from(c < n % classes);
        let take = quota.min(group.len());
        chosen.extend_from_slice(&group[..take]);
        leftovers.extend_from_slice(&group[take..]);
    }
    if chosen.len() < n {
        // classes too small for their quota: fill from a shuffled remainder
        leftovers.shuffle(&mut rng);
        chosen.extend_from_slice(&leftovers[..n - chosen.len()]);
    }
    chosen.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in chosen.chunks(batch_size) {
        let sub = ds.gather(chunk)?;
        batches.push(Batch { images: sub.images, labels: sub.labels });
    }
    Ok(batches)
}

/// Flatten `[N,1,H,W]` images to `[N,H·W]`; identity for already-flat data.
pub fn flatten_images(images: &Tensor) -> Result<Tensor> {
    if images.shape.len() == 2 {
        return Ok(images.clone());
    }
    let n = images.shape[0];
    let rest: usize = images.shape[1..].iter().product();
    Tensor::new(vec![n, rest], images.data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_bytes(n: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..n * 784 {
            img.push((i % 256) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            lab.push((7 + i % 3) as u8);
        }
        (img, lab)
    }

    #[test]
    fn well_formed_fixture_parses() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture_bytes(3);
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.images.shape, vec![3, 1, 28, 28]);
        assert_eq!(ds.labels, vec![7, 8, 9]);
        // byte 255 scales to exactly 1.0
        assert_eq!(ds.images.data[255], 1.0);
        assert_eq!(ds.images.data[0], 0.0);
        assert_eq!(ds.images.data[51], 51.0 / 255.0);
    }

    #[test]
    fn every_mutated_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture_bytes(2);
        let lp = dir.path().join("labels.idx");
        std::fs::write(&lp, &lab).unwrap();
        for byte in 0..4 {
            for flip in [0x01u8, 0x80] {
                let mut bad = img.clone();
                bad[byte] ^= flip;
                let ip = dir.path().join("bad.idx");
                std::fs::write(&ip, &bad).unwrap();
                let err = load_idx(&ip, &lp).unwrap_err();
                match err {
                    Error::Format(msg) => {
                        assert!(msg.contains("0x00000803"), "missing expected magic: {msg}")
                    }
                    other => panic!("wanted format error, got {other:?}"),
                }
            }
        }
    }

    #[test]
    fn truncated_files_are_length_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = fixture_bytes(2);
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        std::fs::write(&ip, &img[..img.len() - 10]).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("wanted format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_round_trip_is_lossless_for_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_digits(40, 5).unwrap();
        let ip = dir.path().join("d.images.idx");
        let lp = dir.path().join("d.labels.idx");
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.data, back.images.data);
        assert_eq!(ds.labels, back.labels);
    }

    #[test]
    fn subset_is_stratified_deduplicated_and_seed_stable() {
        let ds = synth_digits(300, 9).unwrap();
        let a = subset_and_batch(&ds, 100, 32, 4).unwrap();
        let b = subset_and_batch(&ds, 100, 32, 4).unwrap();
        assert_eq!(a.len(), 4); // 32+32+32+4
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.images.data, y.images.data);
            assert_eq!(x.labels, y.labels);
        }
        let c = subset_and_batch(&ds, 100, 32, 5).unwrap();
        assert!(a[0].labels != c[0].labels || a[0].images.data != c[0].images.data);
        // per-class histogram of the union: 100/10 each
        let mut hist = [0usize; 10];
        let mut total = 0;
        for batch in &a {
            for &l in &batch.labels {
                hist[l] += 1;
                total += 1;
            }
        }
        assert_eq!(total, 100);
        for count in hist {
            assert_eq!(count, 10);
        }
        // no duplicate pixel rows (samples are jittered; a collision would
        // indicate a duplicated index)
        let mut rows: Vec<&[f64]> = Vec::new();
        for batch in &a {
            for r in batch.images.data.chunks(784) {
                assert!(!rows.contains(&r), "duplicate sample in subset");
                rows.push(r);
            }
        }
    }

    #[test]
    fn oversized_subset_is_validation_error() {
        let ds = synth_digits(30, 2).unwrap();
        assert!(matches!(
            subset_and_batch(&ds, 31, 8, 0),
            Err(Error::Validation(_))
        ));
    }
}
