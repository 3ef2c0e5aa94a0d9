//! Dataset ingestion: MNIST IDX files (plain or gzipped), attack-set
//! sampling, and synthetic Gaussian datasets for fast tests.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{stream, CounterRng, StreamPurpose};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One batch: N flat input rows and their class ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<u8>, classes: usize) -> Result<Batch> {
        let n = inputs.shape()[0];
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!("{n} inputs vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_inputs: Tensor,
    pub train_labels: Vec<u8>,
    pub test_inputs: Tensor,
    pub test_labels: Vec<u8>,
    pub classes: usize,
    /// How inputs were normalized, e.g. "pixels/255".
    pub normalization: String,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.train_inputs.shape()[1]
    }

    /// Copies the given training rows into a batch.
    pub fn train_batch(&self, indices: &[usize]) -> Result<Batch> {
        gather(&self.train_inputs, &self.train_labels, indices, self.classes)
    }

    /// Copies the given test rows into a batch.
    pub fn test_batch(&self, indices: &[usize]) -> Result<Batch> {
        gather(&self.test_inputs, &self.test_labels, indices, self.classes)
    }
}

fn gather(inputs: &Tensor, labels: &[u8], indices: &[usize], classes: usize) -> Result<Batch> {
    let dim = inputs.shape()[1];
    let mut vals = Vec::with_capacity(indices.len() * dim);
    let mut labs = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= labels.len() {
            return Err(Error::InvalidArgument(format!("row {i} out of range")));
        }
        vals.extend_from_slice(&inputs.values()[i * dim..(i + 1) * dim]);
        labs.push(labels[i]);
    }
    Batch::new(Tensor::from_values(&[indices.len(), dim], vals)?, labs, classes)
}

/// Reads a file fully, transparently gunzipping if the gzip magic is present.
/// `path` may name either the raw file or its `.gz` sibling.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let actual: PathBuf = if path.exists() {
        path.to_path_buf()
    } else {
        let gz = PathBuf::from(format!("{}.gz", path.display()));
        if gz.exists() {
            gz
        } else {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} (also tried .gz)", path.display()),
            )));
        }
    };
    let mut raw = Vec::new();
    BufReader::new(File::open(&actual)?).read_to_end(&mut raw)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Malformed(format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(Error::Integrity(format!("truncated header reading {what}")));
    }
    Ok(u32::from_be_bytes(bytes[off..end].try_into().unwrap()))
}

/// Parses big-endian IDX image + label files. Pixels are scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<u8>)> {
    let img = read_maybe_gz(images_path)?;
    let magic = be_u32(&img, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let count = be_u32(&img, 4, "image count")? as usize;
    let rows = be_u32(&img, 8, "rows")? as usize;
    let cols = be_u32(&img, 12, "cols")? as usize;
    let expected = 16 + count * rows * cols;
    if img.len() != expected {
        return Err(Error::Integrity(format!(
            "image payload is {} bytes, header declares {expected}",
            img.len()
        )));
    }

    let lab = read_maybe_gz(labels_path)?;
    let magic = be_u32(&lab, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let lab_count = be_u32(&lab, 4, "label count")? as usize;
    if lab.len() != 8 + lab_count {
        return Err(Error::Integrity(format!(
            "label payload is {} bytes, header declares {}",
            lab.len(),
            8 + lab_count
        )));
    }
    if lab_count != count {
        return Err(Error::Malformed(format!("{count} images but {lab_count} labels")));
    }

    let values: Vec<f64> = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    debug_assert!(values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    let inputs = Tensor::from_values(&[count, rows * cols], values)?;
    Ok((inputs, lab[8..].to_vec()))
}

/// Loads the four canonical MNIST files from a directory (raw or .gz).
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let (train_inputs, train_labels) = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let (test_inputs, test_labels) = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    let classes = 10;
    for &l in train_labels.iter().chain(&test_labels) {
        if l as usize >= classes {
            return Err(Error::Malformed(format!("label {l} out of range")));
        }
    }
    Ok(Dataset {
        train_inputs,
        train_labels,
        test_inputs,
        test_labels,
        classes,
        normalization: "pixels/255".into(),
    })
}

/// Draws `size` training rows without replacement, deterministic in `seed`.
pub fn sample_attack_set(dataset: &Dataset, size: usize, seed: u64) -> Result<Batch> {
    if size == 0 || size > dataset.train_len() {
        return Err(Error::InvalidArgument(format!(
            "attack set size {size} vs train size {}",
            dataset.train_len()
        )));
    }
    let mut rng = CounterRng::new(seed, stream(StreamPurpose::AttackSet, 0));
    let idx = rng.sample_indices(dataset.train_len(), size);
    dataset.train_batch(&idx)
}

/// Seeded indices of a test subset (used for attack goal checks).
pub fn subsample_indices(total: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = CounterRng::new(seed, stream(StreamPurpose::EvalSubsample, 0));
    rng.sample_indices(total, size.min(total))
}

/// `c` well-separated Gaussian clusters (unit sigma, means 10 apart along
/// coordinate axes), min-max normalized to [0, 1], split 80/20 train/test.
pub fn synthetic_gaussians(n: usize, dims: usize, c: usize, seed: u64) -> Result<Dataset> {
    if c < 2 || dims == 0 || n < c {
        return Err(Error::InvalidArgument(format!("n={n}, dims={dims}, c={c}")));
    }
    let mut rng = CounterRng::new(seed, stream(StreamPurpose::Synthetic, 0));
    let mut values = vec![0.0; n * dims];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Round-robin class assignment keeps the histogram balanced within 1.
        let class = i % c;
        let axis = class % dims;
        let level = (class / dims + 1) as f64;
        for d in 0..dims {
            let mean = if d == axis { 10.0 * level } else { 0.0 };
            values[i * dims + d] = mean + rng.normal();
        }
        labels.push(class as u8);
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    for v in &mut values {
        *v = (*v - lo) / span;
    }
    // Interleaved split so train and test stay class-balanced.
    let mut train_vals = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_vals = Vec::new();
    let mut test_labels = Vec::new();
    for i in 0..n {
        let row = &values[i * dims..(i + 1) * dims];
        if i % 5 == 4 {
            test_vals.extend_from_slice(row);
            test_labels.push(labels[i]);
        } else {
            train_vals.extend_from_slice(row);
            train_labels.push(labels[i]);
        }
    }
    Ok(Dataset {
        train_inputs: Tensor::from_values(&[train_labels.len(), dims], train_vals)?,
        train_labels,
        test_inputs: Tensor::from_values(&[test_labels.len(), dims], test_vals)?,
        test_labels,
        classes: c,
        normalization: "min-max".into(),
    })
}

/// Serializes images + labels into IDX bytes (used by tests and fixtures).
pub fn encode_idx(images: &[u8], count: usize, rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    assert_eq!(images.len(), count * rows * cols);
    assert_eq!(labels.len(), count);
    let mut img = Vec::with_capacity(16 + images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(count as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    img.extend_from_slice(images);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(count as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}
