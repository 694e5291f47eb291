//! Dataset ingestion: synthetic class-conditional Gaussians, IDX image and
//! label files, and CIFAR-style binary records. All loaders produce inputs
//! normalized into [0, 1] and are deterministic for a fixed spec and seed.

use crate::error::{Error, Result};
use crate::rng::{stream, StreamTag};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 3073; // 1 label byte + 3072 pixel bytes

/// In-memory dataset: flat samples in [0,1] plus integer class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Row-major sample data, one `sample_shape`-sized block per sample.
    inputs: Vec<f64>,
    labels: Vec<usize>,
    sample_shape: Vec<usize>,
    pub split: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        sample_shape: Vec<usize>,
        split: Split,
        classes: usize,
    ) -> Result<Dataset> {
        let per_sample: usize = sample_shape.iter().product();
        if per_sample == 0 || inputs.len() % per_sample != 0 {
            return Err(Error::Shape("inputs not a multiple of sample shape".into()));
        }
        if inputs.len() / per_sample != labels.len() {
            return Err(Error::Shape(format!(
                "{} samples but {} labels",
                inputs.len() / per_sample,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Value(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            sample_shape,
            split,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Assembles a batch tensor (and labels) from sample indices. The
    /// batch shape is `[n, sample_shape...]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per_sample: usize = self.sample_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per_sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.inputs[i * per_sample..(i + 1) * per_sample]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(&shape, &data)?, labels))
    }

    /// Raw sample access (used by augmentation).
    pub fn sample_data(&self, i: usize) -> &[f64] {
        let per_sample: usize = self.sample_shape.iter().product();
        &self.inputs[i * per_sample..(i + 1) * per_sample]
    }
}

/// Synthetic class-conditional Gaussian data. Class means are drawn in
/// [0.3, 0.7] per coordinate; samples add sigma=0.08 noise and are clamped
/// to [0, 1]. Labels are exactly balanced (round-robin, then shuffled).
pub fn synthetic_gaussian(
    sample_shape: &[usize],
    classes: usize,
    samples: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    let dim: usize = sample_shape.iter().product();
    if dim == 0 || samples == 0 {
        return Err(Error::Config("empty synthetic dataset".into()));
    }
    // Class means come from a split-independent stream so train and test
    // describe the same distribution; the sample noise stream differs by
    // split.
    let mut mean_rng = stream(seed, StreamTag::DataSynthesis, 0, 0);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut mean_rng);
                    0.5 + 0.2 * z.clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect();

    let split_tag = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = stream(seed, StreamTag::DataSynthesis, split_tag, 1);
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut inputs = Vec::with_capacity(samples * dim);
    for &label in &labels {
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs.push((means[label][d] + 0.08 * z).clamp(0.0, 1.0));
        }
    }
    Dataset::new(inputs, labels, sample_shape.to_vec(), split, classes)
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "file truncated".into(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// IDX image + label file pair (big-endian headers, magic 0x00000803 for
/// images and 0x00000801 for labels). Pixels are scaled into [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let magic = be_u32(&img, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n = be_u32(&img, 4)? as usize;
    let rows = be_u32(&img, 8)? as usize;
    let cols = be_u32(&img, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if img.len() != expected {
        return Err(Error::Format {
            offset: img.len().min(expected) as u64,
            msg: format!(
                "image payload is {} bytes, header {n}x{rows}x{cols} needs {}",
                img.len() - 16,
                expected - 16
            ),
        });
    }

    let lab = std::fs::read(labels_path)?;
    let magic = be_u32(&lab, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let n_lab = be_u32(&lab, 4)? as usize;
    if lab.len() != 8 + n_lab {
        return Err(Error::Format {
            offset: lab.len().min(8 + n_lab) as u64,
            msg: format!("label payload is {} bytes, header needs {n_lab}", lab.len() - 8),
        });
    }
    if n_lab != n {
        return Err(Error::Format {
            offset: 4,
            msg: format!("{n} images but {n_lab} labels"),
        });
    }

    let inputs: Vec<f64> = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(inputs, labels, vec![1, rows, cols], split, classes)
}

/// CIFAR-style binary records: 1 label byte followed by 3072 pixel bytes
/// (3x32x32, channel planes row-major).
pub fn load_cifar_binary(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Format {
            offset: (bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN) as u64,
            msg: format!(
                "file length {} is not a multiple of the {CIFAR_RECORD_LEN}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut inputs = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        labels.push(rec[0] as usize);
        inputs.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(inputs, labels, vec![3, 32, 32], split, classes)
}
