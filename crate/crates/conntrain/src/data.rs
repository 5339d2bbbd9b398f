//! Dataset ingestion: MNIST IDX and CIFAR-10 binary formats, pixel/255
//! preprocessing, and the input-scaling transform that pairs with unit-sign
//! networks.

use crate::init::{self, InitKind, InitSpec};
use crate::layers::NetworkSpec;
use crate::tensor::Tensor;
use flate2::read::GzDecoder;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{file}: bad IDX magic {got:#010x} at offset 0")]
    BadMagic { file: String, got: u32 },
    #[error("{file}: truncated, expected {expected} bytes, found {got}")]
    Truncated {
        file: String,
        expected: usize,
        got: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: length {len} is not a multiple of {record} bytes")]
    BadRecordLength {
        file: String,
        len: usize,
        record: usize,
    },
    #[error("label {value} out of range [0,10)")]
    BadLabel { value: u8 },
    #[error("input scaling requires constant-magnitude (signed He) weights, got {0:?}")]
    WrongInit(InitKind),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// What has been applied to the pixel values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocessing {
    /// Base scale; 1/255 for both loaders.
    pub pixel_scale: f64,
    /// Extra factor from [`scale_for_unit_weights`] applications (1.0 if
    /// none). Each application multiplies it in, so a double application is
    /// visible here as the square.
    pub unit_weight_factor: f64,
}

/// An immutable dataset: images as `[N, C, H, W]` tensors, labels as class
/// indices.
#[derive(Clone)]
pub struct Dataset {
    pub name: String,
    pub train_images: Tensor,
    pub train_labels: Vec<u8>,
    pub test_images: Tensor,
    pub test_labels: Vec<u8>,
    pub preprocessing: Preprocessing,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_labels.len()
    }

    /// Image shape per sample, `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.train_images.shape();
        [s[1], s[2], s[3]]
    }

    /// Dataset restricted to the first `n` training samples (test split
    /// untouched); `n` is clamped to the available count.
    pub fn with_train_subset(&self, n: usize) -> Dataset {
        let n = n.min(self.train_len());
        Dataset {
            name: self.name.clone(),
            train_images: self.train_images.slice_rows(0, n),
            train_labels: self.train_labels[..n].to_vec(),
            test_images: self.test_images.clone(),
            test_labels: self.test_labels.clone(),
            preprocessing: self.preprocessing,
        }
    }
}

// --- IDX -------------------------------------------------------------------

/// A parsed IDX array of unsigned bytes: big-endian header (two zero bytes,
/// dtype 0x08, dimension count, then one u32 per dimension), raw data after.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], file: &str) -> Result<IdxArray, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            file: file.to_string(),
            expected: 4,
            got: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndim = (magic & 0xff) as usize;
    // dtype 0x08 = unsigned byte; anything else is not an IDX file we accept
    if magic >> 8 != 0x08 || ndim == 0 || ndim > 4 {
        return Err(DataError::BadMagic {
            file: file.to_string(),
            got: magic,
        });
    }
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(DataError::Truncated {
            file: file.to_string(),
            expected: header_len,
            got: bytes.len(),
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let o = 4 + 4 * d;
        dims.push(u32::from_be_bytes([
            bytes[o],
            bytes[o + 1],
            bytes[o + 2],
            bytes[o + 3],
        ]) as usize);
    }
    let n: usize = dims.iter().product();
    if bytes.len() != header_len + n {
        return Err(DataError::Truncated {
            file: file.to_string(),
            expected: header_len + n,
            got: bytes.len(),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[header_len..].to_vec(),
    })
}

/// Inverse of [`parse_idx`]; `write_idx(&parse_idx(b)?) == b` for any valid
/// uncompressed input.
pub fn write_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * arr.dims.len() + arr.data.len());
    out.extend_from_slice(&[0, 0, 0x08, arr.dims.len() as u8]);
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

/// Reads a file, transparently gunzipping when the gzip magic is present.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Finds `name` or `name.gz` in `dir`.
fn locate(dir: &Path, name: &str) -> Result<PathBuf, DataError> {
    let plain = dir.join(name);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(DataError::MissingFile(plain))
}

fn check_labels(labels: &[u8]) -> Result<(), DataError> {
    match labels.iter().find(|&&l| l >= 10) {
        Some(&value) => Err(DataError::BadLabel { value }),
        None => Ok(()),
    }
}

fn images_to_tensor(arr: &IdxArray) -> Result<Tensor, DataError> {
    let (n, h, w) = (arr.dims[0], arr.dims[1], arr.dims[2]);
    let data = arr.data.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, h, w], data)?)
}

fn idx_split(dir: &Path, images: &str, labels: &str) -> Result<(Tensor, Vec<u8>), DataError> {
    let img_path = locate(dir, images)?;
    let img = parse_idx(&read_maybe_gz(&img_path)?, images)?;
    if img.dims.len() != 3 {
        return Err(DataError::BadMagic {
            file: images.to_string(),
            got: 0x0800 | img.dims.len() as u32,
        });
    }
    let lab_path = locate(dir, labels)?;
    let lab = parse_idx(&read_maybe_gz(&lab_path)?, labels)?;
    if lab.dims.len() != 1 {
        return Err(DataError::BadMagic {
            file: labels.to_string(),
            got: 0x0800 | lab.dims.len() as u32,
        });
    }
    if img.dims[0] != lab.dims[0] {
        return Err(DataError::CountMismatch {
            images: img.dims[0],
            labels: lab.dims[0],
        });
    }
    check_labels(&lab.data)?;
    Ok((images_to_tensor(&img)?, lab.data))
}

/// Loads the four standard MNIST IDX files (optionally gzipped) from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Dataset, DataError> {
    let (train_images, train_labels) =
        idx_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let (test_images, test_labels) =
        idx_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok(Dataset {
        name: "mnist".to_string(),
        train_images,
        train_labels,
        test_images,
        test_labels,
        preprocessing: Preprocessing {
            pixel_scale: 1.0 / 255.0,
            unit_weight_factor: 1.0,
        },
    })
}

// --- CIFAR-10 ---------------------------------------------------------------

const CIFAR_RECORD: usize = 1 + 3 * 1024;

/// Parses one CIFAR-10 binary batch: records of a label byte followed by
/// three 32x32 channel planes.
pub fn parse_cifar_batch(bytes: &[u8], file: &str) -> Result<(Vec<f32>, Vec<u8>), DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::BadRecordLength {
            file: file.to_string(),
            len: bytes.len(),
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    check_labels(&labels)?;
    Ok((pixels, labels))
}

fn cifar_split(dir: &Path, files: &[&str]) -> Result<(Tensor, Vec<u8>), DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = locate(dir, name)?;
        let (p, l) = parse_cifar_batch(&read_maybe_gz(&path)?, name)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    Ok((Tensor::new(vec![n, 3, 32, 32], pixels)?, labels))
}

/// Loads the six CIFAR-10 binary batches from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset, DataError> {
    let (train_images, train_labels) = cifar_split(
        dir,
        &[
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
    )?;
    let (test_images, test_labels) = cifar_split(dir, &["test_batch.bin"])?;
    Ok(Dataset {
        name: "cifar10".to_string(),
        train_images,
        train_labels,
        test_images,
        test_labels,
        preprocessing: Preprocessing {
            pixel_scale: 1.0 / 255.0,
            unit_weight_factor: 1.0,
        },
    })
}

// --- input scaling -----------------------------------------------------------

/// Product of per-layer magnitudes `sqrt(2/fan_in)` over every weighted
/// layer of `spec`.
pub fn unit_weight_factor(spec: &NetworkSpec) -> f64 {
    spec.weighted_fan_ins()
        .iter()
        .map(|&f| init::layer_magnitude(f).expect("spec has positive fan-ins"))
        .product()
}

/// Multiplies every pixel by the product of layer magnitudes, the transform
/// that makes a unit-sign (+1/-1 weights) network compute the same function
/// as the original constant-magnitude network. Only meaningful for the
/// signed constant-magnitude initializer.
pub fn scale_for_unit_weights(
    ds: &Dataset,
    spec: &NetworkSpec,
    init_spec: &InitSpec,
) -> Result<Dataset, DataError> {
    if init_spec.kind != InitKind::SignedHeConstant {
        return Err(DataError::WrongInit(init_spec.kind));
    }
    let factor = unit_weight_factor(spec);
    Ok(Dataset {
        name: ds.name.clone(),
        train_images: ds.train_images.scale(factor as f32),
        train_labels: ds.train_labels.clone(),
        test_images: ds.test_images.scale(factor as f32),
        test_labels: ds.test_labels.clone(),
        preprocessing: Preprocessing {
            pixel_scale: ds.preprocessing.pixel_scale,
            unit_weight_factor: ds.preprocessing.unit_weight_factor * factor,
        },
    })
}
