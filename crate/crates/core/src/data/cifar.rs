//! CIFAR-10 binary format: records of one label byte followed by 3072 pixel
//! bytes (1024 red, 1024 green, 1024 blue, each a row-major 32×32 plane).

use std::fs;
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{LoadError, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;
const CLASSES: usize = 10;

/// Parses one CIFAR-10 batch file into `(pixels in [0, 1], labels)`.
pub fn parse_cifar_file(path: &Path) -> Result<(Vec<f32>, Vec<usize>), LoadError> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LoadError::MissingFile(path.to_path_buf()),
        _ => LoadError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(LoadError::BadSize {
            path: path.to_path_buf(),
            size: bytes.len() as u64,
            record: CIFAR_RECORD_BYTES,
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(LoadError::BadLabel {
                path: path.to_path_buf(),
                record: i,
                label: rec[0] as u32,
                classes: CLASSES,
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_split(dir: &Path, name: &str, files: &[PathBuf]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let (p, l) = parse_cifar_file(f)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let images = Tensor::new(&[n, 3, SIDE, SIDE], pixels)?;
    Dataset::new(format!("cifar10-{name}:{}", dir.display()), 0, images, labels, CLASSES)
}

/// Loads `data_batch_1..5.bin` (train) and `test_batch.bin` (test).
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let test = [dir.join("test_batch.bin")];
    for f in train.iter().chain(&test) {
        if !f.is_file() {
            return Err(LoadError::MissingFile(f.clone()).into());
        }
    }
    Ok((load_split(dir, "train", &train)?, load_split(dir, "test", &test)?))
}
