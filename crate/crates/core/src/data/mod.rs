//! Dataset ingestion and seeded batching.
//!
//! Images are stored as `[N, C, H, W]` in `[0, 1]`; per-channel normalization
//! happens at batch time through a [`Normalizer`].

mod cifar;
mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

pub use cifar::{load_cifar10, parse_cifar_file, CIFAR_RECORD_BYTES};
pub use synth::{salience_fraction, synth_generate, synth_split, SynthConfig};

use crate::error::{Error, LoadError, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Ground-truth important grid cells per image (synthetic data only).
    pub salient_cells: Option<Vec<Vec<usize>>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, seed: u64, images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            seed,
            images,
            labels,
            num_classes,
            salient_cells: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.images.shape();
        if s.len() != 4 || s[0] != self.labels.len() || self.labels.is_empty() {
            return Err(Error::dim("Dataset", s, &[self.labels.len()]));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(Error::Index {
                op: "Dataset labels",
                batch: i,
                index: l,
                bound: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    fn image_len(&self) -> usize {
        self.images.numel() / self.len()
    }

    /// `[n, C, H, W]` copy of the listed records.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let per = self.image_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    op: "Dataset::gather",
                    batch: 0,
                    index: i,
                    bound: self.len(),
                });
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(&shape, data)
    }

    /// First `n` records (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset {
            name: self.name.clone(),
            seed: self.seed,
            images: self.gather(&idx).expect("in range"),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            salient_cells: self.salient_cells.as_ref().map(|c| c[..n].to_vec()),
        }
    }

    /// Writes the flat `PSSD` binary layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = self.images.shape();
        let mut buf = Vec::with_capacity(28 + 4 * (self.len() + self.images.numel()));
        buf.extend_from_slice(PSSD_MAGIC);
        for v in [PSSD_VERSION, s[0] as u32, s[1] as u32, s[3] as u32, s[2] as u32, self.num_classes as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for v in self.images.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`Dataset::save`].
    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LoadError::MissingFile(path.to_path_buf()),
            _ => LoadError::Io {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        let truncated = || LoadError::Truncated { path: path.to_path_buf() };
        if bytes.len() < 28 {
            return Err(truncated().into());
        }
        if &bytes[..4] != PSSD_MAGIC {
            return Err(LoadError::BadMagic {
                path: path.to_path_buf(),
                expected: "PSSD",
            }
            .into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != PSSD_VERSION {
            return Err(LoadError::BadVersion {
                path: path.to_path_buf(),
                version,
            }
            .into());
        }
        let (n, c, w, h, classes) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize, word(5) as usize);
        let body = &bytes[28..];
        let pixels = n * c * w * h;
        if body.len() != 4 * (n + pixels) {
            return Err(truncated().into());
        }
        let mut labels = Vec::with_capacity(n);
        for (i, ch) in body[..4 * n].chunks_exact(4).enumerate() {
            let l = u32::from_le_bytes(ch.try_into().unwrap());
            if l as usize >= classes {
                return Err(LoadError::BadLabel {
                    path: path.to_path_buf(),
                    record: i,
                    label: l,
                    classes,
                }
                .into());
            }
            labels.push(l as usize);
        }
        let data = body[4 * n..]
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        let name = path.file_stem().map_or("pssd".into(), |s| s.to_string_lossy().into_owned());
        Dataset::new(name, 0, Tensor::new(&[n, c, h, w], data)?, labels, classes)
    }
}

const PSSD_MAGIC: &[u8; 4] = b"PSSD";
const PSSD_VERSION: u32 = 1;

/// Per-channel affine normalization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    /// Per-channel statistics of a (training) dataset.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let s = ds.images.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for img in ds.images.data().chunks_exact(c * plane) {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (ds.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Normalizer {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn identity(channels: usize) -> Self {
        Normalizer {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Normalizes `[B, C, H, W]` images and converts them to `T`.
    pub fn apply<T: Scalar>(&self, images: &Tensor<f32>) -> Tensor<T> {
        let s = images.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        let mut out = Vec::with_capacity(images.numel());
        for img in images.data().chunks_exact(c * plane) {
            for ch in 0..c {
                let (m, sd) = (self.mean[ch], self.std[ch]);
                out.extend(img[ch * plane..(ch + 1) * plane].iter().map(|&v| T::from_f64_lossy(((v - m) / sd) as f64)));
            }
        }
        Tensor::new(s, out).expect("same shape")
    }
}

/// Batch size, shuffle seed and tail policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl BatchPlan {
    /// Batches per epoch for a dataset of `n` records.
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }

    /// Seeded record order for `epoch`.
    pub fn order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut g = rng::generator(self.seed, rng::stream::SHUFFLE_BASE + epoch as u64);
        idx.shuffle(&mut g);
        idx
    }
}

/// Index lists of every batch of `epoch`, in order.
pub fn batch_indices(n: usize, plan: &BatchPlan, epoch: usize) -> Vec<Vec<usize>> {
    assert!(plan.batch_size >= 1, "batch size must be positive");
    let order = plan.order(n, epoch);
    let t = plan.batches_per_epoch(n);
    order.chunks(plan.batch_size).take(t).map(<[usize]>::to_vec).collect()
}

/// The batches of `epoch`: `(images [B, C, H, W], labels)`.
pub fn batches<'a>(ds: &'a Dataset, plan: &BatchPlan, epoch: usize) -> impl Iterator<Item = (Tensor<f32>, Vec<usize>)> + 'a {
    batch_indices(ds.len(), plan, epoch).into_iter().map(move |idx| {
        let images = ds.gather(&idx).expect("indices in range");
        let labels = idx.iter().map(|&i| ds.labels[i]).collect();
        (images, labels)
    })
}
