//! Classification datasets: the `MLOD` binary format, a Gaussian-mixture
//! generator, and batch sampling.
//!
//! File layout (all little-endian):
//!
//! ```text
//! "MLOD"            4 bytes
//! version           u32  (currently 1)
//! n                 u64
//! input_dim         u32
//! num_classes       u32
//! features          n * input_dim f32, row-major
//! labels            n u32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::Batch;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MLOD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub num_classes: usize,
    /// `n * input_dim` features, row-major.
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(input_dim: usize, num_classes: usize, features: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        let ds = Dataset { input_dim, num_classes, features, labels };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Validation("dataset has no samples".into()));
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Validation("input_dim and num_classes must be positive".into()));
        }
        if self.features.len() != self.labels.len() * self.input_dim {
            return Err(Error::Validation(format!(
                "{} features for {} samples of dim {}",
                self.features.len(),
                self.labels.len(),
                self.input_dim
            )));
        }
        if let Some((i, &y)) = self.labels.iter().enumerate().find(|(_, &y)| y as usize >= self.num_classes) {
            return Err(Error::Validation(format!(
                "label {y} at sample {i} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.features.len() + self.labels.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.labels.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for f in &self.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
        for y in &self.labels {
            out.extend_from_slice(&y.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}") });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let n = r.u64()? as usize;
        let input_dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let expected = n
            .checked_mul(input_dim)
            .and_then(|f| f.checked_add(n))
            .and_then(|w| w.checked_mul(4))
            .ok_or(Error::Format { offset: 8, msg: "header sizes overflow".into() })?;
        if bytes.len() - HEADER_LEN < expected {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("truncated: expected {} payload bytes, found {}", expected, bytes.len() - HEADER_LEN),
            });
        }
        let features = (0..n * input_dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let labels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos as u64, msg: "trailing bytes after labels".into() });
        }
        Dataset::new(input_dim, num_classes, features, labels)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::from_bytes(&fs::read(path)?)
    }

    /// Gathers rows `indices` into a batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let mut x = Tensor::zeros(indices.len(), self.input_dim);
        for (row, &i) in indices.iter().enumerate() {
            let src = &self.features[i * self.input_dim..(i + 1) * self.input_dim];
            for (dst, &v) in x.row_mut(row).iter_mut().zip(src) {
                *dst = v as f64;
            }
        }
        Batch { x, y: indices.iter().map(|&i| self.labels[i]).collect() }
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("unexpected end of file reading {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Independent uniform draws.
    #[default]
    WithReplacement,
    /// Distinct indices from a fresh random permutation.
    Permutation,
}

pub fn sample_batch(ds: &Dataset, batch_size: usize, mode: SamplingMode, rng: &mut RngStream) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be at least 1".into()));
    }
    let n = ds.len();
    let indices: Vec<usize> = match mode {
        SamplingMode::WithReplacement => (0..batch_size).map(|_| rng.below(n)).collect(),
        SamplingMode::Permutation => {
            if batch_size > n {
                return Err(Error::Argument(format!("permutation batch of {batch_size} from {n} samples")));
            }
            // Partial Fisher-Yates.
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..batch_size {
                let j = i + rng.below(n - i);
                idx.swap(i, j);
            }
            idx.truncate(batch_size);
            idx
        }
    };
    Ok(ds.gather(&indices))
}

/// Gaussian-mixture classification: one center per class on a sphere of radius
/// `center_radius`, isotropic noise of std `noise_std`, labels uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_radius")]
    pub center_radius: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_radius() -> f64 {
    3.0
}

fn default_noise() -> f64 {
    1.0
}

impl SyntheticConfig {
    pub fn new(n: usize, input_dim: usize, num_classes: usize, seed: u64) -> Self {
        SyntheticConfig { n, input_dim, num_classes, center_radius: default_radius(), noise_std: default_noise(), seed }
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.n == 0 || self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::config("n", "n, input_dim and num_classes must be positive"));
        }
        let root = RngStream::new(self.seed, 0);
        let mut center_rng = root.child(0);
        let mut centers = Vec::with_capacity(self.num_classes);
        for _ in 0..self.num_classes {
            let v: Vec<f64> = (0..self.input_dim).map(|_| center_rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            centers.push(v.into_iter().map(|x| x / norm * self.center_radius).collect::<Vec<_>>());
        }
        let mut rng = root.child(1);
        let mut features = Vec::with_capacity(self.n * self.input_dim);
        let mut labels = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let y = rng.below(self.num_classes);
            labels.push(y as u32);
            for &c in &centers[y] {
                features.push((c + self.noise_std * rng.normal()) as f32);
            }
        }
        Dataset::new(self.input_dim, self.num_classes, features, labels)
    }
}
