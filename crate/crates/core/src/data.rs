//! Two-stream feature datasets: synthetic generators and the PFER file format.
//!
//! A dataset holds, per sample, an image-feature matrix and a landmark-feature
//! matrix (both `P × D`) and an integer label. On disk:
//!
//! ```text
//! "PFER"             4 bytes
//! version            u32 LE (1)
//! P, D, N, count     u32 LE each
//! per sample:
//!   image features     P·D × f32 LE
//!   landmark features  P·D × f32 LE
//!   label              u32 LE
//! ```
//!
//! Values are widened to `f64` in memory. Generators round every value to
//! `f32` precision, so synthetic datasets survive a file round trip exactly.
//! Metadata (shape and generator settings) is written next to the file as
//! JSON.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{put_u32, to_u32, Cursor};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PFER";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 24;

/// How a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Generator {
    Clusters { per_class: usize, sigma: f64, seed: u64 },
    Xor { per_class: usize, sigma: f64, seed: u64 },
    /// Features from an external extractor.
    External,
}

/// JSON sidecar contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub patches: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub count: usize,
    pub generator: Generator,
}

/// Paired image/landmark features and labels, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    patches: usize,
    dim: usize,
    num_classes: usize,
    img: Vec<f64>,
    lm: Vec<f64>,
    labels: Vec<usize>,
    generator: Generator,
}

/// A mini-batch: `[B, P, D]` per stream plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub img: Tensor,
    pub lm: Tensor,
    pub labels: Vec<usize>,
}

/// Source of labeled two-stream samples.
pub trait FeatureProvider {
    fn patches(&self) -> usize;
    fn dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Gathers the samples at `indices` in the given order.
    fn batch(&self, indices: &[usize]) -> Result<FeatureBatch>;
    fn labels(&self) -> &[usize];
}

impl FeatureDataset {
    pub fn new(
        patches: usize,
        dim: usize,
        num_classes: usize,
        img: Vec<f64>,
        lm: Vec<f64>,
        labels: Vec<usize>,
        generator: Generator,
    ) -> Result<Self> {
        if patches == 0 || dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(format!(
                "dataset extents must be positive (P={patches}, D={dim}, N={num_classes})"
            )));
        }
        let per = patches * dim;
        if img.len() != labels.len() * per || lm.len() != labels.len() * per {
            return Err(Error::InvalidArgument(format!(
                "{} labels need {} feature values per stream, got {} and {}",
                labels.len(),
                labels.len() * per,
                img.len(),
                lm.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if img.iter().chain(&lm).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self {
            patches,
            dim,
            num_classes,
            img,
            lm,
            labels,
            generator,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            patches: self.patches,
            dim: self.dim,
            num_classes: self.num_classes,
            count: self.labels.len(),
            generator: self.generator.clone(),
        }
    }

    fn sample_len(&self) -> usize {
        self.patches * self.dim
    }

    /// `(image [P, D], landmark [P, D], label)` of sample `i`.
    pub fn sample(&self, i: usize) -> Result<(Tensor, Tensor, usize)> {
        if i >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "sample {i} out of range for {} samples",
                self.len()
            )));
        }
        let n = self.sample_len();
        let shape = [self.patches, self.dim];
        Ok((
            Tensor::new(shape, self.img[i * n..(i + 1) * n].to_vec())?,
            Tensor::new(shape, self.lm[i * n..(i + 1) * n].to_vec())?,
            self.labels[i],
        ))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let b = self.batch(indices)?;
        Self::new(
            self.patches,
            self.dim,
            self.num_classes,
            b.img.into_data(),
            b.lm.into_data(),
            b.labels,
            self.generator.clone(),
        )
    }

    /// Deterministic shuffled split; the first part gets `round(frac · len)`
    /// samples.
    pub fn split(&self, frac: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::InvalidArgument(format!("split fraction {frac} outside [0, 1]")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (frac * self.len() as f64).round() as usize;
        if cut == 0 || cut == self.len() {
            return Err(Error::EmptyDataset);
        }
        Ok((self.subset(&order[..cut])?, self.subset(&order[cut..])?))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(file_size(self.patches, self.dim, self.len()));
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, to_u32(self.patches, "P")?);
        put_u32(&mut out, to_u32(self.dim, "D")?);
        put_u32(&mut out, to_u32(self.num_classes, "N")?);
        put_u32(&mut out, to_u32(self.len(), "sample count")?);
        let n = self.sample_len();
        for i in 0..self.len() {
            for v in self.img[i * n..(i + 1) * n].iter().chain(&self.lm[i * n..(i + 1) * n]) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            put_u32(&mut out, self.labels[i] as u32);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        c.magic(MAGIC)?;
        let version = c.u32()?;
        if version != VERSION {
            return Err(FormatError::Version {
                expected: VERSION,
                found: version,
            }
            .into());
        }
        let patches = c.u32()? as usize;
        let dim = c.u32()? as usize;
        let num_classes = c.u32()? as usize;
        let count = c.u32()? as usize;
        if patches == 0 || dim == 0 || num_classes == 0 {
            return Err(FormatError::InvalidHeader(format!(
                "zero extent (P={patches}, D={dim}, N={num_classes})"
            ))
            .into());
        }
        let n = patches
            .checked_mul(dim)
            .ok_or_else(|| FormatError::InvalidHeader("P·D overflows".into()))?;
        // Capacity is bounded by the bytes present, not the declared count.
        let sample_bytes = n.saturating_mul(8).saturating_add(4);
        let cap = count.min(c.remaining() / sample_bytes);
        let mut img = Vec::with_capacity(cap * n);
        let mut lm = Vec::with_capacity(cap * n);
        let mut labels = Vec::with_capacity(cap);
        for _ in 0..count {
            img.extend(c.f32s(n)?.map(f64::from));
            lm.extend(c.f32s(n)?.map(f64::from));
            let label = c.u32()? as usize;
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: num_classes,
                });
            }
            labels.push(label);
        }
        c.finish()?;
        Self::new(patches, dim, num_classes, img, lm, labels, Generator::External)
    }

    /// Writes the feature file and its JSON sidecar.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        let meta = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta())?;
        fs::write(&meta, json + "\n").map_err(|e| Error::io(&meta, e))
    }

    /// Reads a feature file; generator settings come from the sidecar when
    /// one is present and consistent with the file.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut ds = Self::from_bytes(&bytes)?;
        let meta_path = sidecar_path(path);
        if let Ok(text) = fs::read_to_string(&meta_path) {
            let meta: DatasetMeta = serde_json::from_str(&text)?;
            let expected = DatasetMeta {
                generator: meta.generator.clone(),
                ..ds.meta()
            };
            if meta != expected {
                return Err(Error::InvalidArgument(format!(
                    "{} disagrees with {}",
                    meta_path.display(),
                    path.display()
                )));
            }
            ds.generator = meta.generator;
        }
        Ok(ds)
    }
}

impl FeatureProvider for FeatureDataset {
    fn patches(&self) -> usize {
        self.patches
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, indices: &[usize]) -> Result<FeatureBatch> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = self.sample_len();
        let mut img = Vec::with_capacity(indices.len() * n);
        let mut lm = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            img.extend_from_slice(&self.img[i * n..(i + 1) * n]);
            lm.extend_from_slice(&self.lm[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        let shape = [indices.len(), self.patches, self.dim];
        Ok(FeatureBatch {
            img: Tensor::new(shape, img)?,
            lm: Tensor::new(shape, lm)?,
            labels,
        })
    }

    fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// `<file>.json` next to the feature file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Exact byte size of a feature file.
pub fn file_size(patches: usize, dim: usize, count: usize) -> usize {
    HEADER_BYTES + count * (2 * patches * dim * 4 + 4)
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("noise sigma must be finite and >= 0, got {sigma}")))
    }
}

/// Per-class prototypes, `[N][P·D]` per stream, standard normal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPrototypes {
    pub img: Vec<Vec<f64>>,
    pub lm: Vec<Vec<f64>>,
}

pub fn cluster_prototypes(patches: usize, dim: usize, num_classes: usize, seed: u64) -> ClusterPrototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = patches * dim;
    let draw = |rng: &mut ChaCha8Rng| (0..n).map(|_| f32_round(gaussian(rng))).collect::<Vec<_>>();
    let img = (0..num_classes).map(|_| draw(&mut rng)).collect();
    let lm = (0..num_classes).map(|_| draw(&mut rng)).collect();
    ClusterPrototypes { img, lm }
}

/// Gaussian clusters: each class has a fixed prototype per stream; samples
/// add isotropic noise of standard deviation `sigma`. Labels are balanced
/// (`per_class` each) and shuffled.
pub fn gen_clusters(
    patches: usize,
    dim: usize,
    num_classes: usize,
    per_class: usize,
    sigma: f64,
    seed: u64,
) -> Result<FeatureDataset> {
    check_sigma(sigma)?;
    let protos = cluster_prototypes(patches, dim, num_classes, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
    let mut labels: Vec<usize> = (0..num_classes * per_class).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let n = patches * dim;
    let mut img = Vec::with_capacity(labels.len() * n);
    let mut lm = Vec::with_capacity(labels.len() * n);
    for &c in &labels {
        img.extend(protos.img[c].iter().map(|&p| f32_round(p + sigma * gaussian(&mut rng))));
        lm.extend(protos.lm[c].iter().map(|&p| f32_round(p + sigma * gaussian(&mut rng))));
    }
    FeatureDataset::new(
        patches,
        dim,
        num_classes,
        img,
        lm,
        labels,
        Generator::Clusters {
            per_class,
            sigma,
            seed,
        },
    )
}

/// The two orthonormal bit directions `[v0, v1]` of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct BitDirections {
    pub zero: Vec<f64>,
    pub one: Vec<f64>,
}

impl BitDirections {
    /// `(v1 - v0) · mean_p x_p` for a `P × D` sample.
    pub fn score(&self, sample: &[f64]) -> f64 {
        let d = self.zero.len();
        let rows = sample.len() / d;
        sample
            .chunks(d)
            .map(|row| {
                row.iter()
                    .zip(self.zero.iter().zip(&self.one))
                    .map(|(x, (a, b))| x * (b - a))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / rows as f64
    }

    /// Decoded bit of a sample.
    pub fn bit(&self, sample: &[f64]) -> usize {
        usize::from(self.score(sample) > 0.0)
    }
}

/// Bit directions of the image and landmark streams for a given seed.
pub fn xor_directions(dim: usize, seed: u64) -> Result<(BitDirections, BitDirections)> {
    if dim < 2 {
        return Err(Error::InvalidArgument("XOR features need D >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pair = || -> BitDirections {
        loop {
            let a: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
            let b: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let zero: Vec<f64> = a.iter().map(|v| v / na).collect();
            let proj: f64 = b.iter().zip(&zero).map(|(x, y)| x * y).sum();
            let ortho: Vec<f64> = b.iter().zip(&zero).map(|(x, y)| x - proj * y).collect();
            let no = ortho.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na > 1e-8 && no > 1e-8 {
                let one = ortho.iter().map(|v| v / no).collect();
                return BitDirections { zero, one };
            }
        }
    };
    let img = pair();
    let lm = pair();
    Ok((img, lm))
}

/// Amplitude of the bit direction in every patch.
pub const XOR_AMPLITUDE: f64 = 1.0;
pub const XOR_DEFAULT_SIGMA: f64 = 0.3;

/// Two-class XOR task. Each stream carries one hidden bit: every patch is
/// `XOR_AMPLITUDE · v_bit + sigma · noise` along that stream's bit
/// directions. The label is `bit_img XOR bit_lm`.
///
/// Within each class the two bit combinations appear equally often (exactly,
/// when `per_class` is even), so either stream alone carries no information
/// about the label.
pub fn gen_xor(patches: usize, dim: usize, per_class: usize, sigma: f64, seed: u64) -> Result<FeatureDataset> {
    check_sigma(sigma)?;
    let (d_img, d_lm) = xor_directions(dim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0a0b);
    // (label, image bit); landmark bit = label ^ image bit.
    let mut plan: Vec<(usize, usize)> = (0..2 * per_class).map(|i| (i % 2, (i / 2) % 2)).collect();
    plan.shuffle(&mut rng);
    let n = patches * dim;
    let mut img = Vec::with_capacity(plan.len() * n);
    let mut lm = Vec::with_capacity(plan.len() * n);
    let mut labels = Vec::with_capacity(plan.len());
    let emit = |out: &mut Vec<f64>, dirs: &BitDirections, bit: usize, rng: &mut ChaCha8Rng| {
        let v = if bit == 0 { &dirs.zero } else { &dirs.one };
        for _ in 0..patches {
            out.extend(v.iter().map(|&x| f32_round(XOR_AMPLITUDE * x + sigma * gaussian(rng))));
        }
    };
    for &(label, b_img) in &plan {
        emit(&mut img, &d_img, b_img, &mut rng);
        emit(&mut lm, &d_lm, label ^ b_img, &mut rng);
        labels.push(label);
    }
    FeatureDataset::new(
        patches,
        dim,
        2,
        img,
        lm,
        labels,
        Generator::Xor {
            per_class,
            sigma,
            seed,
        },
    )
}
