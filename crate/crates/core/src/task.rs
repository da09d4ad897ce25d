//! Synthetic few-shot tasks.
//!
//! "Image" features live in the `D_t` output space of the encoder. Each class
//! prototype is its zero-shot text embedding pushed through a fixed rotation
//! `R` (the modality gap) and renormalized; samples are prototypes plus
//! isotropic Gaussian noise, renormalized to the unit sphere.
//!
//! `R` is the modified Gram-Schmidt orthonormalization of `I + s·G`, where
//! `G` has i.i.d. standard normal entries drawn row-major from the gap stream
//! and `s` is `gap_strength`. Columns are processed left to right, each one
//! having every earlier finished column projected out in order.
//!
//! Prototypes always use the reference template of length
//! [`REFERENCE_TEMPLATE_LEN`], so the features of a task do not change when
//! the prompt length does.
//!
//! # Dataset file format (version 1)
//!
//! All integers little-endian.
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `TCPDSET\0` |
//! | 4 | `u32` format version |
//! | 8 | `u64` metadata length `n` |
//! | n | UTF-8 JSON `{"split", "classes", "dim", "count"}` |
//! | `count · (4 + 8·dim)` | per sample: `u32` label, then `dim` `f64` |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{ClassVocabulary, FrozenEncoder};
use crate::error::{Error, Result};
use crate::rng::{tags, SplitMix64};
use crate::tensor::Tensor;

pub const REFERENCE_TEMPLATE_LEN: usize = 4;
pub const DATASET_MAGIC: &[u8; 8] = b"TCPDSET\0";
pub const DATASET_VERSION: u32 = 1;
const UNIT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub num_classes: usize,
    pub shots_per_class: usize,
    pub test_per_class: usize,
    pub tokens_per_class: usize,
    pub noise_sigma: f64,
    pub gap_strength: f64,
    pub task_seed: u64,
    /// Defaults to a stream derived from `task_seed`.
    pub gap_rotation_seed: Option<u64>,
    pub base_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            shots_per_class: 16,
            test_per_class: 50,
            tokens_per_class: 3,
            noise_sigma: 0.1,
            gap_strength: 0.15,
            task_seed: 1,
            gap_rotation_seed: None,
            base_fraction: 0.5,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("task.num_classes", "need at least 2 classes"));
        }
        if self.shots_per_class == 0 {
            return Err(Error::config("task.shots_per_class", "must be positive"));
        }
        if self.test_per_class == 0 {
            return Err(Error::config("task.test_per_class", "must be positive"));
        }
        if self.tokens_per_class == 0 {
            return Err(Error::config("task.tokens_per_class", "must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("task.noise_sigma", "must be non-negative"));
        }
        if !(self.gap_strength >= 0.0) || !self.gap_strength.is_finite() {
            return Err(Error::config("task.gap_strength", "must be non-negative"));
        }
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return Err(Error::config("task.base_fraction", "must lie strictly in (0, 1)"));
        }
        Ok(())
    }

    pub fn num_base(&self) -> usize {
        ((self.num_classes as f64 * self.base_fraction).round() as usize).clamp(1, self.num_classes - 1)
    }

    /// `(base, new)` global class indices.
    pub fn split_classes(&self) -> (Vec<usize>, Vec<usize>) {
        let b = self.num_base();
        ((0..b).collect(), (b..self.num_classes).collect())
    }

    fn rotation_seed(&self) -> u64 {
        self.gap_rotation_seed
            .unwrap_or_else(|| SplitMix64::derive(self.task_seed, tags::GAP_ROTATION).next_u64())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainBase,
    TestBase,
    TestNew,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::TrainBase => "train-base",
            Split::TestBase => "test-base",
            Split::TestNew => "test-new",
        }
    }
}

/// Labelled unit-norm feature vectors. Labels index into `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotDataset {
    pub split: Split,
    /// Global class ids, in label order.
    pub classes: Vec<usize>,
    pub dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl FewShotDataset {
    pub fn new(split: Split, classes: Vec<usize>, dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::contract(format!(
                "{} feature values for {} samples of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes.len()) {
            return Err(Error::contract(format!("label {bad} outside {} classes", classes.len())));
        }
        let ds = Self {
            split,
            classes,
            dim,
            features,
            labels,
        };
        ds.check_unit()?;
        Ok(ds)
    }

    fn check_unit(&self) -> Result<()> {
        for i in 0..self.len() {
            let norm = self.feature(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::NonUnit { index: i, norm });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.features.clone()).expect("consistent")
    }

    /// Features and labels of the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.feature(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(vec![indices.len(), self.dim], data).expect("consistent"), labels)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes.len()];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = DatasetMeta {
            split: self.split,
            classes: self.classes.clone(),
            dim: self.dim,
            count: self.len(),
        };
        let meta = serde_json::to_vec(&meta).expect("plain struct");
        let mut out = Vec::with_capacity(20 + meta.len() + self.len() * (4 + 8 * self.dim));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for i in 0..self.len() {
            out.extend_from_slice(&(self.labels[i] as u32).to_le_bytes());
            for v in self.feature(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != DATASET_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let meta_len = usize::try_from(meta_len).map_err(|_| Error::Truncated("metadata length".into()))?;
        let meta: DatasetMeta = serde_json::from_slice(cur.take(meta_len)?)
            .map_err(|e| Error::Format(format!("metadata: {e}")))?;
        if meta.dim == 0 {
            return Err(Error::Format("zero dimension".into()));
        }
        let record = 4 + 8 * meta.dim;
        let expected = meta
            .count
            .checked_mul(record)
            .ok_or_else(|| Error::Format("sample count overflows".into()))?;
        let remaining = bytes.len() - cur.pos;
        if remaining < expected {
            return Err(Error::Truncated(format!(
                "{remaining} payload bytes for {} samples of {record} bytes",
                meta.count
            )));
        }
        if remaining > expected {
            return Err(Error::Format(format!("{} trailing bytes", remaining - expected)));
        }
        let mut features = Vec::with_capacity(meta.count * meta.dim);
        let mut labels = Vec::with_capacity(meta.count);
        for _ in 0..meta.count {
            let label = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            if label >= meta.classes.len() {
                return Err(Error::Format(format!("label {label} outside class list")));
            }
            labels.push(label);
            for _ in 0..meta.dim {
                features.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
        }
        let ds = Self {
            split: meta.split,
            classes: meta.classes,
            dim: meta.dim,
            features,
            labels,
        };
        ds.check_unit()?;
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    split: Split,
    classes: Vec<usize>,
    dim: usize,
    count: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("wanted {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn save_dataset(ds: &FewShotDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<FewShotDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FewShotDataset::from_bytes(&bytes)
}

/// A generated task: the three splits plus what produced them.
#[derive(Clone, Debug)]
pub struct Task {
    pub config: TaskConfig,
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub rotation: Tensor,
    pub prototypes: Tensor,
    pub train_base: FewShotDataset,
    pub test_base: FewShotDataset,
    pub test_new: FewShotDataset,
}

/// Modified Gram-Schmidt orthonormalization of the columns of `I + s·G`.
pub fn gap_rotation(dim: usize, strength: f64, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let mut m: Vec<f64> = (0..dim * dim)
        .map(|idx| {
            let eye = if idx / dim == idx % dim { 1.0 } else { 0.0 };
            eye + strength * rng.normal()
        })
        .collect();
    for j in 0..dim {
        for p in 0..j {
            let dot: f64 = (0..dim).map(|i| m[i * dim + j] * m[i * dim + p]).sum();
            for i in 0..dim {
                m[i * dim + j] -= dot * m[i * dim + p];
            }
        }
        let norm = (0..dim).map(|i| m[i * dim + j].powi(2)).sum::<f64>().sqrt();
        for i in 0..dim {
            m[i * dim + j] /= norm;
        }
    }
    Tensor::new(vec![dim, dim], m).expect("square")
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= norm;
    }
}

/// `normalize(R · w)` for each row `w` of `w_clip`.
pub fn prototypes(w_clip: &Tensor, rotation: &Tensor) -> Tensor {
    let d = w_clip.last_dim();
    let mut out = Vec::with_capacity(w_clip.len());
    for w in w_clip.rows() {
        let mut p: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| rotation.data()[i * d + j] * w[j]).sum())
            .collect();
        normalize(&mut p);
        out.extend(p);
    }
    Tensor::new(w_clip.shape().to_vec(), out).expect("same shape")
}

/// Zero-shot embeddings under the reference template, used as the source of
/// class prototypes.
pub fn reference_embeddings(encoder: &FrozenEncoder, vocab: &ClassVocabulary) -> Result<Tensor> {
    let reference = ClassVocabulary {
        class_tokens: vocab.class_tokens.clone(),
        template_ids: (1..=REFERENCE_TEMPLATE_LEN).collect(),
    };
    encoder.encode_templated(&reference)
}

/// Build the three splits of a task. Reads only frozen state.
pub fn generate_task(config: &TaskConfig, encoder: &FrozenEncoder, vocab: &ClassVocabulary) -> Result<Task> {
    config.validate()?;
    if vocab.num_classes() != config.num_classes {
        return Err(Error::contract(format!(
            "vocabulary has {} classes, task wants {}",
            vocab.num_classes(),
            config.num_classes
        )));
    }
    let w_ref = reference_embeddings(encoder, vocab)?;
    generate_task_from_embeddings(config, &w_ref)
}

/// [`generate_task`] given precomputed reference embeddings.
pub fn generate_task_from_embeddings(config: &TaskConfig, w_ref: &Tensor) -> Result<Task> {
    config.validate()?;
    if w_ref.rank() != 2 || w_ref.shape()[0] != config.num_classes {
        return Err(Error::contract("reference embeddings do not match the class count"));
    }
    let dim = w_ref.shape()[1];
    let rotation = gap_rotation(dim, config.gap_strength, config.rotation_seed());
    let protos = prototypes(w_ref, &rotation);
    let (base, new) = config.split_classes();
    let mut noise = SplitMix64::derive(config.task_seed, tags::SAMPLE_NOISE);

    let mut make = |split: Split, classes: &[usize], per_class: usize| -> Result<FewShotDataset> {
        let mut features = Vec::with_capacity(classes.len() * per_class * dim);
        let mut labels = Vec::with_capacity(classes.len() * per_class);
        for (local, &c) in classes.iter().enumerate() {
            for _ in 0..per_class {
                let mut x: Vec<f64> = protos
                    .row(c)
                    .iter()
                    .map(|p| p + config.noise_sigma * noise.normal())
                    .collect();
                if config.noise_sigma > 0.0 {
                    normalize(&mut x);
                }
                features.extend(x);
                labels.push(local);
            }
        }
        FewShotDataset::new(split, classes.to_vec(), dim, features, labels)
    };
    let train_base = make(Split::TrainBase, &base, config.shots_per_class)?;
    let test_base = make(Split::TestBase, &base, config.test_per_class)?;
    let test_new = make(Split::TestNew, &new, config.test_per_class)?;
    Ok(Task {
        config: config.clone(),
        base_classes: base,
        new_classes: new,
        rotation,
        prototypes: protos,
        train_base,
        test_base,
        test_new,
    })
}

/// Without-replacement minibatches; each epoch is a fresh permutation drawn
/// from `(run_seed, epoch)`, so batch `s` is a pure function of the step.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, run_seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::contract("cannot sample from an empty dataset"));
        }
        if batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        Ok(Self {
            len,
            batch_size: batch_size.min(len),
            seed: SplitMix64::derive(run_seed, tags::BATCHES).next_u64(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        SplitMix64::derive(self.seed, epoch as u64).shuffle(&mut order);
        order
    }

    pub fn batch(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (step / spe, step % spe);
        let order = self.epoch_order(epoch);
        let end = ((b + 1) * self.batch_size).min(self.len);
        order[b * self.batch_size..end].to_vec()
    }
}

/// One batch from `ds` at `step`.
pub fn sample_batch(ds: &FewShotDataset, batch_size: usize, run_seed: u64, step: usize) -> Result<(Tensor, Vec<usize>)> {
    let sampler = BatchSampler::new(ds.len(), batch_size, run_seed)?;
    Ok(ds.gather(&sampler.batch(step)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let mut data = Vec::new();
        for _ in 0..n {
            let mut r = rng.normal_vec(d, 1.0);
            normalize(&mut r);
            data.extend(r);
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn rotation_is_orthonormal() {
        for s in [0.0, 0.3, 5.0] {
            let r = gap_rotation(6, s, 11);
            for a in 0..6 {
                for b in 0..6 {
                    let dot: f64 = (0..6).map(|i| r.data()[i * 6 + a] * r.data()[i * 6 + b]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
        let eye = gap_rotation(3, 0.0, 1);
        assert_eq!(eye.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn noiseless_samples_are_prototypes() {
        let cfg = TaskConfig {
            num_classes: 4,
            noise_sigma: 0.0,
            ..TaskConfig::default()
        };
        let task = generate_task_from_embeddings(&cfg, &unit_rows(4, 5, 2)).unwrap();
        for ds in [&task.train_base, &task.test_base, &task.test_new] {
            for i in 0..ds.len() {
                let c = ds.classes[ds.labels()[i]];
                assert_eq!(ds.feature(i), task.prototypes.row(c));
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let cfg = TaskConfig::default();
        let (b, n) = cfg.split_classes();
        assert_eq!(b, (0..10).collect::<Vec<_>>());
        assert_eq!(n, (10..20).collect::<Vec<_>>());
        let task = generate_task_from_embeddings(&cfg, &unit_rows(20, 8, 3)).unwrap();
        assert_eq!(task.train_base.label_histogram(), vec![16; 10]);
        assert!(task.train_base.classes.iter().all(|c| !task.new_classes.contains(c)));
    }

    #[test]
    fn negative_sigma_rejected() {
        let cfg = TaskConfig {
            noise_sigma: -0.1,
            ..TaskConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn sampler_epochs() {
        let s = BatchSampler::new(10, 4, 5).unwrap();
        assert_eq!(s.steps_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|b| s.batch(b)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(s.epoch_order(0), s.epoch_order(1));
        assert!(BatchSampler::new(0, 4, 5).is_err());
        assert!(BatchSampler::new(3, 0, 5).is_err());
        let full = BatchSampler::new(7, 7, 1).unwrap().batch(0);
        let mut sorted = full.clone();
        sorted.sort();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn file_errors() {
        let ds = generate_task_from_embeddings(
            &TaskConfig {
                num_classes: 2,
                shots_per_class: 2,
                ..TaskConfig::default()
            },
            &unit_rows(2, 3, 4),
        )
        .unwrap()
        .train_base;
        let bytes = ds.to_bytes();
        assert_eq!(FewShotDataset::from_bytes(&bytes).unwrap(), ds);

        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(matches!(FewShotDataset::from_bytes(&bad_version), Err(Error::Version { found: 9, .. })));

        let mut bad_len = bytes.clone();
        bad_len[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(FewShotDataset::from_bytes(&bad_len), Err(Error::Truncated(_))));

        assert!(matches!(
            FewShotDataset::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));

        let mut not_unit = bytes.clone();
        let last = not_unit.len() - 8;
        not_unit[last..].copy_from_slice(&5.0f64.to_le_bytes());
        assert!(matches!(FewShotDataset::from_bytes(&not_unit), Err(Error::NonUnit { .. })));
    }
}
