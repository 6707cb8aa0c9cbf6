//! Synthetic distortion benchmark: procedural content, a distortion bank,
//! proxy quality labels and an on-disk dataset format.
//!
//! The benchmark has two parts. The meta-training part distorts fresh
//! content with the training distortion types. The evaluation part uses
//! held-out types on unseen content and is split into a train pool and a
//! test pool by content, so no pristine source lands in both.

pub mod content;
pub mod distort;
pub mod io;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use content::{gen_content, ContentClass};
pub use distort::{apply_distortion, proxy_mos, DistortionSpec, DistortionType};
pub use io::{read_dataset, write_dataset};

use crate::image::Image;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("content class {0} out of range 0..9")]
    ContentClass(usize),
    #[error("distortion type {0} out of range 0..8")]
    DistortionType(usize),
    #[error("severity {0} outside [0, 1]")]
    Severity(f64),
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("truncated image file: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("image file holds {images} images but the manifest lists {records}")]
    CountMismatch { images: usize, records: usize },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    MetaTrain,
    TrainPool,
    Test,
}

/// One manifest entry. `seed` is the content seed; together with
/// `content_class` it identifies the pristine source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: u32,
    pub content_class: ContentClass,
    pub distortion_type: DistortionType,
    pub severity: f64,
    pub y: f64,
    pub seed: u64,
    pub split: Split,
}

impl ImageRecord {
    pub fn content_key(&self) -> (ContentClass, u64) {
        (self.content_class, self.seed)
    }

    pub fn spec(&self) -> DistortionSpec {
        DistortionSpec {
            kind: self.distortion_type,
            severity: self.severity,
        }
    }

    fn noise_seed(&self) -> u64 {
        seed::derive(
            self.seed,
            &[self.distortion_type.id() as u64, self.severity.to_bits()],
        )
    }

    /// Regenerates the image this record describes.
    pub fn render(&self) -> Result<Image, SynthError> {
        let pristine = gen_content(self.content_class, self.seed);
        apply_distortion(&pristine, &self.spec(), self.noise_seed())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.image_id) {
                return Err(SynthError::Manifest(format!("duplicate image id {}", r.image_id)));
            }
            if !(0.0..=1.0).contains(&r.y) {
                return Err(SynthError::Manifest(format!("image {} has y = {}", r.image_id, r.y)));
            }
            if !(0.0..=1.0).contains(&r.severity) {
                return Err(SynthError::Severity(r.severity));
            }
        }
        Ok(())
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Records with their images, in manifest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn materialize(manifest: DatasetManifest) -> Result<Self, SynthError> {
        manifest.validate()?;
        let images = manifest
            .records
            .iter()
            .map(ImageRecord::render)
            .collect::<Result<_, _>>()?;
        Ok(Self { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indices of records in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.manifest.records[i].split == split)
            .collect()
    }

    pub fn record(&self, i: usize) -> &ImageRecord {
        &self.manifest.records[i]
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub meta_types: Vec<usize>,
    pub eval_types: Vec<usize>,
    pub meta_contents_per_class: usize,
    pub eval_contents_per_class: usize,
    pub meta_severities: Vec<f64>,
    pub eval_severities: Vec<f64>,
    pub train_fraction: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            meta_types: (0..6).collect(),
            eval_types: vec![6, 7],
            meta_contents_per_class: 10,
            eval_contents_per_class: 10,
            meta_severities: vec![0.25, 0.5, 0.75, 1.0],
            eval_severities: vec![0.25, 0.5, 0.75, 1.0],
            train_fraction: 0.8,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for &t in self.meta_types.iter().chain(&self.eval_types) {
            DistortionType::from_id(t)?;
        }
        let meta: BTreeSet<_> = self.meta_types.iter().collect();
        if meta.len() != self.meta_types.len() {
            return Err(SynthError::Config("meta_types has duplicates".into()));
        }
        if let Some(t) = self.eval_types.iter().find(|t| meta.contains(t)) {
            return Err(SynthError::Config(format!(
                "distortion type {t} is in both meta_types and eval_types"
            )));
        }
        for &s in self.meta_severities.iter().chain(&self.eval_severities) {
            if !(0.0..=1.0).contains(&s) {
                return Err(SynthError::Severity(s));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(SynthError::Config(format!(
                "train_fraction {} must lie strictly between 0 and 1",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn meta_types(&self) -> Vec<DistortionType> {
        self.meta_types.iter().map(|&t| DistortionType::ALL[t]).collect()
    }

    pub fn eval_types(&self) -> Vec<DistortionType> {
        self.eval_types.iter().map(|&t| DistortionType::ALL[t]).collect()
    }
}

const META_DOMAIN: u64 = 1;
const EVAL_DOMAIN: u64 = 2;
const SPLIT_DOMAIN: u64 = 3;

fn content_seeds(base: u64, domain: u64, per_class: usize) -> Vec<(ContentClass, u64)> {
    let mut out = Vec::with_capacity(9 * per_class);
    for class in ContentClass::ALL {
        for k in 0..per_class {
            out.push((class, seed::derive(base, &[domain, class.id() as u64, k as u64])));
        }
    }
    out
}

fn push_records(
    out: &mut Vec<ImageRecord>,
    contents: &[(ContentClass, u64)],
    types: &[DistortionType],
    severities: &[f64],
    split: impl Fn((ContentClass, u64)) -> Split,
) {
    for &(class, content_seed) in contents {
        for &kind in types {
            for &severity in severities {
                let spec = DistortionSpec { kind, severity };
                out.push(ImageRecord {
                    image_id: out.len() as u32,
                    content_class: class,
                    distortion_type: kind,
                    severity,
                    y: proxy_mos(&spec),
                    seed: content_seed,
                    split: split((class, content_seed)),
                });
            }
        }
    }
}

/// Builds the meta-training and evaluation manifests. Image ids are unique
/// across both.
pub fn build_benchmark(
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), SynthError> {
    config.validate()?;
    let meta_contents = content_seeds(seed, META_DOMAIN, config.meta_contents_per_class);
    let mut eval_contents = content_seeds(seed, EVAL_DOMAIN, config.eval_contents_per_class);
    let seen: BTreeSet<_> = meta_contents.iter().collect();
    if eval_contents.iter().any(|c| seen.contains(c)) {
        return Err(SynthError::Config("evaluation content collides with meta content".into()));
    }

    let mut records = Vec::new();
    push_records(
        &mut records,
        &meta_contents,
        &config.meta_types(),
        &config.meta_severities,
        |_| Split::MetaTrain,
    );
    let meta = DatasetManifest { records };

    eval_contents.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, &[SPLIT_DOMAIN])));
    let n_train = (config.train_fraction * eval_contents.len() as f64).round() as usize;
    let train: BTreeSet<_> = eval_contents[..n_train].iter().copied().collect();
    eval_contents.sort();
    let mut records = Vec::new();
    push_records(
        &mut records,
        &eval_contents,
        &config.eval_types(),
        &config.eval_severities,
        |c| {
            if train.contains(&c) {
                Split::TrainPool
            } else {
                Split::Test
            }
        },
    );
    let offset = meta.records.len() as u32;
    for r in &mut records {
        r.image_id += offset;
    }
    Ok((meta, DatasetManifest { records }))
}

/// Full benchmark as one dataset: meta-training records, then evaluation
/// records.
pub fn generate_benchmark(config: &BenchmarkConfig, seed: u64) -> Result<Dataset, SynthError> {
    let (meta, eval) = build_benchmark(config, seed)?;
    let mut records = meta.records;
    records.extend(eval.records);
    Dataset::materialize(DatasetManifest { records })
}
