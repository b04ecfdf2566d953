//! Datasets: in-memory samples, hash-based splits, vocabulary encoding and
//! mini-batch assembly.

mod directory;
mod grouping;
mod synth;

pub use directory::{load_directory, LoadReport};
pub use grouping::{group_rare_classes, LabelMap, OTHER};
pub use synth::{generate, oracle_accuracy, oracle_predict, template, SignalMode, SyntheticTaskSpec};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metadata::MetadataSchema;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    /// Raw metadata values in `Dataset::field_names` order.
    pub meta: Vec<String>,
    /// `C x H x W` pixels.
    pub image: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    pub field_names: Vec<String>,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 80/10/10 split decided by a salted hash of the sample id.
pub fn split_of(id: &str, seed: u64) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    let bucket = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % 100;
    match bucket {
        0..80 => Split::Train,
        80..90 => Split::Val,
        _ => Split::Test,
    }
}

/// Stable 64-bit seed for per-sample randomness.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"sample");
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split_indices(&self, seed: u64, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| split_of(&self.samples[i].id, seed) == split)
            .collect()
    }

    /// Per-class sample counts over the given indices.
    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &i in indices {
            counts[self.samples[i].label] += 1;
        }
        counts
    }

    /// Builds the vocabulary from the training split and encodes all splits.
    pub fn prepare(&self, seed: u64) -> Result<Prepared> {
        self.prepare_with(seed, None)
    }

    /// Like [`Dataset::prepare`] but encodes with a given vocabulary, as
    /// needed when evaluating a trained model on freshly loaded data.
    pub fn prepare_with(&self, seed: u64, schema: Option<&MetadataSchema>) -> Result<Prepared> {
        let schema = match schema {
            Some(s) => {
                let names: Vec<&str> = s.fields.iter().map(|f| f.name.as_str()).collect();
                if names != self.field_names.iter().map(String::as_str).collect::<Vec<_>>() {
                    return Err(Error::Config(format!(
                        "metadata fields {names:?} do not match dataset fields {:?}",
                        self.field_names
                    )));
                }
                s.clone()
            }
            None => {
                let train_idx = self.split_indices(seed, Split::Train);
                let rows: Vec<Vec<String>> = train_idx.iter().map(|&i| self.samples[i].meta.clone()).collect();
                MetadataSchema::from_rows(&self.field_names, &rows, None)?.0
            }
        };
        let encode = |split: Split| {
            let idx = self.split_indices(seed, split);
            EncodedSplit::new(self, &schema, &idx)
        };
        Ok(Prepared {
            train: encode(Split::Train),
            val: encode(Split::Val),
            test: encode(Split::Test),
            schema,
            class_names: self.class_names.clone(),
            image_shape: self.image_shape,
        })
    }

    /// Manifest describing splits, counts and the label map.
    pub fn manifest(
        &self,
        seed: u64,
        source: &str,
        schema: &MetadataSchema,
        label_map: Option<&LabelMap>,
    ) -> DatasetManifest {
        let ids = |split| {
            self.split_indices(seed, split)
                .into_iter()
                .map(|i| self.samples[i].id.clone())
                .collect::<Vec<_>>()
        };
        let counts = |split| self.class_counts(&self.split_indices(seed, split));
        DatasetManifest {
            seed,
            source: source.to_string(),
            image_shape: self.image_shape,
            class_names: self.class_names.clone(),
            train_ids: ids(Split::Train),
            val_ids: ids(Split::Val),
            test_ids: ids(Split::Test),
            train_counts: counts(Split::Train),
            val_counts: counts(Split::Val),
            test_counts: counts(Split::Test),
            schema: schema.clone(),
            label_map: label_map.cloned(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub source: String,
    pub image_shape: [usize; 3],
    pub class_names: Vec<String>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub schema: MetadataSchema,
    pub label_map: Option<LabelMap>,
}

/// One split with metadata mapped to vocabulary indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSplit {
    pub image_shape: [usize; 3],
    pub images: Vec<f32>,
    /// Row-major `N x F`.
    pub meta: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_fields: usize,
}

/// Tensors for one mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub meta: Vec<usize>,
    pub labels: Vec<usize>,
}

impl EncodedSplit {
    fn new(ds: &Dataset, schema: &MetadataSchema, idx: &[usize]) -> Self {
        let mut images = Vec::with_capacity(idx.len() * ds.image_shape.iter().product::<usize>());
        let mut meta = Vec::with_capacity(idx.len() * schema.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = &ds.samples[i];
            images.extend_from_slice(&s.image);
            let raw: Vec<&str> = s.meta.iter().map(String::as_str).collect();
            meta.extend(schema.encode_row(&raw));
            labels.push(s.label);
        }
        Self {
            image_shape: ds.image_shape,
            images,
            meta,
            labels,
            num_fields: schema.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let per = self.image_shape.iter().product::<usize>();
        let f = self.num_fields;
        let mut images = Vec::with_capacity(indices.len() * per);
        let mut meta = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            images.extend_from_slice(&self.images[i * per..][..per]);
            meta.extend_from_slice(&self.meta[i * f..][..f]);
        }
        let [c, h, w] = self.image_shape;
        Batch {
            images: Tensor::new(vec![indices.len(), c, h, w], images).expect("batch shape"),
            meta,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches covering the split in order, the last one possibly short.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        (0..self.len())
            .step_by(batch_size.max(1))
            .map(move |s| self.batch(&(s..(s + batch_size).min(self.len())).collect::<Vec<_>>()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub schema: MetadataSchema,
    pub class_names: Vec<String>,
    pub image_shape: [usize; 3],
    pub train: EncodedSplit,
    pub val: EncodedSplit,
    pub test: EncodedSplit,
}

impl Prepared {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn check_nonempty(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::Config(format!(
                "dataset too small: {} train and {} validation samples",
                self.train.len(),
                self.val.len()
            )));
        }
        Ok(())
    }
}
