//! Run configuration: one JSON document covering data, model, training and
//! the comparison procedure. Missing fields take their defaults and unknown
//! fields are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use cellnas::data::SyntheticTaskSpec;
use cellnas::genotype::canonical_json;
use cellnas::model::ModelConfig;
use cellnas::pipeline::PipelineConfig;
use cellnas::trainer::TrainConfig;
use cellnas::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub compare: CompareConfig,
    pub eval: EvalConfig,
}

/// Exactly one source; a generated task with default settings when neither
/// is given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticTaskSpec>,
    pub directory: Option<DirectoryConfig>,
    /// Classes with fewer training samples are merged into `Other`.
    pub group_threshold: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectoryConfig {
    pub path: PathBuf,
    /// Label column of `metadata.csv`.
    pub target: String,
    pub image_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub seeds: Vec<u64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    #[default]
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: EvalSplit,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub metadata: Option<bool>,
    pub theta_on_val: Option<bool>,
}

impl RunConfig {
    /// Reads, applies overrides, resolves defaults and validates.
    pub fn load(path: Option<&Path>, overrides: Overrides) -> Result<Self> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.apply(overrides);
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            if let Some(s) = self.data.synthetic.as_mut() {
                s.seed = seed;
            }
        }
        if let Some(m) = o.metadata {
            self.model.use_metadata = m;
        }
        if let Some(t) = o.theta_on_val {
            self.train.theta_on_val = t;
        }
    }

    /// Fills the implicit data source and checks every section.
    pub fn resolve(&mut self) -> Result<()> {
        match (&self.data.synthetic, &self.data.directory) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "data: set either `synthetic` or `directory`, not both".into(),
                ))
            }
            (None, None) => {
                self.data.synthetic = Some(SyntheticTaskSpec {
                    seed: self.train.seed,
                    ..Default::default()
                })
            }
            _ => {}
        }
        let (size, channels) = match (&self.data.synthetic, &self.data.directory) {
            (Some(s), _) => {
                s.validate()?;
                (s.image_size, 1)
            }
            (_, Some(d)) => {
                if d.image_size == 0 || d.channels == 0 {
                    return Err(Error::Config(
                        "data.directory: image_size and channels must be positive".into(),
                    ));
                }
                (d.image_size, d.channels)
            }
            _ => unreachable!("a source was filled in above"),
        };
        let enc = &self.model.encoder;
        if enc.image_size != size {
            return Err(Error::Config(format!(
                "model.encoder.image_size: {} differs from the data image size {size}",
                enc.image_size
            )));
        }
        if enc.in_channels != channels {
            return Err(Error::Config(format!(
                "model.encoder.in_channels: {} differs from the data channel count {channels}",
                enc.in_channels
            )));
        }
        if let Some(t) = self.data.group_threshold {
            if t <= 0 {
                return Err(Error::Config(format!("data.group_threshold: {t} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!(
                "model.dropout: {} outside [0, 1)",
                self.model.dropout
            )));
        }
        enc.validate()?;
        self.train.validate()?;
        self.pipeline.validate()?;
        if self.compare.seeds.is_empty() {
            return Err(Error::Config("compare.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }
}
