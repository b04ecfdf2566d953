//! Fusion head and the full image + metadata classifier.

use serde::{Deserialize, Serialize};

use crate::cell::{EncoderConfig, ImageEncoder};
use crate::error::{Error, Result};
use crate::metadata::{MetadataEncoder, MetadataSchema};
use crate::nn::{Ctx, Linear, ParamId, ParamStore};
use crate::primitives::OpKind;
use crate::tensor::{Float, Tensor, Var};

/// Dropout on the concatenated embeddings followed by one linear layer.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub dropout: f32,
    pub classifier: Linear,
}

impl FusionHead {
    pub fn new<T: Float>(store: &mut ParamStore<T>, d_in: usize, num_classes: usize, dropout: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(Self {
            dropout,
            classifier: Linear::new(store, "head", d_in, num_classes, true)?,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, img: Var, meta: Option<Var>) -> Result<Var> {
        let width = ctx.tape.shape(img)[1] + meta.map_or(0, |m| ctx.tape.shape(m)[1]);
        if width != self.classifier.d_in {
            return Err(Error::shape(
                "fuse_and_classify",
                "fused width",
                format!("head expects {}, got {width}", self.classifier.d_in),
            ));
        }
        let x = match meta {
            Some(m) => ctx.tape.concat(&[img, m], 1)?,
            None => img,
        };
        let x = ctx.dropout(x, self.dropout)?;
        self.classifier.forward(ctx, x)
    }
}

/// Network-level hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub use_metadata: bool,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            use_metadata: true,
            dropout: 0.2,
        }
    }
}

/// Searchable super-net or a fixed network with one operation per edge.
#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Search { theta_std: f32 },
    Fixed(Vec<[OpKind; 3]>),
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub encoder: ImageEncoder,
    pub metadata: Option<MetadataEncoder>,
    pub head: FusionHead,
}

impl Network {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        schema: &MetadataSchema,
        num_classes: usize,
        arch: &Architecture,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        let encoder = match arch {
            Architecture::Search { theta_std } => ImageEncoder::searchable(store, &config.encoder, *theta_std)?,
            Architecture::Fixed(cells) => ImageEncoder::fixed(store, &config.encoder, cells)?,
        };
        let embed = config.encoder.embed_dim;
        let metadata = if config.use_metadata {
            Some(MetadataEncoder::new(store, schema, embed)?)
        } else {
            None
        };
        let d_in = if metadata.is_some() { 2 * embed } else { embed };
        let head = FusionHead::new(store, d_in, num_classes, config.dropout)?;
        Ok(Self {
            config: config.clone(),
            num_classes,
            encoder,
            metadata,
            head,
        })
    }

    /// Logits for a batch. `meta` is row-major `N x F` indices and is
    /// ignored when metadata is disabled.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, images: &Tensor<T>, meta: &[usize]) -> Result<Var> {
        self.forward_with_threshold(ctx, images, meta, None)
    }

    pub fn forward_with_threshold<T: Float>(
        &self,
        ctx: &mut Ctx<T>,
        images: &Tensor<T>,
        meta: &[usize],
        threshold: Option<f64>,
    ) -> Result<Var> {
        let x = ctx.tape.constant(images.clone());
        let img = self.encoder.forward_with_threshold(ctx, x, threshold)?;
        let m = match &self.metadata {
            Some(enc) => {
                let n = images.shape()[0];
                if meta.len() != n * enc.schema.len() {
                    return Err(Error::shape(
                        "forward",
                        "metadata rows",
                        format!("{} indices for {n} rows of {} fields", meta.len(), enc.schema.len()),
                    ));
                }
                Some(enc.forward(ctx, meta)?)
            }
            None => None,
        };
        self.head.forward(ctx, img, m)
    }

    pub fn arch_params(&self) -> Vec<ParamId> {
        self.encoder.arch_params()
    }

    pub fn is_search(&self) -> bool {
        !self.arch_params().is_empty()
    }
}
