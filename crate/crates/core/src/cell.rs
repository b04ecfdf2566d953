//! Searchable cell and the image encoder that stacks them.
//!
//! A cell has two intermediate nodes: `z1 = e1(x)` and
//! `z2 = e2a(x) + e2b(z1)`. The concatenation `[z1, z2]` is projected back to
//! `C` channels by a 1x1 convolution followed by batch norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, Linear, ParamId, ParamStore};
use crate::primitives::{Edge, MixedEdge, OpConfig, OpKind, PrimitiveOp};
use crate::tensor::{ConvSpec, Float, Var};

/// Image encoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: usize,
    pub cells: usize,
    /// Indices of cells that run at stride 2.
    pub downsample_cells: Vec<usize>,
    pub embed_dim: usize,
    pub se_reduction: usize,
    pub prune_threshold: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 32,
            channels: 16,
            cells: 3,
            downsample_cells: Vec::new(),
            embed_dim: 256,
            se_reduction: 4,
            prune_threshold: crate::primitives::PRUNE_THRESHOLD,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.channels == 0 || self.image_size == 0 || self.embed_dim == 0 {
            return bad("encoder: in_channels, channels, image_size and embed_dim must be positive".into());
        }
        if self.se_reduction == 0 || !self.channels.is_multiple_of(self.se_reduction) {
            return bad(format!(
                "encoder.se_reduction: channels {} not divisible by {}",
                self.channels, self.se_reduction
            ));
        }
        if let Some(&i) = self.downsample_cells.iter().find(|&&i| i >= self.cells) {
            return bad(format!("encoder.downsample_cells: index {i} >= cells {}", self.cells));
        }
        if !(0.0..1.0).contains(&self.prune_threshold) {
            return bad("encoder.prune_threshold must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn cell_stride(&self, i: usize) -> usize {
        if self.downsample_cells.contains(&i) {
            2
        } else {
            1
        }
    }

    fn op_config(&self) -> OpConfig {
        OpConfig {
            se_reduction: self.se_reduction,
        }
    }
}

pub const EDGE_NAMES: [&str; 3] = ["n1", "n2a", "n2b"];

#[derive(Clone, Debug)]
pub struct Cell {
    /// Edges into node 1, node 2 from the input, node 2 from node 1.
    pub edges: [Edge; 3],
    pub project: Conv,
    pub bn: BatchNorm,
    pub channels: usize,
    pub stride: usize,
}

impl Cell {
    pub fn searchable<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        stride: usize,
        cfg: &EncoderConfig,
        theta_std: f32,
    ) -> Result<Self> {
        let mk = |store: &mut ParamStore<T>, edge: &str, s: usize| {
            MixedEdge::new(
                store,
                &format!("{name}.{edge}"),
                channels,
                channels,
                s,
                cfg.op_config(),
                theta_std,
                cfg.prune_threshold,
            )
            .map(Edge::Mixed)
        };
        let edges = [
            mk(store, "n1", stride)?,
            mk(store, "n2a", stride)?,
            mk(store, "n2b", 1)?,
        ];
        Self::with_edges(store, name, channels, stride, edges)
    }

    pub fn fixed<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        stride: usize,
        cfg: &EncoderConfig,
        ops: [OpKind; 3],
    ) -> Result<Self> {
        let strides = [stride, stride, 1];
        let mut edges = Vec::with_capacity(3);
        for ((edge, kind), s) in EDGE_NAMES.iter().zip(ops).zip(strides) {
            let op = PrimitiveOp::new(
                store,
                &format!("{name}.{edge}"),
                kind,
                channels,
                channels,
                s,
                cfg.op_config(),
            )?;
            edges.push(Edge::Fixed(op));
        }
        let edges: [Edge; 3] = edges.try_into().expect("three edges");
        Self::with_edges(store, name, channels, stride, edges)
    }

    fn with_edges<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        stride: usize,
        edges: [Edge; 3],
    ) -> Result<Self> {
        Ok(Self {
            edges,
            project: Conv::new(
                store,
                &format!("{name}.project"),
                2 * channels,
                channels,
                1,
                ConvSpec::default(),
            )?,
            bn: BatchNorm::new(store, &format!("{name}.project_bn"), channels)?,
            channels,
            stride,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.forward_with_threshold(ctx, x, None)
    }

    /// Forward pass; `threshold` overrides every mixed edge's pruning level.
    pub fn forward_with_threshold<T: Float>(&self, ctx: &mut Ctx<T>, x: Var, threshold: Option<f64>) -> Result<Var> {
        let c = ctx.tape.shape(x).get(1).copied();
        if c != Some(self.channels) {
            return Err(Error::shape(
                "cell",
                "channels",
                format!(
                    "expected {} input channels, got shape {:?}",
                    self.channels,
                    ctx.tape.shape(x)
                ),
            ));
        }
        let run = |edge: &Edge, ctx: &mut Ctx<T>, v: Var| match threshold {
            Some(t) => edge.forward_with_threshold(ctx, v, t),
            None => edge.forward(ctx, v),
        };
        let z1 = run(&self.edges[0], ctx, x)?;
        let a = run(&self.edges[1], ctx, x)?;
        let b = run(&self.edges[2], ctx, z1)?;
        let z2 = ctx.tape.add(a, b)?;
        let cat = ctx.tape.concat(&[z1, z2], 1)?;
        let y = self.project.forward(ctx, cat)?;
        self.bn.forward(ctx, y)
    }
}

/// Stem, stacked cells, global pooling and a linear map to the embedding.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: EncoderConfig,
    pub stem: Conv,
    pub stem_bn: BatchNorm,
    pub cells: Vec<Cell>,
    pub embed: Linear,
}

impl ImageEncoder {
    pub fn searchable<T: Float>(store: &mut ParamStore<T>, cfg: &EncoderConfig, theta_std: f32) -> Result<Self> {
        cfg.validate()?;
        Self::build(store, cfg, |store, i, name| {
            Cell::searchable(store, name, cfg.channels, cfg.cell_stride(i), cfg, theta_std)
        })
    }

    pub fn fixed<T: Float>(store: &mut ParamStore<T>, cfg: &EncoderConfig, cells: &[[OpKind; 3]]) -> Result<Self> {
        cfg.validate()?;
        if cells.len() != cfg.cells {
            return Err(Error::Config(format!(
                "genotype has {} cells, encoder expects {}",
                cells.len(),
                cfg.cells
            )));
        }
        Self::build(store, cfg, |store, i, name| {
            Cell::fixed(store, name, cfg.channels, cfg.cell_stride(i), cfg, cells[i])
        })
    }

    fn build<T: Float>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        mut cell: impl FnMut(&mut ParamStore<T>, usize, &str) -> Result<Cell>,
    ) -> Result<Self> {
        let stem = Conv::new(
            store,
            "stem",
            cfg.in_channels,
            cfg.channels,
            3,
            ConvSpec {
                padding: 1,
                ..ConvSpec::default()
            },
        )?;
        let stem_bn = BatchNorm::new(store, "stem_bn", cfg.channels)?;
        let cells = (0..cfg.cells)
            .map(|i| cell(store, i, &format!("cell{i}")))
            .collect::<Result<Vec<_>>>()?;
        let embed = Linear::new(store, "embed", cfg.channels, cfg.embed_dim, true)?;
        Ok(Self {
            config: cfg.clone(),
            stem,
            stem_bn,
            cells,
            embed,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, images: Var) -> Result<Var> {
        self.forward_with_threshold(ctx, images, None)
    }

    pub fn forward_with_threshold<T: Float>(
        &self,
        ctx: &mut Ctx<T>,
        images: Var,
        threshold: Option<f64>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let expected = [cfg.in_channels, cfg.image_size, cfg.image_size];
        let shape = ctx.tape.shape(images);
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::shape(
                "encode_image",
                "input",
                format!("expected N x {expected:?}, got {shape:?}"),
            ));
        }
        let x = self.stem.forward(ctx, images)?;
        let x = self.stem_bn.forward(ctx, x)?;
        let mut x = ctx.tape.relu(x);
        for cell in &self.cells {
            x = cell.forward_with_threshold(ctx, x, threshold)?;
        }
        let pooled = ctx.tape.global_avg_pool(x)?;
        self.embed.forward(ctx, pooled)
    }

    /// Architecture logits in cell, then edge order.
    pub fn arch_params(&self) -> Vec<ParamId> {
        self.cells
            .iter()
            .flat_map(|c| c.edges.iter().filter_map(Edge::theta))
            .collect()
    }

    /// Spatial size of the input to each cell.
    pub fn cell_input_sizes(&self) -> Vec<usize> {
        let mut h = self.stem.out_size(self.config.image_size);
        self.cells
            .iter()
            .map(|c| {
                let cur = h;
                h = h.div_ceil(c.stride);
                cur
            })
            .collect()
    }
}
