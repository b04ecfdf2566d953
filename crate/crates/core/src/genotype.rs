//! Discrete architectures: argmax selection, canonical JSON form, fixed-model
//! construction and weight transplanting.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metadata::MetadataSchema;
use crate::model::{Architecture, ModelConfig, Network};
use crate::nn::{ParamKind, ParamStore};
use crate::primitives::{softmax, Edge, OpKind, NUM_OPS};
use crate::tensor::Float;

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGenotype {
    pub edge_n1: OpKind,
    pub edge_n2a: OpKind,
    pub edge_n2b: OpKind,
}

impl CellGenotype {
    pub fn ops(&self) -> [OpKind; 3] {
        [self.edge_n1, self.edge_n2a, self.edge_n2b]
    }

    pub fn from_ops(ops: [OpKind; 3]) -> Self {
        Self {
            edge_n1: ops[0],
            edge_n2a: ops[1],
            edge_n2b: ops[2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// SHA-256 of the checkpoint file the genotype was taken from.
    pub source_checkpoint_sha256: Option<String>,
    /// Selection weights per cell and edge at discretization time.
    pub alphas: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub schema_version: u32,
    pub cells: Vec<CellGenotype>,
    pub model: ModelConfig,
    pub metadata_schema: MetadataSchema,
    pub num_classes: usize,
    pub provenance: Provenance,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Picks the highest-weight operation on every edge of a super-net.
pub fn discretize<T: Float>(net: &Network, store: &ParamStore<T>) -> Result<Genotype> {
    let mut cells = Vec::with_capacity(net.encoder.cells.len());
    let mut alphas = Vec::with_capacity(net.encoder.cells.len());
    for (ci, cell) in net.encoder.cells.iter().enumerate() {
        let mut ops = [OpKind::Z; 3];
        let mut cell_alpha = Vec::with_capacity(3);
        for (e, edge) in cell.edges.iter().enumerate() {
            let Edge::Mixed(m) = edge else {
                return Err(Error::invalid(
                    "discretize",
                    format!("cell {ci} edge {e} has no architecture logits"),
                ));
            };
            let theta = store.value(m.theta).data();
            if theta.len() != NUM_OPS {
                return Err(Error::invalid(
                    "discretize",
                    format!("cell {ci} edge {e}: {} logits", theta.len()),
                ));
            }
            let a = softmax(theta);
            ops[e] = OpKind::from_index(argmax(&a)).expect("index below NUM_OPS");
            cell_alpha.push(a);
        }
        cells.push(CellGenotype::from_ops(ops));
        alphas.push(cell_alpha);
    }
    Ok(Genotype {
        schema_version: GENOTYPE_SCHEMA_VERSION,
        cells,
        model: net.config.clone(),
        metadata_schema: net.metadata.as_ref().map(|m| m.schema.clone()).unwrap_or_default(),
        num_classes: net.num_classes,
        provenance: Provenance {
            source_checkpoint_sha256: None,
            alphas,
        },
    })
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != GENOTYPE_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "genotype schema version {} (supported: {GENOTYPE_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.cells.len() != self.model.encoder.cells {
            return Err(Error::Format(format!(
                "genotype lists {} cells, encoder config says {}",
                self.cells.len(),
                self.model.encoder.cells
            )));
        }
        self.model.encoder.validate()
    }

    pub fn cell_ops(&self) -> Vec<[OpKind; 3]> {
        self.cells.iter().map(CellGenotype::ops).collect()
    }

    /// Canonical text: sorted keys, two-space indentation, trailing newline.
    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let g: Genotype = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_canonical_json()?.as_bytes())))
    }
}

/// Serializes with object keys in sorted order.
pub fn canonical_json<S: Serialize>(value: &S) -> Result<String> {
    // Going through text keeps `f32` fields at their shortest decimal form.
    let v: serde_json::Value = serde_json::from_str(&serde_json::to_string(value)?)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Builds the fixed network described by a genotype.
pub fn build_fixed<T: Float>(g: &Genotype, store: &mut ParamStore<T>) -> Result<Network> {
    g.validate()?;
    Network::new(
        store,
        &g.model,
        &g.metadata_schema,
        g.num_classes,
        &Architecture::Fixed(g.cell_ops()),
    )
}

/// Copies every weight and buffer of `dst` from the identically named tensor
/// of `src`.
pub fn transplant<T: Float>(src: &ParamStore<T>, dst: &mut ParamStore<T>) -> Result<()> {
    let ids: Vec<_> = dst
        .iter()
        .filter(|(_, p)| p.kind != ParamKind::Arch)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let name = dst.param(id).name.clone();
        let sid = src
            .find(&name)
            .ok_or_else(|| Error::invalid("transplant", format!("source has no tensor `{name}`")))?;
        let value = src.value(sid);
        if value.shape() != dst.value(id).shape() {
            return Err(Error::shape(
                "transplant",
                name,
                format!("{:?} vs {:?}", value.shape(), dst.value(id).shape()),
            ));
        }
        *dst.value_mut(id) = value.clone();
    }
    Ok(())
}

/// Logit value used for non-selected operations by [`set_one_hot_theta`].
pub const ONE_HOT_OFF: f64 = -1e4;

/// Overwrites every architecture logit vector so that softmax is exactly
/// one-hot on the genotype's choice.
pub fn set_one_hot_theta<T: Float>(net: &Network, store: &mut ParamStore<T>, g: &Genotype) -> Result<()> {
    if g.cells.len() != net.encoder.cells.len() {
        return Err(Error::invalid("one_hot_theta", "cell count mismatch"));
    }
    for (cell, cg) in net.encoder.cells.iter().zip(&g.cells) {
        for (edge, op) in cell.edges.iter().zip(cg.ops()) {
            if let Some(theta) = edge.theta() {
                let data = store.value_mut(theta).data_mut();
                for (k, v) in data.iter_mut().enumerate() {
                    *v = if k == op.index() { T::zero() } else { T::of(ONE_HOT_OFF) };
                }
            }
        }
    }
    Ok(())
}
