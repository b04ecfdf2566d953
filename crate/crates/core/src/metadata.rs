//! Categorical metadata: vocabularies, the schema, and the embedding encoder.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, ParamId, ParamKind, ParamStore};
use crate::tensor::{Float, Var};

/// Index reserved in every field for missing or unseen values.
pub const UNKNOWN: usize = 0;

/// One categorical field. Index 0 is UNKNOWN; `values[i]` has index `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub values: Vec<String>,
    pub embed_dim: usize,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, values: Vec<String>) -> Self {
        let vocab = values.len() + 1;
        Self {
            name: name.into(),
            values,
            embed_dim: embed_dim_for(vocab),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len() + 1
    }

    /// Exact-match lookup; anything not in the vocabulary is UNKNOWN.
    pub fn index_of(&self, raw: &str) -> usize {
        self.values
            .binary_search_by(|v| v.as_str().cmp(raw))
            .map_or(UNKNOWN, |i| i + 1)
    }
}

/// `min(16, ceil(V / 2))`.
pub fn embed_dim_for(vocab: usize) -> usize {
    vocab.div_ceil(2).min(16)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataSchema {
    pub fields: Vec<FieldSpec>,
}

impl MetadataSchema {
    /// Builds vocabularies from training rows. A column named like the
    /// prediction target is left out and reported in the second return value.
    pub fn from_rows(names: &[String], rows: &[Vec<String>], target: Option<&str>) -> Result<(Self, Vec<String>)> {
        let mut fields = Vec::new();
        let mut excluded = Vec::new();
        for (j, name) in names.iter().enumerate() {
            if Some(name.as_str()) == target {
                excluded.push(name.clone());
                continue;
            }
            let mut seen = BTreeSet::new();
            for (r, row) in rows.iter().enumerate() {
                let v = row.get(j).ok_or_else(|| {
                    Error::Format(format!(
                        "metadata row {r} has {} values, expected {}",
                        row.len(),
                        names.len()
                    ))
                })?;
                if !v.is_empty() {
                    seen.insert(v.clone());
                }
            }
            fields.push(FieldSpec::new(name.clone(), seen.into_iter().collect()));
        }
        let schema = Self { fields };
        schema.validate()?;
        Ok((schema, excluded))
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for f in &self.fields {
            if !names.insert(f.name.as_str()) {
                return Err(Error::Config(format!("metadata field `{}` appears twice", f.name)));
            }
            if f.vocab_size() < 2 {
                return Err(Error::Config(format!(
                    "metadata field `{}` has no observed values",
                    f.name
                )));
            }
            if f.embed_dim == 0 {
                return Err(Error::Config(format!(
                    "metadata field `{}` has zero embedding width",
                    f.name
                )));
            }
            if f.values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "metadata field `{}` vocabulary is not sorted and unique",
                    f.name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Index of a raw value in field `field`, UNKNOWN when unseen or empty.
    pub fn map_unknown(&self, raw: &str, field: usize) -> usize {
        self.fields[field].index_of(raw)
    }

    /// Maps one row of raw values (in schema field order) to indices.
    pub fn encode_row(&self, raw: &[&str]) -> Vec<usize> {
        self.fields.iter().zip(raw).map(|(f, v)| f.index_of(v)).collect()
    }

    pub fn total_embed_dim(&self) -> usize {
        self.fields.iter().map(|f| f.embed_dim).sum()
    }
}

/// Hidden width of the two-layer projection.
pub const META_HIDDEN: usize = 256;

/// Per-field embedding tables followed by `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct MetadataEncoder {
    pub schema: MetadataSchema,
    pub tables: Vec<ParamId>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MetadataEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, schema: &MetadataSchema, out_dim: usize) -> Result<Self> {
        schema.validate()?;
        if schema.is_empty() {
            return Err(Error::Config("metadata encoder needs at least one field".into()));
        }
        let tables = schema
            .fields
            .iter()
            .map(|f| {
                store.add(
                    format!("meta.embed.{}", f.name),
                    ParamKind::Weight,
                    &[f.vocab_size(), f.embed_dim],
                    Init::Normal { std: 1.0 },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schema: schema.clone(),
            tables,
            fc1: Linear::new(store, "meta.fc1", schema.total_embed_dim(), META_HIDDEN, true)?,
            fc2: Linear::new(store, "meta.fc2", META_HIDDEN, out_dim, true)?,
        })
    }

    /// `rows` is row-major `N x F` indices.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, rows: &[usize]) -> Result<Var> {
        let f = self.schema.len();
        if !rows.len().is_multiple_of(f) {
            return Err(Error::shape(
                "encode_metadata",
                "rows",
                format!("{} indices is not a multiple of {f} fields", rows.len()),
            ));
        }
        let mut parts = Vec::with_capacity(f);
        for (j, (field, &table)) in self.schema.fields.iter().zip(&self.tables).enumerate() {
            let column: Vec<usize> = rows.iter().skip(j).step_by(f).copied().collect();
            let t = ctx.param(table);
            parts.push(ctx.tape.embedding(&column, t, &field.name)?);
        }
        let x = ctx.tape.concat(&parts, 1)?;
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        self.fc2.forward(ctx, h)
    }

    pub fn param_count(&self) -> usize {
        let tables: usize = self.schema.fields.iter().map(|f| f.vocab_size() * f.embed_dim).sum();
        tables + self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn mult_adds(&self) -> usize {
        self.fc1.mult_adds() + self.fc2.mult_adds()
    }
}
