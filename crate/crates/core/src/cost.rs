//! Analytic parameter and multiply-add counts from shape arithmetic.

use serde::{Deserialize, Serialize};

use crate::model::Network;
use crate::nn::ParamStore;
use crate::primitives::Edge;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostLine {
    pub component: String,
    pub params: usize,
    pub mult_adds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Trainable weights, excluding architecture logits.
    pub param_count: usize,
    pub arch_param_count: usize,
    /// Per-sample multiply-adds of convolutions and linear layers that run
    /// in a forward pass (pruned operations excluded).
    pub mult_add_count: usize,
    /// Fraction of candidate operations with selection weight at or above
    /// the pruning threshold; 1 for fixed networks.
    pub active_edge_fraction: f64,
    pub lines: Vec<CostLine>,
}

pub fn cost_report<T: Float>(net: &Network, store: &ParamStore<T>) -> CostReport {
    let enc = &net.encoder;
    let size = enc.config.image_size;
    let mut lines = vec![CostLine {
        component: "stem".into(),
        params: enc.stem.param_count() + enc.stem_bn.param_count(),
        mult_adds: enc.stem.mult_adds(size, size),
    }];
    let (mut active, mut total) = (0usize, 0usize);
    let mut arch = 0;
    for (i, (cell, h)) in enc.cells.iter().zip(enc.cell_input_sizes()).enumerate() {
        let mut params = cell.project.param_count() + cell.bn.param_count();
        let out = h.div_ceil(cell.stride);
        let mut macs = cell.project.mult_adds(out, out);
        for (e, edge) in cell.edges.iter().enumerate() {
            let edge_h = if e == 2 { out } else { h };
            match edge {
                Edge::Mixed(m) => {
                    arch += store.value(m.theta).numel();
                    let alpha = m.alpha(store);
                    for (op, &a) in m.ops.iter().zip(&alpha) {
                        params += op.param_count();
                        total += 1;
                        if a >= m.prune_threshold {
                            active += 1;
                            macs += op.mult_adds(edge_h, edge_h);
                        }
                    }
                }
                Edge::Fixed(op) => {
                    params += op.param_count();
                    macs += op.mult_adds(edge_h, edge_h);
                    total += 1;
                    active += 1;
                }
            }
        }
        lines.push(CostLine {
            component: format!("cell{i}"),
            params,
            mult_adds: macs,
        });
    }
    lines.push(CostLine {
        component: "embed".into(),
        params: enc.embed.param_count(),
        mult_adds: enc.embed.mult_adds(),
    });
    if let Some(m) = &net.metadata {
        lines.push(CostLine {
            component: "metadata".into(),
            params: m.param_count(),
            mult_adds: m.mult_adds(),
        });
    }
    lines.push(CostLine {
        component: "head".into(),
        params: net.head.classifier.param_count(),
        mult_adds: net.head.classifier.mult_adds(),
    });
    CostReport {
        param_count: lines.iter().map(|l| l.params).sum(),
        arch_param_count: arch,
        mult_add_count: lines.iter().map(|l| l.mult_adds).sum(),
        active_edge_fraction: if total == 0 { 1.0 } else { active as f64 / total as f64 },
        lines,
    }
}

impl CostReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 3]> = vec![["component".into(), "params".into(), "mult_adds".into()]];
        for l in &self.lines {
            rows.push([l.component.clone(), l.params.to_string(), l.mult_adds.to_string()]);
        }
        rows.push([
            "total".into(),
            self.param_count.to_string(),
            self.mult_add_count.to_string(),
        ]);
        let width = |c: usize| rows.iter().map(|r| r[c].len()).max().unwrap_or(0);
        let (w0, w1, w2) = (width(0), width(1), width(2));
        let mut out = String::new();
        for r in &rows {
            out.push_str(&format!("{:<w0$}  {:>w1$}  {:>w2$}\n", r[0], r[1], r[2]));
        }
        out.push_str(&format!("architecture logits: {}\n", self.arch_param_count));
        out.push_str(&format!("active edge fraction: {:.4}\n", self.active_edge_fraction));
        out
    }
}
