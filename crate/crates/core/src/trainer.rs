//! Alternating optimization of weights and architecture logits.
//!
//! Mini-batches are numbered globally from zero. On even batches only the
//! weights receive gradients and are updated by AdamW; on odd batches only
//! the architecture logits receive gradients and are updated by Adam. Fixed
//! networks have no logits and update their weights on every batch.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint;
use crate::cost::cost_report;
use crate::data::{Batch, EncodedSplit, Prepared};
use crate::error::{Error, Result};
use crate::genotype::CellGenotype;
use crate::metadata::MetadataSchema;
use crate::model::{Architecture, ModelConfig, Network};
use crate::nn::{Ctx, GradSet, Mode, ParamId, ParamKind, ParamStore};
use crate::optim::{clip_global_norm, Flavor, Hyper, Optimizer};
use crate::rng::{RngSnapshot, RngState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr_w: f64,
    pub wd_w: f64,
    pub lr_theta: f64,
    pub wd_theta: f64,
    pub clip_norm: f64,
    pub theta_init_std: f64,
    pub label_smoothing: f32,
    pub seed: u64,
    /// Feed architecture steps from the validation split instead of the
    /// training stream.
    pub theta_on_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            eval_batch_size: 256,
            lr_w: 1e-3,
            wd_w: 1e-4,
            lr_theta: 3e-4,
            wd_theta: 1e-3,
            clip_norm: 1.0,
            theta_init_std: 1e-3f64.sqrt(),
            label_smoothing: 0.1,
            seed: 0,
            theta_on_val: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train.{m}")));
        if !(32..=512).contains(&self.batch_size) {
            return bad(format!("batch_size: {} outside [32, 512]", self.batch_size));
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be positive".into());
        }
        for (name, v) in [
            ("lr_w", self.lr_w),
            ("lr_theta", self.lr_theta),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name}: {v} must be positive and finite"));
            }
        }
        for (name, v) in [
            ("wd_w", self.wd_w),
            ("wd_theta", self.wd_theta),
            ("theta_init_std", self.theta_init_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name}: {v} must be non-negative and finite"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing: {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a network's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub model: ModelConfig,
    pub schema: MetadataSchema,
    pub num_classes: usize,
    /// `None` for a super-net.
    pub fixed_cells: Option<Vec<CellGenotype>>,
}

impl NetworkSpec {
    pub fn build(&self, store: &mut ParamStore, theta_std: f64) -> Result<Network> {
        let arch = match &self.fixed_cells {
            None => Architecture::Search {
                theta_std: theta_std as f32,
            },
            Some(cells) => Architecture::Fixed(cells.iter().map(CellGenotype::ops).collect()),
        };
        Network::new(store, &self.model, &self.schema, self.num_classes, &arch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub active_edge_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f32,
    pub updated: ParamKind,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

const INIT_STREAM: u64 = 1 << 62;
const DROPOUT_STREAM: u64 = (1 << 62) + 1;
const VAL_STREAM: u64 = 1 << 61;

pub struct Trainer {
    pub config: TrainConfig,
    pub spec: NetworkSpec,
    pub net: Network,
    pub store: ParamStore,
    pub opt_w: Optimizer,
    pub opt_theta: Option<Optimizer>,
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub history: Vec<EpochRecord>,
    pub best_val_accuracy: Option<f64>,
}

impl Trainer {
    /// Builds and initializes a fresh network from the seed.
    pub fn new(config: TrainConfig, spec: NetworkSpec) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = spec.build(&mut store, config.theta_init_std)?;
        store.initialize(&mut RngState::derive(config.seed, INIT_STREAM));
        Ok(Self::from_parts(config, spec, net, store))
    }

    /// Wraps an already-populated network, e.g. after weight transplant.
    pub fn from_parts(config: TrainConfig, spec: NetworkSpec, net: Network, store: ParamStore) -> Self {
        let opt_w = Optimizer::new(
            Flavor::AdamW,
            Hyper::new(config.lr_w, config.wd_w),
            store.ids(ParamKind::Weight),
            &store,
        );
        let arch = store.ids(ParamKind::Arch);
        let opt_theta = (!arch.is_empty())
            .then(|| Optimizer::new(Flavor::Adam, Hyper::new(config.lr_theta, config.wd_theta), arch, &store));
        let rng = RngState::derive(config.seed, DROPOUT_STREAM);
        Self {
            config,
            spec,
            net,
            store,
            opt_w,
            opt_theta,
            rng,
            epoch: 0,
            global_step: 0,
            history: Vec::new(),
            best_val_accuracy: None,
        }
    }

    pub fn is_search(&self) -> bool {
        self.opt_theta.is_some()
    }

    pub fn batches_per_epoch(&self, n_train: usize) -> usize {
        n_train / self.config.batch_size
    }

    /// Training-set indices of global batch `step`. Each epoch draws its own
    /// permutation, so the order is a pure function of seed and step.
    pub fn batch_indices(&self, n_train: usize, step: u64) -> Result<Vec<usize>> {
        let bpe = self.batches_per_epoch(n_train);
        if bpe == 0 {
            return Err(Error::Config(format!(
                "training split has {n_train} samples, fewer than batch_size {}",
                self.config.batch_size
            )));
        }
        let epoch = step / bpe as u64;
        let pos = (step % bpe as u64) as usize;
        let perm = RngState::derive(self.config.seed, epoch).permutation(n_train);
        let bs = self.config.batch_size;
        Ok(perm[pos * bs..(pos + 1) * bs].to_vec())
    }

    fn val_batch_indices(&self, n_val: usize, theta_step: u64) -> Vec<usize> {
        let bs = self.config.batch_size.min(n_val);
        let per = (n_val / bs.max(1)).max(1) as u64;
        let round = theta_step / per;
        let pos = (theta_step % per) as usize;
        let perm = RngState::derive(self.config.seed, VAL_STREAM + round).permutation(n_val);
        perm[pos * bs..(pos + 1) * bs].to_vec()
    }

    /// Which set batch `index` updates.
    pub fn update_kind(&self, index: u64) -> ParamKind {
        if self.is_search() && index % 2 == 1 {
            ParamKind::Arch
        } else {
            ParamKind::Weight
        }
    }

    /// One optimization step on `batch`; `index` decides the parity.
    pub fn train_step(&mut self, batch: &Batch, index: u64) -> Result<StepReport> {
        let kind = self.update_kind(index);
        let grads = if kind == ParamKind::Arch {
            GradSet::ARCH
        } else {
            GradSet::WEIGHTS
        };
        let mut ctx = Ctx::new(&mut self.store, &mut self.rng, Mode::Train, grads);
        let logits = self.net.forward(&mut ctx, &batch.images, &batch.meta)?;
        let loss_var = ctx
            .tape
            .cross_entropy_smoothed(logits, &batch.labels, self.config.label_smoothing)?;
        let loss = ctx.tape.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite { step: index, loss });
        }
        let mut g = ctx.backward(loss_var)?;
        drop(ctx);
        let grad_norm = clip_global_norm(&mut g, self.config.clip_norm);
        let clipped_norm = crate::optim::global_norm(&g);
        match kind {
            ParamKind::Arch => self
                .opt_theta
                .as_mut()
                .expect("arch step implies a search network")
                .apply(&mut self.store, &g),
            _ => self.opt_w.apply(&mut self.store, &g),
        }
        Ok(StepReport {
            loss,
            updated: kind,
            grad_norm,
            clipped_norm,
        })
    }

    /// Runs the next global step drawn from the data stream.
    pub fn step(&mut self, data: &Prepared) -> Result<StepReport> {
        let index = self.global_step;
        let batch = if self.config.theta_on_val && self.update_kind(index) == ParamKind::Arch {
            data.val.batch(&self.val_batch_indices(data.val.len(), index / 2))
        } else {
            data.train.batch(&self.batch_indices(data.train.len(), index)?)
        };
        let report = self.train_step(&batch, index)?;
        self.global_step += 1;
        Ok(report)
    }

    /// One pass over the training split followed by validation.
    pub fn run_epoch(&mut self, data: &Prepared) -> Result<EpochRecord> {
        let bpe = self.batches_per_epoch(data.train.len());
        if bpe == 0 {
            self.batch_indices(data.train.len(), 0)?;
        }
        let mut total = 0.0f64;
        for _ in 0..bpe {
            total += self.step(data)?.loss as f64;
        }
        let eval = self.evaluate(&data.val)?;
        self.epoch += 1;
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: total / bpe as f64,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
            active_edge_fraction: cost_report(&self.net, &self.store).active_edge_fraction,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Eval-mode loss, accuracy and predictions.
    pub fn evaluate(&mut self, split: &EncodedSplit) -> Result<Evaluation> {
        let logits = self.logits(split)?;
        let c = self.net.num_classes;
        let mut predictions = Vec::with_capacity(split.len());
        let mut loss = 0.0f64;
        let s = self.config.label_smoothing as f64;
        for (row, &y) in logits.chunks(c).zip(&split.labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            for (k, &v) in row.iter().enumerate() {
                let q = if k == y { 1.0 - s } else { s / (c - 1) as f64 };
                loss -= q * (v as f64 - lse);
            }
            predictions.push(crate::genotype::argmax(
                &row.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            ));
        }
        let n = split.len().max(1) as f64;
        let hits = predictions.iter().zip(&split.labels).filter(|(p, y)| p == y).count();
        Ok(Evaluation {
            loss: loss / n,
            accuracy: hits as f64 / n,
            predictions,
        })
    }

    /// Eval-mode logits for a whole split, row-major `N x classes`.
    pub fn logits(&mut self, split: &EncodedSplit) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(split.len() * self.net.num_classes);
        for batch in split.sequential_batches(self.config.eval_batch_size) {
            let mut ctx = Ctx::new(&mut self.store, &mut self.rng, Mode::Eval, GradSet::NONE);
            let logits = self.net.forward(&mut ctx, &batch.images, &batch.meta)?;
            out.extend_from_slice(ctx.tape.data(logits));
        }
        Ok(out)
    }

    /// Records the epoch's validation accuracy; true if it is a new best.
    pub fn note_best(&mut self, val_accuracy: f64) -> bool {
        let better = self.best_val_accuracy.is_none_or(|b| val_accuracy > b);
        if better {
            self.best_val_accuracy = Some(val_accuracy);
        }
        better
    }

    pub fn arch_values(&self) -> Vec<Vec<f32>> {
        self.store
            .ids(ParamKind::Arch)
            .into_iter()
            .map(|id| self.store.value(id).data().to_vec())
            .collect()
    }

    pub fn weight_values(&self) -> Vec<Vec<f32>> {
        self.store
            .ids(ParamKind::Weight)
            .into_iter()
            .map(|id| self.store.value(id).data().to_vec())
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        // The epoch target is a property of the run, not of the state, so
        // it is stored as 0; resuming supplies its own target.
        let header = CheckpointHeader {
            format_version: checkpoint::FORMAT_VERSION,
            config: TrainConfig {
                epochs: 0,
                ..self.config.clone()
            },
            network: self.spec.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            rng: self.rng.snapshot(),
            history: self.history.clone(),
            best_val_accuracy: self.best_val_accuracy,
            optimizers: self.optimizers().map(OptimizerInfo::from).collect(),
        };
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (_, p) in self.store.iter() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for opt in self.optimizers() {
            let role = role_of(opt.flavor);
            for (slot, &pid) in opt.params.iter().enumerate() {
                let name = &self.store.param(pid).name;
                let shape = self.store.value(pid).shape().to_vec();
                tensors.push((
                    format!("opt.{role}.m.{name}"),
                    Tensor::new(shape.clone(), opt.m[slot].clone())?,
                ));
                tensors.push((format!("opt.{role}.v.{name}"), Tensor::new(shape, opt.v[slot].clone())?));
            }
        }
        let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::encode(&serde_json::to_value(&header)?, &refs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, &self.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors): (Value, _) = checkpoint::decode(bytes)?;
        let header: CheckpointHeader = serde_json::from_value(header)?;
        if header.format_version != checkpoint::FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint header version {}",
                header.format_version
            )));
        }
        let mut store = ParamStore::new();
        let net = header.network.build(&mut store, header.config.theta_init_std)?;
        let lookup = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))
        };
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let t = lookup(&store.param(id).name)?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}",
                    store.param(id).name,
                    t.shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        let mut trainer = Self::from_parts(header.config, header.network, net, store);
        let infos = header.optimizers;
        let expected = 1 + trainer.opt_theta.is_some() as usize;
        if infos.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint has {} optimizer states, expected {expected}",
                infos.len()
            )));
        }
        let store = &trainer.store;
        let mut opts: Vec<&mut Optimizer> = vec![&mut trainer.opt_w];
        if let Some(o) = trainer.opt_theta.as_mut() {
            opts.push(o);
        }
        for (opt, info) in opts.into_iter().zip(infos) {
            if info.flavor != opt.flavor {
                return Err(Error::Format("optimizer order mismatch".into()));
            }
            opt.step = info.step;
            opt.hyper = info.hyper;
            let role = role_of(opt.flavor);
            for (slot, &pid) in opt.params.iter().enumerate() {
                let name = &store.param(pid).name;
                opt.m[slot] = lookup(&format!("opt.{role}.m.{name}"))?.data().to_vec();
                opt.v[slot] = lookup(&format!("opt.{role}.v.{name}"))?.data().to_vec();
            }
        }
        trainer.rng = RngState::restore(header.rng);
        trainer.epoch = header.epoch;
        trainer.global_step = header.global_step;
        trainer.history = header.history;
        trainer.best_val_accuracy = header.best_val_accuracy;
        Ok(trainer)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn optimizers(&self) -> impl Iterator<Item = &Optimizer> {
        std::iter::once(&self.opt_w).chain(self.opt_theta.as_ref())
    }
}

fn role_of(flavor: Flavor) -> &'static str {
    match flavor {
        Flavor::AdamW => "w",
        Flavor::Adam => "theta",
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerInfo {
    flavor: Flavor,
    hyper: Hyper,
    step: u64,
}

impl From<&Optimizer> for OptimizerInfo {
    fn from(o: &Optimizer) -> Self {
        Self {
            flavor: o.flavor,
            hyper: o.hyper,
            step: o.step,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    config: TrainConfig,
    network: NetworkSpec,
    epoch: usize,
    global_step: u64,
    rng: RngSnapshot,
    history: Vec<EpochRecord>,
    best_val_accuracy: Option<f64>,
    optimizers: Vec<OptimizerInfo>,
}

/// `history.csv` text. Wall-clock time is kept out so reruns are
/// byte-identical.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_accuracy,active_edge_fraction\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.active_edge_fraction
        ));
    }
    out
}
