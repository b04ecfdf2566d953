//! End-to-end procedures built from the trainer: search followed by
//! discretized fine-tuning, and a random-architecture baseline with the same
//! number of weight updates.

use serde::{Deserialize, Serialize};

use crate::data::Prepared;
use crate::error::{Error, Result};
use crate::genotype::{
    build_fixed, discretize, transplant, CellGenotype, Genotype, Provenance, GENOTYPE_SCHEMA_VERSION,
};
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::primitives::{OpKind, NUM_OPS};
use crate::rng::RngState;
use crate::trainer::{EpochRecord, NetworkSpec, TrainConfig, Trainer};

const RANDOM_ARCH_STREAM: u64 = (1 << 62) + 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub search_epochs: usize,
    pub finetune_epochs: usize,
    /// Architectures sampled by the random baseline.
    pub random_candidates: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            search_epochs: 3,
            finetune_epochs: 3,
            random_candidates: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.search_epochs == 0 {
            return Err(Error::Config("pipeline.search_epochs must be positive".into()));
        }
        if self.random_candidates == 0 {
            return Err(Error::Config("pipeline.random_candidates must be positive".into()));
        }
        Ok(())
    }
}

pub struct PipelineOutcome {
    pub genotype: Genotype,
    pub search_history: Vec<EpochRecord>,
    pub finetune_history: Vec<EpochRecord>,
    /// Best validation accuracy of the discretized model over fine-tuning,
    /// or right after transplant when there is no fine-tuning.
    pub best_val_accuracy: f64,
    /// Weight updates spent in total.
    pub weight_updates: u64,
    /// The fine-tuned fixed model.
    pub trainer: Trainer,
}

fn spec_for(model: &ModelConfig, data: &Prepared, cells: Option<Vec<CellGenotype>>) -> NetworkSpec {
    NetworkSpec {
        model: model.clone(),
        schema: data.schema.clone(),
        num_classes: data.num_classes(),
        fixed_cells: cells,
    }
}

/// Weight updates performed by `steps` alternating search steps.
pub fn search_weight_updates(steps: u64) -> u64 {
    steps.div_ceil(2)
}

fn finetune(mut fixed: Trainer, data: &Prepared, epochs: usize) -> Result<(Trainer, Vec<EpochRecord>, f64)> {
    let mut best = fixed.evaluate(&data.val)?.accuracy;
    for _ in 0..epochs {
        let r = fixed.run_epoch(data)?;
        fixed.note_best(r.val_accuracy);
        best = best.max(r.val_accuracy);
    }
    let history = fixed.history.clone();
    Ok((fixed, history, best))
}

/// Searches, discretizes, transplants the super-net weights and fine-tunes.
pub fn search_then_finetune(
    train: &TrainConfig,
    model: &ModelConfig,
    pipe: &PipelineConfig,
    data: &Prepared,
) -> Result<PipelineOutcome> {
    pipe.validate()?;
    data.check_nonempty()?;
    let mut search = Trainer::new(train.clone(), spec_for(model, data, None))?;
    for _ in 0..pipe.search_epochs {
        search.run_epoch(data)?;
    }
    let genotype = discretize(&search.net, &search.store)?;
    let fixed = fixed_from_search(&search, &genotype, train)?;
    let (trainer, finetune_history, best) = finetune(fixed, data, pipe.finetune_epochs)?;
    Ok(PipelineOutcome {
        genotype,
        search_history: search.history,
        finetune_history,
        best_val_accuracy: best,
        weight_updates: search_weight_updates(search.global_step) + trainer.global_step,
        trainer,
    })
}

/// Fixed-network trainer whose weights come from the super-net.
pub fn fixed_from_search(search: &Trainer, genotype: &Genotype, train: &TrainConfig) -> Result<Trainer> {
    let mut store = ParamStore::new();
    let net = build_fixed(genotype, &mut store)?;
    transplant(&search.store, &mut store)?;
    let spec = NetworkSpec {
        fixed_cells: Some(genotype.cells.clone()),
        ..search.spec.clone()
    };
    Ok(Trainer::from_parts(train.clone(), spec, net, store))
}

/// Uniformly random operation on every edge.
pub fn random_genotype(model: &ModelConfig, data: &Prepared, rng: &mut RngState) -> Genotype {
    let cells = (0..model.encoder.cells)
        .map(|_| {
            let mut pick = || OpKind::from_index(rng.below(NUM_OPS)).expect("index below NUM_OPS");
            CellGenotype::from_ops([pick(), pick(), pick()])
        })
        .collect();
    Genotype {
        schema_version: GENOTYPE_SCHEMA_VERSION,
        cells,
        model: model.clone(),
        metadata_schema: if model.use_metadata {
            data.schema.clone()
        } else {
            Default::default()
        },
        num_classes: data.num_classes(),
        provenance: Provenance::default(),
    }
}

/// Random-search baseline: the weight updates the search phase would spend
/// are split as evenly as possible over randomly sampled fixed architectures
/// (earlier candidates take the remainder), the one with
/// the best validation accuracy is then fine-tuned for the same number of
/// epochs as in [`search_then_finetune`].
pub fn random_search(
    train: &TrainConfig,
    model: &ModelConfig,
    pipe: &PipelineConfig,
    data: &Prepared,
) -> Result<PipelineOutcome> {
    pipe.validate()?;
    data.check_nonempty()?;
    let bpe = (data.train.len() / train.batch_size) as u64;
    let budget = search_weight_updates(bpe * pipe.search_epochs as u64);
    let n = pipe.random_candidates as u64;
    let mut rng = RngState::derive(train.seed, RANDOM_ARCH_STREAM);
    let mut best: Option<(f64, Genotype, Trainer)> = None;
    let mut spent = 0;
    for i in 0..n {
        let g = random_genotype(model, data, &mut rng);
        let mut t = Trainer::new(train.clone(), spec_for(model, data, Some(g.cells.clone())))?;
        for _ in 0..budget / n + u64::from(i < budget % n) {
            t.step(data)?;
        }
        spent += t.global_step;
        let acc = t.evaluate(&data.val)?.accuracy;
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, g, t));
        }
    }
    let (_, genotype, chosen) = best.expect("at least one candidate");
    // Fine-tuning starts a fresh optimizer and data stream, as after search.
    let fixed = Trainer::from_parts(train.clone(), chosen.spec, chosen.net, chosen.store);
    let (trainer, finetune_history, best_acc) = finetune(fixed, data, pipe.finetune_epochs)?;
    Ok(PipelineOutcome {
        genotype,
        search_history: Vec::new(),
        finetune_history,
        best_val_accuracy: best_acc,
        weight_updates: spent + trainer.global_step,
        trainer,
    })
}

/// Validation scores of both procedures for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub gradient_val_accuracy: f64,
    pub random_val_accuracy: f64,
    pub gradient_weight_updates: u64,
    pub random_weight_updates: u64,
    pub gradient_genotype: Vec<CellGenotype>,
    pub random_genotype: Vec<CellGenotype>,
}

impl ComparisonRow {
    pub fn gradient_wins(&self) -> bool {
        self.gradient_val_accuracy >= self.random_val_accuracy
    }
}

/// Runs both procedures for each seed; `prepare` builds the data for a seed.
pub fn compare<F>(
    train: &TrainConfig,
    model: &ModelConfig,
    pipe: &PipelineConfig,
    seeds: &[u64],
    mut prepare: F,
) -> Result<Vec<ComparisonRow>>
where
    F: FnMut(u64) -> Result<Prepared>,
{
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let data = prepare(seed)?;
        let cfg = TrainConfig { seed, ..train.clone() };
        let g = search_then_finetune(&cfg, model, pipe, &data)?;
        let r = random_search(&cfg, model, pipe, &data)?;
        rows.push(ComparisonRow {
            seed,
            gradient_val_accuracy: g.best_val_accuracy,
            random_val_accuracy: r.best_val_accuracy,
            gradient_weight_updates: g.weight_updates,
            random_weight_updates: r.weight_updates,
            gradient_genotype: g.genotype.cells,
            random_genotype: r.genotype.cells,
        });
    }
    Ok(rows)
}

/// One row per strategy and seed, per-strategy means and the win rate.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("strategy,seed,val_accuracy,weight_updates\n");
    for r in rows {
        out.push_str(&format!(
            "gradient,{},{},{}\n",
            r.seed, r.gradient_val_accuracy, r.gradient_weight_updates
        ));
        out.push_str(&format!(
            "random,{},{},{}\n",
            r.seed, r.random_val_accuracy, r.random_weight_updates
        ));
    }
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&ComparisonRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    out.push_str(&format!(
        "gradient,mean,{},{}\n",
        mean(|r| r.gradient_val_accuracy),
        mean(|r| r.gradient_weight_updates as f64)
    ));
    out.push_str(&format!(
        "random,mean,{},{}\n",
        mean(|r| r.random_val_accuracy),
        mean(|r| r.random_weight_updates as f64)
    ));
    let wins = rows.iter().filter(|r| r.gradient_wins()).count();
    out.push_str(&format!("win_rate,{wins}/{},{},\n", rows.len(), wins as f64 / n));
    out
}
