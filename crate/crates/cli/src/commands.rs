//! Subcommand implementations. Each writes only below its output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cellnas::checkpoint::{sha256_hex, write_atomic};
use cellnas::cost::{cost_report, CostReport};
use cellnas::data::{
    generate, group_rare_classes, load_directory, Dataset, DatasetManifest, Prepared, SyntheticTaskSpec,
};
use cellnas::genotype::{build_fixed, canonical_json, discretize, Genotype};
use cellnas::metrics;
use cellnas::nn::ParamStore;
use cellnas::pipeline::{compare as run_compare, comparison_csv, fixed_from_search, ComparisonRow};
use cellnas::trainer::{history_csv, NetworkSpec, Trainer};
use cellnas::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{EvalSplit, RunConfig};
use crate::CliError;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Dataset built from the data section, with splits hashed by `seed`.
pub struct LoadedData {
    pub dataset: Dataset,
    pub manifest: DatasetManifest,
    pub prepared: Prepared,
}

pub fn load_data(cfg: &RunConfig, seed: u64, schema: Option<&cellnas::metadata::MetadataSchema>) -> Result<LoadedData> {
    let (raw, source) = match (&cfg.data.synthetic, &cfg.data.directory) {
        (Some(s), _) => (
            generate(&SyntheticTaskSpec { seed, ..s.clone() })?,
            "synthetic".to_string(),
        ),
        (_, Some(d)) => {
            let (ds, report) = load_directory(&d.path, &d.target, d.image_size, d.channels)?;
            for id in &report.missing_images {
                eprintln!("warning: no image for `{id}`");
            }
            for id in &report.orphan_images {
                eprintln!("warning: image `{id}` has no metadata row");
            }
            (ds, d.path.display().to_string())
        }
        _ => return Err(Error::Config("data: no source configured".into())),
    };
    let (dataset, label_map) = match cfg.data.group_threshold {
        Some(t) => {
            let (ds, map) = group_rare_classes(&raw, seed, t)?;
            (ds, Some(map))
        }
        None => (raw, None),
    };
    let prepared = dataset.prepare_with(seed, schema)?;
    prepared.check_nonempty()?;
    let manifest = dataset.manifest(seed, &source, &prepared.schema, label_map.as_ref());
    Ok(LoadedData {
        dataset,
        manifest,
        prepared,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write(path, &canonical_json(value)?)
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(&out.join("checkpoints"))?;
    write(&out.join("config.json"), &cfg.to_canonical_json()?)
}

/// Trains until `epochs` epochs are complete, checkpointing after each.
fn train_loop(trainer: &mut Trainer, data: &Prepared, out: &Path, epochs: usize) -> CliResult<()> {
    let ckpt = out.join("checkpoints");
    let mut timing = Vec::new();
    let start = Instant::now();
    while trainer.epoch < epochs {
        let t = Instant::now();
        let record = match trainer.run_epoch(data) {
            Ok(r) => r,
            Err(Error::NonFinite { step, loss }) => {
                let path = ckpt.join("halt.ckpt");
                trainer.save(&path)?;
                return Err(CliError::Halted { step, loss, path });
            }
            Err(e) => return Err(e.into()),
        };
        timing.push(json!({"epoch": record.epoch, "seconds": t.elapsed().as_secs_f64()}));
        eprintln!(
            "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}",
            record.epoch, record.train_loss, record.val_loss, record.val_accuracy
        );
        trainer.save(&ckpt.join(format!("epoch-{:04}.ckpt", record.epoch)))?;
        if trainer.note_best(record.val_accuracy) {
            trainer.save(&ckpt.join("best.ckpt"))?;
        }
        trainer.save(&ckpt.join("last.ckpt"))?;
        write(&out.join("history.csv"), &history_csv(&trainer.history))?;
    }
    write(&out.join("history.csv"), &history_csv(&trainer.history))?;
    write_json(
        &out.join("timing.json"),
        &json!({"epochs": timing, "total_seconds": start.elapsed().as_secs_f64()}),
    )?;
    Ok(())
}

fn resume_trainer(path: &Path, cfg: &RunConfig, spec: &NetworkSpec) -> Result<Trainer> {
    let mut t = Trainer::load(path)?;
    // Only the epoch target may change on resume.
    t.config.epochs = cfg.train.epochs;
    if t.config != cfg.train {
        return Err(Error::Config(format!(
            "train: settings differ from those stored in {}",
            path.display()
        )));
    }
    if &t.spec != spec {
        return Err(Error::Config(format!(
            "model: network stored in {} differs from the configured one",
            path.display()
        )));
    }
    Ok(t)
}

pub struct SearchSummary {
    pub genotype_path: PathBuf,
    pub genotype: Genotype,
}

/// Super-net search followed by discretization of the best checkpoint.
pub fn search(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> CliResult<SearchSummary> {
    let data = load_data(cfg, cfg.train.seed, None)?;
    prepare_out(out, cfg)?;
    write_json(&out.join("dataset.json"), &data.manifest)?;
    let spec = NetworkSpec {
        model: cfg.model.clone(),
        schema: data.prepared.schema.clone(),
        num_classes: data.prepared.num_classes(),
        fixed_cells: None,
    };
    let mut trainer = match resume {
        Some(p) => resume_trainer(p, cfg, &spec)?,
        None => Trainer::new(cfg.train.clone(), spec)?,
    };
    train_loop(&mut trainer, &data.prepared, out, cfg.train.epochs)?;
    let best = out.join("checkpoints").join("best.ckpt");
    let source = if best.exists() {
        best
    } else {
        out.join("checkpoints").join("last.ckpt")
    };
    let (chosen, digest) = if source.exists() {
        let bytes = fs::read(&source).map_err(|e| Error::Io {
            path: source.clone(),
            source: e,
        })?;
        (Trainer::from_bytes(&bytes)?, Some(sha256_hex(&bytes)))
    } else {
        (trainer, None)
    };
    let mut genotype = discretize(&chosen.net, &chosen.store)?;
    genotype.provenance.source_checkpoint_sha256 = digest;
    let genotype_path = out.join("best.genotype.json");
    write(&genotype_path, &genotype.to_canonical_json()?)?;
    Ok(SearchSummary {
        genotype_path,
        genotype,
    })
}

fn read_genotype(path: &Path) -> Result<Genotype> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Genotype::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Trains the fixed network of a genotype with weight updates only.
///
/// The genotype supplies the encoder layout; data, metadata switch and
/// training settings come from the run configuration. `init_from` copies
/// weights from a search checkpoint instead of initializing randomly.
pub fn train_fixed(
    cfg: &RunConfig,
    genotype_path: &Path,
    init_from: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
) -> CliResult<Trainer> {
    let genotype = read_genotype(genotype_path)?;
    let data = load_data(cfg, cfg.train.seed, None)?;
    if genotype.num_classes != data.prepared.num_classes() {
        return Err(Error::Config(format!(
            "genotype has {} classes, data has {}",
            genotype.num_classes,
            data.prepared.num_classes()
        ))
        .into());
    }
    let model = cellnas::model::ModelConfig {
        use_metadata: cfg.model.use_metadata,
        ..genotype.model.clone()
    };
    prepare_out(out, cfg)?;
    write_json(&out.join("dataset.json"), &data.manifest)?;
    write(&out.join("genotype.json"), &genotype.to_canonical_json()?)?;
    let spec = NetworkSpec {
        model,
        schema: data.prepared.schema.clone(),
        num_classes: data.prepared.num_classes(),
        fixed_cells: Some(genotype.cells.clone()),
    };
    let mut trainer = match (resume, init_from) {
        (Some(p), _) => resume_trainer(p, cfg, &spec)?,
        (None, Some(src)) => {
            let search = Trainer::load(src)?;
            let g = Genotype {
                model: spec.model.clone(),
                metadata_schema: spec.schema.clone(),
                ..genotype.clone()
            };
            let t = fixed_from_search(&search, &g, &cfg.train)?;
            if t.spec != spec {
                return Err(Error::Config("init checkpoint was trained on a different schema".into()).into());
            }
            t
        }
        (None, None) => Trainer::new(cfg.train.clone(), spec)?,
    };
    train_loop(&mut trainer, &data.prepared, out, cfg.train.epochs)?;
    Ok(trainer)
}

/// Eval-mode metrics of a checkpoint on the configured split.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> CliResult<metrics::Metrics> {
    let mut trainer = Trainer::load(checkpoint)?;
    let schema = trainer.spec.schema.clone();
    let data = if trainer.spec.model.use_metadata {
        load_data(cfg, cfg.train.seed, Some(&schema))?
    } else {
        load_data(cfg, cfg.train.seed, None)?
    };
    let classes = data.prepared.num_classes();
    if classes != trainer.net.num_classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, data has {classes}",
            trainer.net.num_classes
        ))
        .into());
    }
    let split = match cfg.eval.split {
        EvalSplit::Val => &data.prepared.val,
        EvalSplit::Test => &data.prepared.test,
    };
    let result = trainer.evaluate(split)?;
    let m = metrics::compute(&split.labels, &result.predictions, classes);
    create_dir(out)?;
    write(&out.join("config.json"), &cfg.to_canonical_json()?)?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "split": cfg.eval.split,
            "samples": split.len(),
            "loss": result.loss,
            "accuracy": m.accuracy,
            "macro_precision": m.macro_precision,
            "macro_recall": m.macro_recall,
            "macro_f1": m.macro_f1,
            "confusion": m.confusion,
            "class_names": data.prepared.class_names,
        }),
    )?;
    write(
        &out.join("confusion.csv"),
        &metrics::confusion_csv(&m.confusion, &data.prepared.class_names),
    )?;
    Ok(m)
}

/// Gradient search against the random baseline over the configured seeds.
pub fn compare(cfg: &RunConfig, out: &Path) -> CliResult<Vec<ComparisonRow>> {
    create_dir(out)?;
    write(&out.join("config.json"), &cfg.to_canonical_json()?)?;
    let start = Instant::now();
    let rows = run_compare(&cfg.train, &cfg.model, &cfg.pipeline, &cfg.compare.seeds, |seed| {
        Ok(load_data(cfg, seed, None)?.prepared)
    })?;
    write(&out.join("compare.csv"), &comparison_csv(&rows))?;
    write_json(&out.join("compare.json"), &rows)?;
    write_json(
        &out.join("timing.json"),
        &json!({"total_seconds": start.elapsed().as_secs_f64()}),
    )?;
    Ok(rows)
}

/// Parameter and multiply-add counts of a genotype, or of the super-net.
pub fn cost(cfg: &RunConfig, genotype: Option<&Path>, out: &Path) -> CliResult<CostReport> {
    let mut store = ParamStore::<f32>::new();
    let report = match genotype {
        Some(p) => {
            let g = read_genotype(p)?;
            let net = build_fixed(&g, &mut store)?;
            cost_report(&net, &store)
        }
        None => {
            let data = load_data(cfg, cfg.train.seed, None)?;
            let spec = NetworkSpec {
                model: cfg.model.clone(),
                schema: data.prepared.schema.clone(),
                num_classes: data.prepared.num_classes(),
                fixed_cells: None,
            };
            let net = spec.build(&mut store, cfg.train.theta_init_std)?;
            store.initialize(&mut cellnas::rng::RngState::new(cfg.train.seed));
            cost_report(&net, &store)
        }
    };
    create_dir(out)?;
    write(&out.join("config.json"), &cfg.to_canonical_json()?)?;
    write_json(&out.join("cost.json"), &report)?;
    Ok(report)
}
