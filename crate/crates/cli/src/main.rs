use std::path::PathBuf;
use std::process::ExitCode;

use cellnas_cli::commands::{self, CliResult};
use cellnas_cli::config::{Overrides, RunConfig};
use cellnas_cli::CliError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "cellnas",
    version,
    about = "Cell-based architecture search with image and metadata fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data generation, splits, initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    metadata: Option<Switch>,
    #[arg(long = "theta-on-val", value_enum)]
    theta_on_val: Option<Switch>,
}

impl Common {
    fn load(&self) -> cellnas::Result<RunConfig> {
        RunConfig::load(
            self.config.as_deref(),
            Overrides {
                seed: self.seed,
                metadata: self.metadata.map(Into::into),
                theta_on_val: self.theta_on_val.map(Into::into),
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Search a super-net and write the best genotype.
    Search {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint of an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the fixed network of a genotype.
    TrainFixed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genotype: PathBuf,
        /// Start from the weights of a search checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute metrics of a checkpoint on the configured split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare gradient search with random search across seeds.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Report parameter and multiply-add counts.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Fixed network to measure; the super-net when omitted.
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Search { common, resume } => {
            let cfg = common.load()?;
            let s = commands::search(&cfg, &common.out, resume.as_deref())?;
            for (i, c) in s.genotype.cells.iter().enumerate() {
                println!("cell{i}: n1={} n2a={} n2b={}", c.edge_n1, c.edge_n2a, c.edge_n2b);
            }
            println!("genotype written to {}", s.genotype_path.display());
        }
        Command::TrainFixed {
            common,
            genotype,
            init_from,
            resume,
        } => {
            let cfg = common.load()?;
            let t = commands::train_fixed(&cfg, &genotype, init_from.as_deref(), &common.out, resume.as_deref())?;
            if let Some(best) = t.best_val_accuracy {
                println!("best val accuracy {best:.4}");
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let m = commands::eval(&cfg, &checkpoint, &common.out)?;
            println!(
                "accuracy {:.4}  macro_precision {:.4}  macro_recall {:.4}  macro_f1 {:.4}",
                m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
            );
        }
        Command::Compare { common } => {
            let cfg = common.load()?;
            let rows = commands::compare(&cfg, &common.out)?;
            print!("{}", cellnas::pipeline::comparison_csv(&rows));
        }
        Command::Cost { common, genotype } => {
            let cfg = common.load()?;
            print!("{}", commands::cost(&cfg, genotype.as_deref(), &common.out)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e))
        }
    }
}
