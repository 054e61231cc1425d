//! `emomtl`: data generation, training, evaluation, ablation and gradient
//! checks for the multi-task emotion model.
//!
//! Exit status is 0 on success, 1 for invalid input (bad config, bad flags,
//! refusing to overwrite) and 2 when a run fails. Set `EMOMTL_LOG` (for
//! example `debug`) to change log verbosity.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use emomtl_core::evalkit::TableKind;
use emomtl_core::losses::SwfcVariant;
use emomtl_core::model::FusionMode;

use config::{CliConfig, Overrides, Task};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "emomtl", version, about = "Multi-task speech emotion recognition on layer-stack features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config file; missing sections and keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (generator seed for generate-data, training seed for
    /// train, first of consecutive seeds for ablate).
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
    /// SWFC loss variant.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<SwfcVariant>,
    /// Layer fusion mode.
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    /// Comma-separated auxiliary tasks (asr, gender, speaker), or `none`.
    #[arg(long, value_parser = parse_tasks)]
    tasks: Option<TaskList>,
}

#[derive(Debug, Clone)]
struct TaskList(Vec<Task>);

impl RunArgs {
    fn load(&self) -> Result<CliConfig, CliError> {
        let mut cfg = CliConfig::load(self.config.as_deref())?;
        cfg.apply(&Overrides {
            variant: self.variant,
            fusion: self.fusion,
            tasks: self.tasks.as_ref().map(|t| t.0.clone()),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus: feature files plus train/dev/test manifests.
    GenerateData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing a checkpoint and epoch log after every epoch.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Manifest file, or a data directory containing train.tsv.
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the run directory.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Score a trained run on a manifest.
    Evaluate {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Manifest file, or a data directory containing test.tsv.
        #[arg(long)]
        data: PathBuf,
        /// Metrics file; defaults to metrics_<manifest>.json in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train every ablation config for every seed and tabulate medians.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Data directory with train.tsv and test.tsv; generated in memory
        /// from the [generator] section when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated grids: components, tasks, fusion.
        #[arg(long, value_delimiter = ',', value_parser = parse_grid)]
        grid: Option<Vec<TableKind>>,
    },
    /// Finite-difference check of every backward pass.
    GradCheck {
        /// Random points per op.
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn parse_variant(s: &str) -> Result<SwfcVariant, String> {
    match s {
        "eq2_literal" => Ok(SwfcVariant::Eq2Literal),
        "focal_supcon" => Ok(SwfcVariant::FocalSupcon),
        _ => Err("expected eq2_literal or focal_supcon".into()),
    }
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    match s {
        "last" => Ok(FusionMode::Last),
        "learnable" => Ok(FusionMode::Learnable),
        _ => Err("expected last or learnable".into()),
    }
}

fn parse_tasks(s: &str) -> Result<TaskList, String> {
    if s == "none" {
        return Ok(TaskList(Vec::new()));
    }
    s.split(',')
        .map(|t| match t.trim() {
            "asr" => Ok(Task::Asr),
            "gender" => Ok(Task::Gender),
            "speaker" => Ok(Task::Speaker),
            other => Err(format!("unknown task `{other}`, expected asr, gender, speaker or none")),
        })
        .collect::<Result<_, _>>()
        .map(TaskList)
}

fn parse_grid(s: &str) -> Result<TableKind, String> {
    match s {
        "components" => Ok(TableKind::Components),
        "tasks" => Ok(TableKind::Tasks),
        "fusion" => Ok(TableKind::Fusion),
        _ => Err("expected components, tasks or fusion".into()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData { run, out } => {
            let mut cfg = run.load()?;
            if let Some(s) = run.seed {
                cfg.generator.seed = s;
            }
            commands::generate_data(&cfg, &out, run.force)
        }
        Command::Train { run, data, out, resume } => {
            let mut cfg = run.load()?;
            if let Some(s) = run.seed {
                cfg.train.seed = s;
            }
            commands::train(&cfg, &data, &out, run.force, resume)
        }
        Command::Evaluate { run, data, out, force } => commands::evaluate_run(&run, &data, out.as_deref(), force),
        Command::Ablate {
            run,
            data,
            out,
            seeds,
            grid,
        } => {
            let mut cfg = run.load()?;
            if let Some(s) = seeds {
                cfg.ablate.seeds = s;
            }
            if let Some(base) = run.seed {
                let n = cfg.ablate.seeds.len() as u64;
                cfg.ablate.seeds = (base..base + n).collect();
            }
            if let Some(g) = grid {
                cfg.ablate.grids = g;
            }
            commands::ablate(&cfg, data.as_deref(), &out, run.force)
        }
        Command::GradCheck { points, seed, out, force } => commands::grad_check(points, seed, out.as_deref(), force),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMOMTL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
