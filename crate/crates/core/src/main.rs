use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use setar::harness::pipeline::save_task;
use setar::harness::{generate_task, parse_overrides, run_stage, DataConfig, ExperimentConfig, Stage};
use setar::{Error, Result};

/// Selective low-rank approximation for OOD detection on a miniature dual encoder.
///
/// Every verb takes a JSON config followed by optional `--key=value`
/// overrides addressed by dotted path, e.g. `--search.modality=vision`.
#[derive(Parser)]
#[command(name = "setar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config (files, score names, ranges) without running anything.
    Validate(Args),
    /// Write a synthetic task as containers plus a config that reads them.
    GenTask(Args),
    /// Run the rank-ratio search; writes plan.json, trace.csv and weights.
    Search(Args),
    /// Score vanilla (and the reference and searched models when available).
    Eval(Args),
    /// Fine-tune from the plan.json in the output directory.
    Finetune(Args),
    /// Search, evaluate and fine-tune in one go.
    Pipeline(Args),
}

#[derive(clap::Args)]
struct Args {
    config: PathBuf,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

impl Args {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &parse_overrides(&self.overrides)?)
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SETAR_THREADS") else { return Ok(()) };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidInput(format!("SETAR_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

fn gen_task(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let DataConfig::Synthetic(spec) = &cfg.data else {
        return Err(Error::InvalidInput("gen-task needs a synthetic data section".into()));
    };
    cfg.validate()?;
    let task = generate_task(&cfg.model, cfg.seed, spec)?;
    let files = save_task(&task, &cfg.output_dir)?;
    let derived = ExperimentConfig { data: DataConfig::Files(files), ..cfg.clone() };
    let path = cfg.output_dir.join("task.json");
    std::fs::write(&path, serde_json::to_string_pretty(&derived)?)?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let (args, stage) = match &cli.command {
        Command::Validate(a) => {
            a.load()?.validate()?;
            println!("ok");
            return Ok(());
        }
        Command::GenTask(a) => {
            println!("{}", gen_task(&a.load()?)?.display());
            return Ok(());
        }
        Command::Search(a) => (a, Stage::Search),
        Command::Eval(a) => (a, Stage::Eval),
        Command::Finetune(a) => (a, Stage::Finetune),
        Command::Pipeline(a) => (a, Stage::Pipeline),
    };
    let cfg = args.load()?;
    let report = run_stage(&cfg, stage)?;
    for row in report.rows.iter().filter(|r| r.dataset == "Average") {
        println!("{:<10} {:<8} FPR95 {:6.2}  AUROC {:6.2}", row.model, row.score, 100.0 * row.fpr95, 100.0 * row.auroc);
    }
    println!("{}", cfg.output_dir.join("report.json").display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
