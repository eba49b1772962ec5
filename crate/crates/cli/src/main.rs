//! `rco`: runs the experiment described by a JSON config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rco_core::pipeline::{self, ExperimentConfig};
use rco_core::ErrorCategory;

#[derive(Parser)]
#[command(name = "rco", version, about = "Route-constrained knowledge distillation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher and store its checkpoint trajectory.
    TrainTeacher(Common),
    /// Train every student arm for every seed against the stored trajectory.
    Distill(Parallel),
    /// Write accuracy summaries and diagnostics for finished runs.
    Analyze(Common),
    /// Run every stage in sequence.
    All(Parallel),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Args)]
struct Parallel {
    #[command(flatten)]
    common: Common,
    /// Maximum number of student runs executing at once.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed_override {
        cfg.seeds = vec![seed];
    }
    let out = match (&common.out, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => {
            return Err(rco_core::Error::config("output_dir", "set it in the config or pass --out").into())
        }
    };
    Ok((cfg, out))
}

fn report_analysis(outcome: &pipeline::AnalysisOutcome, out: &Path) {
    for d in &outcome.diagnostics {
        match &d.error {
            None => println!("ok      {}", d.name),
            Some(e) => eprintln!("failed  {}: {e}", d.name),
        }
    }
    println!("diagnostics written to {}", pipeline::analysis_dir(out).display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher(c) => {
            let (cfg, out) = load(&c)?;
            let manifest = pipeline::cmd_train_teacher(&cfg, &out)?;
            println!(
                "teacher trajectory with {} checkpoints written to {}",
                manifest.checkpoints.len(),
                pipeline::teacher_dir(&out).display()
            );
        }
        Command::Distill(p) => {
            let (cfg, out) = load(&p.common)?;
            for r in pipeline::cmd_distill(&cfg, &out, p.threads)? {
                println!(
                    "{}/seed_{}: test top-1 {} anchors {:?}",
                    r.arm,
                    r.seed,
                    r.test_top1.map_or("-".into(), |v| format!("{v:.4}")),
                    r.anchors
                );
            }
        }
        Command::Analyze(c) => {
            let (cfg, out) = load(&c)?;
            report_analysis(&pipeline::cmd_analyze(&cfg, &out)?, &out);
        }
        Command::All(p) => {
            let (cfg, out) = load(&p.common)?;
            report_analysis(&pipeline::cmd_all(&cfg, &out, p.threads)?, &out);
        }
    }
    Ok(())
}

/// 2 config, 3 data, 4 compute, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<rco_core::Error>()) {
        Some(e) => match e.category() {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Compute => 4,
        },
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
