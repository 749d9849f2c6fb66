//! `squeeze`: train teachers, build and train squeezed students, benchmark
//! them and self-check the numerics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use weight_squeeze::pipeline;
use weight_squeeze::run_config::RunConfig;
use weight_squeeze::trainer::RunReport;
use weight_squeeze::verify::run_checks;

#[derive(Parser, Debug)]
#[command(name = "squeeze", version, about = "Compress transformer classifiers by learned weight mappings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a plain teacher with maximum likelihood
    TrainTeacher(RunArgs),
    /// Build a student from a teacher and train it
    Squeeze(RunArgs),
    /// Fine-tune a pre-trained student with gated mappings of the teacher
    GatedFinetune(RunArgs),
    /// Parameter counts, MAC counts and inference timings
    Bench(RunArgs),
    /// Check gradients, bake equivalence, loss identities and factorizations
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,

    /// Sets `train.seed`
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory; defaults to `out_dir` from the config
    #[arg(long)]
    out: Option<PathBuf>,

    /// `section.key=value`, applied in order after the file
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self, command: &str) -> Result<(RunConfig, PathBuf)> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("train.seed={seed}"));
        }
        let mut cfg = RunConfig::load(&self.config, &overrides)
            .with_context(|| format!("loading {}", self.config.display()))?;
        let out = self.out.clone().unwrap_or_else(|| pipeline::default_out(&cfg, command));
        cfg.out_dir = Some(out.clone());
        Ok((cfg, out))
    }
}

fn summarize(report: &RunReport, out: &Path) {
    println!(
        "{} + {}: best dev accuracy {:.4} at step {} ({} trainable, {} at inference)",
        report.scheme, report.objective, report.best_dev_accuracy, report.best_step, report.train_params, report.inference_params
    );
    for flag in &report.flags {
        println!("warning: {flag}");
    }
    println!("wrote {}", out.display());
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::TrainTeacher(args) => {
            let (cfg, out) = args.resolve("train-teacher")?;
            info!("training teacher into {}", out.display());
            summarize(&pipeline::train_teacher(&cfg, &out)?, &out);
        }
        Command::Squeeze(args) => {
            let (cfg, out) = args.resolve("squeeze")?;
            info!("{} student with {} into {}", cfg.reparam.label(), cfg.objective.label(), out.display());
            summarize(&pipeline::squeeze(&cfg, &out)?, &out);
        }
        Command::GatedFinetune(args) => {
            let (cfg, out) = args.resolve("gated-finetune")?;
            summarize(&pipeline::gated_finetune(&cfg, &out)?, &out);
        }
        Command::Bench(args) => {
            let (cfg, out) = args.resolve("bench")?;
            let report = pipeline::bench(&cfg, &out)?;
            println!("{}", report.text());
            println!("wrote {}", out.display());
        }
        Command::Verify { seed } => {
            let checks = run_checks(seed)?;
            for c in &checks {
                println!("{}", c.line());
            }
            if let Some(bad) = checks.iter().find(|c| !c.passed()) {
                eprintln!("verify failed: {}", bad.name);
                return Ok(false);
            }
            println!("all {} checks passed", checks.len());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SQUEEZE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
