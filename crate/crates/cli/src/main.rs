use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use uprise_core::config::{LmKind, RawConfig, RunConfig};
use uprise_core::pipeline::{self, with_workers};
use uprise_core::synthetic::{generate, CorpusShape};
use uprise_core::taskdata::PoolMode;

#[derive(Parser)]
#[command(
    name = "uprise",
    version,
    about = "Prompt retrieval for zero-shot evaluation of a frozen LM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the training and inference prompt pools.
    PoolBuild(RunArgs),
    /// Score candidate prompts and write labeled instances.
    Label(RunArgs),
    /// Train the retriever on labeled instances.
    Train(RunArgs),
    /// Encode the inference pool with the trained prompt tower.
    IndexBuild(RunArgs),
    /// Evaluate the hold-out cluster with k retrieved prompts.
    Eval(RunArgs),
    /// Per-task and per-cluster deltas between two reports.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        /// Also write the delta table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run every stage, then evaluate with k = 0 and the configured k.
    Pipeline(RunArgs),
    /// Write the synthetic topic corpus and its mock LM table.
    Synth {
        #[arg(long, default_value = "data/synthetic")]
        out: PathBuf,
        #[arg(long, default_value_t = CorpusShape::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = CorpusShape::default().train_per_task)]
        train_per_task: usize,
        #[arg(long, default_value_t = CorpusShape::default().test_per_task)]
        test_per_task: usize,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lm: Option<LmKind>,
    #[arg(long)]
    lm_url: Option<String>,
    #[arg(long)]
    holdout_cluster: Option<String>,
    #[arg(long)]
    pool_mode: Option<PoolMode>,
    #[arg(long)]
    target_task: Option<String>,
    /// Directory for every artifact of the run.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RawConfig::load(p)?,
            None => RawConfig::default(),
        };
        let flags = RawConfig {
            seed: self.seed,
            workers: self.workers,
            k: self.k,
            lm: self.lm,
            lm_url: self.lm_url.clone(),
            holdout_cluster: self.holdout_cluster.clone(),
            pool_mode: self.pool_mode,
            target_task: self.target_task.clone(),
            out_dir: self.out_dir.clone(),
            ..RawConfig::default()
        };
        Ok(RunConfig::resolve(base.overlay(flags))?)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            train_per_task,
            test_per_task,
        } => {
            generate(&CorpusShape {
                train_per_task,
                test_per_task,
                seed,
            })
            .write(&out)?;
            println!("wrote synthetic corpus to {}", out.display());
        }
        Command::Compare {
            baseline,
            candidate,
            csv,
        } => {
            let table = pipeline::compare(&baseline, &candidate)?;
            print!("{}", table.render_table());
            if let Some(path) = csv {
                table.write_csv(&path)?;
            }
        }
        Command::PoolBuild(args) => {
            let cfg = args.resolve()?;
            let pools = with_workers(cfg.workers, || pipeline::pool_build(&cfg))??;
            println!(
                "training pool: {} prompts, inference pool: {} prompts",
                pools.training.len(),
                pools.inference.len()
            );
        }
        Command::Label(args) => {
            let cfg = args.resolve()?;
            let lm = pipeline::build_lm(&cfg)?;
            let s = with_workers(cfg.workers, || pipeline::label(&cfg, lm.as_ref()))??;
            println!(
                "labeled {} ({} filtered): {} train / {} valid",
                s.labeled,
                s.filtered,
                s.train.len(),
                s.valid.len()
            );
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = with_workers(cfg.workers, || pipeline::train_stage(&cfg))??;
            for e in &out.epochs {
                println!(
                    "epoch {}: mean loss {:.4}, validation accuracy {:.4}",
                    e.epoch, e.mean_loss, e.valid_accuracy
                );
            }
            println!(
                "best epoch {} saved to {}",
                out.best.epoch,
                cfg.paths.checkpoint.display()
            );
        }
        Command::IndexBuild(args) => {
            let cfg = args.resolve()?;
            let index = with_workers(cfg.workers, || pipeline::index_build(&cfg))??;
            println!("indexed {} prompts", index.len());
        }
        Command::Eval(args) => {
            let cfg = args.resolve()?;
            let lm = pipeline::build_lm(&cfg)?;
            let report = with_workers(cfg.workers, || pipeline::eval(&cfg, lm.as_ref(), cfg.k))??;
            print!("{}", report.render_table());
        }
        Command::Pipeline(args) => {
            let cfg = args.resolve()?;
            let lm = pipeline::build_lm(&cfg)?;
            let s = with_workers(cfg.workers, || pipeline::run_pipeline(&cfg, lm.as_ref()))??;
            println!("labeled {} ({} filtered)", s.labeled, s.filtered);
            println!(
                "validation retrieval accuracy {:.4} at epoch {} (initial {:.4})",
                s.valid_accuracy, s.best_epoch, s.initial_accuracy
            );
            print!("{}", s.baseline.render_table());
            print!("{}", s.retrieval.render_table());
            print!("{}", s.delta.render_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()).context("uprise failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
