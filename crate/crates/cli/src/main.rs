use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use dsflow_cli::config::{ExperimentConfig, Scale};
use dsflow_cli::pipeline::{self, Method};
use dsflow_core::integrators::IntegratorKind;

#[derive(Parser)]
#[command(
    name = "dsflow",
    about = "Rectified-flow training, reflow and divergence-aware sampling on planar benchmarks"
)]
struct Cli {
    /// Config file; without one the desk-scale checkerboard preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Restrict to one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override `key=value` (repeatable), e.g. `--set train.iterations=500`.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the base model on the independent coupling.
    TrainBase,
    /// Run every reflow round for one method.
    Reflow {
        #[arg(long, default_value = "ds")]
        method: String,
    },
    /// Sample from a checkpoint and write `x,y` CSV.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "euler")]
        integrator: String,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value = "samples.csv")]
        output: PathBuf,
    },
    /// Evaluate every checkpoint under the output directory.
    Eval,
    /// Divergence/compression study on base, vanilla-k1 and DS-k1.
    Mechanism,
    /// Helmholtz decomposition of a checkpoint's field on a grid.
    Helmholtz {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Every stage, then the manifest.
    RunAll,
    /// Print the resolved configuration preset.
    Preset {
        #[arg(default_value = "checkerboard")]
        benchmark: String,
        #[arg(long)]
        paper: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset("checkerboard", Scale::Desk)?,
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("--set expects key=value, got {o:?}"))?;
        cfg.set(k.trim(), v.trim()).with_context(|| format!("--set {o}"))?;
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    if let Cmd::Preset { benchmark, paper } = &cli.cmd {
        let cfg = ExperimentConfig::preset(benchmark, if *paper { Scale::Paper } else { Scale::Desk })?;
        println!("{cfg:#?}");
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::TrainBase => {
            for &seed in &cfg.seeds {
                pipeline::train_base(&cfg, seed)?;
            }
        }
        Cmd::Reflow { method } => {
            let method = Method::parse(method)?;
            for &seed in &cfg.seeds {
                pipeline::reflow(&cfg, seed, method)?;
            }
        }
        Cmd::Generate { checkpoint, integrator, n, output } => {
            let kind = IntegratorKind::parse(integrator).ok_or_else(|| anyhow!("unknown integrator {integrator:?}"))?;
            let spec = pipeline::integrator_of_kind(&cfg, kind);
            pipeline::generate(&cfg, checkpoint, &spec, *n, cfg.seeds[0], output)?;
        }
        Cmd::Eval => {
            for r in pipeline::eval(&cfg)? {
                println!("{}", r.csv_row());
            }
        }
        Cmd::Mechanism => {
            for r in pipeline::mechanism(&cfg)? {
                println!(
                    "{}: pearson {:?} spearman {:?} mean|div| {:.4} crossing {:.4} capped {}",
                    r.name, r.pearson, r.spearman, r.mean_abs_div, r.crossing_frac, r.capped
                );
            }
        }
        Cmd::Helmholtz { checkpoint } => {
            let c = pipeline::helmholtz(&cfg, checkpoint.as_deref())?;
            println!(
                "reconstruction {:.3e} div(u) {:.3e} orthogonality {:.3e}",
                c.reconstruction, c.transport_divergence, c.orthogonality
            );
        }
        Cmd::RunAll => pipeline::run_all(&cfg)?,
        Cmd::Preset { .. } => unreachable!(),
    }
    if !matches!(cli.cmd, Cmd::RunAll | Cmd::Generate { .. }) && cfg.output_dir.exists() {
        pipeline::write_manifest(&cfg.output_dir)?;
    }
    Ok(())
}
