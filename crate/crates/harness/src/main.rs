use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use synskin::{generate_dataset, SynSkinConfig, SynSkinGenerator};
use viconex_harness::pipeline::{
    for_seeds, run_ablate, run_compare, run_eval, run_explain, run_train, write_train_seed_summary, ExplainInput,
};
use viconex_harness::{HarnessError, RunConfig};

#[derive(Parser)]
#[command(name = "viconex", version, about = "Concept-token transformer: data, training, evaluation, maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, HarnessError> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset tools.
    Synskin {
        #[command(subcommand)]
        command: SynskinCommand,
    },
    /// Train a model; writes checkpoints and the step log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/last.ckpt` if it exists.
        #[arg(long)]
        resume: bool,
        /// Repeat the run for each seed under `<out>/seed-<s>`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Evaluate a checkpoint on a dataset with masks.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dice thresholds; repeat or separate with commas.
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Export concept maps and overlays for predicted concepts.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        image: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Only the first N dataset images.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pooling × loss-combination grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train and evaluate all four variants.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

#[derive(Subcommand)]
enum SynskinCommand {
    Generate {
        /// TOML generator configuration; defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn synskin_config(path: Option<&Path>) -> Result<SynSkinConfig, HarnessError> {
    let Some(p) = path else {
        return Ok(SynSkinConfig::default());
    };
    let text = std::fs::read_to_string(p)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?;
    toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synskin {
            command: SynskinCommand::Generate { config, count, seed, out },
        } => {
            let gen = SynSkinGenerator::new(synskin_config(config.as_deref())?)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            let m = generate_dataset(&gen, count, seed, &out).map_err(HarnessError::from)?;
            println!("wrote {} samples to {}", m.count, out.display());
        }
        Command::Train { cfg, out, resume, seeds } => {
            let cfg = cfg.load()?;
            if seeds.is_empty() {
                let s = run_train(&cfg, &out, resume)?;
                println!("trained {} epochs, final loss {:.5}", s.epochs, s.final_loss);
            } else {
                let runs = for_seeds(&cfg, &seeds, &out, |c, d| run_train(c, d, resume))?;
                write_train_seed_summary(&out, &runs)?;
                println!("trained {} seeds; summary in {}", runs.len(), out.join("seeds.csv").display());
            }
        }
        Command::Eval {
            ckpt,
            data,
            out,
            tau,
            cfg,
        } => {
            let mut rc = cfg.load()?;
            if !tau.is_empty() {
                rc.eval.taus = tau;
                rc.validate()?;
            }
            let r = run_eval(&ckpt, &data, &rc.eval, &out)?;
            println!(
                "f1 {:.4} auc {:.4} dice {:.4} (best {:.4}) -> {}",
                r.f1.value(),
                r.auc.value(),
                r.dice.value(),
                r.best_dice().unwrap_or(f64::NAN),
                out.join("report.json").display()
            );
        }
        Command::Explain {
            ckpt,
            image,
            data,
            limit,
            out,
        } => {
            let input = match (image, data) {
                (Some(p), _) => ExplainInput::Image(p),
                (None, Some(dir)) => ExplainInput::Data { dir, limit },
                (None, None) => unreachable!("clap requires one input"),
            };
            let idx = run_explain(&ckpt, &input, &out, 16)?;
            let maps: usize = idx.images.iter().map(|e| e.maps.len()).sum();
            println!("{} images, {maps} maps -> {}", idx.images.len(), out.display());
        }
        Command::Ablate { cfg, out, seeds } => {
            let cfg = cfg.load()?;
            let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds };
            let single = seeds.len() == 1;
            for_seeds(&cfg, &seeds, &out, |c, d| run_ablate(c, if single { &out } else { d }))?;
            println!("ablation grid written under {}", out.display());
        }
        Command::Compare { cfg, out, seeds } => {
            let cfg = cfg.load()?;
            let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds };
            let single = seeds.len() == 1;
            for_seeds(&cfg, &seeds, &out, |c, d| run_compare(c, if single { &out } else { d }))?;
            println!("variant comparison written under {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()).context("viconex failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<HarnessError>().map_or(1, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
