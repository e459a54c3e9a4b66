use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mrn_core::engine::{
    ablate, evaluate, export_episode_similarity, gradcheck_config, gradcheck_episode, load_model,
    load_run_dataset, save_model, synth_spec_from_text, train_with_progress, RunConfig, Sweep,
};
use mrn_core::episodes::{synth_dataset, write_dataset};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "mrn",
    version,
    about = "Memory-augmented relation network for few-shot classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value`, applied after the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on freshly sampled episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train and evaluate every cell of a sweep grid; write a CSV table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the memory similarity matrix of one evaluation episode.
    ExportSimilarity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a Gaussian-cluster dataset.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full episode loss.
    Gradcheck,
}

fn read(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = RunConfig::from_text(&read(&config)?)?.with_overrides(&overrides)?;
            let ds = load_run_dataset(&cfg)?;
            let seed = cfg.seeds[0];
            let total = cfg.episodes;
            let mut window = 0.0;
            let out = train_with_progress(&cfg, &ds, seed, |i, loss| {
                window += loss;
                if (i + 1) % 500 == 0 || i + 1 == total {
                    let n = (i % 500 + 1) as f64;
                    eprintln!("episode {:>6}/{total}  mean loss {:.4}", i + 1, window / n);
                    window = 0.0;
                }
            })?;
            save_model(&cfg.checkpoint, &cfg, &out.params)?;
            println!(
                "wrote {} ({} tensors, final lr {:e})",
                cfg.checkpoint.display(),
                out.params.len(),
                out.final_lr
            );
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
        } => {
            let (cfg, params) = load_model(&checkpoint)?;
            let ds = load_run_dataset(&cfg)?;
            let r = evaluate(&cfg, &params, &ds, episodes, seed)?;
            println!(
                "{}-way {}-shot, {} episodes: accuracy {:.2}% +- {:.2}%",
                cfg.ways,
                cfg.shots,
                r.episodes,
                100.0 * r.mean_accuracy,
                100.0 * r.ci95
            );
        }
        Command::Ablate { config, sweep, out } => {
            let cfg = RunConfig::from_text(&read(&config)?)?;
            let sweep = Sweep::from_text(&read(&sweep)?)?;
            let ds = load_run_dataset(&cfg)?;
            let rows = ablate(&cfg, &sweep, &ds, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::ExportSimilarity {
            checkpoint,
            episode_seed,
            out,
        } => {
            let (cfg, params) = load_model(&checkpoint)?;
            let ds = load_run_dataset(&cfg)?;
            let sim = export_episode_similarity(&cfg, &params, &ds, episode_seed, &out)?;
            println!(
                "wrote {}x{} similarity matrix to {}",
                sim.rows(),
                sim.rows(),
                out.display()
            );
        }
        Command::GenSynth { spec, out } => {
            let spec = synth_spec_from_text(&read(&spec)?)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let ds = synth_dataset(&spec)?;
            let path = out.join("synth.mrnd");
            write_dataset(&ds, &path)?;
            println!("wrote {} items to {}", ds.items().len(), path.display());
        }
        Command::Gradcheck => {
            let err = gradcheck_episode(&gradcheck_config(), 0, 1e-5)?;
            println!("max relative error {err:.3e} (tolerance {GRADCHECK_TOL:e})");
            if err >= GRADCHECK_TOL {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
