use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmaae_toolkit::commands::{cmd_eval, cmd_generate, cmd_infer, cmd_train};
use cmaae_toolkit::{Ablation, Overrides, Result, RunConfig};

#[derive(Parser)]
#[command(name = "cmaae", version, about = "Memory-augmented autoencoder for surface defect segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    t1: Option<usize>,
    #[arg(long)]
    t2: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// One of full, no-stage2, cat, mam, no-msfr.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Output directory, overriding the config.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic texture dataset.
    Generate(Common),
    /// Train stage 1 and stage 2.
    Train(Common),
    /// Reconstruct and score one image.
    Infer {
        #[command(flatten)]
        common: Common,
        image: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    cfg.apply(&Overrides {
        t1: c.t1,
        t2: c.t2,
        seed: c.seed,
        ablation: c.ablation,
        output: c.output.clone(),
    })?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let s = cmd_generate(&load(&c)?)?;
            println!("wrote {} images and {} masks", s.images, s.masks);
        }
        Command::Train(c) => {
            let s = cmd_train(&load(&c)?)?;
            println!(
                "{}: {} stage-1 and {} stage-2 steps, checkpoint {}",
                s.stage, s.stage1_steps, s.stage2_steps, s.checkpoint
            );
        }
        Command::Infer { common, image, checkpoint } => {
            let s = cmd_infer(&load(&common)?, &image, checkpoint.as_deref())?;
            if s.resized {
                println!("note: input of {}x{} was resized", s.original_size.0, s.original_size.1);
            }
            println!("image score {:.6e}", s.image_score);
        }
        Command::Eval { common, checkpoint } => {
            let r = cmd_eval(&load(&common)?, checkpoint.as_deref())?;
            print!("{}", r.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
