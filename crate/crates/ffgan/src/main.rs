use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use ffgan::checkpoint;
use ffgan::data::{generate_dataset, Dataset};
use ffgan::evaluate::{evaluate, write_csv};
use ffgan::harness::{ablate, sweep_lambda2, write_ablation_csv, write_sweep_csv, VARIANTS};
use ffgan::train::{pretrain, train};
use ffgan::visualize::{dump_attention, sample_grid};
use ffgan::RunConfig;

#[derive(Parser)]
#[command(name = "ffgan", about = "Text-to-image GAN with word-level affine fusion, trained on procedural shapes")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lambda2=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the shapes corpus into `data.dir`.
    GenData,
    /// Train the text and image matching encoders.
    Pretrain,
    /// Train (or resume) the adversarial model.
    Train,
    /// Write a PNG grid of stage 0/1/2 images, one row per caption.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "caption", required = true)]
        captions: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "samples.png")]
        out: PathBuf,
    },
    /// Write per-word attention heatmaps of both refinement stages.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "attention")]
        out: PathBuf,
    },
    /// FID and R-precision of checkpoints (default: every checkpoint of the run).
    Evaluate {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the baseline, +FF-Block, +GSR and full variants.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per matching-loss weight.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 5.0, 10.0])]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides).context("loading configuration")?;
    ffgan::config::check_device()?;
    let open = || Dataset::open(&config.data.dir).context("opening dataset");
    match cli.command {
        Command::GenData => {
            let data = generate_dataset(config.data.n, config.data.seed, &config.data.dir)?;
            println!("wrote {} records ({} words) to {}", data.len(), data.vocab.len(), config.data.dir.display());
        }
        Command::Pretrain => {
            let report = pretrain(&config, &open()?)?;
            for (e, l) in report.epoch_losses.iter().enumerate() {
                println!("epoch {e}: matching loss {l:.4}");
            }
            println!("encoders saved to {}", report.dir.display());
        }
        Command::Train => {
            let outcome = train(&config, &open()?)?;
            println!("{} steps, {} epochs; last checkpoint {}", outcome.steps, outcome.epochs, outcome.checkpoint.display());
            if let Some(p) = outcome.last {
                println!("final L_G {:.4}, L_D {:.4}", p.total_generator, p.total_discriminator);
            }
        }
        Command::Sample { checkpoint, captions, seed, out } => {
            let ck = checkpoint::load(&checkpoint)?;
            sample_grid(&ck, &captions, seed, &out)?;
            println!("wrote {}", out.display());
        }
        Command::DumpAttn { checkpoint, caption, seed, out } => {
            let ck = checkpoint::load(&checkpoint)?;
            let files = dump_attention(&ck, &caption, seed, &out)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
        Command::Evaluate { checkpoints, out } => {
            let data = open()?;
            let dirs = if checkpoints.is_empty() { run_checkpoints(&config)? } else { checkpoints };
            if dirs.is_empty() {
                bail!("no checkpoints under {}", config.checkpoint_root().display());
            }
            let mut reports = Vec::new();
            for dir in dirs {
                let report = evaluate(&checkpoint::load(&dir)?, &data, &config.eval)?;
                println!("{}", report.summary());
                reports.push(report);
            }
            let out = out.unwrap_or_else(|| config.out_dir.join("eval.csv"));
            write_csv(&out, &reports)?;
            println!("wrote {}", out.display());
        }
        Command::Ablate { seeds, out } => {
            let seeds = seeds.unwrap_or_else(|| vec![config.seed]);
            let rows = ablate(&config, &open()?, &VARIANTS, &seeds)?;
            for r in &rows {
                println!("{} seed {}: {}", r.variant, r.seed, r.report.summary());
            }
            let out = out.unwrap_or_else(|| config.out_dir.join("ablation.csv"));
            write_ablation_csv(&out, &rows)?;
            println!("wrote {}", out.display());
        }
        Command::Sweep { values, out } => {
            let rows = sweep_lambda2(&config, &open()?, &values)?;
            for (v, r) in &rows {
                println!("lambda2 = {v}: {}", r.summary());
            }
            let out = out.unwrap_or_else(|| config.out_dir.join("sweep.csv"));
            write_sweep_csv(&out, &rows)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

/// Checkpoints of the configured run, oldest first.
fn run_checkpoints(config: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let root = config.checkpoint_root();
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<(u64, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(&root)? {
        let path = entry?.path();
        if path.join(checkpoint::MANIFEST).exists() {
            dirs.push((checkpoint::read_manifest(&path)?.step, path));
        }
    }
    dirs.sort();
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}
