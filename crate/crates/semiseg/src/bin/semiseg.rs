//! Command-line front end: train, evaluate, generate synthetic datasets, and
//! export prompt sets for offline inspection.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use semiseg::metrics::DistanceUnit;
use semiseg::network::Backbone;
use semiseg::oracle::{extract_prompts, PromptSet};
use semiseg::rng::{derive_seed, hash_bytes};
use semiseg::trainer::{
    evaluate, half_stride, infer_prob_volume, train, train_resumed, Checkpoint, ExperimentConfig,
};
use semiseg::volumes::{load_dataset_dir, PhantomDatasetSpec};

#[derive(Parser)]
#[command(
    name = "semiseg",
    version,
    about = "Semi-supervised 3D segmentation training with teacher consistency and a promptable-oracle branch"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitArg {
    Voxel,
    Mm,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training experiment described by a TOML config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint instead of initializing fresh
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every annotated case in a dataset directory
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for report files (defaults to stdout only)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = UnitArg::Voxel)]
        unit: UnitArg,
    },
    /// Generate a synthetic phantom dataset from a JSON spec
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract and dump prompt sets from a checkpointed model's predictions
    ExportPrompts {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output JSON path (defaults to stdout)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Positive prompt points per case
        #[arg(long, default_value_t = 1)]
        k_positive: usize,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, resume } => {
            let cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            let outcome = match resume {
                Some(ckpt) => train_resumed(cfg, &ckpt)?,
                None => train(cfg)?,
            };
            println!(
                "finished {} iterations; log: {}; final checkpoint: {}",
                outcome.rows.len(),
                outcome.log_path.display(),
                outcome.final_checkpoint.display()
            );
            if let Some((t, report)) = outcome.reports.last() {
                println!(
                    "eval@{t}: dice {:.2}% jaccard {:.2}% asd {:.3} hd95 {:.3}",
                    report.mean_dice_pct, report.mean_jaccard_pct, report.mean_asd, report.mean_hd95
                );
            }
        }
        Cmd::Eval {
            checkpoint,
            data,
            out,
            unit,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let backbone = Backbone::new(ckpt.backbone)?;
            let cases = load_dataset_dir(&data)?;
            let test: Vec<_> = cases
                .into_iter()
                .filter_map(|c| c.mask.map(|m| (c.id, c.volume, m)))
                .collect();
            if test.is_empty() {
                bail!("no annotated cases found under {}", data.display());
            }
            let patch = ckpt.config.training.patch;
            let unit = match unit {
                UnitArg::Voxel => DistanceUnit::Voxel,
                UnitArg::Mm => DistanceUnit::Millimeter,
            };
            let report = evaluate(&backbone, &ckpt.theta, &test, patch, half_stride(patch), unit)?;
            print!("{}", report.to_csv());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("eval.csv"), report.to_csv())?;
                std::fs::write(dir.join("eval.json"), report.to_json()?)?;
                println!("reports written to {}", dir.display());
            }
        }
        Cmd::GenSynth { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .with_context(|| format!("reading spec {}", spec.display()))?;
            let spec: PhantomDatasetSpec = serde_json::from_str(&text)?;
            let split = spec.write_dataset(&out)?;
            println!(
                "wrote {} cases to {} ({} labeled / {} unlabeled / {} test)",
                spec.n_cases,
                out.display(),
                split.labeled.len(),
                split.unlabeled.len(),
                split.test.len()
            );
        }
        Cmd::ExportPrompts {
            checkpoint,
            data,
            out,
            k_positive,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let backbone = Backbone::new(ckpt.backbone)?;
            let cases = load_dataset_dir(&data)?;
            let patch = ckpt.config.training.patch;
            let stride = half_stride(patch);

            #[derive(Serialize)]
            struct CasePrompts {
                id: String,
                prompts: PromptSet,
            }
            #[derive(Serialize)]
            struct Dump {
                version: u32,
                k_positive: usize,
                cases: Vec<CasePrompts>,
            }
            let mut dump = Dump {
                version: 1,
                k_positive,
                cases: Vec::new(),
            };
            for case in &cases {
                let probs = infer_prob_volume(&backbone, &ckpt.theta, &case.volume, patch, stride)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    ckpt.oracle_seed,
                    &[hash_bytes(case.id.as_bytes())],
                ));
                let prompts = extract_prompts(&probs, k_positive, &mut rng);
                dump.cases.push(CasePrompts {
                    id: case.id.clone(),
                    prompts,
                });
            }
            let json = serde_json::to_string_pretty(&dump)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, json)?;
                    println!("prompt sets written to {}", path.display());
                }
                None => println!("{json}"),
            }
        }
    }
    Ok(())
}
