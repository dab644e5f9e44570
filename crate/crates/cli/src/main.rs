use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use geoseg_cli::commands::{
    cmd_ablate, cmd_curate, cmd_evaluate, cmd_featurize, cmd_predict, cmd_train,
};
use geoseg_cli::config::PipelineConfig;
use geoseg_cli::exit_code;
use geoseg_core::features::CompositeKind;
use geoseg_core::Result;

#[derive(Parser)]
#[command(
    name = "geoseg",
    about = "Building segmentation: dataset curation, guiding features, Res-U-Net training, evaluation",
    version
)]
struct Cli {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chip image/mask pairs, filter by label density, split, write a manifest.
    Curate {
        /// Directory holding images/ and masks/ subdirectories.
        input_dir: PathBuf,
        #[arg(long, default_value = "curated")]
        out_dir: PathBuf,
    },
    /// Derive PC1/Sobel/VDVI/MBI bands and write composites for a manifest.
    Featurize {
        manifest: PathBuf,
        /// Which composite fills the network input slots.
        #[arg(long, value_parser = parse_composite)]
        composite: Option<CompositeKind>,
    },
    /// Train the network on a manifest's train/val splits.
    Train {
        manifest: PathBuf,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Run a checkpoint over tiles, writing probability maps and masks.
    Predict {
        checkpoint: PathBuf,
        tiles_dir: PathBuf,
        #[arg(long, default_value = "predictions")]
        out_dir: PathBuf,
        /// Binarization threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Histogram-equalize tiles before inference.
        #[arg(long)]
        equalize: bool,
    },
    /// Compare predicted masks against ground truth.
    Evaluate {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        #[arg(long, default_value = "evaluation")]
        out_dir: PathBuf,
        /// Optional tab-separated id/group map for per-group aggregation.
        #[arg(long)]
        group_map: Option<PathBuf>,
    },
    /// Desk-scale loss and training-policy comparison harnesses.
    Ablate {
        #[arg(long, default_value = "ablation")]
        out_dir: PathBuf,
    },
}

fn parse_composite(s: &str) -> std::result::Result<CompositeKind, String> {
    s.parse().map_err(|e: geoseg_core::Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Curate { input_dir, out_dir } => {
            let out = cmd_curate(&input_dir, &out_dir, &cfg)?;
            println!(
                "curated {} tiles ({} dropped by HLF): {} train / {} val -> {}",
                out.kept,
                out.dropped,
                out.train,
                out.val,
                out.manifest_path.display()
            );
        }
        Command::Featurize { manifest, composite } => {
            let kind = match composite {
                Some(k) => k,
                None => cfg.composite_kind()?,
            };
            let n = cmd_featurize(&manifest, kind, &cfg)?;
            println!("wrote {n} {kind} composites, manifest updated");
        }
        Command::Train { manifest, out_dir } => {
            let out = cmd_train(&manifest, &out_dir, &cfg)?;
            println!(
                "trained {} epochs, best val loss {:.6} at epoch {}",
                out.epochs, out.best_val_loss, out.best_epoch
            );
            println!("checkpoint: {}", out.checkpoint_path.display());
            println!("history: {}", out.history_path.display());
        }
        Command::Predict {
            checkpoint,
            tiles_dir,
            out_dir,
            threshold,
            equalize,
        } => {
            let threshold = threshold.unwrap_or(cfg.evaluation.threshold);
            let out = cmd_predict(&checkpoint, &tiles_dir, &out_dir, threshold, equalize)?;
            println!("predicted {} tiles into {}", out.outputs.len(), out_dir.display());
        }
        Command::Evaluate {
            pred_dir,
            gt_dir,
            out_dir,
            group_map,
        } => {
            let mode = cfg.aggregation_mode()?;
            let out = cmd_evaluate(&pred_dir, &gt_dir, &out_dir, group_map.as_deref(), mode)?;
            println!(
                "evaluated {} images -> {} and {}",
                out.images,
                out.metrics_path.display(),
                out.groups_path.display()
            );
        }
        Command::Ablate { out_dir } => {
            let out = cmd_ablate(&out_dir, &cfg)?;
            for (kind, iou) in &out.loss_mean_iou {
                println!("loss {kind}: mean training IoU {iou:.4}");
            }
            println!(
                "wrote {}, {}, {}",
                out.loss_csv.display(),
                out.policy_csv.display(),
                out.policy_summary_csv.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
