//! `train`: load the manifest splits, run the two-phase loop, save the best
//! checkpoint and the history CSV.

use std::path::{Path, PathBuf};

use geoseg_core::curation::{read_manifest, resolve, Split};
use geoseg_core::network::{build_model, save_checkpoint, CheckpointMeta, ModelConfig};
use geoseg_core::raster::{load_mask, load_tile, MaskTile, Tile};
use geoseg_core::training::{train, write_history, Dataset};
use geoseg_core::{Error, Result};

use crate::config::PipelineConfig;

use super::ensure_dir;

#[derive(Debug)]
pub struct TrainOutputs {
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs: usize,
}

fn load_split(manifest_path: &Path, split: Split) -> Result<Vec<(Tile, MaskTile)>> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for entry in manifest.split_entries(split) {
        let raster = entry.composite_path.as_ref().unwrap_or(&entry.tile_path);
        let tile = load_tile(&resolve(base, raster), 3)?
            .remeta(entry.gsd, entry.source_id.clone(), (0, 0))?;
        let mask = load_mask(&resolve(base, &entry.mask_path))?;
        out.push((tile, mask));
    }
    Ok(out)
}

pub fn cmd_train(manifest_path: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<TrainOutputs> {
    cfg.validate()?;
    let train_pairs = load_split(manifest_path, Split::Train)?;
    let val_pairs = load_split(manifest_path, Split::Val)?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Data(
            "manifest needs both train and val entries to train on".into(),
        ));
    }
    let train_set = Dataset::from_pairs(&train_pairs)?;
    let val_set = Dataset::from_pairs(&val_pairs)?;
    if train_set.h % 32 != 0 || train_set.w % 32 != 0 {
        return Err(Error::Data(format!(
            "training tiles are {}x{}, which does not divide by 32",
            train_set.h, train_set.w
        )));
    }

    let model_cfg = ModelConfig {
        input_size: (train_set.h, train_set.w),
        ..cfg.model_config()?
    };
    let mut model = build_model(&model_cfg, cfg.seed)?;
    let policy = cfg.train_policy();
    let schedule = cfg.schedule_policy()?;
    let loss_cfg = cfg.loss_config();
    let kind = cfg.loss_kind()?;

    let outcome = train(&mut model, &train_set, &val_set, &policy, &schedule, &loss_cfg, kind)?;

    ensure_dir(out_dir)?;
    let checkpoint_path = out_dir.join("model.gsck");
    let meta = CheckpointMeta {
        config: model_cfg,
        epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        prng_state: outcome.rng_state,
    };
    save_checkpoint(&mut model, &meta, &checkpoint_path)?;
    let history_path = out_dir.join("history.csv");
    write_history(&outcome.history, &history_path)?;
    Ok(TrainOutputs {
        checkpoint_path,
        history_path,
        best_val_loss: outcome.best_val_loss,
        best_epoch: outcome.best_epoch,
        epochs: outcome.history.len(),
    })
}
