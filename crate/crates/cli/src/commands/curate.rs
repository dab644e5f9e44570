//! `curate`: chip image/mask pairs, apply the High Label Filter, split and
//! write the manifest.

use std::path::{Path, PathBuf};

use geoseg_core::curation::{
    chip, filter_by_hlf, split_train_val, write_manifest, Manifest, ManifestEntry, Split,
};
use geoseg_core::raster::{load_mask, load_tile, save_mask, save_tile};
use geoseg_core::{Error, Result};

use crate::config::PipelineConfig;

use super::{ensure_dir, file_stem, list_rasters};

#[derive(Debug)]
pub struct CurateOutcome {
    pub manifest_path: PathBuf,
    pub kept: usize,
    pub dropped: usize,
    pub train: usize,
    pub val: usize,
}

/// Input layout: `<input_dir>/images/*.png` with masks of the same file name
/// under `<input_dir>/masks/`.
pub fn cmd_curate(input_dir: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<CurateOutcome> {
    cfg.validate()?;
    let ccfg = cfg.curation_config();
    let images_dir = input_dir.join("images");
    let masks_dir = input_dir.join("masks");
    if !images_dir.is_dir() || !masks_dir.is_dir() {
        return Err(Error::Data(format!(
            "{}: expected images/ and masks/ subdirectories",
            input_dir.display()
        )));
    }
    let image_files = list_rasters(&images_dir)?;
    if image_files.is_empty() {
        return Err(Error::Data(format!("{}: no rasters found", images_dir.display())));
    }

    ensure_dir(&out_dir.join("tiles"))?;
    ensure_dir(&out_dir.join("masks"))?;

    let mut kept_pairs = Vec::new();
    let mut total = 0usize;
    for image_path in &image_files {
        let mask_path = masks_dir.join(image_path.file_name().unwrap());
        if !mask_path.exists() {
            return Err(Error::Data(format!(
                "{}: missing mask {}",
                image_path.display(),
                mask_path.display()
            )));
        }
        let source_id = file_stem(image_path);
        let image = load_tile(image_path, 3)?.remeta(cfg.curation.gsd, source_id, (0, 0))?;
        let mask = load_mask(&mask_path)?;
        let pairs = chip(&image, &mask, ccfg.tile_size)?;
        total += pairs.len();
        kept_pairs.extend(filter_by_hlf(pairs, ccfg.hlf_threshold));
    }
    let kept = kept_pairs.len();
    let dropped = total - kept;
    if kept == 0 {
        return Err(Error::Data(format!(
            "no tiles passed the HLF threshold {}",
            ccfg.hlf_threshold
        )));
    }

    // split over indices, then write files and entries in curation order
    let indices: Vec<usize> = (0..kept).collect();
    let (train_idx, _) = split_train_val(indices, ccfg.split_ratio, ccfg.seed)?;
    let train_set: std::collections::HashSet<usize> = train_idx.into_iter().collect();

    let mut entries = Vec::with_capacity(kept);
    let mut n_train = 0usize;
    for (i, (tile, mask)) in kept_pairs.iter().enumerate() {
        let (oy, ox) = tile.origin();
        let name = format!("{}_y{oy}_x{ox}.png", tile.source_id());
        let tile_rel = PathBuf::from("tiles").join(&name);
        let mask_rel = PathBuf::from("masks").join(&name);
        save_tile(tile, &out_dir.join(&tile_rel))?;
        save_mask(mask, &out_dir.join(&mask_rel))?;
        let split = if train_set.contains(&i) {
            n_train += 1;
            Split::Train
        } else {
            Split::Val
        };
        entries.push(ManifestEntry {
            tile_path: tile_rel,
            mask_path: mask_rel,
            gsd: tile.gsd(),
            source_id: tile.source_id().to_string(),
            split,
            composite_path: None,
        });
    }

    let manifest = Manifest::new(ccfg.seed, entries);
    let manifest_path = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &manifest_path)?;
    Ok(CurateOutcome {
        manifest_path,
        kept,
        dropped,
        train: n_train,
        val: kept - n_train,
    })
}
