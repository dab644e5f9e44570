//! `predict`: run a checkpoint over a directory of tiles, writing per-tile
//! probability maps and binary masks.

use std::path::{Path, PathBuf};

use geoseg_core::evaluation::binarize;
use geoseg_core::features::hist_equalize;
use geoseg_core::network::load_checkpoint;
use geoseg_core::nn::Tensor;
use geoseg_core::raster::{
    load_tile, normalize_band, save_band_u8, save_mask, Band, BandName, Grid, ProbMap, Tile,
    ValueRange,
};
use geoseg_core::training::building_probs;
use geoseg_core::{Error, Result};

use super::{ensure_dir, file_stem, list_rasters};

#[derive(Debug)]
pub struct PredictOutcome {
    /// (probability map, binary mask) path pairs, one per input tile.
    pub outputs: Vec<(PathBuf, PathBuf)>,
}

pub fn cmd_predict(
    checkpoint: &Path,
    tiles_dir: &Path,
    out_dir: &Path,
    threshold: f64,
    equalize: bool,
) -> Result<PredictOutcome> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let (model, _meta) = load_checkpoint(checkpoint)?;
    let files = list_rasters(tiles_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no rasters found", tiles_dir.display())));
    }
    ensure_dir(out_dir)?;
    let mut outputs = Vec::with_capacity(files.len());
    for path in &files {
        let mut tile = load_tile(path, 3)?;
        if equalize {
            tile = hist_equalize(&tile)?;
        }
        let (h, w) = (tile.h(), tile.w());
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Data(format!(
                "{}: tile is {h}x{w}, which does not divide by 32",
                path.display()
            )));
        }
        let x = input_tensor(&tile)?;
        let logits = model.forward(&x)?;
        let p = building_probs(&logits, 0);
        let pm = ProbMap::new(Grid::from_vec(h, w, p)?)?;
        let mask = binarize(&pm, threshold)?;
        let stem = file_stem(path);
        let prob_path = out_dir.join(format!("{stem}_prob.png"));
        let mask_path = out_dir.join(format!("{stem}_mask.png"));
        let prob_band = Band::new(pm.grid().clone(), ValueRange::UNIT, BandName::Luma)?;
        save_band_u8(&prob_band, &prob_path)?;
        save_mask(&mask, &mask_path)?;
        outputs.push((prob_path, mask_path));
    }
    Ok(PredictOutcome { outputs })
}

/// Tile bands normalized into [0, 1], channel-major.
fn input_tensor(tile: &Tile) -> Result<Tensor> {
    let (h, w) = (tile.h(), tile.w());
    let mut data = Vec::with_capacity(3 * h * w);
    for band in tile.bands() {
        let unit = normalize_band(band, ValueRange::UNIT)?;
        data.extend(unit.grid.values().iter().map(|&v| v as f32));
    }
    Tensor::from_vec(1, 3, h, w, data)
}
