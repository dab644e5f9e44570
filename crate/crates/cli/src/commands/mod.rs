//! Subcommand implementations. Each takes validated config plus paths and
//! returns the files it wrote, so tests can drive them directly.

mod ablate;
mod curate;
mod evaluate;
mod featurize;
mod predict;
mod train;

pub use ablate::{
    cmd_ablate, conventional_policy, probe_dataset, proposed_policy, run_policy, run_probe,
    AblateOutcome, CONVENTIONAL_EPOCHS, PROBE_BATCH, PROBE_EPOCHS, PROBE_SIZE, PROBE_TILES,
    PROPOSED_FROZEN, PROPOSED_UNFROZEN,
};
pub use curate::{cmd_curate, CurateOutcome};
pub use evaluate::{cmd_evaluate, EvaluateOutcome};
pub use featurize::cmd_featurize;
pub use predict::{cmd_predict, PredictOutcome};
pub use train::{cmd_train, TrainOutputs};

use std::path::{Path, PathBuf};

use geoseg_core::{Error, Result};

/// Raster files in `dir`, sorted by name for deterministic ordering.
pub(crate) fn list_rasters(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if let Some(ext) = path.extension().and_then(|e| e.to_str()) {
            if matches!(ext.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub(crate) fn file_stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("unnamed")
        .to_string()
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
