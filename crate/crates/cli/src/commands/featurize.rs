//! `featurize`: derive guiding feature bands and write the chosen composite
//! next to each tile, recording it in the manifest.

use std::path::{Path, PathBuf};

use geoseg_core::curation::{read_manifest, resolve, write_manifest};
use geoseg_core::features::{assemble_composite, derive_features, CompositeKind, CompositeSpec};
use geoseg_core::raster::{load_tile, save_tile};
use geoseg_core::Result;

use crate::config::PipelineConfig;

/// Rewrites the manifest in place with the composite column filled in.
pub fn cmd_featurize(
    manifest_path: &Path,
    kind: CompositeKind,
    cfg: &PipelineConfig,
) -> Result<usize> {
    cfg.validate()?;
    let mut manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let spec = CompositeSpec::of(kind);
    let mbi_params = cfg.mbi_params();
    let mut written = 0usize;
    for entry in &mut manifest.entries {
        let tile_path = resolve(base, &entry.tile_path);
        let tile = load_tile(&tile_path, 3)?
            .remeta(entry.gsd, entry.source_id.clone(), (0, 0))?;
        let composite = match kind {
            CompositeKind::Cb0 => assemble_composite(&tile, &spec)?,
            _ => {
                let features = derive_features(&tile, &mbi_params)?;
                assemble_composite(&features, &spec)?
            }
        };
        let stem = entry
            .tile_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("tile")
            .to_string();
        let rel = entry
            .tile_path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_default()
            .join(format!("{stem}_{kind}.png"));
        save_tile(&composite, &resolve(base, &rel))?;
        entry.composite_path = Some(PathBuf::from(&rel));
        written += 1;
    }
    manifest.annotate("norm", "per-image");
    manifest.annotate("composite", &kind.to_string());
    write_manifest(&manifest, manifest_path)?;
    Ok(written)
}
