//! `evaluate`: compare predicted masks against ground truth, write the
//! per-image and per-group metrics CSVs and the color-coded confusion maps.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use geoseg_core::evaluation::{
    aggregate, confusion, confusion_map, metrics, AggregationMode, ConfusionCounts, Metric,
};
use geoseg_core::raster::{load_mask, save_tile};
use geoseg_core::{Error, Result};

use super::{ensure_dir, file_stem, list_rasters};

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub metrics_path: PathBuf,
    pub groups_path: PathBuf,
    pub map_paths: Vec<PathBuf>,
    pub images: usize,
}

pub const METRICS_HEADER: &str = "id,group,tp,tn,fp,fn,accuracy,precision,recall,f1,bf,mf,iou";

fn fmt_metric(m: Metric) -> String {
    if m.undefined {
        "nan".to_string()
    } else {
        format!("{:.6}", m.value)
    }
}

/// Optional group map: lines of `id<TAB>group`. Ids without an entry fall
/// into the "all" group.
fn read_group_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, group) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}: line {}: expected id<TAB>group", path.display(), i + 1))
        })?;
        out.insert(id.trim().to_string(), group.trim().to_string());
    }
    Ok(out)
}

pub fn cmd_evaluate(
    pred_dir: &Path,
    gt_dir: &Path,
    out_dir: &Path,
    group_map: Option<&Path>,
    mode: AggregationMode,
) -> Result<EvaluateOutcome> {
    let groups = match group_map {
        Some(p) => read_group_map(p)?,
        None => BTreeMap::new(),
    };
    let pred_files = list_rasters(pred_dir)?;
    if pred_files.is_empty() {
        return Err(Error::Data(format!("{}: no prediction rasters", pred_dir.display())));
    }
    ensure_dir(out_dir)?;
    let maps_dir = out_dir.join("maps");
    ensure_dir(&maps_dir)?;

    let mut rows: Vec<(String, String, ConfusionCounts)> = Vec::new();
    let mut map_paths = Vec::new();
    for pred_path in &pred_files {
        let stem = file_stem(pred_path);
        // predictions from `predict` are named <id>_mask.png; accept bare ids too
        if stem.ends_with("_prob") {
            continue;
        }
        let id = stem.strip_suffix("_mask").unwrap_or(&stem);
        // predictions made on composite rasters share the base tile's ground truth
        let id = ["_cb0", "_cb1", "_cb2"]
            .iter()
            .find_map(|s| id.strip_suffix(s))
            .unwrap_or(id)
            .to_string();
        let gt_path = ["png", "tif", "tiff"]
            .iter()
            .map(|ext| gt_dir.join(format!("{id}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| {
                Error::Data(format!(
                    "no ground truth for id '{id}' in {}",
                    gt_dir.display()
                ))
            })?;
        let pred = load_mask(pred_path)?;
        let gt = load_mask(&gt_path)?;
        let counts = confusion(&pred, &gt)?;
        let map = confusion_map(&pred, &gt)?;
        let map_path = maps_dir.join(format!("{id}_confmap.png"));
        save_tile(&map, &map_path)?;
        map_paths.push(map_path);
        let group = groups.get(&id).cloned().unwrap_or_else(|| "all".to_string());
        rows.push((id, group, counts));
    }
    if rows.is_empty() {
        return Err(Error::Data("no prediction/ground-truth pairs found".into()));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));

    let metrics_path = out_dir.join("metrics.csv");
    {
        let mut file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
        for (id, group, c) in &rows {
            let m = metrics(c)?;
            writeln!(
                file,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                id,
                group,
                c.tp,
                c.tn,
                c.fp,
                c.fn_,
                fmt_metric(m.accuracy),
                fmt_metric(m.precision),
                fmt_metric(m.recall),
                fmt_metric(m.f1),
                fmt_metric(m.branching_factor),
                fmt_metric(m.miss_factor),
                fmt_metric(m.iou)
            )
            .map_err(|e| Error::io(&metrics_path, e))?;
        }
    }

    let keyed: Vec<(String, ConfusionCounts)> =
        rows.iter().map(|(_, g, c)| (g.clone(), *c)).collect();
    let per_group = aggregate(&keyed, mode)?;
    let groups_path = out_dir.join("metrics_groups.csv");
    {
        let mut file = std::fs::File::create(&groups_path).map_err(|e| Error::io(&groups_path, e))?;
        writeln!(file, "group,images,accuracy,precision,recall,f1,bf,mf,iou")
            .map_err(|e| Error::io(&groups_path, e))?;
        for (group, report) in &per_group {
            let n = rows.iter().filter(|(_, g, _)| g == group).count();
            writeln!(
                file,
                "{},{},{},{},{},{},{},{},{}",
                group,
                n,
                fmt_metric(report.accuracy),
                fmt_metric(report.precision),
                fmt_metric(report.recall),
                fmt_metric(report.f1),
                fmt_metric(report.branching_factor),
                fmt_metric(report.miss_factor),
                fmt_metric(report.iou)
            )
            .map_err(|e| Error::io(&groups_path, e))?;
        }
    }
    Ok(EvaluateOutcome {
        metrics_path,
        groups_path,
        map_paths,
        images: rows.len(),
    })
}
