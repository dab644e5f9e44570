//! Pixel- and object-oriented evaluation: confusion counting, the seven
//! metrics, color-coded confusion maps, per-group aggregation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::raster::{Band, BandName, Grid, MaskTile, ProbMap, Tile, ValueRange};

/// Threshold a probability map into a binary mask; ties go to building.
pub fn binarize(p: &ProbMap, threshold: f64) -> Result<MaskTile> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "binarization threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let data = p.grid().values().iter().map(|&v| u8::from(v >= threshold)).collect();
    MaskTile::new(Grid::from_vec(p.h(), p.w(), data)?)
}

/// Per-pixel tally of prediction against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Exact pixel-to-pixel comparison.
pub fn confusion(pred: &MaskTile, gt: &MaskTile) -> Result<ConfusionCounts> {
    if pred.h() != gt.h() || pred.w() != gt.w() {
        return Err(Error::shape(
            format!("{}x{}", gt.h(), gt.w()),
            format!("{}x{}", pred.h(), pred.w()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.grid().values().iter().zip(gt.grid().values()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => unreachable!("masks are binary by construction"),
        }
    }
    Ok(c)
}

/// One metric value plus whether its denominator was zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    pub value: f64,
    pub undefined: bool,
}

impl Metric {
    fn ratio(num: f64, den: f64) -> Metric {
        if den == 0.0 {
            Metric { value: 0.0, undefined: true }
        } else {
            Metric { value: num / den, undefined: false }
        }
    }
}

/// The seven evaluation metrics. IoU is stored as a fraction in [0, 1] and
/// scaled by 100 only when rendered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub branching_factor: Metric,
    pub miss_factor: Metric,
    pub iou: Metric,
}

impl MetricReport {
    pub fn fields(&self) -> [(&'static str, Metric); 7] {
        [
            ("accuracy", self.accuracy),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("bf", self.branching_factor),
            ("mf", self.miss_factor),
            ("iou", self.iou),
        ]
    }
}

/// Compute all seven metrics from confusion counts. Any zero denominator
/// marks that metric undefined with value 0.
pub fn metrics(c: &ConfusionCounts) -> Result<MetricReport> {
    if c.total() == 0 {
        return Err(Error::Data("metrics on an empty confusion tally".into()));
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let accuracy = Metric::ratio(tp + tn, tp + tn + fp + fn_);
    let precision = Metric::ratio(tp, tp + fp);
    let recall = Metric::ratio(tp, tp + fn_);
    let f1 = if precision.undefined || recall.undefined {
        Metric { value: 0.0, undefined: true }
    } else {
        Metric::ratio(2.0 * precision.value * recall.value, precision.value + recall.value)
    };
    let branching_factor = Metric::ratio(fp, tp);
    let miss_factor = Metric::ratio(fn_, tp);
    let iou = Metric::ratio(tp, tp + fn_ + fp);
    Ok(MetricReport {
        accuracy,
        precision,
        recall,
        f1,
        branching_factor,
        miss_factor,
        iou,
    })
}

const COLOR_TP: [f64; 3] = [255.0, 255.0, 255.0];
const COLOR_TN: [f64; 3] = [0.0, 0.0, 0.0];
const COLOR_FP: [f64; 3] = [255.0, 0.0, 0.0];
const COLOR_FN: [f64; 3] = [255.0, 255.0, 0.0];

/// Render the per-pixel evaluation map: TP white, TN black, FP red,
/// FN yellow.
pub fn confusion_map(pred: &MaskTile, gt: &MaskTile) -> Result<Tile> {
    if pred.h() != gt.h() || pred.w() != gt.w() {
        return Err(Error::shape(
            format!("{}x{}", gt.h(), gt.w()),
            format!("{}x{}", pred.h(), pred.w()),
        ));
    }
    let (h, w) = (pred.h(), pred.w());
    let mut chans = [Grid::filled(h, w, 0.0), Grid::filled(h, w, 0.0), Grid::filled(h, w, 0.0)];
    for (i, (&p, &g)) in pred.grid().values().iter().zip(gt.grid().values()).enumerate() {
        let color = match (p, g) {
            (1, 1) => COLOR_TP,
            (0, 0) => COLOR_TN,
            (1, 0) => COLOR_FP,
            _ => COLOR_FN,
        };
        for (c, chan) in chans.iter_mut().enumerate() {
            chan.values_mut()[i] = color[c];
        }
    }
    let [r, g, b] = chans;
    let bands = vec![
        Band::new(r, ValueRange::EIGHT_BIT, BandName::R)?,
        Band::new(g, ValueRange::EIGHT_BIT, BandName::G)?,
        Band::new(b, ValueRange::EIGHT_BIT, BandName::B)?,
    ];
    Tile::new(bands, 1.0, "confusion-map", (0, 0))
}

/// How a group's per-image tallies combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationMode {
    /// Average per-image metrics (undefined entries are skipped).
    MeanOfMetrics,
    /// Sum counts first, compute metrics once.
    PooledCounts,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "mean-of-metrics" => Ok(AggregationMode::MeanOfMetrics),
            "pooled" | "pooled-counts" => Ok(AggregationMode::PooledCounts),
            other => Err(Error::Config(format!("unknown aggregation mode '{other}'"))),
        }
    }
}

/// Aggregate per-image counts into one report per group key. The reduction
/// is order-independent: identical multisets of inputs give identical
/// outputs.
pub fn aggregate(
    reports: &[(String, ConfusionCounts)],
    mode: AggregationMode,
) -> Result<BTreeMap<String, MetricReport>> {
    if reports.is_empty() {
        return Err(Error::Data("aggregate called with no reports".into()));
    }
    let mut groups: BTreeMap<String, Vec<&ConfusionCounts>> = BTreeMap::new();
    for (key, counts) in reports {
        groups.entry(key.clone()).or_default().push(counts);
    }
    let mut out = BTreeMap::new();
    for (key, members) in groups {
        let report = match mode {
            AggregationMode::PooledCounts => {
                let mut pooled = ConfusionCounts::default();
                for c in &members {
                    pooled.add(c);
                }
                metrics(&pooled)?
            }
            AggregationMode::MeanOfMetrics => {
                let per_image: Vec<MetricReport> =
                    members.iter().map(|c| metrics(c)).collect::<Result<_>>()?;
                mean_of_reports(&per_image)
            }
        };
        out.insert(key, report);
    }
    Ok(out)
}

fn mean_metric(values: impl Iterator<Item = Metric>) -> Metric {
    let defined: Vec<f64> = values.filter(|m| !m.undefined).map(|m| m.value).collect();
    if defined.is_empty() {
        Metric { value: 0.0, undefined: true }
    } else {
        Metric {
            value: defined.iter().sum::<f64>() / defined.len() as f64,
            undefined: false,
        }
    }
}

fn mean_of_reports(reports: &[MetricReport]) -> MetricReport {
    MetricReport {
        accuracy: mean_metric(reports.iter().map(|r| r.accuracy)),
        precision: mean_metric(reports.iter().map(|r| r.precision)),
        recall: mean_metric(reports.iter().map(|r| r.recall)),
        f1: mean_metric(reports.iter().map(|r| r.f1)),
        branching_factor: mean_metric(reports.iter().map(|r| r.branching_factor)),
        miss_factor: mean_metric(reports.iter().map(|r| r.miss_factor)),
        iou: mean_metric(reports.iter().map(|r| r.iou)),
    }
}
