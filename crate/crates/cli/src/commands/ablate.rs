//! `ablate`: desk-scale comparison harnesses. One run compares the Combo
//! objective against BCE-only and Dice-only on the synthetic overfit probe;
//! the other compares the frozen/unfrozen cyclical policy against
//! conventional constant-rate training.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use geoseg_core::network::{build_model, ModelConfig};
use geoseg_core::training::{
    per_sample_iou, synthetic_probe, train, Dataset, EpochRecord, LossConfig, LossKind,
    ScheduleKind, SchedulePolicy, TrainPolicy,
};
use geoseg_core::{Error, Result};

use crate::config::PipelineConfig;

use super::ensure_dir;

/// Probe geometry: 8 tiles of 64x64, trained 200 optimizer steps (batch 2,
/// 4 steps/epoch, 50 epochs).
pub const PROBE_TILES: usize = 8;
pub const PROBE_SIZE: usize = 64;
pub const PROBE_BATCH: usize = 2;
pub const PROBE_EPOCHS: usize = 50;

/// Policy-comparison geometry: the proposed two-phase cyclical policy gets
/// 15 epochs against 30 conventional constant-rate epochs.
pub const PROPOSED_FROZEN: usize = 3;
pub const PROPOSED_UNFROZEN: usize = 12;
pub const CONVENTIONAL_EPOCHS: usize = 30;

#[derive(Debug)]
pub struct AblateOutcome {
    pub loss_csv: PathBuf,
    pub policy_csv: PathBuf,
    pub policy_summary_csv: PathBuf,
    /// (loss kind, mean training IoU) per run.
    pub loss_mean_iou: Vec<(LossKind, f64)>,
}

pub fn probe_dataset(seed: u64) -> Result<Dataset> {
    let pairs = synthetic_probe(PROBE_TILES, PROBE_SIZE, seed)?;
    Dataset::from_pairs(&pairs)
}

fn probe_model_cfg() -> ModelConfig {
    ModelConfig::small(PROBE_SIZE)
}

fn overfit_policy(seed: u64) -> TrainPolicy {
    TrainPolicy {
        frozen_epochs: 0,
        unfrozen_epochs: PROBE_EPOCHS,
        batch_size: PROBE_BATCH,
        beta1: 0.9,
        fallback: false,
        seed,
    }
}

fn overfit_schedule() -> SchedulePolicy {
    // hotter peak than the training default: 200 steps must fully memorize
    SchedulePolicy {
        kind: ScheduleKind::OneCycle,
        lr_min: 1e-4,
        lr_max: 3e-3,
        cycle_length: 0,
        momentum_range: None,
    }
}

/// Train one probe run and return (history, per-instance training IoU).
pub fn run_probe(
    data: &Dataset,
    kind: LossKind,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<(Vec<EpochRecord>, Vec<(String, f64)>)> {
    let mut model = build_model(&probe_model_cfg(), seed)?;
    let outcome = train(
        &mut model,
        data,
        data,
        &overfit_policy(seed),
        &overfit_schedule(),
        loss_cfg,
        kind,
    )?;
    let ious = per_sample_iou(&model, data, PROBE_BATCH)?;
    Ok((outcome.history, ious))
}

/// The proposed policy: a short frozen phase, then unfrozen, both under
/// triangular cyclical rates, with the fallback provision on.
pub fn proposed_policy(seed: u64) -> (TrainPolicy, SchedulePolicy) {
    (
        TrainPolicy {
            frozen_epochs: PROPOSED_FROZEN,
            unfrozen_epochs: PROPOSED_UNFROZEN,
            batch_size: PROBE_BATCH,
            beta1: 0.9,
            fallback: true,
            seed,
        },
        SchedulePolicy {
            kind: ScheduleKind::TriangularClr,
            lr_min: 1e-4,
            lr_max: 1e-3,
            cycle_length: 0,
            momentum_range: None,
        },
    )
}

/// Conventional training: single unfrozen phase at a constant rate, no
/// fallback.
pub fn conventional_policy(seed: u64) -> (TrainPolicy, SchedulePolicy) {
    (
        TrainPolicy {
            frozen_epochs: 0,
            unfrozen_epochs: CONVENTIONAL_EPOCHS,
            batch_size: PROBE_BATCH,
            beta1: 0.9,
            fallback: false,
            seed,
        },
        SchedulePolicy {
            kind: ScheduleKind::TriangularClr,
            lr_min: 1e-4,
            lr_max: 1e-4,
            cycle_length: 0,
            momentum_range: None,
        },
    )
}

pub fn run_policy(
    data: &Dataset,
    policy: &TrainPolicy,
    schedule: &SchedulePolicy,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    let mut model = build_model(&probe_model_cfg(), seed)?;
    let outcome = train(&mut model, data, data, policy, schedule, loss_cfg, LossKind::Combo)?;
    Ok(outcome.history)
}

pub fn cmd_ablate(out_dir: &Path, cfg: &PipelineConfig) -> Result<AblateOutcome> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let data = probe_dataset(cfg.seed)?;
    let loss_cfg = cfg.loss_config();

    // loss comparison: three trainings on the same probe
    let loss_csv = out_dir.join("ablate_loss.csv");
    let mut loss_mean_iou = Vec::new();
    {
        let mut file = std::fs::File::create(&loss_csv).map_err(|e| Error::io(&loss_csv, e))?;
        writeln!(file, "loss,instance,iou").map_err(|e| Error::io(&loss_csv, e))?;
        for kind in [LossKind::Combo, LossKind::Bce, LossKind::Dice] {
            let (_, ious) = run_probe(&data, kind, &loss_cfg, cfg.seed)?;
            let mean = ious.iter().map(|(_, v)| v).sum::<f64>() / ious.len() as f64;
            loss_mean_iou.push((kind, mean));
            for (id, iou) in &ious {
                writeln!(file, "{kind},{id},{iou:.6}").map_err(|e| Error::io(&loss_csv, e))?;
            }
        }
    }

    // policy comparison: proposed two-phase cyclical vs conventional
    let policy_csv = out_dir.join("ablate_policy.csv");
    let policy_summary_csv = out_dir.join("ablate_policy_summary.csv");
    {
        let (pp, ps) = proposed_policy(cfg.seed);
        let proposed = run_policy(&data, &pp, &ps, &loss_cfg, cfg.seed)?;
        let (cp, cs) = conventional_policy(cfg.seed);
        let conventional = run_policy(&data, &cp, &cs, &loss_cfg, cfg.seed)?;

        let mut file = std::fs::File::create(&policy_csv).map_err(|e| Error::io(&policy_csv, e))?;
        writeln!(
            file,
            "policy,epoch,phase,train_loss,val_loss,val_iou,lr_first,lr_last,fellback"
        )
        .map_err(|e| Error::io(&policy_csv, e))?;
        for (name, history) in [("proposed", &proposed), ("conventional", &conventional)] {
            for r in history {
                writeln!(
                    file,
                    "{},{},{},{:.6},{:.6},{:.6},{:.8},{:.8},{}",
                    name, r.epoch, r.phase, r.train_loss, r.val_loss, r.val_iou, r.lr_first,
                    r.lr_last, r.fellback
                )
                .map_err(|e| Error::io(&policy_csv, e))?;
            }
        }

        let conventional_final = conventional.last().map(|r| r.val_loss).unwrap_or(f64::NAN);
        let epochs_to_match = proposed
            .iter()
            .find(|r| r.val_loss <= conventional_final)
            .map(|r| r.epoch);
        let mut file = std::fs::File::create(&policy_summary_csv)
            .map_err(|e| Error::io(&policy_summary_csv, e))?;
        writeln!(file, "policy,epochs,final_val_loss,best_val_loss,epochs_to_reach_conventional_final")
            .map_err(|e| Error::io(&policy_summary_csv, e))?;
        let best = |h: &[EpochRecord]| h.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        writeln!(
            file,
            "proposed,{},{:.6},{:.6},{}",
            proposed.len(),
            proposed.last().map(|r| r.val_loss).unwrap_or(f64::NAN),
            best(&proposed),
            epochs_to_match.map(|e| e.to_string()).unwrap_or_default()
        )
        .map_err(|e| Error::io(&policy_summary_csv, e))?;
        writeln!(
            file,
            "conventional,{},{:.6},{:.6},",
            conventional.len(),
            conventional_final,
            best(&conventional)
        )
        .map_err(|e| Error::io(&policy_summary_csv, e))?;
    }

    Ok(AblateOutcome {
        loss_csv,
        policy_csv,
        policy_summary_csv,
        loss_mean_iou,
    })
}
