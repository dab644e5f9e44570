//! The two-phase training loop: a frozen phase that trains only the head,
//! then full fine-tuning, both under a cyclical learning-rate schedule, with
//! per-epoch validation and fallback to the best checkpoint.

mod loss;
mod optim;
mod schedule;

pub use loss::{bce_loss, combo_grad, combo_loss, dice_loss, LossConfig, LossKind};
pub use optim::Adam;
pub use schedule::{schedule_lr, schedule_momentum, ScheduleKind, SchedulePolicy};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::{binarize, confusion, metrics};
use crate::network::SegModel;
use crate::nn::Tensor;
use crate::raster::{normalize_band, Grid, MaskTile, ProbMap, Tile, ValueRange};
use crate::rng::Rng;

/// One training example, already flattened to network layout.
#[derive(Debug, Clone)]
pub struct Sample {
    /// 3*H*W channel-major values in [0, 1].
    pub image: Vec<f32>,
    /// H*W binary labels.
    pub mask: Vec<u8>,
    pub id: String,
}

/// An in-memory dataset of equally sized samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_pairs(pairs: &[(Tile, MaskTile)]) -> Result<Dataset> {
        if pairs.is_empty() {
            return Err(Error::Data("dataset requires at least one pair".into()));
        }
        let (h, w) = (pairs[0].0.h(), pairs[0].0.w());
        let mut samples = Vec::with_capacity(pairs.len());
        for (tile, mask) in pairs {
            if tile.h() != h || tile.w() != w || mask.h() != h || mask.w() != w {
                return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", tile.h(), tile.w())));
            }
            if tile.bands().len() != 3 {
                return Err(Error::Data(format!(
                    "{}: network input needs 3 bands, got {}",
                    tile.source_id(),
                    tile.bands().len()
                )));
            }
            let mut image = Vec::with_capacity(3 * h * w);
            for band in tile.bands() {
                let unit = normalize_band(band, ValueRange::UNIT)?;
                image.extend(unit.grid.values().iter().map(|&v| v as f32));
            }
            samples.push(Sample {
                image,
                mask: mask.grid().values().to_vec(),
                id: tile.source_id().to_string(),
            });
        }
        Ok(Dataset { h, w, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn batch_tensor(&self, indices: &[usize]) -> Tensor {
        let plane = 3 * self.h * self.w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].image);
        }
        Tensor::from_vec(indices.len(), 3, self.h, self.w, data).expect("batch shape")
    }
}

/// Two-phase policy and optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPolicy {
    pub frozen_epochs: usize,
    pub unfrozen_epochs: usize,
    pub batch_size: usize,
    /// ADAM first-moment decay.
    pub beta1: f64,
    /// Restore the best checkpoint whenever a validation epoch regresses.
    pub fallback: bool,
    pub seed: u64,
}

impl Default for TrainPolicy {
    fn default() -> Self {
        TrainPolicy {
            frozen_epochs: 15,
            unfrozen_epochs: 15,
            batch_size: 8,
            beta1: 0.9,
            fallback: true,
            seed: 0,
        }
    }
}

impl TrainPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.frozen_epochs + self.unfrozen_epochs == 0 {
            return Err(Error::Config("at least one training epoch required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return Err(Error::Config(format!("beta1 must lie in (0, 1), got {}", self.beta1)));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.frozen_epochs + self.unfrozen_epochs
    }
}

/// One history row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: &'static str,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub lr_first: f64,
    pub lr_last: f64,
    pub fellback: bool,
}

pub const HISTORY_HEADER: &str = "epoch,phase,train_loss,val_loss,val_iou,lr_first,lr_last,fellback";

/// Write the per-epoch history as CSV.
pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{HISTORY_HEADER}").map_err(|e| Error::io(path, e))?;
    for r in history {
        writeln!(
            file,
            "{},{},{:.6},{:.6},{:.6},{:.8},{:.8},{}",
            r.epoch, r.phase, r.train_loss, r.val_loss, r.val_iou, r.lr_first, r.lr_last, r.fellback
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Building probability per sample from 2-channel logits: softmax over the
/// channel pair, computed stably as a sigmoid of the logit difference.
pub fn building_probs(logits: &Tensor, sample: usize) -> Vec<f64> {
    let plane = logits.h * logits.w;
    let s = logits.sample(sample);
    let mut p = Vec::with_capacity(plane);
    for i in 0..plane {
        let diff = (s[i] - s[plane + i]) as f64; // l0 - l1
        p.push(1.0 / (1.0 + diff.exp()));
    }
    p
}

/// Mean loss and mean-of-metrics IoU of a model over a dataset, in
/// inference mode.
pub fn evaluate(
    model: &SegModel,
    data: &Dataset,
    batch_size: usize,
    loss_cfg: &LossConfig,
) -> Result<(f64, f64)> {
    let mut total_loss = 0.0;
    let mut iou_sum = 0.0;
    let mut iou_count = 0usize;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let x = data.batch_tensor(&indices);
        let logits = model.forward(&x)?;
        for (bi, &si) in indices.iter().enumerate() {
            let p = building_probs(&logits, bi);
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite probabilities during evaluation".into()));
            }
            let g = &data.samples[si].mask;
            total_loss += loss::loss_slice(LossKind::Combo, &p, g, loss_cfg);
            let pm = ProbMap::new(Grid::from_vec(data.h, data.w, p)?)?;
            let pred = binarize(&pm, 0.5)?;
            let gt = MaskTile::new(Grid::from_vec(data.h, data.w, g.clone())?)?;
            let report = metrics(&confusion(&pred, &gt)?)?;
            if !report.iou.undefined {
                iou_sum += report.iou.value;
                iou_count += 1;
            }
        }
        start = end;
    }
    let mean_loss = total_loss / n as f64;
    let mean_iou = if iou_count > 0 { iou_sum / iou_count as f64 } else { 0.0 };
    Ok((mean_loss, mean_iou))
}

/// Per-sample IoU of a model over a dataset (inference mode).
pub fn per_sample_iou(model: &SegModel, data: &Dataset, batch_size: usize) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(data.len());
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let x = data.batch_tensor(&indices);
        let logits = model.forward(&x)?;
        for (bi, &si) in indices.iter().enumerate() {
            let p = building_probs(&logits, bi);
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite probabilities during evaluation".into()));
            }
            let pm = ProbMap::new(Grid::from_vec(data.h, data.w, p)?)?;
            let pred = binarize(&pm, 0.5)?;
            let gt = MaskTile::new(Grid::from_vec(data.h, data.w, data.samples[si].mask.clone())?)?;
            let report = metrics(&confusion(&pred, &gt)?)?;
            out.push((data.samples[si].id.clone(), report.iou.value));
        }
        start = end;
    }
    Ok(out)
}

fn batch_loss_and_grad(
    logits: &Tensor,
    data: &Dataset,
    indices: &[usize],
    kind: LossKind,
    cfg: &LossConfig,
) -> (f64, Tensor) {
    let n = indices.len();
    let plane = logits.h * logits.w;
    let mut grad = Tensor::zeros(logits.n, logits.c, logits.h, logits.w);
    let mut total = 0.0;
    for (bi, &si) in indices.iter().enumerate() {
        let p = building_probs(logits, bi);
        let g = &data.samples[si].mask;
        total += loss::loss_slice(kind, &p, g, cfg);
        let dl_dp = loss::loss_grad_slice(kind, &p, g, cfg);
        let gs = grad.sample_mut(bi);
        for i in 0..plane {
            // chain through the softmax pair: dp/dl1 = p(1-p), dp/dl0 = -p(1-p)
            let sens = p[i] * (1.0 - p[i]);
            let gl1 = (dl_dp[i] * sens / n as f64) as f32;
            gs[plane + i] = gl1;
            gs[i] = -gl1;
        }
    }
    (total / n as f64, grad)
}

/// The trained model statistics returned by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_val_loss: f64,
    /// Epoch (1-based) that produced the best validation loss.
    pub best_epoch: usize,
    /// PRNG state after the last epoch, stored in checkpoints.
    pub rng_state: [u64; 4],
}

/// Run the two-phase loop, mutating `model` in place. On return the model
/// carries the best-validation weights when fallback is enabled, otherwise
/// the final weights.
pub fn train(
    model: &mut SegModel,
    train_set: &Dataset,
    val_set: &Dataset,
    policy: &TrainPolicy,
    schedule: &SchedulePolicy,
    loss_cfg: &LossConfig,
    kind: LossKind,
) -> Result<TrainOutcome> {
    policy.validate()?;
    schedule.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("train and validation sets must be non-empty".into()));
    }

    let mut rng = Rng::seed_from_u64(policy.seed);
    let mut adam = Adam::new(policy.beta1 as f32);
    let steps_per_epoch = train_set.len().div_ceil(policy.batch_size);

    let mut history = Vec::with_capacity(policy.total_epochs());
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_state: Option<(SegModel, Adam)> = None;

    let mut epoch = 0usize;
    for (phase_name, phase_epochs, freeze) in [
        ("frozen", policy.frozen_epochs, crate::network::FreezePolicy::Frozen),
        ("unfrozen", policy.unfrozen_epochs, crate::network::FreezePolicy::Unfrozen),
    ] {
        if phase_epochs == 0 {
            continue;
        }
        model.set_frozen(freeze);
        let phase_steps = phase_epochs * steps_per_epoch;
        let cycle = schedule.resolve_cycle(steps_per_epoch, phase_steps);
        let mut phase_step = 0usize;
        for _ in 0..phase_epochs {
            epoch += 1;
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            let mut lr_first = 0.0;
            let mut lr_last = 0.0;
            for (bi, chunk) in order.chunks(policy.batch_size).enumerate() {
                let lr = schedule_lr(schedule, cycle, phase_step);
                if let Some(m) = schedule_momentum(schedule, cycle, phase_step) {
                    adam.beta1 = m as f32;
                }
                if bi == 0 {
                    lr_first = lr;
                }
                lr_last = lr;
                let x = train_set.batch_tensor(chunk);
                model.zero_grads();
                let logits = model.forward_train(&x)?;
                let (loss, grad) = batch_loss_and_grad(&logits, train_set, chunk, kind, loss_cfg);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite training loss at epoch {epoch}, step {phase_step}"
                    )));
                }
                model.backward(&grad)?;
                adam.step(model, lr);
                epoch_loss += loss;
                phase_step += 1;
            }
            let train_loss = epoch_loss / steps_per_epoch as f64;
            let (val_loss, val_iou) =
                evaluate(model, val_set, policy.batch_size, loss_cfg).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("{m} (epoch {epoch})")),
                    other => other,
                })?;
            if !val_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite validation loss at epoch {epoch}"
                )));
            }
            let mut fellback = false;
            if val_loss < best_val_loss {
                best_val_loss = val_loss;
                best_epoch = epoch;
                if policy.fallback {
                    best_state = Some((model.clone(), adam.clone()));
                }
            } else if policy.fallback {
                // regression: next epoch continues from the best state
                if let Some((m, a)) = &best_state {
                    *model = m.clone();
                    adam = a.clone();
                }
                fellback = true;
            }
            history.push(EpochRecord {
                epoch,
                phase: phase_name,
                train_loss,
                val_loss,
                val_iou,
                lr_first,
                lr_last,
                fellback,
            });
        }
    }
    Ok(TrainOutcome {
        history,
        best_val_loss,
        best_epoch,
        rng_state: rng.state(),
    })
}

fn box_blur3(chans: &mut [Grid<f64>; 3]) {
    for chan in chans.iter_mut() {
        let src = chan.clone();
        for y in 0..src.h() {
            for x in 0..src.w() {
                let mut sum = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        sum += src.get_clamped(y as isize + dy, x as isize + dx);
                    }
                }
                chan.set(y, x, sum / 9.0);
            }
        }
    }
}

/// Synthetic desk-scale probe: `count` RGB tiles with bright rectangular
/// buildings on darker textured ground. The last tile carries an irregular
/// L-shaped building with a softened boundary, the leak-prone case.
pub fn synthetic_probe(count: usize, size: usize, seed: u64) -> Result<Vec<(Tile, MaskTile)>> {
    use crate::raster::{Band, BandName};
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for idx in 0..count {
        let mut mask = Grid::filled(size, size, 0u8);
        let mut chans = [
            Grid::filled(size, size, 0.0f64),
            Grid::filled(size, size, 0.0f64),
            Grid::filled(size, size, 0.0f64),
        ];
        // textured background with a green cast
        for y in 0..size {
            for x in 0..size {
                let n = rng.next_f64();
                chans[0].set(y, x, 60.0 + 25.0 * n);
                chans[1].set(y, x, 90.0 + 30.0 * rng.next_f64());
                chans[2].set(y, x, 55.0 + 20.0 * n);
            }
        }
        let l_shaped = idx == count - 1;
        let paint = |chans: &mut [Grid<f64>; 3],
                     mask: Option<&mut Grid<u8>>,
                     y0: usize,
                     x0: usize,
                     h: usize,
                     w: usize,
                     rng: &mut Rng,
                     base: f64,
                     tint: (f64, f64, f64)| {
            if let Some(mask) = mask {
                for y in y0..(y0 + h).min(size) {
                    for x in x0..(x0 + w).min(size) {
                        mask.set(y, x, 1);
                    }
                }
            }
            for y in y0..(y0 + h).min(size) {
                for x in x0..(x0 + w).min(size) {
                    let v = base + 30.0 * rng.next_f64();
                    chans[0].set(y, x, v + tint.0);
                    chans[1].set(y, x, v + tint.1 + 8.0 * rng.next_f64());
                    chans[2].set(y, x, v + tint.2 + 8.0 * rng.next_f64());
                }
            }
        };
        let roof_tint = (0.0, -12.0, -25.0);
        if l_shaped {
            // the leak-prone case: an irregular L whose long arm is thin and
            // low-contrast, with a spectrally similar non-building patch
            // tucked into the concave notch and softened boundaries
            let arm = size / 5;
            let thin = 3;
            let y0 = size / 4;
            let x0 = size / 4;
            paint(&mut chans, Some(&mut mask), y0, x0, 3 * arm, arm, &mut rng, 150.0, roof_tint);
            paint(
                &mut chans,
                Some(&mut mask),
                y0 + 3 * arm - thin,
                x0 + arm,
                thin,
                2 * arm,
                &mut rng,
                125.0,
                roof_tint,
            );
            // distractor fills the notch, touching both arms
            paint(
                &mut chans,
                None,
                y0 + arm,
                x0 + arm + arm / 2,
                arm,
                arm,
                &mut rng,
                140.0,
                (-8.0, -4.0, -25.0),
            );
            // soften every boundary in this tile
            box_blur3(&mut chans);
        } else {
            let h = size / 4 + rng.next_below(size as u64 / 4) as usize;
            let w = size / 4 + rng.next_below(size as u64 / 4) as usize;
            let y0 = rng.next_below((size - h) as u64) as usize;
            let x0 = rng.next_below((size - w) as u64) as usize;
            paint(&mut chans, Some(&mut mask), y0, x0, h, w, &mut rng, 205.0, roof_tint);
        }
        let [r, g, b] = chans;
        let bands = vec![
            Band::new(r, ValueRange::EIGHT_BIT, BandName::R)?,
            Band::new(g, ValueRange::EIGHT_BIT, BandName::G)?,
            Band::new(b, ValueRange::EIGHT_BIT, BandName::B)?,
        ];
        let tile = Tile::new(bands, 1.0, format!("probe{idx}"), (0, 0))?;
        out.push((tile, MaskTile::new(mask)?));
    }
    Ok(out)
}
