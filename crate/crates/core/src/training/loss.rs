//! Segmentation losses: pixel-wise binary cross entropy, Dice, and their
//! Combo sum, with analytic gradients.
//!
//! The printed Dice formula is a similarity coefficient; minimizing it
//! directly would reward non-overlap, so the loss is `1 - D`. Probabilities
//! are clamped to [eps, 1-eps] before the logs.

use crate::error::{Error, Result};
use crate::raster::{MaskTile, ProbMap};

/// Loss hyperparameters. The patch size ps is taken from the input grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Dice weight in the Combo sum.
    pub alpha: f64,
    /// Clamp for the log arguments.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("loss alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "loss epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Which objective a training run minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Combo,
    Bce,
    Dice,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Combo => "combo",
            LossKind::Bce => "bce",
            LossKind::Dice => "dice",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "combo" => Ok(LossKind::Combo),
            "bce" => Ok(LossKind::Bce),
            "dice" => Ok(LossKind::Dice),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

const DICE_SMOOTHING: f64 = 1e-7;

fn check_shapes(p: &ProbMap, g: &MaskTile) -> Result<()> {
    if p.h() != g.h() || p.w() != g.w() {
        return Err(Error::shape(
            format!("{}x{}", g.h(), g.w()),
            format!("{}x{}", p.h(), p.w()),
        ));
    }
    Ok(())
}

/// Raw-slice BCE used by both the public API and the training loop.
pub(crate) fn bce_slice(p: &[f64], g: &[u8], eps: f64) -> f64 {
    let ps = p.len() as f64;
    let mut sum = 0.0;
    for (&pi, &gi) in p.iter().zip(g) {
        let pc = pi.clamp(eps, 1.0 - eps);
        sum += if gi == 1 { pc.ln() } else { (1.0 - pc).ln() };
    }
    -sum / ps
}

pub(crate) fn dice_slice(p: &[f64], g: &[u8]) -> f64 {
    let mut inter = 0.0;
    let mut p2 = 0.0;
    let mut g2 = 0.0;
    for (&pi, &gi) in p.iter().zip(g) {
        inter += pi * gi as f64;
        p2 += pi * pi;
        g2 += (gi as f64) * (gi as f64);
    }
    let d = (2.0 * inter + DICE_SMOOTHING) / (p2 + g2 + DICE_SMOOTHING);
    1.0 - d
}

pub(crate) fn loss_slice(kind: LossKind, p: &[f64], g: &[u8], cfg: &LossConfig) -> f64 {
    match kind {
        LossKind::Bce => bce_slice(p, g, cfg.epsilon),
        LossKind::Dice => dice_slice(p, g),
        LossKind::Combo => bce_slice(p, g, cfg.epsilon) + cfg.alpha * dice_slice(p, g),
    }
}

/// d(loss)/dp per pixel.
pub(crate) fn loss_grad_slice(kind: LossKind, p: &[f64], g: &[u8], cfg: &LossConfig) -> Vec<f64> {
    let ps = p.len() as f64;
    let eps = cfg.epsilon;
    let mut grad = vec![0.0f64; p.len()];
    if matches!(kind, LossKind::Bce | LossKind::Combo) {
        for (i, (&pi, &gi)) in p.iter().zip(g).enumerate() {
            // the clamp zeroes the gradient outside (eps, 1-eps)
            if pi > eps && pi < 1.0 - eps {
                let term = if gi == 1 { -1.0 / pi } else { 1.0 / (1.0 - pi) };
                grad[i] += term / ps;
            }
        }
    }
    if matches!(kind, LossKind::Dice | LossKind::Combo) {
        let scale = if kind == LossKind::Combo { cfg.alpha } else { 1.0 };
        let mut inter = 0.0;
        let mut p2 = 0.0;
        let mut g2 = 0.0;
        for (&pi, &gi) in p.iter().zip(g) {
            inter += pi * gi as f64;
            p2 += pi * pi;
            g2 += (gi as f64) * (gi as f64);
        }
        let num = 2.0 * inter + DICE_SMOOTHING;
        let den = p2 + g2 + DICE_SMOOTHING;
        for (i, (&pi, &gi)) in p.iter().zip(g).enumerate() {
            // d(1 - num/den)/dp_i = -(2 g_i den - num 2 p_i) / den^2
            let dd = (2.0 * gi as f64 * den - num * 2.0 * pi) / (den * den);
            grad[i] += scale * (-dd);
        }
    }
    grad
}

/// Mean binary cross entropy over the patch.
pub fn bce_loss(p: &ProbMap, g: &MaskTile, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    check_shapes(p, g)?;
    Ok(bce_slice(p.grid().values(), g.grid().values(), cfg.epsilon))
}

/// One minus the smoothed Dice coefficient; in [0, 1].
pub fn dice_loss(p: &ProbMap, g: &MaskTile) -> Result<f64> {
    check_shapes(p, g)?;
    Ok(dice_slice(p.grid().values(), g.grid().values()))
}

/// BCE plus alpha times Dice.
pub fn combo_loss(p: &ProbMap, g: &MaskTile, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    check_shapes(p, g)?;
    Ok(loss_slice(
        LossKind::Combo,
        p.grid().values(),
        g.grid().values(),
        cfg,
    ))
}

/// Per-pixel gradient of the combo loss with respect to p.
pub fn combo_grad(p: &ProbMap, g: &MaskTile, cfg: &LossConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_shapes(p, g)?;
    Ok(loss_grad_slice(
        LossKind::Combo,
        p.grid().values(),
        g.grid().values(),
        cfg,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;
    use crate::rng::Rng;

    fn prob(vals: Vec<f64>, h: usize, w: usize) -> ProbMap {
        ProbMap::new(Grid::from_vec(h, w, vals).unwrap()).unwrap()
    }

    fn mask(vals: Vec<u8>, h: usize, w: usize) -> MaskTile {
        MaskTile::new(Grid::from_vec(h, w, vals).unwrap()).unwrap()
    }

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let cfg = LossConfig::default();
        let p = prob(vec![1.0, 0.0, 1.0, 0.0], 2, 2);
        let g = mask(vec![1, 0, 1, 0], 2, 2);
        let l = bce_loss(&p, &g, &cfg).unwrap();
        assert!(l <= -(1.0f64 - cfg.epsilon).ln() + 1e-15);
        assert!(l >= 0.0);
    }

    #[test]
    fn bce_single_pixel_values() {
        let cfg = LossConfig::default();
        let g = mask(vec![1], 1, 1);
        let l = bce_loss(&prob(vec![0.5], 1, 1), &g, &cfg).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9, "{l}");
        let l = bce_loss(&prob(vec![0.25], 1, 1), &g, &cfg).unwrap();
        assert!((l - 1.3862943611).abs() < 1e-9, "{l}");
    }

    #[test]
    fn dice_extremes_and_hand_value() {
        let g = mask(vec![1, 0, 1, 0], 2, 2);
        let same = prob(vec![1.0, 0.0, 1.0, 0.0], 2, 2);
        assert!(dice_loss(&same, &g).unwrap().abs() < 1e-7);
        let disjoint = prob(vec![0.0, 1.0, 0.0, 1.0], 2, 2);
        assert!((dice_loss(&disjoint, &g).unwrap() - 1.0).abs() < 1e-7);
        let p = prob(vec![1.0, 1.0, 0.0, 0.0], 2, 2);
        let g = mask(vec![1, 0, 1, 0], 2, 2);
        assert!((dice_loss(&p, &g).unwrap() - 0.5).abs() < 1e-7);
    }

    #[test]
    fn combo_hand_value_and_composition() {
        let cfg = LossConfig::default();
        let p = prob(vec![0.5], 1, 1);
        let g = mask(vec![1], 1, 1);
        let combo = combo_loss(&p, &g, &cfg).unwrap();
        assert!((combo - 0.8931471806).abs() < 1e-6, "{combo}");
        // compositional identity: combo = bce + alpha * dice
        let bce = bce_loss(&p, &g, &cfg).unwrap();
        let dice = dice_loss(&p, &g).unwrap();
        assert!((combo - (bce + cfg.alpha * dice)).abs() < 1e-15);
    }

    #[test]
    fn combo_alpha_zero_is_bce() {
        let cfg = LossConfig { alpha: 0.0, ..LossConfig::default() };
        let mut rng = Rng::seed_from_u64(1);
        let pv: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
        let gv: Vec<u8> = (0..16).map(|_| (rng.next_u64() & 1) as u8).collect();
        let p = prob(pv, 4, 4);
        let g = mask(gv, 4, 4);
        assert_eq!(
            combo_loss(&p, &g, &cfg).unwrap(),
            bce_loss(&p, &g, &cfg).unwrap()
        );
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = LossConfig::default();
        let mut rng = Rng::seed_from_u64(7);
        for _ in 0..5 {
            let pv: Vec<f64> = (0..64).map(|_| 0.02 + 0.96 * rng.next_f64()).collect();
            let gv: Vec<u8> = (0..64).map(|_| (rng.next_u64() & 1) as u8).collect();
            let grad = loss_grad_slice(LossKind::Combo, &pv, &gv, &cfg);
            let h = 1e-6;
            let mut max_rel = 0.0f64;
            for i in 0..64 {
                let mut plus = pv.clone();
                plus[i] += h;
                let mut minus = pv.clone();
                minus[i] -= h;
                let fd = (loss_slice(LossKind::Combo, &plus, &gv, &cfg)
                    - loss_slice(LossKind::Combo, &minus, &gv, &cfg))
                    / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(1e-8);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-4, "max relative error {max_rel}");
        }
    }

    #[test]
    fn moving_toward_target_decreases_combo() {
        let cfg = LossConfig::default();
        let mut rng = Rng::seed_from_u64(11);
        let gv: Vec<u8> = (0..16).map(|_| (rng.next_u64() & 1) as u8).collect();
        let pv: Vec<f64> = (0..16).map(|_| 0.05 + 0.9 * rng.next_f64()).collect();
        let l0 = loss_slice(LossKind::Combo, &pv, &gv, &cfg);
        // pull every p 10% of the way toward its target
        let closer: Vec<f64> = pv
            .iter()
            .zip(&gv)
            .map(|(&p, &g)| p + 0.1 * (g as f64 - p))
            .collect();
        let l1 = loss_slice(LossKind::Combo, &closer, &gv, &cfg);
        assert!(l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn shape_mismatch_is_error() {
        let cfg = LossConfig::default();
        let p = prob(vec![0.5; 4], 2, 2);
        let g = mask(vec![1; 6], 2, 3);
        assert!(bce_loss(&p, &g, &cfg).is_err());
        assert!(dice_loss(&p, &g).is_err());
    }
}
