//! Guiding feature bands derived from RGB tiles, and the CB0/CB1/CB2
//! composites that feed the network.
//!
//! All operations are pure and deterministic; borders are edge-replicated.

mod morphology;
mod pca;

pub use morphology::{
    brightness_of, erode, line_offsets, mbi, mbi_raw, opening_by_reconstruction,
    reconstruct_by_dilation, white_tophat, MbiParams,
};
pub use pca::{pc1, project_all, Pc1Outcome};

use crate::error::{Error, Result};
use crate::raster::{normalize_band, Band, BandName, Grid, Tile, ValueRange};

/// Per-pixel maximum across all bands of the tile.
pub fn brightness(tile: &Tile) -> Result<Band> {
    brightness_of(tile, tile.bands().len())
}

/// Horizontal-gradient kernel.
const SOBEL_GX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
/// Vertical-gradient kernel, the 90-degree rotation of the other.
const SOBEL_GY: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]];

/// Gradient magnitude sqrt(Gx^2 + Gy^2) of a single band with
/// edge-replicated borders.
pub fn sobel_magnitude(gray: &Band) -> Result<Band> {
    let (h, w) = (gray.h(), gray.w());
    if h < 3 || w < 3 {
        return Err(Error::Data(format!("sobel needs at least 3x3 input, got {h}x{w}")));
    }
    let g = &gray.grid;
    let mut out = Grid::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let v = g.get_clamped(y as isize + dy, x as isize + dx);
                    gx += SOBEL_GX[(dy + 1) as usize][(dx + 1) as usize] * v;
                    gy += SOBEL_GY[(dy + 1) as usize][(dx + 1) as usize] * v;
                }
            }
            out.set(y, x, (gx * gx + gy * gy).sqrt());
        }
    }
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in out.values() {
        min = min.min(v);
        max = max.max(v);
    }
    Band::new(out, ValueRange::new(min, max)?, BandName::Sobel)
}

/// Rec. 601 luma of an RGB tile, the single band the edge filter runs on.
pub fn luma(tile: &Tile) -> Result<Band> {
    let (r, g, b) = rgb_bands(tile)?;
    let mut out = Grid::filled(tile.h(), tile.w(), 0.0);
    for (i, o) in out.values_mut().iter_mut().enumerate() {
        *o = 0.299 * r.grid.values()[i] + 0.587 * g.grid.values()[i] + 0.114 * b.grid.values()[i];
    }
    Band::new(out, r.range, BandName::Luma)
}

fn rgb_bands(tile: &Tile) -> Result<(&Band, &Band, &Band)> {
    if tile.bands().len() < 3 {
        return Err(Error::Data(format!(
            "expected an R,G,B tile, got {} band(s)",
            tile.bands().len()
        )));
    }
    let (r, g, b) = (&tile.bands()[0], &tile.bands()[1], &tile.bands()[2]);
    if r.name != BandName::R || g.name != BandName::G || b.name != BandName::B {
        return Err(Error::Data(format!(
            "expected band order R,G,B, got {},{},{}",
            r.name, g.name, b.name
        )));
    }
    Ok((r, g, b))
}

/// Visible Difference Vegetation Index (2G - R - B) / (2G + R + B).
///
/// Zero-denominator pixels (pure black) output 0; the declared range is the
/// theoretical [-1, 1].
pub fn vdvi(tile: &Tile) -> Result<Band> {
    let (r, g, b) = rgb_bands(tile)?;
    let mut out = Grid::filled(tile.h(), tile.w(), 0.0);
    for (i, o) in out.values_mut().iter_mut().enumerate() {
        let (rv, gv, bv) = (r.grid.values()[i], g.grid.values()[i], b.grid.values()[i]);
        let num = 2.0 * gv - rv - bv;
        let den = 2.0 * gv + rv + bv;
        *o = if den == 0.0 { 0.0 } else { num / den };
    }
    Band::new(out, ValueRange::SIGNED_UNIT, BandName::Vdvi)
}

/// Per-channel cumulative-histogram remap onto [0, 255].
///
/// A band with a single distinct level is returned unchanged so constant
/// tiles are fixed points of the equalization.
pub fn hist_equalize(tile: &Tile) -> Result<Tile> {
    let bands = tile
        .bands()
        .iter()
        .map(|band| {
            if band.range != ValueRange::EIGHT_BIT {
                return Err(Error::Data(format!(
                    "hist_equalize expects 8-bit-range bands, {} declares [{}, {}]",
                    band.name, band.range.min, band.range.max
                )));
            }
            let n = (band.h() * band.w()) as f64;
            let mut hist = [0u64; 256];
            let levels: Vec<u8> = band
                .grid
                .values()
                .iter()
                .map(|&v| v.round().clamp(0.0, 255.0) as u8)
                .collect();
            for &l in &levels {
                hist[l as usize] += 1;
            }
            if hist.iter().filter(|&&c| c > 0).count() <= 1 {
                return Ok(band.clone());
            }
            let mut cdf = [0.0f64; 256];
            let mut acc = 0u64;
            for (i, &c) in hist.iter().enumerate() {
                acc += c;
                cdf[i] = acc as f64 / n;
            }
            let data: Vec<f64> = levels
                .iter()
                .map(|&l| (cdf[l as usize] * 255.0).round())
                .collect();
            Band::new(
                Grid::from_vec(band.h(), band.w(), data)?,
                ValueRange::EIGHT_BIT,
                band.name,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Tile::new(bands, tile.gsd(), tile.source_id().to_string(), tile.origin())
}

/// Which composite fills the three network input slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompositeKind {
    Cb0,
    Cb1,
    Cb2,
}

impl std::fmt::Display for CompositeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CompositeKind::Cb0 => "cb0",
            CompositeKind::Cb1 => "cb1",
            CompositeKind::Cb2 => "cb2",
        })
    }
}

impl std::str::FromStr for CompositeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cb0" => Ok(CompositeKind::Cb0),
            "cb1" => Ok(CompositeKind::Cb1),
            "cb2" => Ok(CompositeKind::Cb2),
            other => Err(Error::Config(format!("unknown composite '{other}'"))),
        }
    }
}

/// Band names filling the R/G/B slots of a composite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompositeSpec {
    pub kind: CompositeKind,
    pub slot_bands: [BandName; 3],
}

impl CompositeSpec {
    pub fn of(kind: CompositeKind) -> Self {
        let slot_bands = match kind {
            CompositeKind::Cb0 => [BandName::R, BandName::G, BandName::B],
            CompositeKind::Cb1 => [BandName::Sobel, BandName::Vdvi, BandName::Pc1],
            CompositeKind::Cb2 => [BandName::Sobel, BandName::Vdvi, BandName::Mbi],
        };
        CompositeSpec { kind, slot_bands }
    }
}

/// Append the four derived bands (PC1, Sobel-on-luma, VDVI, MBI) to an RGB
/// tile. Derived ranges are per-image where the band has no theoretical
/// range (Sobel, PC1).
pub fn derive_features(tile: &Tile, mbi_params: &MbiParams) -> Result<Tile> {
    rgb_bands(tile)?;
    let sobel = sobel_magnitude(&luma(tile)?)?;
    let vdvi_band = vdvi(tile)?;
    let pc1_band = pc1(tile)?.band;
    let mbi_band = mbi(tile, mbi_params)?;
    tile.with_bands(vec![pc1_band, sobel, vdvi_band, mbi_band])
}

/// Fill the three slots of `spec` from the tile's named bands, each
/// normalized into [0, 255]. CB0 passes R,G,B through unchanged.
pub fn assemble_composite(tile: &Tile, spec: &CompositeSpec) -> Result<Tile> {
    let slots = [BandName::R, BandName::G, BandName::B];
    let bands = spec
        .slot_bands
        .iter()
        .zip(slots)
        .map(|(&want, slot)| {
            let band = tile
                .band(want)
                .ok_or_else(|| Error::Data(format!("composite {}: missing band {want}", spec.kind)))?;
            let normalized = normalize_band(band, ValueRange::EIGHT_BIT)?;
            Band::new(normalized.grid, ValueRange::EIGHT_BIT, slot)
        })
        .collect::<Result<Vec<_>>>()?;
    Tile::new(bands, tile.gsd(), tile.source_id().to_string(), tile.origin())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn rgb_tile(r: Vec<f64>, g: Vec<f64>, b: Vec<f64>, h: usize, w: usize) -> Tile {
        let bands = vec![
            Band::new(Grid::from_vec(h, w, r).unwrap(), ValueRange::EIGHT_BIT, BandName::R).unwrap(),
            Band::new(Grid::from_vec(h, w, g).unwrap(), ValueRange::EIGHT_BIT, BandName::G).unwrap(),
            Band::new(Grid::from_vec(h, w, b).unwrap(), ValueRange::EIGHT_BIT, BandName::B).unwrap(),
        ];
        Tile::new(bands, 1.0, "t", (0, 0)).unwrap()
    }

    fn random_rgb(rng: &mut Rng, h: usize, w: usize) -> Tile {
        let mk = |rng: &mut Rng| (0..h * w).map(|_| rng.next_below(256) as f64).collect();
        let (r, g, b) = (mk(rng), mk(rng), mk(rng));
        rgb_tile(r, g, b, h, w)
    }

    #[test]
    fn brightness_is_pixel_max() {
        let tile = rgb_tile(vec![10.0], vec![200.0], vec![30.0], 1, 1);
        let b = brightness(&tile).unwrap();
        assert_eq!(b.grid.get(0, 0), 200.0);
    }

    #[test]
    fn brightness_of_grayscale_is_identity() {
        let v: Vec<f64> = (0..16).map(|i| i as f64 * 10.0).collect();
        let tile = rgb_tile(v.clone(), v.clone(), v.clone(), 4, 4);
        let b = brightness(&tile).unwrap();
        assert_eq!(b.grid.values(), v.as_slice());
    }

    #[test]
    fn brightness_matches_brute_force() {
        let mut rng = Rng::seed_from_u64(4);
        let tile = random_rgb(&mut rng, 9, 7);
        let b = brightness(&tile).unwrap();
        for i in 0..63 {
            let expect = tile.bands().iter().map(|bd| bd.grid.values()[i]).fold(f64::MIN, f64::max);
            assert_eq!(b.grid.values()[i], expect);
        }
    }

    #[test]
    fn sobel_rejects_too_small_input() {
        let band = Band::new(Grid::filled(2, 8, 1.0), ValueRange::EIGHT_BIT, BandName::Luma).unwrap();
        assert!(sobel_magnitude(&band).is_err());
    }

    #[test]
    fn vdvi_rejects_wrong_band_order() {
        let bands = vec![
            Band::new(Grid::filled(2, 2, 1.0), ValueRange::EIGHT_BIT, BandName::G).unwrap(),
            Band::new(Grid::filled(2, 2, 1.0), ValueRange::EIGHT_BIT, BandName::R).unwrap(),
            Band::new(Grid::filled(2, 2, 1.0), ValueRange::EIGHT_BIT, BandName::B).unwrap(),
        ];
        let tile = Tile::new(bands, 1.0, "t", (0, 0)).unwrap();
        assert!(vdvi(&tile).is_err());
    }

    #[test]
    fn sobel_constant_is_zero() {
        let band = Band::new(Grid::filled(8, 8, 99.0), ValueRange::EIGHT_BIT, BandName::Luma).unwrap();
        let s = sobel_magnitude(&band).unwrap();
        assert!(s.grid.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_vertical_step_response() {
        // columns 0..4 are 0, columns 4..8 are 1: |G| = 4 on the two columns
        // adjacent to the step, 0 elsewhere.
        let mut g = Grid::filled(8, 8, 0.0);
        for y in 0..8 {
            for x in 4..8 {
                g.set(y, x, 1.0);
            }
        }
        let band = Band::new(g, ValueRange::UNIT, BandName::Luma).unwrap();
        let s = sobel_magnitude(&band).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if x == 3 || x == 4 { 4.0 } else { 0.0 };
                assert_eq!(s.grid.get(y, x), expect, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn sobel_rotation_invariant_magnitude() {
        let mut rng = Rng::seed_from_u64(17);
        let h = 9;
        let data: Vec<f64> = (0..h * h).map(|_| rng.next_below(256) as f64).collect();
        let band = Band::new(Grid::from_vec(h, h, data).unwrap(), ValueRange::EIGHT_BIT, BandName::Luma).unwrap();
        // rotate 90 degrees clockwise: out(y, x) = in(h-1-x, y)
        let mut rot = Grid::filled(h, h, 0.0);
        for y in 0..h {
            for x in 0..h {
                rot.set(y, x, band.grid.get(h - 1 - x, y));
            }
        }
        let rot_band = Band::new(rot, ValueRange::EIGHT_BIT, BandName::Luma).unwrap();
        let s = sobel_magnitude(&band).unwrap();
        let s_rot = sobel_magnitude(&rot_band).unwrap();
        for y in 0..h {
            for x in 0..h {
                let a = s_rot.grid.get(y, x);
                let b = s.grid.get(h - 1 - x, y);
                assert!((a - b).abs() < 1e-9, "at ({y},{x}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn vdvi_pure_green_is_one() {
        let tile = rgb_tile(vec![0.0], vec![255.0], vec![0.0], 1, 1);
        assert_eq!(vdvi(&tile).unwrap().grid.get(0, 0), 1.0);
    }

    #[test]
    fn vdvi_gray_is_zero() {
        let tile = rgb_tile(vec![70.0], vec![70.0], vec![70.0], 1, 1);
        assert_eq!(vdvi(&tile).unwrap().grid.get(0, 0), 0.0);
    }

    #[test]
    fn vdvi_hand_value() {
        let tile = rgb_tile(vec![100.0], vec![150.0], vec![50.0], 1, 1);
        let v = vdvi(&tile).unwrap().grid.get(0, 0);
        assert!((v - 150.0 / 450.0).abs() < 1e-12);
    }

    #[test]
    fn vdvi_black_pixel_outputs_zero() {
        let tile = rgb_tile(vec![0.0], vec![0.0], vec![0.0], 1, 1);
        assert_eq!(vdvi(&tile).unwrap().grid.get(0, 0), 0.0);
    }

    #[test]
    fn hist_equalize_constant_is_fixed_point() {
        let tile = rgb_tile(vec![37.0; 16], vec![37.0; 16], vec![37.0; 16], 4, 4);
        let eq = hist_equalize(&tile).unwrap();
        assert_eq!(eq, tile);
    }

    #[test]
    fn hist_equalize_two_level_band() {
        // 75% at level 50, 25% at level 200 -> {191, 255}
        let mut data = vec![50.0; 16];
        for v in data.iter_mut().take(4) {
            *v = 200.0;
        }
        let tile = rgb_tile(data.clone(), data.clone(), data, 4, 4);
        let eq = hist_equalize(&tile).unwrap();
        for &v in eq.bands()[0].grid.values() {
            assert!(v == 191.0 || v == 255.0, "{v}");
        }
        assert_eq!(eq.bands()[0].grid.values().iter().filter(|&&v| v == 255.0).count(), 4);
    }

    #[test]
    fn hist_equalize_uniform_is_near_identity() {
        let data: Vec<f64> = (0..256).map(|i| i as f64).collect();
        let tile = rgb_tile(data.clone(), data.clone(), data, 16, 16);
        let eq = hist_equalize(&tile).unwrap();
        for (a, b) in eq.bands()[0].grid.values().iter().zip(tile.bands()[0].grid.values()) {
            assert!((a - b).abs() <= 1.0, "{a} vs {b}");
        }
    }

    #[test]
    fn cb0_composite_is_identity() {
        let mut rng = Rng::seed_from_u64(8);
        let tile = random_rgb(&mut rng, 6, 6);
        let out = assemble_composite(&tile, &CompositeSpec::of(CompositeKind::Cb0)).unwrap();
        assert_eq!(out.bands(), tile.bands());
    }

    #[test]
    fn cb1_pure_green_saturates_green_slot() {
        let tile = rgb_tile(vec![0.0; 64], vec![255.0; 64], vec![0.0; 64], 8, 8);
        let features = derive_features(&tile, &MbiParams { s_max: 7, ..MbiParams::default() }).unwrap();
        let out = assemble_composite(&features, &CompositeSpec::of(CompositeKind::Cb1)).unwrap();
        // green slot carries VDVI = 1 -> 255
        assert!(out.bands()[1].grid.values().iter().all(|&v| v == 255.0));
    }

    #[test]
    fn cb2_constant_tile_degenerates_to_midpoints_and_zero() {
        let tile = rgb_tile(vec![120.0; 64], vec![120.0; 64], vec![120.0; 64], 8, 8);
        let features = derive_features(&tile, &MbiParams { s_max: 7, ..MbiParams::default() }).unwrap();
        let out = assemble_composite(&features, &CompositeSpec::of(CompositeKind::Cb2)).unwrap();
        // sobel: observed range degenerate -> midpoint; vdvi: 0 in [-1,1] -> 127.5;
        // mbi: fixed [0,1] range with all-zero values -> 0
        assert!(out.bands()[0].grid.values().iter().all(|&v| v == 127.5));
        assert!(out.bands()[1].grid.values().iter().all(|&v| v == 127.5));
        assert!(out.bands()[2].grid.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn composite_missing_band_is_reported() {
        let tile = rgb_tile(vec![1.0], vec![2.0], vec![3.0], 1, 1);
        let err = assemble_composite(&tile, &CompositeSpec::of(CompositeKind::Cb1))
            .unwrap_err()
            .to_string();
        assert!(err.contains("SOBEL"), "{err}");
    }

    proptest! {
        #[test]
        fn vdvi_stays_in_signed_unit(r in 0.0f64..255.0, g in 0.0f64..255.0, b in 0.0f64..255.0) {
            let tile = rgb_tile(vec![r], vec![g], vec![b], 1, 1);
            let v = vdvi(&tile).unwrap().grid.get(0, 0);
            prop_assert!((-1.0..=1.0).contains(&v));
        }

        #[test]
        fn sobel_is_non_negative(seed in 0u64..500) {
            let mut rng = Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..25).map(|_| rng.next_below(256) as f64).collect();
            let band = Band::new(Grid::from_vec(5, 5, data).unwrap(), ValueRange::EIGHT_BIT, BandName::Luma).unwrap();
            let s = sobel_magnitude(&band).unwrap();
            prop_assert!(s.grid.values().iter().all(|&v| v >= 0.0));
        }
    }
}
