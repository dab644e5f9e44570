//! Per-image principal component extraction over the three color bands.

use crate::error::{Error, Result};
use crate::raster::{Band, BandName, Grid, Tile};

/// Result of projecting a tile onto its leading principal component.
#[derive(Debug, Clone)]
pub struct Pc1Outcome {
    pub band: Band,
    /// Eigenvalues of the 3x3 pixel covariance, descending.
    pub eigenvalues: [f64; 3],
    /// Unit eigenvector of the leading component, sign-fixed so its dot
    /// product with (1, 1, 1) is non-negative.
    pub eigenvector: [f64; 3],
    /// Set when the covariance is numerically zero (constant image); the
    /// band is then all zeros.
    pub degenerate: bool,
}

/// Project the tile's pixels onto the leading eigenvector of their 3x3
/// covariance. Bands are centered by their own means first; the output
/// band's declared range is the observed min/max.
pub fn pc1(tile: &Tile) -> Result<Pc1Outcome> {
    if tile.bands().len() != 3 {
        return Err(Error::Data(format!(
            "pc1 requires a 3-band tile, got {} band(s)",
            tile.bands().len()
        )));
    }
    let (h, w) = (tile.h(), tile.w());
    let n = (h * w) as f64;
    let means: Vec<f64> = tile
        .bands()
        .iter()
        .map(|b| b.grid.values().iter().sum::<f64>() / n)
        .collect();

    let mut cov = [[0.0f64; 3]; 3];
    {
        let vals: Vec<&[f64]> = tile.bands().iter().map(|b| b.grid.values()).collect();
        for p in 0..h * w {
            let d = [
                vals[0][p] - means[0],
                vals[1][p] - means[1],
                vals[2][p] - means[2],
            ];
            for i in 0..3 {
                for j in i..3 {
                    cov[i][j] += d[i] * d[j];
                }
            }
        }
        for i in 0..3 {
            for j in i..3 {
                cov[i][j] /= n;
                cov[j][i] = cov[i][j];
            }
        }
    }

    let total_var = cov[0][0] + cov[1][1] + cov[2][2];
    if total_var < 1e-12 {
        let grid = Grid::filled(h, w, 0.0);
        let band = Band::new(grid, crate::raster::ValueRange::new(0.0, 0.0)?, BandName::Pc1)?;
        return Ok(Pc1Outcome {
            band,
            eigenvalues: [0.0; 3],
            eigenvector: [0.0; 3],
            degenerate: true,
        });
    }

    let (mut eigenvalues, mut vectors) = jacobi_eigen_3x3(cov);
    // sort descending, carrying eigenvectors (columns) along
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
    eigenvalues = [eigenvalues[order[0]], eigenvalues[order[1]], eigenvalues[order[2]]];
    vectors = [
        [vectors[0][order[0]], vectors[0][order[1]], vectors[0][order[2]]],
        [vectors[1][order[0]], vectors[1][order[1]], vectors[1][order[2]]],
        [vectors[2][order[0]], vectors[2][order[1]], vectors[2][order[2]]],
    ];

    let mut v1 = [vectors[0][0], vectors[1][0], vectors[2][0]];
    if v1[0] + v1[1] + v1[2] < 0.0 {
        for c in v1.iter_mut() {
            *c = -*c;
        }
    }

    let mut data = Vec::with_capacity(h * w);
    {
        let vals: Vec<&[f64]> = tile.bands().iter().map(|b| b.grid.values()).collect();
        for p in 0..h * w {
            data.push(
                v1[0] * (vals[0][p] - means[0])
                    + v1[1] * (vals[1][p] - means[1])
                    + v1[2] * (vals[2][p] - means[2]),
            );
        }
    }
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &data {
        min = min.min(v);
        max = max.max(v);
    }
    let band = Band::new(
        Grid::from_vec(h, w, data)?,
        crate::raster::ValueRange::new(min, max)?,
        BandName::Pc1,
    )?;
    Ok(Pc1Outcome {
        band,
        eigenvalues,
        eigenvector: v1,
        degenerate: false,
    })
}

/// All projections (PC1..PC3) for a tile; test and diagnostics helper.
pub fn project_all(tile: &Tile) -> Result<[Vec<f64>; 3]> {
    if tile.bands().len() != 3 {
        return Err(Error::Data("project_all requires 3 bands".into()));
    }
    let (h, w) = (tile.h(), tile.w());
    let n = (h * w) as f64;
    let means: Vec<f64> = tile
        .bands()
        .iter()
        .map(|b| b.grid.values().iter().sum::<f64>() / n)
        .collect();
    let mut cov = [[0.0f64; 3]; 3];
    let vals: Vec<&[f64]> = tile.bands().iter().map(|b| b.grid.values()).collect();
    for p in 0..h * w {
        let d = [
            vals[0][p] - means[0],
            vals[1][p] - means[1],
            vals[2][p] - means[2],
        ];
        for i in 0..3 {
            for j in i..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for i in 0..3 {
        for j in i..3 {
            cov[i][j] /= n;
            cov[j][i] = cov[i][j];
        }
    }
    let (eigenvalues, vectors) = jacobi_eigen_3x3(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
    let mut out: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (slot, &k) in order.iter().enumerate() {
        let v = [vectors[0][k], vectors[1][k], vectors[2][k]];
        let mut proj = Vec::with_capacity(h * w);
        for p in 0..h * w {
            proj.push(
                v[0] * (vals[0][p] - means[0])
                    + v[1] * (vals[1][p] - means[1])
                    + v[2] * (vals[2][p] - means[2]),
            );
        }
        out[slot] = proj;
    }
    Ok(out)
}

/// Cyclic Jacobi eigendecomposition of a symmetric 3x3 matrix. Returns
/// (eigenvalues, eigenvector matrix with eigenvectors as columns).
fn jacobi_eigen_3x3(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let rot = |m: &mut [[f64; 3]; 3], left: bool| {
                for k in 0..3 {
                    let (mp, mq) = if left { (m[p][k], m[q][k]) } else { (m[k][p], m[k][q]) };
                    let np = c * mp - s * mq;
                    let nq = s * mp + c * mq;
                    if left {
                        m[p][k] = np;
                        m[q][k] = nq;
                    } else {
                        m[k][p] = np;
                        m[k][q] = nq;
                    }
                }
            };
            rot(&mut a, true);
            rot(&mut a, false);
            rot(&mut v, false);
        }
    }
    ([a[0][0], a[1][1], a[2][2]], v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ValueRange;
    use crate::rng::Rng;

    fn tile_from_bands(vals: [Vec<f64>; 3], h: usize, w: usize) -> Tile {
        let names = [BandName::R, BandName::G, BandName::B];
        let bands = vals
            .into_iter()
            .zip(names)
            .map(|(data, name)| {
                Band::new(Grid::from_vec(h, w, data).unwrap(), ValueRange::EIGHT_BIT, name).unwrap()
            })
            .collect();
        Tile::new(bands, 1.0, "t", (0, 0)).unwrap()
    }

    fn random_tile(rng: &mut Rng, h: usize, w: usize) -> Tile {
        let mk = |rng: &mut Rng| (0..h * w).map(|_| rng.next_below(256) as f64).collect();
        let (a, b, c) = (mk(rng), mk(rng), mk(rng));
        tile_from_bands([a, b, c], h, w)
    }

    fn variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    }

    #[test]
    fn grayscale_tile_is_rank_one() {
        let intensity: Vec<f64> = (0..64).map(|i| (i % 11) as f64 * 20.0).collect();
        let tile = tile_from_bands([intensity.clone(), intensity.clone(), intensity.clone()], 8, 8);
        let out = pc1(&tile).unwrap();
        assert!(!out.degenerate);
        assert!(out.eigenvalues[1].abs() < 1e-6 * out.eigenvalues[0]);
        assert!(out.eigenvalues[2].abs() < 1e-6 * out.eigenvalues[0]);
        // PC1 proportional to intensity with positive slope (sign fix)
        let proj = out.band.grid.values();
        let corr = {
            let vi = variance(&intensity).sqrt();
            let vp = variance(proj).sqrt();
            let mi = intensity.iter().sum::<f64>() / 64.0;
            let mp = proj.iter().sum::<f64>() / 64.0;
            intensity
                .iter()
                .zip(proj)
                .map(|(a, b)| (a - mi) * (b - mp))
                .sum::<f64>()
                / 64.0
                / (vi * vp)
        };
        assert!((corr - 1.0).abs() < 1e-9, "corr {corr}");
    }

    #[test]
    fn eigenvalues_sorted_descending() {
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..10 {
            let tile = random_tile(&mut rng, 12, 12);
            let out = pc1(&tile).unwrap();
            assert!(out.eigenvalues[0] >= out.eigenvalues[1]);
            assert!(out.eigenvalues[1] >= out.eigenvalues[2]);
        }
    }

    #[test]
    fn pc1_variance_is_leading_eigenvalue_and_dominates_bands() {
        let mut rng = Rng::seed_from_u64(9);
        for _ in 0..5 {
            let tile = random_tile(&mut rng, 16, 16);
            let out = pc1(&tile).unwrap();
            let var_pc1 = variance(out.band.grid.values());
            assert!(
                (var_pc1 - out.eigenvalues[0]).abs() < 1e-6 * out.eigenvalues[0].max(1.0),
                "var {var_pc1} vs lambda1 {}",
                out.eigenvalues[0]
            );
            for band in tile.bands() {
                assert!(var_pc1 >= variance(band.grid.values()) - 1e-9);
            }
        }
    }

    #[test]
    fn secondary_projections_uncorrelated_with_pc1() {
        let mut rng = Rng::seed_from_u64(13);
        for _ in 0..5 {
            let tile = random_tile(&mut rng, 16, 16);
            let projs = project_all(&tile).unwrap();
            let corr = |a: &[f64], b: &[f64]| {
                let n = a.len() as f64;
                let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
                let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
                let (va, vb) = (variance(a), variance(b));
                if va == 0.0 || vb == 0.0 {
                    0.0
                } else {
                    cov / (va.sqrt() * vb.sqrt())
                }
            };
            assert!(corr(&projs[0], &projs[1]).abs() < 1e-6);
            assert!(corr(&projs[0], &projs[2]).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_tile_degenerates_to_zero_band() {
        let flat = vec![88.0; 36];
        let tile = tile_from_bands([flat.clone(), flat.clone(), flat], 6, 6);
        let out = pc1(&tile).unwrap();
        assert!(out.degenerate);
        assert!(out.band.grid.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sign_fix_points_toward_ones() {
        let mut rng = Rng::seed_from_u64(21);
        for _ in 0..10 {
            let tile = random_tile(&mut rng, 8, 8);
            let out = pc1(&tile).unwrap();
            let dot: f64 = out.eigenvector.iter().sum();
            assert!(dot >= 0.0);
        }
    }
}
