//! 8-bit PNG and TIFF readers/writers for 1- and 3-band rasters.
//!
//! Values are quantized through each band's declared range on save, so a
//! band of reals in [0, 1] is stored as `round(v * 255)` and an 8-bit band
//! round-trips losslessly.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use super::{Band, BandName, Grid, MaskTile, Tile, ValueRange};
use crate::error::{Error, Result};

const SLOT_NAMES: [BandName; 3] = [BandName::R, BandName::G, BandName::B];

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(ref e) if e == "png" => Ok(ImageFormat::Png),
        Some(ref e) if e == "tif" || e == "tiff" => Ok(ImageFormat::Tiff),
        other => Err(Error::Data(format!(
            "unsupported raster extension {:?} for {}",
            other,
            path.display()
        ))),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Load an 8-bit raster as a [`Tile`] with `expected_bands` bands.
///
/// Band ranges are declared [0, 255]; gsd defaults to 1.0 and the source id
/// to the file stem (callers with manifest metadata override via
/// [`Tile::remeta`]).
pub fn load_tile(path: &Path, expected_bands: usize) -> Result<Tile> {
    let img = decode(path)?;
    let actual = match &img {
        DynamicImage::ImageLuma8(_) => 1,
        DynamicImage::ImageRgb8(_) => 3,
        DynamicImage::ImageRgba8(_) => 4,
        DynamicImage::ImageLumaA8(_) => 2,
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("unsupported pixel layout {:?}", other.color()),
            })
        }
    };
    if actual != expected_bands {
        return Err(Error::Data(format!(
            "{}: expected {} band(s), file has {}",
            path.display(),
            expected_bands,
            actual
        )));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut bands = Vec::with_capacity(expected_bands);
    match expected_bands {
        1 => {
            let gray = img.into_luma8();
            let data = gray.into_raw().into_iter().map(f64::from).collect();
            bands.push(Band::new(
                Grid::from_vec(h, w, data)?,
                ValueRange::EIGHT_BIT,
                BandName::R,
            )?);
        }
        3 => {
            let rgb = img.into_rgb8();
            let raw = rgb.into_raw();
            for (c, name) in SLOT_NAMES.iter().enumerate() {
                let data = raw[c..].iter().step_by(3).map(|&v| f64::from(v)).collect();
                bands.push(Band::new(Grid::from_vec(h, w, data)?, ValueRange::EIGHT_BIT, *name)?);
            }
        }
        n => {
            return Err(Error::Data(format!(
                "only 1- or 3-band rasters are supported, requested {n}"
            )))
        }
    }
    let source_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("tile")
        .to_string();
    Tile::new(bands, 1.0, source_id, (0, 0))
}

/// Load a single-band mask image, binarizing at >127.
pub fn load_mask(path: &Path) -> Result<MaskTile> {
    let img = decode(path)?;
    let gray = img.into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
    MaskTile::new(Grid::from_vec(h, w, data)?)
}

fn quantize(band: &Band) -> Vec<u8> {
    let normalized = super::normalize_band(band, ValueRange::EIGHT_BIT).expect("finite band");
    normalized
        .grid
        .values()
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Save a 1- or 3-band tile as an 8-bit raster.
pub fn save_tile(tile: &Tile, path: &Path) -> Result<()> {
    let format = format_for(path)?;
    let (h, w) = (tile.h(), tile.w());
    match tile.bands().len() {
        1 => {
            let buf = quantize(&tile.bands()[0]);
            let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from tile");
            img.save_with_format(path, format).map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        }
        3 => {
            let chans: Vec<Vec<u8>> = tile.bands().iter().map(quantize).collect();
            let mut buf = Vec::with_capacity(h * w * 3);
            for i in 0..h * w {
                buf.push(chans[0][i]);
                buf.push(chans[1][i]);
                buf.push(chans[2][i]);
            }
            let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from tile");
            img.save_with_format(path, format).map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        }
        n => Err(Error::Data(format!("cannot save a {n}-band tile as an image"))),
    }
}

/// Save a single band as an 8-bit grayscale raster.
pub fn save_band_u8(band: &Band, path: &Path) -> Result<()> {
    let format = format_for(path)?;
    let buf = quantize(band);
    let img = image::GrayImage::from_raw(band.w() as u32, band.h() as u32, buf)
        .expect("buffer sized from band");
    img.save_with_format(path, format).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Save a mask as a {0, 255} single-band image.
pub fn save_mask(mask: &MaskTile, path: &Path) -> Result<()> {
    let format = format_for(path)?;
    let buf: Vec<u8> = mask.grid().values().iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(mask.w() as u32, mask.h() as u32, buf)
        .expect("buffer sized from mask");
    img.save_with_format(path, format).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use tempfile::tempdir;

    fn random_rgb_tile(rng: &mut Rng, h: usize, w: usize) -> Tile {
        let bands = SLOT_NAMES
            .iter()
            .map(|&name| {
                let data: Vec<f64> = (0..h * w).map(|_| rng.next_below(256) as f64).collect();
                Band::new(Grid::from_vec(h, w, data).unwrap(), ValueRange::EIGHT_BIT, name).unwrap()
            })
            .collect();
        Tile::new(bands, 1.0, "rng", (0, 0)).unwrap()
    }

    #[test]
    fn png_round_trip_identity_on_8bit() {
        let dir = tempdir().unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let tile = random_rgb_tile(&mut rng, 17, 23);
        let path = dir.path().join("t.png");
        save_tile(&tile, &path).unwrap();
        let back = load_tile(&path, 3).unwrap();
        for (a, b) in tile.bands().iter().zip(back.bands()) {
            assert_eq!(a.grid, b.grid);
        }
    }

    #[test]
    fn tiff_round_trip_identity_on_8bit() {
        let dir = tempdir().unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let tile = random_rgb_tile(&mut rng, 9, 5);
        let path = dir.path().join("t.tif");
        save_tile(&tile, &path).unwrap();
        let back = load_tile(&path, 3).unwrap();
        for (a, b) in tile.bands().iter().zip(back.bands()) {
            assert_eq!(a.grid, b.grid);
        }
    }

    #[test]
    fn mask_round_trip_binarizes() {
        let dir = tempdir().unwrap();
        let mask = MaskTile::new(Grid::from_vec(2, 2, vec![0, 1, 1, 0]).unwrap()).unwrap();
        let path = dir.path().join("m.png");
        save_mask(&mask, &path).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(mask.grid(), back.grid());
    }

    #[test]
    fn unit_range_band_quantizes_by_scaling() {
        // round(v * 255) for a [0,1] declared range
        let dir = tempdir().unwrap();
        let band = Band::new(
            Grid::from_vec(1, 3, vec![0.0, 0.5, 1.0]).unwrap(),
            ValueRange::UNIT,
            BandName::Mbi,
        )
        .unwrap();
        let path = dir.path().join("b.png");
        save_band_u8(&band, &path).unwrap();
        let back = load_tile(&path, 1).unwrap();
        let vals: Vec<f64> = back.bands()[0].grid.values().to_vec();
        assert_eq!(vals, vec![0.0, 128.0, 255.0]);
    }

    #[test]
    fn constant_zero_band_saves_all_zero() {
        let dir = tempdir().unwrap();
        let band = Band::new(
            Grid::filled(4, 4, 0.0),
            ValueRange::EIGHT_BIT,
            BandName::R,
        )
        .unwrap();
        let path = dir.path().join("z.png");
        save_band_u8(&band, &path).unwrap();
        let back = load_tile(&path, 1).unwrap();
        assert!(back.bands()[0].grid.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn band_count_mismatch_is_an_error() {
        let dir = tempdir().unwrap();
        let mut rng = Rng::seed_from_u64(3);
        let tile = random_rgb_tile(&mut rng, 4, 4);
        let path = dir.path().join("t.png");
        save_tile(&tile, &path).unwrap();
        assert!(load_tile(&path, 1).is_err());
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(load_tile(Path::new("/nonexistent/x.png"), 3).is_err());
    }

    #[test]
    fn four_band_file_with_three_expected_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        let img = image::RgbaImage::from_raw(4, 4, vec![128u8; 4 * 4 * 4]).unwrap();
        img.save(&path).unwrap();
        let err = load_tile(&path, 3).unwrap_err().to_string();
        assert!(err.contains("expected 3"), "{err}");
    }
}
