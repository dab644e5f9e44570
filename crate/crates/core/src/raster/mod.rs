//! Raster data model: bands, tiles, masks, probability maps.
//!
//! Grids are real-valued in memory and 8-bit unsigned on disk. Every tile is
//! immutable once constructed, so tiles can be shared freely between workers.

mod io;

pub use io::{load_mask, load_tile, save_band_u8, save_mask, save_tile};

use crate::error::{Error, Result};

/// Declared minimum/maximum used when a band is normalized or quantized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl ValueRange {
    pub const EIGHT_BIT: ValueRange = ValueRange {
        min: 0.0,
        max: 255.0,
    };
    pub const UNIT: ValueRange = ValueRange { min: 0.0, max: 1.0 };
    pub const SIGNED_UNIT: ValueRange = ValueRange {
        min: -1.0,
        max: 1.0,
    };

    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !min.is_finite() || !max.is_finite() || min > max {
            return Err(Error::Data(format!("invalid value range [{min}, {max}]")));
        }
        Ok(ValueRange { min, max })
    }

    pub fn is_degenerate(&self) -> bool {
        self.min == self.max
    }
}

/// Identifier for a raw or derived band. `Luma` and `Brightness` are
/// intermediates of the feature stage and never fill a composite slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BandName {
    R,
    G,
    B,
    Pc1,
    Sobel,
    Vdvi,
    Mbi,
    Luma,
    Brightness,
}

impl std::fmt::Display for BandName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BandName::R => "R",
            BandName::G => "G",
            BandName::B => "B",
            BandName::Pc1 => "PC1",
            BandName::Sobel => "SOBEL",
            BandName::Vdvi => "VDVI",
            BandName::Mbi => "MBI",
            BandName::Luma => "LUMA",
            BandName::Brightness => "BRIGHTNESS",
        };
        f.write_str(s)
    }
}

/// Dense row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Data(format!("grid dimensions must be positive, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::shape(format!("{h}x{w} = {} values", h * w), data.len()));
        }
        Ok(Grid { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: T) -> Self {
        Grid {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.w + x] = value;
    }

    /// Read with coordinates clamped to the border (edge replication).
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> T {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.get(y, x)
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U: Copy>(&self, other: &Grid<U>) -> bool {
        self.h == other.h && self.w == other.w
    }
}

/// One raster band: a real-valued grid plus its declared range and name.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub grid: Grid<f64>,
    pub range: ValueRange,
    pub name: BandName,
}

impl Band {
    pub fn new(grid: Grid<f64>, range: ValueRange, name: BandName) -> Result<Self> {
        if grid.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("band {name} contains non-finite values")));
        }
        Ok(Band { grid, range, name })
    }

    pub fn h(&self) -> usize {
        self.grid.h()
    }

    pub fn w(&self) -> usize {
        self.grid.w()
    }

    /// Observed min/max of the stored values.
    pub fn observed_range(&self) -> ValueRange {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in self.grid.values() {
            min = min.min(v);
            max = max.max(v);
        }
        ValueRange { min, max }
    }
}

/// A fixed-size multi-band patch cut from a parent image.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    bands: Vec<Band>,
    gsd: f64,
    source_id: String,
    origin: (usize, usize),
}

impl Tile {
    pub fn new(
        bands: Vec<Band>,
        gsd: f64,
        source_id: impl Into<String>,
        origin: (usize, usize),
    ) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::Data("tile requires at least one band".into()));
        }
        let (h, w) = (bands[0].h(), bands[0].w());
        for b in &bands {
            if b.h() != h || b.w() != w {
                return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", b.h(), b.w())));
            }
        }
        if !(gsd > 0.0) {
            return Err(Error::Data(format!("gsd must be positive, got {gsd}")));
        }
        Ok(Tile {
            bands,
            gsd,
            source_id: source_id.into(),
            origin,
        })
    }

    pub fn h(&self) -> usize {
        self.bands[0].h()
    }

    pub fn w(&self) -> usize {
        self.bands[0].w()
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn band(&self, name: BandName) -> Option<&Band> {
        self.bands.iter().find(|b| b.name == name)
    }

    pub fn gsd(&self) -> f64 {
        self.gsd
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn origin(&self) -> (usize, usize) {
        self.origin
    }

    /// New tile with `extra` appended to the band list.
    pub fn with_bands(&self, extra: Vec<Band>) -> Result<Tile> {
        let mut bands = self.bands.clone();
        bands.extend(extra);
        Tile::new(bands, self.gsd, self.source_id.clone(), self.origin)
    }

    /// Same pixels, new provenance. Used when manifest metadata overrides
    /// the defaults a file loader fills in.
    pub fn remeta(self, gsd: f64, source_id: impl Into<String>, origin: (usize, usize)) -> Result<Tile> {
        Tile::new(self.bands, gsd, source_id, origin)
    }
}

/// Binary building/non-building label raster.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTile {
    grid: Grid<u8>,
}

impl MaskTile {
    pub fn new(grid: Grid<u8>) -> Result<Self> {
        if grid.values().iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(MaskTile { grid })
    }

    pub fn h(&self) -> usize {
        self.grid.h()
    }

    pub fn w(&self) -> usize {
        self.grid.w()
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.grid
    }

    /// Sub-rectangle of the mask; caller guarantees bounds.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> MaskTile {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.grid.get(y0 + y, x0 + x));
            }
        }
        MaskTile {
            grid: Grid::from_vec(h, w, data).expect("crop shape"),
        }
    }

    pub fn count_ones(&self) -> usize {
        self.grid.values().iter().filter(|&&v| v == 1).count()
    }
}

/// Per-pixel building probability in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    grid: Grid<f64>,
}

impl ProbMap {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if grid.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data("probability values must lie in [0, 1]".into()));
        }
        Ok(ProbMap { grid })
    }

    pub fn h(&self) -> usize {
        self.grid.h()
    }

    pub fn w(&self) -> usize {
        self.grid.w()
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.grid
    }
}

/// Affine map of a band's declared range onto `target`.
///
/// A degenerate declared range (min == max) maps every pixel to the target
/// midpoint so constant bands survive compositing without a division by zero.
pub fn normalize_band(band: &Band, target: ValueRange) -> Result<Band> {
    let src = band.range;
    let mut out = band.grid.clone();
    if src.is_degenerate() {
        let mid = 0.5 * (target.min + target.max);
        for v in out.values_mut() {
            *v = mid;
        }
    } else {
        let scale = (target.max - target.min) / (src.max - src.min);
        for v in out.values_mut() {
            *v = target.min + (*v - src.min) * scale;
        }
    }
    Band::new(out, target, band.name)
}
