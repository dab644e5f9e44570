//! Dataset curation: chip large images into tile/mask pairs, filter by label
//! density, split into train/validation sets, and persist a manifest.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::{Band, Grid, MaskTile, Tile};
use crate::rng::Rng;

/// Knobs for the curation stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CurationConfig {
    /// Side length of the square chips in pixels.
    pub tile_size: usize,
    /// Minimum fraction of building pixels a chip must carry to be kept.
    pub hlf_threshold: f64,
    /// Fraction of kept pairs assigned to the training split.
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            tile_size: 224,
            hlf_threshold: 0.3,
            split_ratio: 0.85,
            seed: 0,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::Config("tile_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hlf_threshold) {
            return Err(Error::Config(format!(
                "hlf_threshold must lie in [0, 1], got {}",
                self.hlf_threshold
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "split_ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        Ok(())
    }
}

/// Cut `image`/`mask` into a non-overlapping grid of `tile_size` chips.
///
/// Partial edge strips are dropped rather than padded; padding would inject
/// synthetic non-building borders that bias the label filter.
pub fn chip(image: &Tile, mask: &MaskTile, tile_size: usize) -> Result<Vec<(Tile, MaskTile)>> {
    if image.h() != mask.h() || image.w() != mask.w() {
        return Err(Error::shape(
            format!("{}x{}", image.h(), image.w()),
            format!("{}x{}", mask.h(), mask.w()),
        ));
    }
    if image.h() < tile_size || image.w() < tile_size {
        return Err(Error::Data(format!(
            "image {}x{} smaller than tile size {}",
            image.h(),
            image.w(),
            tile_size
        )));
    }
    let rows = image.h() / tile_size;
    let cols = image.w() / tile_size;
    let mut out = Vec::with_capacity(rows * cols);
    for ty in 0..rows {
        for tx in 0..cols {
            let (y0, x0) = (ty * tile_size, tx * tile_size);
            let bands = image
                .bands()
                .iter()
                .map(|b| {
                    let mut data = Vec::with_capacity(tile_size * tile_size);
                    for y in 0..tile_size {
                        for x in 0..tile_size {
                            data.push(b.grid.get(y0 + y, x0 + x));
                        }
                    }
                    Band::new(Grid::from_vec(tile_size, tile_size, data)?, b.range, b.name)
                })
                .collect::<Result<Vec<_>>>()?;
            let tile = Tile::new(bands, image.gsd(), image.source_id().to_string(), (y0, x0))?;
            let mask_chip = mask.crop(y0, x0, tile_size, tile_size);
            out.push((tile, mask_chip));
        }
    }
    Ok(out)
}

/// High Label Filter value: building pixels over total pixels.
pub fn hlf(mask: &MaskTile) -> f64 {
    mask.count_ones() as f64 / (mask.h() * mask.w()) as f64
}

/// Keep exactly the pairs whose HLF is at least `threshold`, preserving order.
pub fn filter_by_hlf(
    pairs: Vec<(Tile, MaskTile)>,
    threshold: f64,
) -> Vec<(Tile, MaskTile)> {
    pairs
        .into_iter()
        .filter(|(_, mask)| hlf(mask) >= threshold)
        .collect()
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Deterministic seeded split. Train size is `round(n * ratio)` with
/// half-up rounding; the two halves are disjoint and exhaustive.
pub fn split_train_val<T>(items: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Data("cannot split an empty set".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = items.len();
    let n_train = round_half_up(n as f64 * ratio).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::seed_from_u64(seed);
    rng.shuffle(&mut order);
    let train_set: std::collections::HashSet<usize> = order[..n_train].iter().copied().collect();
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n - n_train);
    for (i, item) in items.into_iter().enumerate() {
        if train_set.contains(&i) {
            train.push(item);
        } else {
            val.push(item);
        }
    }
    Ok((train, val))
}

/// Which split a manifest entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split tag '{other}'"))),
        }
    }
}

/// One tile/mask pair tracked by the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub tile_path: PathBuf,
    pub mask_path: PathBuf,
    pub gsd: f64,
    pub source_id: String,
    pub split: Split,
    /// Filled in by the featurize stage.
    pub composite_path: Option<PathBuf>,
}

/// The persisted dataset index.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub prng: String,
    pub seed: u64,
    /// Extra `key=value` header tokens (e.g. the normalization convention).
    pub annotations: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(seed: u64, entries: Vec<ManifestEntry>) -> Self {
        Manifest {
            prng: Rng::ALGORITHM.to_string(),
            seed,
            annotations: Vec::new(),
            entries,
        }
    }

    pub fn annotate(&mut self, key: &str, value: &str) {
        if let Some(slot) = self.annotations.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value.to_string();
        } else {
            self.annotations.push((key.to_string(), value.to_string()));
        }
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

const MANIFEST_MAGIC: &str = "#geoseg-manifest v1";

/// Write a manifest: header line, then one tab-separated entry per line.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut header = format!("{MANIFEST_MAGIC} prng={} seed={}", manifest.prng, manifest.seed);
    for (k, v) in &manifest.annotations {
        header.push_str(&format!(" {k}={v}"));
    }
    writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
    for e in &manifest.entries {
        let mut line = format!(
            "{}\t{}\t{}\t{}\t{}",
            e.tile_path.display(),
            e.mask_path.display(),
            e.gsd,
            e.source_id,
            e.split
        );
        if let Some(c) = &e.composite_path {
            line.push_str(&format!("\t{}", c.display()));
        }
        writeln!(file, "{line}").map_err(|e2| Error::io(path, e2))?;
    }
    Ok(())
}

/// Read a manifest, validating the header and that every referenced file
/// exists (relative paths resolve against the manifest's directory).
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let manifest = read_manifest_unchecked(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for (i, e) in manifest.entries.iter().enumerate() {
        for (label, p) in [("tile", Some(&e.tile_path)), ("mask", Some(&e.mask_path)), ("composite", e.composite_path.as_ref())] {
            if let Some(p) = p {
                if !resolve(base, p).exists() {
                    return Err(Error::Data(format!(
                        "manifest entry {} ({}): missing {label} file {}",
                        i + 1,
                        e.source_id,
                        p.display()
                    )));
                }
            }
        }
    }
    Ok(manifest)
}

/// Parse a manifest without checking that referenced files exist.
pub fn read_manifest_unchecked(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(line))) => line,
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => return Err(Error::Data(format!("{}: empty manifest (missing header)", path.display()))),
    };
    if !header.starts_with(MANIFEST_MAGIC) {
        return Err(Error::Data(format!(
            "{}: bad manifest header '{header}'",
            path.display()
        )));
    }
    let mut prng = String::new();
    let mut seed: Option<u64> = None;
    let mut annotations = Vec::new();
    for token in header[MANIFEST_MAGIC.len()..].split_whitespace() {
        match token.split_once('=') {
            Some(("prng", v)) => prng = v.to_string(),
            Some(("seed", v)) => {
                seed = Some(v.parse().map_err(|_| {
                    Error::Data(format!("{}: bad seed '{v}' in header", path.display()))
                })?)
            }
            Some((k, v)) => annotations.push((k.to_string(), v.to_string())),
            None => {
                return Err(Error::Data(format!(
                    "{}: malformed header token '{token}'",
                    path.display()
                )))
            }
        }
    }
    let seed = seed.ok_or_else(|| Error::Data(format!("{}: header lacks seed", path.display())))?;

    let mut entries = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 && fields.len() != 6 {
            return Err(Error::Data(format!(
                "{}: line {lineno}: expected 5 or 6 tab-separated fields, got {}",
                path.display(),
                fields.len()
            )));
        }
        let gsd: f64 = fields[2].parse().map_err(|_| {
            Error::Data(format!("{}: line {lineno}: bad gsd '{}'", path.display(), fields[2]))
        })?;
        let split: Split = fields[4].parse().map_err(|_| {
            Error::Data(format!("{}: line {lineno}: bad split '{}'", path.display(), fields[4]))
        })?;
        entries.push(ManifestEntry {
            tile_path: PathBuf::from(fields[0]),
            mask_path: PathBuf::from(fields[1]),
            gsd,
            source_id: fields[3].to_string(),
            split,
            composite_path: fields.get(5).map(PathBuf::from),
        });
    }
    let mut manifest = Manifest::new(seed, entries);
    manifest.prng = prng;
    manifest.annotations = annotations;
    Ok(manifest)
}

/// Resolve a manifest-relative path.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
