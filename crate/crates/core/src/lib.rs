//! Building-segmentation pipeline core.
//!
//! The crate is organized along the pipeline stages:
//!
//! - [`raster`] — tiles, bands, masks, 8-bit image I/O
//! - [`curation`] — chipping, the High Label Filter, train/val splitting,
//!   manifests
//! - [`features`] — guiding feature bands (PC1, Sobel, VDVI, MBI) and the
//!   CB0/CB1/CB2 composites
//! - [`network`] — the dynamic Res-U-Net with periodic-shuffle upsampling
//! - [`training`] — Combo loss, cyclical learning-rate schedules, the
//!   frozen/unfrozen loop with fallback checkpointing
//! - [`evaluation`] — confusion counting, the seven pixel/object metrics,
//!   color-coded confusion maps
//!
//! Everything randomized runs off a single seeded PRNG ([`rng::Rng`]), so a
//! full run is reproducible bit-for-bit from its seed.

pub mod curation;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod network;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
