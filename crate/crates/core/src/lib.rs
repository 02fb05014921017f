//! Digital twin of a wide-field NV-diamond microwave spectrum analyser.
//!
//! A spherical magnet encodes frequency into position across a diamond;
//! a camera images the NV photoluminescence, which dips wherever a
//! microwave tone is resonant. The crate simulates that chain and runs the
//! acquisition, calibration and spectrum reconstruction procedures on the
//! synthetic frames.
//!
//! Modules, bottom up:
//! - [`field`]: dipole field of the magnet over the pixel grid
//! - [`nv`]: resonance formula, ODMR lineshape, contrast and linewidth models
//! - [`camera`]: expected counts, shot noise, SNR estimate
//! - [`acquisition`]: frequency sweeps, data cubes, normalization
//! - [`calibration`]: pixel-to-frequency masks, spectrum reconstruction, ambiguity
//! - [`analysis`]: lineshape fitting, tone detection, spectrograms, metrics
//! - [`format`]: on-disk cube, map, spectrum and spectrogram formats
//! - [`scenario`] and [`report`]: JSON scenario configs and metric pipelines

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod analysis;
pub mod calibration;
pub mod camera;
pub mod error;
pub mod field;
pub mod format;
pub mod nv;
pub mod report;
pub mod scenario;
pub mod scene;

pub use error::{Error, Result};
