//! A fully resolved simulation scene and its deterministic seed plumbing.

use crate::camera::{expected_counts, expected_counts_at, sample_frame, Exposure, Frame, PixelOptics};
use crate::error::{Error, Result};
use crate::field::FieldMap;
use crate::nv::{MwDrive, NvParams};

/// SplitMix64 finaliser; decorrelates structured seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th independent sub-stream of `base`.
pub fn child_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(index.wrapping_add(0x5151_5151)))
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub field: FieldMap,
    pub physics: NvParams,
    pub optics: PixelOptics,
    pub drive: MwDrive,
    /// Skip shot noise: frames carry the exact expected counts.
    pub noiseless: bool,
}

impl Scene {
    pub fn new(field: FieldMap, physics: NvParams, optics: PixelOptics, drive: MwDrive) -> Result<Self> {
        if optics.laser_profile.len() != field.len() {
            return Err(Error::Data(format!(
                "optics has {} pixels but field map {}x{}",
                optics.laser_profile.len(),
                field.width,
                field.height
            )));
        }
        physics.validate()?;
        drive.validate()?;
        Ok(Self { field, physics, optics, drive, noiseless: false })
    }

    pub fn noiseless(mut self, on: bool) -> Self {
        self.noiseless = on;
        self
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.field.width, self.field.height)
    }

    pub fn expected(&self, drive: &MwDrive, window: Exposure) -> Result<Vec<f64>> {
        expected_counts(&self.optics, &self.field, &self.physics, drive, window)
    }

    /// Expected counts of a pixel subset.
    pub fn expected_at(&self, drive: &MwDrive, window: Exposure, pixels: &[u32]) -> Result<Vec<f64>> {
        expected_counts_at(&self.optics, &self.field, &self.physics, drive, window, pixels)
    }

    /// One frame under `drive`; shot noise unless the scene is noiseless.
    pub fn capture(&self, drive: &MwDrive, window: Exposure, seed: u64) -> Result<Frame> {
        let means = self.expected(drive, window)?;
        let counts = if self.noiseless { means } else { sample_frame(&means, self.field.width, seed)? };
        Ok(Frame {
            width: self.field.width,
            height: self.field.height,
            counts,
            exposure_s: window.duration_s,
            timestamp_s: window.start_s,
        })
    }

    /// Frame under the scene's own drive.
    pub fn capture_signal(&self, window: Exposure, seed: u64) -> Result<Frame> {
        self.capture(&self.drive, window, seed)
    }

    /// Laser-on, MW-off reference accumulated over `n_frames` frames.
    pub fn capture_reference(&self, n_frames: u32, exposure_s: f64, seed: u64) -> Result<Reference> {
        if n_frames == 0 {
            return Err(Error::Config("reference needs at least one frame".into()));
        }
        let off = self.drive.with_tones(Vec::new());
        let mut sum = vec![0.0; self.field.len()];
        let frames = if self.noiseless { 1 } else { n_frames };
        for k in 0..frames {
            let f = self.capture(&off, Exposure::new(k as f64 * exposure_s, exposure_s), child_seed(seed, k as u64))?;
            for (s, c) in sum.iter_mut().zip(&f.counts) {
                *s += c;
            }
        }
        let counts_per_frame = sum.into_iter().map(|s| s / frames as f64).collect();
        Ok(Reference {
            width: self.field.width,
            height: self.field.height,
            counts_per_frame,
            exposure_s,
            n_frames: frames,
            exact: self.noiseless,
        })
    }
}

/// No-signal image used to turn frames into contrast.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub width: usize,
    pub height: usize,
    /// Mean counts of one frame of `exposure_s`.
    pub counts_per_frame: Vec<f64>,
    pub exposure_s: f64,
    pub n_frames: u32,
    /// Expectation values rather than an average of noisy frames.
    pub exact: bool,
}

impl Reference {
    /// Reference counts rescaled to another exposure.
    pub fn scaled_to(&self, exposure_s: f64) -> impl Iterator<Item = f64> + '_ {
        let k = exposure_s / self.exposure_s;
        self.counts_per_frame.iter().map(move |c| c * k)
    }

    /// Relative variance of a reference sum: zero when exact.
    pub fn variance_factor(&self, exposure_s: f64) -> f64 {
        if self.exact {
            0.0
        } else {
            // Var(sum of averaged frames) = mean / n_frames, rescaled by k^2
            (exposure_s / self.exposure_s) / self.n_frames as f64
        }
    }
}
