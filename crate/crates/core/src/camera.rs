//! Synthetic camera: expected photoluminescence per pixel and shot noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldMap;
use crate::nv::{gslac_valid, linewidth_model, resonance_frequencies, triplet_sum, MwDrive, NvParams};

/// Above this mean a moment-matched Gaussian replaces the Poisson draw.
pub const GAUSSIAN_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaserShape {
    /// Gaussian across y, flat along the strip.
    GaussianY,
    Uniform,
}

/// Photon-budget parameters of the collection path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsConfig {
    pub nv_density_ppb: f64,
    /// Depth of the voxel seen by one pixel.
    pub optical_section_um: f64,
    /// Photons per second emitted by one center.
    pub pl_rate_per_center: f64,
    pub collection_efficiency: f64,
    pub laser_fwhm_um: f64,
    pub laser_shape: LaserShape,
}

impl Default for OpticsConfig {
    /// About 1e3 counts per millisecond on a peak pixel of 0.66 um pitch.
    fn default() -> Self {
        Self {
            nv_density_ppb: 3.0,
            optical_section_um: 10.0,
            pl_rate_per_center: 2.2e5,
            collection_efficiency: 2.0e-3,
            laser_fwhm_um: 38.0,
            laser_shape: LaserShape::GaussianY,
        }
    }
}

impl OpticsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("nv_density_ppb", self.nv_density_ppb),
            ("optical_section_um", self.optical_section_um),
            ("pl_rate_per_center", self.pl_rate_per_center),
            ("collection_efficiency", self.collection_efficiency),
            ("laser_fwhm_um", self.laser_fwhm_um),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("optics.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-pixel optics resolved on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelOptics {
    /// Centers per cubic micrometre.
    pub nv_density_per_um3: f64,
    pub voxel_volume_um3: f64,
    pub pl_rate_per_center: f64,
    pub collection_efficiency: f64,
    /// Relative pump intensity, peak 1, row-major `[y][x]`.
    pub laser_profile: Vec<f64>,
}

impl PixelOptics {
    pub fn new(cfg: &OpticsConfig, width: usize, height: usize, pixel_pitch_um: f64) -> Self {
        let mut profile = vec![1.0; width * height];
        if cfg.laser_shape == LaserShape::GaussianY && cfg.laser_fwhm_um > 0.0 {
            let sigma = cfg.laser_fwhm_um / (8.0 * std::f64::consts::LN_2).sqrt();
            let mid = 0.5 * height as f64;
            let row: Vec<f64> = (0..height)
                .map(|y| {
                    let d = (y as f64 + 0.5 - mid) * pixel_pitch_um;
                    (-0.5 * (d / sigma).powi(2)).exp()
                })
                .collect();
            let peak = row.iter().cloned().fold(0.0, f64::max);
            for y in 0..height {
                profile[y * width..(y + 1) * width].fill(row[y] / peak);
            }
        }
        Self {
            nv_density_per_um3: cfg.nv_density_ppb * crate::nv::CENTERS_PER_UM3_PER_PPB,
            voxel_volume_um3: pixel_pitch_um * pixel_pitch_um * cfg.optical_section_um,
            pl_rate_per_center: cfg.pl_rate_per_center,
            collection_efficiency: cfg.collection_efficiency,
            laser_profile: profile,
        }
    }

    /// Flat-profile optics with a prescribed count rate per pixel.
    pub fn flat(width: usize, height: usize, counts_per_s: f64) -> Self {
        Self {
            nv_density_per_um3: 1.0,
            voxel_volume_um3: 1.0,
            pl_rate_per_center: counts_per_s,
            collection_efficiency: 1.0,
            laser_profile: vec![1.0; width * height],
        }
    }

    /// Detected counts per second on a pixel at unit pump intensity: `n V R0 zeta`.
    pub fn peak_rate(&self) -> f64 {
        self.nv_density_per_um3 * self.voxel_volume_um3 * self.pl_rate_per_center * self.collection_efficiency
    }

    /// Multiplies the count rate, e.g. to pin a photon budget.
    pub fn scale_rate(&mut self, factor: f64) {
        self.pl_rate_per_center *= factor;
    }
}

/// Integration window of one camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exposure {
    pub start_s: f64,
    pub duration_s: f64,
}

impl Exposure {
    pub fn new(start_s: f64, duration_s: f64) -> Self {
        Self { start_s, duration_s }
    }
}

/// One camera image. Counts are integers under shot noise and exact
/// expectations in noiseless mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<f64>,
    pub exposure_s: f64,
    pub timestamp_s: f64,
}

impl Frame {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Mean counts on every pixel during `window` under `drive`.
///
/// Every active tone multiplies the pixel's PL by its duty-weighted ODMR
/// response; both branches (and the off-axis families, when enabled) respond.
pub fn expected_counts(
    optics: &PixelOptics,
    field: &FieldMap,
    physics: &NvParams,
    drive: &MwDrive,
    window: Exposure,
) -> Result<Vec<f64>> {
    if !(window.duration_s > 0.0) {
        return Err(Error::Domain(format!("exposure must be > 0, got {}", window.duration_s)));
    }
    if optics.laser_profile.len() != field.len() {
        return Err(Error::Data(format!(
            "optics grid has {} pixels, field map {}",
            optics.laser_profile.len(),
            field.len()
        )));
    }
    let model = PlModel::new(optics, field, physics, drive, window);
    let mut out = vec![0.0; field.len()];
    out.par_chunks_mut(field.width.max(1)).enumerate().for_each(|(y, row)| {
        for (x, v) in row.iter_mut().enumerate() {
            *v = model.counts(y * field.width + x);
        }
    });
    Ok(out)
}

/// Expected counts of selected pixels only (indices `y * width + x`).
pub fn expected_counts_at(
    optics: &PixelOptics,
    field: &FieldMap,
    physics: &NvParams,
    drive: &MwDrive,
    window: Exposure,
    pixels: &[u32],
) -> Result<Vec<f64>> {
    if !(window.duration_s > 0.0) {
        return Err(Error::Domain(format!("exposure must be > 0, got {}", window.duration_s)));
    }
    if let Some(&bad) = pixels.iter().find(|&&i| i as usize >= field.len().min(optics.laser_profile.len())) {
        return Err(Error::Data(format!("pixel index {bad} outside the grid")));
    }
    let model = PlModel::new(optics, field, physics, drive, window);
    Ok(pixels.iter().map(|&i| model.counts(i as usize)).collect())
}

struct ActiveTone {
    duty: f64,
    freq: f64,
    contrast: f64,
    power_dbm: f64,
}

/// Drive resolved for one exposure window.
struct PlModel<'a> {
    optics: &'a PixelOptics,
    field: &'a FieldMap,
    physics: &'a NvParams,
    active: Vec<ActiveTone>,
    scale: f64,
}

impl<'a> PlModel<'a> {
    fn new(
        optics: &'a PixelOptics,
        field: &'a FieldMap,
        physics: &'a NvParams,
        drive: &MwDrive,
        window: Exposure,
    ) -> Self {
        let active = drive
            .tones
            .iter()
            .filter_map(|t| t.during(window.start_s, window.duration_s).map(|dt| (t, dt)))
            .filter(|(_, (_, f))| gslac_valid(*f, physics))
            .map(|(t, (duty, freq))| {
                let (contrast, power_dbm) = drive.tone_contrast(t.nominal_power_dbm, freq, physics);
                ActiveTone { duty, freq, contrast, power_dbm }
            })
            .collect();
        Self { optics, field, physics, active, scale: optics.peak_rate() * window.duration_s }
    }

    fn counts(&self, i: usize) -> f64 {
        let physics = self.physics;
        let mut pl = 1.0;
        if !self.active.is_empty() {
            let b = self.field.b_nv_t[i];
            let grad = self.field.gradient_mhz_per_um(i);
            let mut lines: [(f64, f64); 4] = [(0.0, 0.0); 4];
            let (m, p) = resonance_frequencies(b, physics);
            lines[0] = (m, 1.0);
            lines[1] = (p, 1.0);
            let mut n_lines = 2;
            if physics.offaxis_lines {
                let (mo, po) = resonance_frequencies(b * physics.offaxis_projection, physics);
                lines[2] = (mo, physics.polarizer_suppression);
                lines[3] = (po, physics.polarizer_suppression);
                n_lines = 4;
            }
            let hf = physics.hyperfine_hz();
            for t in &self.active {
                let half = 0.5 * linewidth_model(t.power_dbm, grad, self.field.pixel_pitch_um, physics);
                let mut r = 1.0;
                for &(nu, weight) in &lines[..n_lines] {
                    if gslac_valid(nu, physics) {
                        r *= 1.0 - weight * t.contrast * triplet_sum(t.freq - nu, half, hf);
                    }
                }
                pl *= 1.0 - t.duty * (1.0 - r);
            }
        }
        self.scale * self.optics.laser_profile[i] * pl
    }
}

/// Independent shot-noise draw per pixel. Each row owns a ChaCha stream
/// keyed by `(seed, row)`, so the result is identical for any thread count.
pub fn sample_frame(means: &[f64], width: usize, seed: u64) -> Result<Vec<f64>> {
    if let Some(bad) = means.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
        return Err(Error::Domain(format!("pixel mean must be finite and >= 0, got {bad}")));
    }
    let mut out = vec![0.0; means.len()];
    out.par_chunks_mut(width.max(1)).zip(means.par_chunks(width.max(1))).enumerate().for_each(|(row, (dst, src))| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(row as u64);
        for (d, &m) in dst.iter_mut().zip(src) {
            *d = if m == 0.0 {
                0.0
            } else if m > GAUSSIAN_THRESHOLD {
                let n = Normal::new(m, m.sqrt()).expect("finite sigma").sample(&mut rng);
                n.round().max(0.0)
            } else {
                Poisson::new(m).expect("positive mean").sample(&mut rng)
            };
        }
    });
    Ok(out)
}

/// Shot-noise-limited SNR of an `n_p`-pixel sum: `sqrt(n V N_p R0 zeta dt) * C`.
pub fn snr_estimate(
    nv_density_per_um3: f64,
    voxel_volume_um3: f64,
    n_p: f64,
    pl_rate_per_center: f64,
    collection_efficiency: f64,
    dt_s: f64,
    contrast: f64,
) -> f64 {
    (nv_density_per_um3 * voxel_volume_um3 * n_p * pl_rate_per_center * collection_efficiency * dt_s).sqrt() * contrast
}
