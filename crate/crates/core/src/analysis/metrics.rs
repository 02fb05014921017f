use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{reconstruct_spectrum, CalibrationMap, SpectrumMode};
use crate::camera::{Exposure, Frame};
use crate::error::{Error, Result};
use crate::nv::Tone;
use crate::scene::{Reference, Scene};

use super::tones::detect_tones;

/// Time-ordered contrast spectra over the valid bins of a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    pub freq_axis_hz: Vec<u64>,
    pub time_axis_s: Vec<f64>,
    /// `values[row][col]`, one row per frame.
    pub values: Vec<Vec<f64>>,
}

impl Spectrogram {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.freq_axis_hz.len()
    }

    pub fn column_of(&self, frequency_hz: u64) -> Option<usize> {
        self.freq_axis_hz.iter().position(|&f| f == frequency_hz)
    }
}

/// One contrast spectrum per frame, in input order. Every bin comes from
/// the same exposure, so nothing is unobserved within a frame.
pub fn spectrogram(frames: &[Frame], map: &CalibrationMap, reference: &Reference) -> Result<Spectrogram> {
    map.check_shape("reference", reference.width, reference.height)?;
    if let Some(first) = frames.first() {
        for (i, f) in frames.iter().enumerate() {
            map.check_dims(f.width, f.height)?;
            if (f.exposure_s - first.exposure_s).abs() > 1e-12 * first.exposure_s {
                return Err(Error::Data(format!(
                    "frame {i} exposure {} s differs from {} s",
                    f.exposure_s, first.exposure_s
                )));
            }
        }
    }
    let cols: Vec<usize> = (0..map.n_bins()).filter(|&k| map.valid[k]).collect();
    let values = frames
        .par_iter()
        .map(|f| {
            let s = reconstruct_spectrum(f, map, SpectrumMode::Contrast(reference))?;
            Ok(cols.iter().map(|&k| s.values[k]).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(Spectrogram {
        freq_axis_hz: cols.iter().map(|&k| map.freq_axis_hz[k]).collect(),
        time_axis_s: frames.iter().map(|f| f.timestamp_s).collect(),
        values,
    })
}

/// Detected photons per second summed over one frequency bin:
/// `n * V * N_p * R0 * zeta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotonBudget {
    pub counts_per_s: f64,
}

impl PhotonBudget {
    pub fn from_parts(
        nv_density_per_um3: f64,
        voxel_volume_um3: f64,
        n_pixels: f64,
        pl_rate_per_center: f64,
        collection_efficiency: f64,
    ) -> Self {
        Self {
            counts_per_s: nv_density_per_um3 * voxel_volume_um3 * n_pixels * pl_rate_per_center * collection_efficiency,
        }
    }

    /// Budget that makes `exposure_s` exactly the time to reach `snr` at `contrast`.
    pub fn anchored(contrast: f64, snr: f64, exposure_s: f64) -> Self {
        Self { counts_per_s: snr * snr / (exposure_s * contrast * contrast) }
    }

    /// The 1.8 GHz operating point: 2 ms for SNR 5 at 6% contrast.
    pub fn calibrated() -> Self {
        Self::anchored(0.06, 5.0, 2e-3)
    }

    pub fn snr(&self, contrast: f64, exposure_s: f64) -> f64 {
        (self.counts_per_s * exposure_s).sqrt() * contrast
    }
}

/// Shortest exposure reaching `target_snr`: `snr^2 / (budget * C^2)`.
pub fn min_exposure(contrast: f64, budget: &PhotonBudget, target_snr: f64) -> Result<f64> {
    if !(contrast > 0.0) {
        return Err(Error::Domain(format!("contrast must be > 0, got {contrast}")));
    }
    if !(budget.counts_per_s > 0.0) || !(target_snr > 0.0) {
        return Err(Error::Domain("photon budget and target SNR must be > 0".into()));
    }
    Ok(target_snr * target_snr / (budget.counts_per_s * contrast * contrast))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicRange {
    pub min_detectable_dbm: f64,
    pub max_dbm: f64,
    pub range_db: f64,
    pub exposure_s: f64,
    pub k_sigma: f64,
}

/// Steps a single tone through `powers_dbm` (monotone) and finds the weakest
/// one still detected at its own bin. The frames are expectation values and
/// sigma is the analytic shot noise, so the threshold is deterministic.
pub fn dynamic_range(
    scene: &Scene,
    map: &CalibrationMap,
    tone_hz: f64,
    powers_dbm: &[f64],
    exposure_s: f64,
    k_sigma: f64,
) -> Result<DynamicRange> {
    if powers_dbm.len() < 2 {
        return Err(Error::Config("power sweep needs at least two points".into()));
    }
    let up = powers_dbm.windows(2).all(|w| w[1] > w[0]);
    let down = powers_dbm.windows(2).all(|w| w[1] < w[0]);
    if !(up || down) {
        return Err(Error::Config("power sweep must be strictly monotone".into()));
    }
    let bin = map
        .bin_of(tone_hz)
        .filter(|&k| map.valid[k])
        .ok_or_else(|| Error::Config(format!("tone {tone_hz} Hz falls on no valid calibration bin")))?;
    let exact = scene.clone().noiseless(true);
    let reference = exact.capture_reference(1, exposure_s, 0)?;
    let detected = powers_dbm
        .par_iter()
        .map(|&p| {
            let drive = exact.drive.with_tones(vec![Tone::cw(tone_hz, p)]);
            let frame = exact.capture(&drive, Exposure::new(0.0, exposure_s), 0)?;
            let s = reconstruct_spectrum(&frame, map, SpectrumMode::Contrast(&reference))?;
            Ok(detect_tones(&s, k_sigma)?.iter().any(|t| t.peak_bin == bin))
        })
        .collect::<Result<Vec<bool>>>()?;
    let max_dbm = powers_dbm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let imax = powers_dbm.iter().position(|&p| p == max_dbm).unwrap();
    if !detected[imax] {
        return Err(Error::Quality(format!("tone at {tone_hz} Hz not detected even at {max_dbm} dBm")));
    }
    let min_detectable_dbm =
        powers_dbm.iter().zip(&detected).filter(|(_, &d)| d).map(|(&p, _)| p).fold(f64::INFINITY, f64::min);
    Ok(DynamicRange { min_detectable_dbm, max_dbm, range_db: max_dbm - min_detectable_dbm, exposure_s, k_sigma })
}
