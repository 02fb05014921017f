//! NV-center spin physics: Zeeman resonances, the hyperfine ODMR lineshape,
//! contrast saturation, line broadening and the low-frequency validity floor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diamond-lattice conversion: 1 ppb of NV centers per cubic micrometre.
pub const CENTERS_PER_UM3_PER_PPB: f64 = 176.0;

/// Which ground-state transition a frequency belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// |0> -> |-1>
    Minus,
    /// |0> -> |+1>
    Plus,
}

/// Constants of the resonance formula and the lineshape model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NvParams {
    /// Zero-field splitting.
    pub d_ghz: f64,
    pub gamma_ghz_per_t: f64,
    /// Spacing between adjacent lines of the 14N hyperfine triplet.
    pub hyperfine_mhz: f64,
    pub intrinsic_fwhm_mhz: f64,
    /// Frequencies below this are blurred by the level anti-crossing.
    pub gslac_floor_mhz: f64,
    /// Laser saturation parameter P/P_sat.
    pub optical_saturation_s: f64,
    /// Asymptotic contrast of the aligned family under strong drive.
    pub max_contrast: f64,
    /// Multiplier on `intrinsic * sqrt(1 + s)`; the default lands the low-power,
    /// low-gradient linewidth on 1 MHz.
    pub optical_broadening_scale: f64,
    /// MW power broadening per unit Rabi amplitude, MHz / sqrt(mW).
    pub mw_broadening_mhz_per_sqrt_mw: f64,
    /// Add resonance lines for the three non-aligned families.
    pub offaxis_lines: bool,
    /// Relative contrast of the non-aligned families after the polarizer.
    pub polarizer_suppression: f64,
    /// Field projection of a non-aligned family relative to the aligned one.
    pub offaxis_projection: f64,
}

impl Default for NvParams {
    fn default() -> Self {
        let intrinsic = 0.5;
        let s = 0.15;
        Self {
            d_ghz: 2.87,
            gamma_ghz_per_t: 28.0,
            hyperfine_mhz: 2.14,
            intrinsic_fwhm_mhz: intrinsic,
            gslac_floor_mhz: 10.0,
            optical_saturation_s: s,
            max_contrast: 0.06,
            optical_broadening_scale: 1.0 / (intrinsic * (1.0 + s).sqrt()),
            mw_broadening_mhz_per_sqrt_mw: 0.3,
            offaxis_lines: false,
            polarizer_suppression: 0.5,
            offaxis_projection: 1.0 / 3.0,
        }
    }
}

impl NvParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_ghz", self.d_ghz),
            ("gamma_ghz_per_t", self.gamma_ghz_per_t),
            ("hyperfine_mhz", self.hyperfine_mhz),
            ("intrinsic_fwhm_mhz", self.intrinsic_fwhm_mhz),
            ("gslac_floor_mhz", self.gslac_floor_mhz),
            ("optical_saturation_s", self.optical_saturation_s),
            ("max_contrast", self.max_contrast),
            ("optical_broadening_scale", self.optical_broadening_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("physics.{name} must be > 0, got {v}")));
            }
        }
        if self.hyperfine_mhz >= 10.0 * self.intrinsic_fwhm_mhz {
            return Err(Error::Config(format!(
                "physics.hyperfine_mhz {} is implausibly large against intrinsic_fwhm_mhz {}",
                self.hyperfine_mhz, self.intrinsic_fwhm_mhz
            )));
        }
        if self.max_contrast > 1.0 / 3.0 {
            return Err(Error::Config("physics.max_contrast must be <= 1/3".into()));
        }
        if self.mw_broadening_mhz_per_sqrt_mw < 0.0
            || !(0.0..=1.0).contains(&self.polarizer_suppression)
            || !(0.0..=1.0).contains(&self.offaxis_projection)
        {
            return Err(Error::Config("physics broadening/off-axis factors out of range".into()));
        }
        Ok(())
    }

    pub fn d_hz(&self) -> f64 {
        self.d_ghz * 1e9
    }

    pub fn gamma_hz_per_t(&self) -> f64 {
        self.gamma_ghz_per_t * 1e9
    }

    pub fn hyperfine_hz(&self) -> f64 {
        self.hyperfine_mhz * 1e6
    }

    /// Field at which the |-1> level crosses |0>.
    pub fn crossing_field_t(&self) -> f64 {
        self.d_hz() / self.gamma_hz_per_t()
    }
}

/// `(nu_minus, nu_plus)` in Hz for a field component `b_nv_t` along the NV axis.
pub fn resonance_frequencies(b_nv_t: f64, params: &NvParams) -> (f64, f64) {
    let d = params.d_hz();
    let shift = params.gamma_hz_per_t() * b_nv_t;
    ((d - shift).abs(), (d + shift).abs())
}

/// Field that puts `branch` on resonance with `nu_hz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSolution {
    pub b_nv_t: f64,
    /// Second non-negative solution of the minus branch below D: the field
    /// above the level crossing that gives the same frequency.
    pub alternate_t: Option<f64>,
}

pub fn field_for_frequency(nu_hz: f64, branch: Branch, params: &NvParams) -> Result<FieldSolution> {
    if !nu_hz.is_finite() || nu_hz < 0.0 {
        return Err(Error::Domain(format!("frequency must be finite and >= 0, got {nu_hz}")));
    }
    let d = params.d_hz();
    let gamma = params.gamma_hz_per_t();
    match branch {
        Branch::Plus => {
            if nu_hz < d {
                return Err(Error::Domain(format!("plus branch cannot resonate below D: {nu_hz} Hz < {d} Hz")));
            }
            Ok(FieldSolution { b_nv_t: (nu_hz - d) / gamma, alternate_t: None })
        }
        Branch::Minus if nu_hz > d => Ok(FieldSolution { b_nv_t: (nu_hz + d) / gamma, alternate_t: None }),
        Branch::Minus => {
            let below = (d - nu_hz) / gamma;
            let above = (d + nu_hz) / gamma;
            Ok(FieldSolution { b_nv_t: below, alternate_t: (above != below).then_some(above) })
        }
    }
}

/// Sum of the three hyperfine Lorentzians (peak heights 1) at `detuning`.
#[inline]
pub fn triplet_sum(detuning: f64, half_width: f64, hyperfine: f64) -> f64 {
    let a2 = half_width * half_width;
    let l = |x: f64| a2 / (a2 + x * x);
    l(detuning) + l(detuning + hyperfine) + l(detuning - hyperfine)
}

/// Relative photoluminescence for a single drive tone: one minus the contrast
/// times the hyperfine triplet centred on `center_hz`.
pub fn odmr_response(probe_hz: f64, center_hz: f64, fwhm_hz: f64, contrast: f64, params: &NvParams) -> Result<f64> {
    if !(fwhm_hz > 0.0) {
        return Err(Error::Domain(format!("fwhm must be > 0, got {fwhm_hz}")));
    }
    if !(0.0..=1.0 / 3.0).contains(&contrast) {
        return Err(Error::Domain(format!("contrast must lie in [0, 1/3], got {contrast}")));
    }
    Ok(1.0 - contrast * triplet_sum(probe_hz - center_hz, 0.5 * fwhm_hz, params.hyperfine_hz()))
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Single-pole saturation `C = Cmax * p / (p + p_ref)` on linear powers.
pub fn contrast_model(power_dbm_at_nv: f64, reference_power_dbm: f64, params: &NvParams) -> f64 {
    let p = dbm_to_mw(power_dbm_at_nv);
    let p_ref = dbm_to_mw(reference_power_dbm);
    params.max_contrast * p / (p + p_ref)
}

/// Ensemble FWHM in Hz: optical-broadened intrinsic width combined in
/// quadrature with the in-pixel gradient spread, plus MW power broadening.
pub fn linewidth_model(power_dbm_at_nv: f64, gradient_mhz_per_um: f64, pixel_pitch_um: f64, params: &NvParams) -> f64 {
    let base = params.intrinsic_fwhm_mhz * (1.0 + params.optical_saturation_s).sqrt() * params.optical_broadening_scale;
    let grad = gradient_mhz_per_um.abs() * pixel_pitch_um;
    let rabi = dbm_to_mw(power_dbm_at_nv).sqrt();
    ((base * base + grad * grad).sqrt() + params.mw_broadening_mhz_per_sqrt_mw * rabi) * 1e6
}

/// Detection floor of the level anti-crossing, inclusive at the boundary.
pub fn gslac_valid(nu_hz: f64, params: &NvParams) -> bool {
    nu_hz >= params.gslac_floor_mhz * 1e6
}

/// Frequency-dependent insertion loss between generator and NV layer.
///
/// `loss(f) = offset + rolloff * f + interp(band_offsets, f)`, with the band
/// table interpolated linearly and held constant outside its end points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AntennaModel {
    pub rolloff_db_per_ghz: f64,
    pub offset_db: f64,
    /// `(frequency_GHz, correction_dB)` sorted by frequency.
    pub band_offsets: Vec<(f64, f64)>,
}

/// Contrast observed at a given frequency under a given nominal power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastAnchor {
    pub frequency_hz: f64,
    pub contrast: f64,
}

/// Default anchors: contrasts seen at 25 dBm nominal at 1.8, 9 and 23 GHz.
pub const DEFAULT_ANCHORS: [ContrastAnchor; 3] = [
    ContrastAnchor { frequency_hz: 1.8e9, contrast: 0.06 },
    ContrastAnchor { frequency_hz: 9.0e9, contrast: 0.01 },
    ContrastAnchor { frequency_hz: 23.0e9, contrast: 0.001 },
];
pub const DEFAULT_ANCHOR_POWER_DBM: f64 = 25.0;
pub const DEFAULT_REFERENCE_POWER_DBM: f64 = 0.0;

impl Default for AntennaModel {
    fn default() -> Self {
        AntennaModel::fit_contrast_anchors(
            &DEFAULT_ANCHORS,
            DEFAULT_ANCHOR_POWER_DBM,
            DEFAULT_REFERENCE_POWER_DBM,
            &NvParams::default(),
        )
        .expect("default anchors are consistent")
    }
}

impl AntennaModel {
    pub fn flat(loss_db: f64) -> Self {
        Self { rolloff_db_per_ghz: 0.0, offset_db: loss_db, band_offsets: Vec::new() }
    }

    pub fn loss_db(&self, frequency_hz: f64) -> f64 {
        let f = frequency_hz * 1e-9;
        self.offset_db + self.rolloff_db_per_ghz * f + interp_clamped(&self.band_offsets, f)
    }

    pub fn power_at_nv_dbm(&self, nominal_dbm: f64, frequency_hz: f64) -> f64 {
        nominal_dbm - self.loss_db(frequency_hz)
    }

    /// Linear rolloff regressed through the loss each anchor requires, with
    /// the residuals kept as band offsets so every anchor is reproduced.
    /// Anchors at or above `max_contrast` are pinned to 99 % of it.
    pub fn fit_contrast_anchors(
        anchors: &[ContrastAnchor],
        nominal_dbm: f64,
        reference_power_dbm: f64,
        params: &NvParams,
    ) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Config("antenna fit needs at least one anchor".into()));
        }
        let p_ref = dbm_to_mw(reference_power_dbm);
        let mut pts: Vec<(f64, f64)> = anchors
            .iter()
            .map(|a| {
                if !(a.contrast > 0.0) {
                    return Err(Error::Config(format!("anchor contrast must be > 0, got {}", a.contrast)));
                }
                let c = a.contrast.min(0.99 * params.max_contrast);
                let ratio = c / params.max_contrast;
                let p = p_ref * ratio / (1.0 - ratio);
                Ok((a.frequency_hz * 1e-9, nominal_dbm - mw_to_dbm(p)))
            })
            .collect::<Result<_>>()?;
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pts.len() as f64;
        let mean_f = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let mean_l = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mean_f).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mean_f) * (p.1 - mean_l)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let intercept = mean_l - slope * mean_f;
        let band_offsets = pts.iter().map(|&(f, l)| (f, l - intercept - slope * f)).collect();
        Ok(Self { rolloff_db_per_ghz: slope, offset_db: intercept, band_offsets })
    }
}

fn interp_clamped(table: &[(f64, f64)], x: f64) -> f64 {
    match table {
        [] => 0.0,
        [only] => only.1,
        _ => {
            let first = table[0];
            let last = table[table.len() - 1];
            if x <= first.0 {
                return first.1;
            }
            if x >= last.0 {
                return last.1;
            }
            let i = table.partition_point(|p| p.0 <= x);
            let (x0, y0) = table[i - 1];
            let (x1, y1) = table[i];
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    }
}

/// A microwave tone, optionally gated in time and linearly chirped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    pub frequency_hz: f64,
    pub nominal_power_dbm: f64,
    /// `[start, end)` during which the tone is on; always on when absent.
    #[serde(default)]
    pub on_interval_s: Option<(f64, f64)>,
    /// Frequency slope from the start of `on_interval_s` (or t = 0).
    #[serde(default)]
    pub chirp_hz_per_s: f64,
}

impl Tone {
    pub fn cw(frequency_hz: f64, nominal_power_dbm: f64) -> Self {
        Self { frequency_hz, nominal_power_dbm, on_interval_s: None, chirp_hz_per_s: 0.0 }
    }

    pub fn gated(mut self, start_s: f64, end_s: f64) -> Self {
        self.on_interval_s = Some((start_s, end_s));
        self
    }

    pub fn chirped(mut self, hz_per_s: f64) -> Self {
        self.chirp_hz_per_s = hz_per_s;
        self
    }

    /// Fraction of `[t0, t0 + dt)` during which the tone is on, and the
    /// frequency at the middle of that overlap.
    pub fn during(&self, t0: f64, dt: f64) -> Option<(f64, f64)> {
        let (start, end) = self.on_interval_s.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
        let lo = t0.max(start);
        let hi = (t0 + dt).min(end);
        if hi <= lo {
            return None;
        }
        let duty = if dt > 0.0 { (hi - lo) / dt } else { 1.0 };
        let origin = if start.is_finite() { start } else { 0.0 };
        let mid = 0.5 * (lo + hi);
        Some((duty, self.frequency_hz + self.chirp_hz_per_s * (mid - origin)))
    }
}

/// Everything the antenna delivers to the diamond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MwDrive {
    pub tones: Vec<Tone>,
    pub antenna: AntennaModel,
    /// At-NV power where contrast reaches half of `max_contrast`.
    pub reference_power_dbm: f64,
}

impl Default for MwDrive {
    fn default() -> Self {
        Self { tones: Vec::new(), antenna: AntennaModel::default(), reference_power_dbm: DEFAULT_REFERENCE_POWER_DBM }
    }
}

impl MwDrive {
    pub fn with_tones(&self, tones: Vec<Tone>) -> Self {
        Self { tones, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.tones {
            if !(t.frequency_hz.is_finite() && t.frequency_hz >= 0.0) {
                return Err(Error::Config(format!("tone frequency must be >= 0, got {}", t.frequency_hz)));
            }
            if let Some((a, b)) = t.on_interval_s {
                if !(b > a) {
                    return Err(Error::Config(format!("tone interval [{a}, {b}) is empty")));
                }
            }
        }
        Ok(())
    }

    /// Contrast and at-NV power for a tone at `frequency_hz`.
    pub fn tone_contrast(&self, nominal_dbm: f64, frequency_hz: f64, params: &NvParams) -> (f64, f64) {
        let p = self.antenna.power_at_nv_dbm(nominal_dbm, frequency_hz);
        (contrast_model(p, self.reference_power_dbm, params), p)
    }
}
