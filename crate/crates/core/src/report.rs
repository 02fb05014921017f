//! Metric pipelines behind `qdisa report`, one per scenario kind.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    detect_tones, dynamic_range as dynamic_range_of, fit_odmr, hyperfine_resolved, min_exposure,
    spectrogram as spectrogram_of, FitResult, PhotonBudget, Spectrogram, ToneEstimate,
};
use crate::calibration::{reconstruct_spectrum, sweep_spectrum, CalibrationMap, SpectrumMode};
use crate::camera::{snr_estimate, Exposure, PixelOptics};
use crate::error::{Error, Result};
use crate::field::{FieldMap, Placement};
use crate::nv::{dbm_to_mw, gslac_valid, resonance_frequencies, Branch, MwDrive, Tone};
use crate::scenario::{ScenarioConfig, REPORT_STREAM};
use crate::scene::{child_seed, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportConfig {
    FrequencyRange(FrequencyRangeParams),
    Bandwidth(BandwidthParams),
    Resolution(ResolutionParams),
    Calibration(CalibrationParams),
    Spectrogram(SpectrogramParams),
    SnrScaling(SnrScalingParams),
    DynamicRange(DynamicRangeParams),
    TemporalResolution(TemporalParams),
    RoundTrip(RoundTripParams),
}

impl ReportConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ReportConfig::FrequencyRange(_) => "frequency_range",
            ReportConfig::Bandwidth(_) => "bandwidth",
            ReportConfig::Resolution(_) => "resolution",
            ReportConfig::Calibration(_) => "calibration",
            ReportConfig::Spectrogram(_) => "spectrogram",
            ReportConfig::SnrScaling(_) => "snr_scaling",
            ReportConfig::DynamicRange(_) => "dynamic_range",
            ReportConfig::TemporalResolution(_) => "temporal_resolution",
            ReportConfig::RoundTrip(_) => "round_trip",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("report.{m}")));
        match self {
            ReportConfig::FrequencyRange(p) if !(p.max_gap_m > p.min_gap_m && p.min_gap_m >= 0.0 && p.samples >= 2) => {
                bad("gap range needs 0 <= min_gap_m < max_gap_m and samples >= 2")
            }
            ReportConfig::SnrScaling(p)
                if p.exposures_s.len() < 2 || p.pixel_counts.len() < 2 || p.frames_per_point < 2 =>
            {
                bad("snr_scaling needs two or more exposures and pixel counts and frames_per_point >= 2")
            }
            ReportConfig::DynamicRange(p) if !(p.max_dbm > p.min_dbm && p.step_db > 0.0 && p.exposure_factor > 0.0) => {
                bad("dynamic_range needs max_dbm > min_dbm, step_db > 0, exposure_factor > 0")
            }
            ReportConfig::TemporalResolution(p) if !(p.contrast > 0.0 && p.target_snr > 0.0 && p.trials > 0) => {
                bad("temporal_resolution needs contrast, target_snr and trials > 0")
            }
            ReportConfig::RoundTrip(p) if p.trials == 0 || p.max_tones == 0 || !(p.window_hz > 0.0) => {
                bad("round_trip needs trials, max_tones and window_hz > 0")
            }
            _ => Ok(()),
        }
    }
}

/// Result of one report run.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metrics {
    FrequencyRange(FrequencyRangeMetrics),
    Bandwidth(BandwidthMetrics),
    Resolution(ResolutionMetrics),
    Calibration(CalibrationMetrics),
    Spectrogram(SpectrogramMetrics),
    SnrScaling(SnrScalingMetrics),
    DynamicRange(DynamicRangeMetrics),
    TemporalResolution(TemporalMetrics),
    RoundTrip(RoundTripMetrics),
}

pub fn run_report(cfg: &ScenarioConfig) -> Result<Metrics> {
    let report =
        cfg.report.as_ref().ok_or_else(|| Error::Config(format!("scenario {} has no report section", cfg.name)))?;
    Ok(match report {
        ReportConfig::FrequencyRange(p) => Metrics::FrequencyRange(frequency_range(cfg, p)?),
        ReportConfig::Bandwidth(p) => Metrics::Bandwidth(bandwidth(cfg, p)?),
        ReportConfig::Resolution(p) => Metrics::Resolution(resolution(cfg, p)?),
        ReportConfig::Calibration(p) => Metrics::Calibration(calibration(cfg, p)?),
        ReportConfig::Spectrogram(p) => Metrics::Spectrogram(spectrogram(cfg, p)?.1),
        ReportConfig::SnrScaling(p) => Metrics::SnrScaling(snr_scaling(cfg, p)?),
        ReportConfig::DynamicRange(p) => Metrics::DynamicRange(dynamic_range(cfg, p)?),
        ReportConfig::TemporalResolution(p) => Metrics::TemporalResolution(temporal_resolution(cfg, p)?),
        ReportConfig::RoundTrip(p) => Metrics::RoundTrip(round_trip(cfg, p)?),
    })
}

fn report_seed(cfg: &ScenarioConfig) -> u64 {
    child_seed(cfg.seed, REPORT_STREAM)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------- range

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyRangeParams {
    pub min_gap_m: f64,
    pub max_gap_m: f64,
    pub samples: usize,
}

impl Default for FrequencyRangeParams {
    fn default() -> Self {
        Self { min_gap_m: 0.5e-3, max_gap_m: 0.1, samples: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRangeMetrics {
    pub surface_pole_field_t: f64,
    /// Lowest and highest detectable minus-branch frequency over all gaps.
    pub minus_min_hz: f64,
    pub minus_max_hz: f64,
    pub plus_min_hz: f64,
    pub plus_max_hz: f64,
    pub samples: usize,
}

/// Moves the diamond edge from `min_gap_m` to `max_gap_m` (log-spaced) and
/// collects the resonances of the nearest imaged point.
pub fn frequency_range(cfg: &ScenarioConfig, p: &FrequencyRangeParams) -> Result<FrequencyRangeMetrics> {
    let magnet = cfg.magnet()?;
    let physics = &cfg.physics;
    let lo = (magnet.radius_m + p.min_gap_m).ln();
    let hi = (magnet.radius_m + p.max_gap_m).ln();
    let mut m = FrequencyRangeMetrics {
        surface_pole_field_t: magnet.surface_pole_field_t,
        minus_min_hz: f64::INFINITY,
        minus_max_hz: 0.0,
        plus_min_hz: f64::INFINITY,
        plus_max_hz: 0.0,
        samples: p.samples,
    };
    for i in 0..p.samples {
        let r = (lo + (hi - lo) * i as f64 / (p.samples - 1) as f64).exp();
        let (minus, plus) = resonance_frequencies(magnet.on_axis_field(r), physics);
        if gslac_valid(minus, physics) {
            m.minus_min_hz = m.minus_min_hz.min(minus);
            m.minus_max_hz = m.minus_max_hz.max(minus);
        }
        m.plus_min_hz = m.plus_min_hz.min(plus);
        m.plus_max_hz = m.plus_max_hz.max(plus);
    }
    Ok(m)
}

// ------------------------------------------------------------ bandwidth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandwidthParams {
    pub branch: Branch,
    /// Extra centre frequencies on `branch` for the span-vs-centre curve.
    pub sweep_centers_hz: Vec<f64>,
}

impl Default for BandwidthParams {
    fn default() -> Self {
        Self { branch: Branch::Plus, sweep_centers_hz: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPoint {
    pub center_hz: f64,
    pub center_field_t: f64,
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub span_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthMetrics {
    pub width_px: usize,
    pub height_px: usize,
    pub scenario: SpanPoint,
    pub sweep: Vec<SpanPoint>,
    /// Span strictly increases with the centre-column field over the sweep.
    pub span_monotone_in_field: bool,
}

fn span_point(cfg: &ScenarioConfig, branch: Branch) -> Result<(SpanPoint, (usize, usize))> {
    let scene = cfg.build_scene()?;
    let f: Vec<f64> = scene
        .field
        .branch_frequencies(branch, &cfg.physics)
        .into_iter()
        .filter(|&v| gslac_valid(v, &cfg.physics))
        .collect();
    if f.is_empty() {
        return Err(Error::Quality("no pixel resonates above the validity floor".into()));
    }
    let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (w, h) = scene.dims();
    let mid = (h / 2) * w + w / 2;
    let b = scene.field.b_nv_t[mid];
    let (m, p) = resonance_frequencies(b, &cfg.physics);
    let center_hz = if branch == Branch::Minus { m } else { p };
    Ok((SpanPoint { center_hz, center_field_t: b, f_lo_hz: lo, f_hi_hz: hi, span_hz: hi - lo }, (w, h)))
}

pub fn bandwidth(cfg: &ScenarioConfig, p: &BandwidthParams) -> Result<BandwidthMetrics> {
    let (scenario, (w, h)) = span_point(cfg, p.branch)?;
    let sweep = p
        .sweep_centers_hz
        .iter()
        .map(|&hz| {
            let mut c = cfg.clone();
            c.placement = Placement::CenterFrequency { hz, branch: p.branch };
            span_point(&c, p.branch).map(|s| s.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_field = sweep.clone();
    by_field.sort_by(|a, b| a.center_field_t.abs().total_cmp(&b.center_field_t.abs()));
    let span_monotone_in_field = by_field.windows(2).all(|w| w[1].span_hz > w[0].span_hz);
    Ok(BandwidthMetrics { width_px: w, height_px: h, scenario, sweep, span_monotone_in_field })
}

// ----------------------------------------------------------- resolution

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolutionParams {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionMetrics {
    pub center_field_t: f64,
    pub gradient_mhz_per_um: f64,
    pub fwhm_hz: f64,
    pub fwhm_mhz: f64,
    pub contrast: f64,
    pub center_hz: f64,
    pub hyperfine_resolved: bool,
    pub fit: FitResult,
}

/// Sweeps the AOI, averages its normalized spectrum and fits the lineshape.
pub fn resolution(cfg: &ScenarioConfig, _p: &ResolutionParams) -> Result<ResolutionMetrics> {
    let scene = cfg.build_scene()?;
    let raw = cfg.run_sweep(&scene)?;
    let norm = crate::acquisition::normalize_cube_with(&raw, &cfg.normalize_options(cfg.require_sweep()?.edge_bins))?;
    let spectrum = sweep_spectrum(&norm, None)?;
    let fit = fit_odmr(&spectrum, None, &cfg.physics)?;
    let n = scene.field.len() as f64;
    let b = scene.field.b_nv_t.iter().sum::<f64>() / n;
    let g = (0..scene.field.len()).map(|i| scene.field.gradient_mhz_per_um(i)).sum::<f64>() / n;
    Ok(ResolutionMetrics {
        center_field_t: b,
        gradient_mhz_per_um: g,
        fwhm_hz: fit.fwhm_hz,
        fwhm_mhz: fit.fwhm_hz * 1e-6,
        contrast: fit.c,
        center_hz: fit.b_hz,
        hyperfine_resolved: hyperfine_resolved(&fit, &cfg.physics),
        fit,
    })
}

// ---------------------------------------------------------- calibration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationParams {
    /// Monochromatic test tones imaged after calibration.
    pub probe_tones_hz: Vec<f64>,
    pub probe_power_dbm: f64,
    pub exposure_s: f64,
    pub k_sigma: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self { probe_tones_hz: Vec::new(), probe_power_dbm: 25.0, exposure_s: 0.1, k_sigma: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub tone_hz: f64,
    pub expected_bin_hz: Option<u64>,
    pub tones: Vec<ToneEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetrics {
    pub width_px: usize,
    pub height_px: usize,
    pub n_bins: usize,
    pub n_valid_bins: usize,
    pub f_lo_hz: u64,
    pub f_hi_hz: u64,
    pub assigned_fraction: f64,
    pub probes: Vec<ProbeResult>,
}

pub fn calibration(cfg: &ScenarioConfig, p: &CalibrationParams) -> Result<CalibrationMetrics> {
    let scene = cfg.build_scene()?;
    let (_, map) = cfg.calibrate(&scene)?;
    let valid: Vec<usize> = (0..map.n_bins()).filter(|&k| map.valid[k]).collect();
    let (first, last) = match (valid.first(), valid.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::Quality("calibration produced no valid bin".into())),
    };
    let reference = scene.capture_reference(100, p.exposure_s, child_seed(report_seed(cfg), 0))?;
    let probes = p
        .probe_tones_hz
        .iter()
        .enumerate()
        .map(|(i, &hz)| {
            let drive = scene.drive.with_tones(vec![Tone::cw(hz, p.probe_power_dbm)]);
            let frame =
                scene.capture(&drive, Exposure::new(0.0, p.exposure_s), child_seed(report_seed(cfg), 1 + i as u64))?;
            let s = reconstruct_spectrum(&frame, &map, SpectrumMode::Contrast(&reference))?;
            Ok(ProbeResult {
                tone_hz: hz,
                expected_bin_hz: map.bin_of(hz).map(|k| map.freq_axis_hz[k]),
                tones: detect_tones(&s, p.k_sigma)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationMetrics {
        width_px: map.width,
        height_px: map.height,
        n_bins: map.n_bins(),
        n_valid_bins: valid.len(),
        f_lo_hz: map.freq_axis_hz[first],
        f_hi_hz: map.freq_axis_hz[last],
        assigned_fraction: map.assigned() as f64 / map.pixels() as f64,
        probes,
    })
}

// ---------------------------------------------------------- spectrogram

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramParams {
    pub k_sigma: f64,
}

impl Default for SpectrogramParams {
    fn default() -> Self {
        Self { k_sigma: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramMetrics {
    pub rows: usize,
    pub cols: usize,
    /// Detected tone centroids per frame.
    pub detections_hz: Vec<Vec<f64>>,
    /// Frames where exactly two tones are seen.
    pub rows_with_two_tones: usize,
    /// Lower and upper track swap places between the first and last frame.
    pub tracks_cross: bool,
}

pub fn spectrogram(cfg: &ScenarioConfig, p: &SpectrogramParams) -> Result<(Spectrogram, SpectrogramMetrics)> {
    let scene = cfg.build_scene()?;
    let (_, map) = cfg.calibrate(&scene)?;
    let frames = cfg.capture_frames(&scene)?;
    let reference = cfg.capture_reference(&scene)?;
    let g = spectrogram_of(&frames, &map, &reference)?;
    let detections_hz = frames
        .par_iter()
        .map(|f| {
            let s = reconstruct_spectrum(f, &map, SpectrumMode::Contrast(&reference))?;
            Ok(detect_tones(&s, p.k_sigma)?.iter().map(|t| t.frequency_hz).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let rows_with_two_tones = detections_hz.iter().filter(|d| d.len() == 2).count();
    let windows: Vec<(f64, f64)> = frames.iter().map(|f| (f.timestamp_s, f.exposure_s)).collect();
    let tracks_cross = crossing(&cfg.drive, &windows, &detections_hz);
    Ok((
        g.clone(),
        SpectrogramMetrics { rows: g.rows(), cols: g.cols(), detections_hz, rows_with_two_tones, tracks_cross },
    ))
}

/// The rising tone is the lower detection in the first two-tone frame and
/// the upper one in the last.
fn crossing(drive: &MwDrive, frames: &[(f64, f64)], detections: &[Vec<f64>]) -> bool {
    let (Some(rise), Some(fall)) =
        (drive.tones.iter().find(|t| t.chirp_hz_per_s > 0.0), drive.tones.iter().find(|t| t.chirp_hz_per_s < 0.0))
    else {
        return false;
    };
    let two: Vec<usize> = (0..detections.len()).filter(|&i| detections[i].len() == 2).collect();
    let (Some(&first), Some(&last)) = (two.first(), two.last()) else {
        return false;
    };
    let lower_is_rising = |i: usize| -> Option<bool> {
        let (t0, dt) = frames[i];
        let r = rise.during(t0, dt)?.1;
        let f = fall.during(t0, dt)?.1;
        let d = &detections[i];
        Some((d[0] - r).abs() + (d[1] - f).abs() < (d[0] - f).abs() + (d[1] - r).abs())
    };
    lower_is_rising(first) == Some(true) && lower_is_rising(last) == Some(false)
}

// ---------------------------------------------------------- SNR scaling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnrScalingParams {
    pub exposures_s: Vec<f64>,
    /// Pixel count used for the exposure sweep.
    pub exposure_sweep_pixels: usize,
    pub pixel_counts: Vec<usize>,
    /// Exposure used for the pixel-count sweep.
    pub pixel_sweep_exposure_s: f64,
    pub frames_per_point: usize,
    pub tone_power_dbm: f64,
}

impl Default for SnrScalingParams {
    fn default() -> Self {
        Self {
            exposures_s: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
            exposure_sweep_pixels: 100,
            pixel_counts: vec![1, 3, 10, 30, 100],
            pixel_sweep_exposure_s: 1e-3,
            frames_per_point: 1000,
            tone_power_dbm: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrPoint {
    pub x: f64,
    pub empirical_snr: f64,
    pub predicted_snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrScalingMetrics {
    pub contrast: f64,
    pub counts_per_pixel_per_s: f64,
    pub vs_exposure: Vec<SnrPoint>,
    pub vs_pixels: Vec<SnrPoint>,
    pub slope_exposure: f64,
    pub slope_pixels: f64,
    pub frames: usize,
}

/// Monte Carlo of the contrast SNR of one resonant pixel set: mean over
/// standard deviation of the measured dip across repeated frames. The
/// scene is a uniform-field patch at the scenario's centre-column field, so
/// every pixel resonates with the tone.
pub fn snr_scaling(cfg: &ScenarioConfig, p: &SnrScalingParams) -> Result<SnrScalingMetrics> {
    let base = cfg.build_scene()?;
    let (w, h) = base.dims();
    let b = base.field.b_nv_t[(h / 2) * w + w / 2];
    let side =
        (p.pixel_counts.iter().copied().max().unwrap_or(1).max(p.exposure_sweep_pixels) as f64).sqrt().ceil() as usize;
    let field = FieldMap::uniform(side, side, cfg.geometry.pixel_pitch_um, b);
    let rate = base.optics.peak_rate();
    let optics = PixelOptics::flat(side, side, rate);
    let scene = Scene::new(field, cfg.physics.clone(), optics, cfg.drive.clone())?;
    let (nu, _) = resonance_frequencies(b, &cfg.physics);
    let drive = scene.drive.with_tones(vec![Tone::cw(nu, p.tone_power_dbm)]);
    let exact = scene.clone().noiseless(true);
    let on = exact.expected(&drive, Exposure::new(0.0, 1.0))?[0];
    let off = exact.expected(&scene.drive.with_tones(Vec::new()), Exposure::new(0.0, 1.0))?[0];
    let contrast = 1.0 - on / off;

    let seed = report_seed(cfg);
    let measure = |n_pix: usize, dt: f64, stream: u64| -> Result<f64> {
        let reference = off * dt * n_pix as f64;
        let dips: Vec<f64> = (0..p.frames_per_point)
            .into_par_iter()
            .map(|k| {
                let f =
                    scene.capture(&drive, Exposure::new(0.0, dt), child_seed(child_seed(seed, stream), k as u64))?;
                Ok(1.0 - f.counts[..n_pix].iter().sum::<f64>() / reference)
            })
            .collect::<Result<_>>()?;
        let n = dips.len() as f64;
        let mean = dips.iter().sum::<f64>() / n;
        let var = dips.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(mean / var.sqrt())
    };
    let predict = |n_pix: usize, dt: f64| snr_estimate(1.0, 1.0, n_pix as f64, off, 1.0, dt, contrast);
    let mut stream = 0;
    let mut vs_exposure = Vec::new();
    for &dt in &p.exposures_s {
        stream += 1;
        let n = p.exposure_sweep_pixels;
        vs_exposure.push(SnrPoint { x: dt, empirical_snr: measure(n, dt, stream)?, predicted_snr: predict(n, dt) });
    }
    let mut vs_pixels = Vec::new();
    for &n in &p.pixel_counts {
        stream += 1;
        let dt = p.pixel_sweep_exposure_s;
        vs_pixels.push(SnrPoint { x: n as f64, empirical_snr: measure(n, dt, stream)?, predicted_snr: predict(n, dt) });
    }
    let slope = |pts: &[SnrPoint]| log_log_slope(&pts.iter().map(|q| (q.x, q.empirical_snr)).collect::<Vec<_>>());
    Ok(SnrScalingMetrics {
        contrast,
        counts_per_pixel_per_s: off,
        slope_exposure: slope(&vs_exposure),
        slope_pixels: slope(&vs_pixels),
        frames: p.frames_per_point * (vs_exposure.len() + vs_pixels.len()),
        vs_exposure,
        vs_pixels,
    })
}

// -------------------------------------------------------- dynamic range

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicRangeParams {
    /// Defaults to the centre-column resonance of the calibrated branch.
    pub tone_hz: Option<f64>,
    pub max_dbm: f64,
    pub min_dbm: f64,
    pub step_db: f64,
    pub exposure_s: f64,
    /// Exposure multiplier for the threshold-shift check.
    pub exposure_factor: f64,
    pub k_sigma: f64,
}

impl Default for DynamicRangeParams {
    fn default() -> Self {
        Self {
            tone_hz: None,
            max_dbm: 23.0,
            min_dbm: -70.0,
            step_db: 0.1,
            exposure_s: 1.0,
            exposure_factor: 100.0,
            k_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicRangeMetrics {
    pub tone_hz: f64,
    pub max_dbm: f64,
    pub min_detectable_dbm: f64,
    pub range_db: f64,
    pub exposure_s: f64,
    pub long_exposure_s: f64,
    pub long_min_detectable_dbm: f64,
    /// Change of the detection threshold for the longer exposure.
    pub threshold_shift_db: f64,
}

fn center_tone(scene: &Scene, map: &CalibrationMap, cfg: &ScenarioConfig) -> Result<f64> {
    let (w, h) = scene.dims();
    let (m, p) = resonance_frequencies(scene.field.b_nv_t[(h / 2) * w + w / 2], &cfg.physics);
    let nu = if map.branch == Branch::Minus { m } else { p };
    let k = map
        .bin_of(nu)
        .filter(|&k| map.valid[k])
        .ok_or_else(|| Error::Quality("centre column has no valid bin".into()))?;
    Ok(map.freq_axis_hz[k] as f64)
}

pub fn dynamic_range(cfg: &ScenarioConfig, p: &DynamicRangeParams) -> Result<DynamicRangeMetrics> {
    let scene = cfg.build_scene()?;
    let (_, map) = cfg.calibrate(&scene)?;
    let tone_hz = match p.tone_hz {
        Some(f) => f,
        None => center_tone(&scene, &map, cfg)?,
    };
    let n = ((p.max_dbm - p.min_dbm) / p.step_db).round() as usize;
    let powers: Vec<f64> = (0..=n).map(|i| p.max_dbm - i as f64 * p.step_db).collect();
    let short = dynamic_range_of(&scene, &map, tone_hz, &powers, p.exposure_s, p.k_sigma)?;
    let long_exposure_s = p.exposure_s * p.exposure_factor;
    let long = dynamic_range_of(&scene, &map, tone_hz, &powers, long_exposure_s, p.k_sigma)?;
    Ok(DynamicRangeMetrics {
        tone_hz,
        max_dbm: short.max_dbm,
        min_detectable_dbm: short.min_detectable_dbm,
        range_db: short.range_db,
        exposure_s: p.exposure_s,
        long_exposure_s,
        long_min_detectable_dbm: long.min_detectable_dbm,
        threshold_shift_db: long.min_detectable_dbm - short.min_detectable_dbm,
    })
}

// -------------------------------------------------- temporal resolution

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalParams {
    pub tone_hz: Option<f64>,
    pub contrast: f64,
    pub target_snr: f64,
    pub anchor_exposure_s: f64,
    pub trials: usize,
    pub k_sigma: f64,
    pub reference_frames: u32,
    /// Contrasts at which `min_exposure * C^2` is checked.
    pub check_contrasts: Vec<f64>,
    /// Contrasts of the other operating points, reported as predictions.
    pub predict_contrasts: Vec<f64>,
}

impl Default for TemporalParams {
    fn default() -> Self {
        Self {
            tone_hz: None,
            contrast: 0.06,
            target_snr: 5.0,
            anchor_exposure_s: 2e-3,
            trials: 100,
            k_sigma: 3.0,
            reference_frames: 100,
            check_contrasts: vec![0.001, 0.01, 0.03, 0.06, 0.1],
            predict_contrasts: vec![0.01, 0.001],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalMetrics {
    pub budget_counts_per_s: f64,
    pub min_exposure_s: f64,
    /// `min_exposure * C^2` per checked contrast.
    pub exposure_times_c2: Vec<f64>,
    pub exposure_times_c2_constant: bool,
    pub predictions: Vec<(f64, f64)>,
    pub tone_hz: f64,
    pub tone_power_dbm: f64,
    pub bin_contrast: f64,
    pub predicted_bin_snr: f64,
    pub trials: usize,
    pub detections: usize,
    pub detection_rate: f64,
}

/// Bisects the nominal tone power (monotone in dip depth) for `target(dip, sigma)`.
fn solve_power(lo: f64, hi: f64, f: impl Fn(f64) -> Result<f64>) -> Result<Option<f64>> {
    let (mut a, mut b) = (lo, hi);
    if f(b)? < 0.0 {
        return Ok(None);
    }
    if f(a)? >= 0.0 {
        return Ok(Some(a));
    }
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        if f(m)? >= 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    Ok(Some(b))
}

/// Noiseless dip and analytic sigma of one bin under `tones`.
fn bin_dip(scene: &Scene, map: &CalibrationMap, k: usize, tones: Vec<Tone>, exposure_s: f64) -> Result<(f64, f64)> {
    let w = Exposure::new(0.0, exposure_s);
    let s: f64 = scene.expected_at(&scene.drive.with_tones(tones), w, &map.masks[k])?.iter().sum();
    let r: f64 = scene.expected_at(&scene.drive.with_tones(Vec::new()), w, &map.masks[k])?.iter().sum();
    Ok((1.0 - s / r, s.sqrt() / r))
}

pub fn temporal_resolution(cfg: &ScenarioConfig, p: &TemporalParams) -> Result<TemporalMetrics> {
    let budget = PhotonBudget::anchored(p.contrast, p.target_snr, p.anchor_exposure_s);
    let t = min_exposure(p.contrast, &budget, p.target_snr)?;
    let exposure_times_c2 = p
        .check_contrasts
        .iter()
        .map(|&c| min_exposure(c, &budget, p.target_snr).map(|t| t * c * c))
        .collect::<Result<Vec<_>>>()?;
    let exposure_times_c2_constant =
        exposure_times_c2.iter().all(|&v| (v - exposure_times_c2[0]).abs() <= 1e-12 * v.abs());
    let predictions = p
        .predict_contrasts
        .iter()
        .map(|&c| min_exposure(c, &budget, p.target_snr).map(|t| (c, t)))
        .collect::<Result<Vec<_>>>()?;

    let mut scene = cfg.build_scene()?;
    let (_, map) = cfg.calibrate(&scene)?;
    let tone_hz = match p.tone_hz {
        Some(f) => f,
        None => center_tone(&scene, &map, cfg)?,
    };
    let k =
        map.bin_of(tone_hz).filter(|&k| map.valid[k]).ok_or_else(|| Error::Config("tone on no valid bin".into()))?;
    // pick the power giving the anchor contrast on the tone's bin
    let power =
        solve_power(-40.0, 45.0, |pw| Ok(bin_dip(&scene, &map, k, vec![Tone::cw(tone_hz, pw)], t)?.0 - p.contrast))?
            .ok_or_else(|| Error::Quality(format!("contrast {} unreachable at {tone_hz} Hz", p.contrast)))?;
    let (bin_contrast, _) = bin_dip(&scene, &map, k, vec![Tone::cw(tone_hz, power)], t)?;
    // then pin the photon budget of that bin to the calibrated one
    let mw_off = scene.drive.with_tones(Vec::new());
    let r: f64 = scene.expected_at(&mw_off, Exposure::new(0.0, t), &map.masks[k])?.iter().sum();
    scene.optics.scale_rate(budget.counts_per_s * t / r);
    let (c, sigma) = bin_dip(&scene, &map, k, vec![Tone::cw(tone_hz, power)], t)?;
    let predicted_bin_snr = c / sigma;

    let seed = report_seed(cfg);
    let scene = scene.noiseless(false);
    let reference = scene.capture_reference(p.reference_frames, t, child_seed(seed, 0))?;
    let drive = scene.drive.with_tones(vec![Tone::cw(tone_hz, power)]);
    let detections = (0..p.trials)
        .into_par_iter()
        .map(|i| {
            let f = scene.capture(&drive, Exposure::new(0.0, t), child_seed(seed, 1 + i as u64))?;
            let s = reconstruct_spectrum(&f, &map, SpectrumMode::Contrast(&reference))?;
            Ok(detect_tones(&s, p.k_sigma)?.iter().any(|tone| tone.covers(k)))
        })
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&d| d)
        .count();
    Ok(TemporalMetrics {
        budget_counts_per_s: budget.counts_per_s,
        min_exposure_s: t,
        exposure_times_c2,
        exposure_times_c2_constant,
        predictions,
        tone_hz,
        tone_power_dbm: power,
        bin_contrast,
        predicted_bin_snr,
        trials: p.trials,
        detections,
        detection_rate: detections as f64 / p.trials as f64,
    })
}

// ----------------------------------------------------------- round trip

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundTripParams {
    pub trials: usize,
    pub max_tones: usize,
    /// Per-tone SNR at its bin; the tone power is solved to meet it.
    pub target_snr: f64,
    pub k_sigma: f64,
    pub window_hz: f64,
    /// Minimum tone separation in units of the measured envelope FWHM.
    pub separation_fwhm: f64,
    /// Allowed peak-bin error under shot noise.
    pub noisy_bin_tolerance: usize,
    pub reference_frames: u32,
    pub noisy: bool,
}

impl Default for RoundTripParams {
    fn default() -> Self {
        Self {
            trials: 100,
            max_tones: 4,
            target_snr: 5.0,
            k_sigma: 3.0,
            window_hz: 5.74e9,
            separation_fwhm: 3.0,
            noisy_bin_tolerance: 1,
            reference_frames: 100,
            noisy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTripMetrics {
    pub envelope_fwhm_hz: f64,
    pub candidate_bins: usize,
    pub trials: usize,
    pub tones: usize,
    pub noiseless_detected: usize,
    pub noiseless_false_bins: usize,
    /// Scenes whose detected peak bins equal the injected bins exactly.
    pub noiseless_exact_scenes: usize,
    pub noisy_detected: usize,
    pub noisy_false_bins: usize,
    pub noisy_detection_rate: f64,
}

/// Full width at half depth of the dip around bin `k`, by interpolation.
fn envelope_fwhm(freq: &[u64], valid: &[bool], dips: &[f64], k: usize) -> f64 {
    let half = 0.5 * dips[k];
    let f = |j: usize| freq[j] as f64;
    let mut left = f(k);
    let mut j = k;
    while j > 0 && valid[j - 1] {
        if dips[j - 1] < half {
            left = f(j - 1) + (half - dips[j - 1]) / (dips[j] - dips[j - 1]) * (f(j) - f(j - 1));
            break;
        }
        j -= 1;
        left = f(j);
    }
    let mut right = f(k);
    let mut j = k;
    while j + 1 < dips.len() && valid[j + 1] {
        if dips[j + 1] < half {
            right = f(j) + (dips[j] - half) / (dips[j] - dips[j + 1]) * (f(j + 1) - f(j));
            break;
        }
        j += 1;
        right = f(j);
    }
    (right - left).max(freq.get(1).map_or(0.0, |&b| (b - freq[0]) as f64))
}

pub fn round_trip(cfg: &ScenarioConfig, p: &RoundTripParams) -> Result<RoundTripMetrics> {
    let scene = cfg.build_scene()?;
    let (_, map) = cfg.calibrate(&scene)?;
    let exposure = cfg.require_frames()?.exposure_s;
    let exact = scene.clone().noiseless(true);
    let exact_ref = exact.capture_reference(1, exposure, 0)?;

    // Interior, well-populated bins only: the outermost valid bins see
    // truncated dips.
    let valid: Vec<usize> = (0..map.n_bins()).filter(|&k| map.valid[k] && !map.low_confidence[k]).collect();
    if valid.len() < 10 {
        return Err(Error::Quality("too few valid calibration bins for a round trip".into()));
    }
    let inner = &valid[3..valid.len() - 3];
    let powers: Vec<Option<f64>> = inner
        .par_iter()
        .map(|&k| {
            let f = map.freq_axis_hz[k] as f64;
            solve_power(-60.0, 45.0, |pw| {
                let (d, s) = bin_dip(&exact, &map, k, vec![Tone::cw(f, pw)], exposure)?;
                Ok(d / s - p.target_snr)
            })
        })
        .collect::<Result<_>>()?;
    let candidates: Vec<(usize, f64)> = inner.iter().zip(&powers).filter_map(|(&k, pw)| pw.map(|pw| (k, pw))).collect();
    if candidates.len() < 3 {
        return Err(Error::Quality("target SNR unreachable on the calibrated band".into()));
    }

    // measured envelope width: strongest broadening across the band
    let mut envelope_fwhm_hz: f64 = 0.0;
    for q in [0.1, 0.5, 0.9] {
        let (k, pw) = candidates[((candidates.len() - 1) as f64 * q) as usize];
        let drive = exact.drive.with_tones(vec![Tone::cw(map.freq_axis_hz[k] as f64, pw)]);
        let frame = exact.capture(&drive, Exposure::new(0.0, exposure), 0)?;
        let s = reconstruct_spectrum(&frame, &map, SpectrumMode::Contrast(&exact_ref))?;
        envelope_fwhm_hz = envelope_fwhm_hz.max(envelope_fwhm(&s.freq_axis_hz, &s.valid, &s.values, k));
    }
    let min_sep = p.separation_fwhm * envelope_fwhm_hz;

    let seed = report_seed(cfg);
    let noisy_scene = scene.clone().noiseless(false);
    let noisy_ref = if p.noisy {
        Some(noisy_scene.capture_reference(p.reference_frames, exposure, child_seed(seed, 0))?)
    } else {
        None
    };

    struct Trial {
        tones: usize,
        clean_hits: usize,
        clean_false: usize,
        exact: bool,
        noisy_hits: usize,
        noisy_false: usize,
    }
    let trials = (0..p.trials)
        .into_par_iter()
        .map(|t| -> Result<Trial> {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, 1_000 + t as u64));
            let want = rng.random_range(1..=p.max_tones);
            let f_of = |k: usize| map.freq_axis_hz[k] as f64;
            let lo_k = candidates[0].0;
            let hi_k = candidates[candidates.len() - 1].0;
            // random window of at most `window_hz` inside the band
            let band = f_of(hi_k) - f_of(lo_k);
            let width = band.min(p.window_hz);
            let start = f_of(lo_k) + rng.random::<f64>() * (band - width);
            let pool: Vec<&(usize, f64)> =
                candidates.iter().filter(|(k, _)| f_of(*k) >= start && f_of(*k) <= start + width).collect();
            let mut chosen: Vec<(usize, f64)> = Vec::new();
            for _ in 0..200 {
                if chosen.len() == want {
                    break;
                }
                let &(k, pw) = pool[rng.random_range(0..pool.len())];
                if chosen.iter().all(|&(c, _)| (f_of(c) - f_of(k)).abs() > min_sep) {
                    chosen.push((k, pw));
                }
            }
            chosen.sort_by_key(|c| c.0);
            let tones: Vec<Tone> = chosen.iter().map(|&(k, pw)| Tone::cw(f_of(k), pw)).collect();
            let truth: Vec<usize> = chosen.iter().map(|c| c.0).collect();

            let drive = exact.drive.with_tones(tones);
            let frame = exact.capture(&drive, Exposure::new(0.0, exposure), 0)?;
            let s = reconstruct_spectrum(&frame, &map, SpectrumMode::Contrast(&exact_ref))?;
            let found: Vec<usize> = detect_tones(&s, p.k_sigma)?.iter().map(|d| d.peak_bin).collect();
            let clean_hits = truth.iter().filter(|k| found.contains(k)).count();
            let clean_false = found.iter().filter(|k| !truth.contains(k)).count();

            let (mut noisy_hits, mut noisy_false) = (0, 0);
            if let Some(r) = &noisy_ref {
                let frame =
                    noisy_scene.capture(&drive, Exposure::new(0.0, exposure), child_seed(seed, 2_000 + t as u64))?;
                let s = reconstruct_spectrum(&frame, &map, SpectrumMode::Contrast(r))?;
                let found: Vec<usize> = detect_tones(&s, p.k_sigma)?.iter().map(|d| d.peak_bin).collect();
                noisy_hits =
                    truth.iter().filter(|&&k| found.iter().any(|&f| f.abs_diff(k) <= p.noisy_bin_tolerance)).count();
                noisy_false =
                    found.iter().filter(|&&f| !truth.iter().any(|&k| f.abs_diff(k) <= p.noisy_bin_tolerance)).count();
            }
            Ok(Trial { tones: truth.len(), clean_hits, clean_false, exact: found == truth, noisy_hits, noisy_false })
        })
        .collect::<Result<Vec<Trial>>>()?;

    let tones: usize = trials.iter().map(|t| t.tones).sum();
    let noisy_detected: usize = trials.iter().map(|t| t.noisy_hits).sum();
    Ok(RoundTripMetrics {
        envelope_fwhm_hz,
        candidate_bins: candidates.len(),
        trials: trials.len(),
        tones,
        noiseless_detected: trials.iter().map(|t| t.clean_hits).sum(),
        noiseless_false_bins: trials.iter().map(|t| t.clean_false).sum(),
        noiseless_exact_scenes: trials.iter().filter(|t| t.exact).count(),
        noisy_detected,
        noisy_false_bins: trials.iter().map(|t| t.noisy_false).sum(),
        noisy_detection_rate: if p.noisy { noisy_detected as f64 / tones as f64 } else { f64::NAN },
    })
}

/// Power in linear milliwatts, kept for metric consumers that want it.
pub fn dbm_to_milliwatts(dbm: f64) -> f64 {
    dbm_to_mw(dbm)
}
