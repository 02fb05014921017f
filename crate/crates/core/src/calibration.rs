//! Pixel-to-frequency calibration masks, spectrum reconstruction from single
//! images and frequency-ambiguity bookkeeping.

use serde::{Deserialize, Serialize};

use crate::acquisition::DataCube;
use crate::camera::Frame;
use crate::error::{Error, Result};
use crate::field::FieldMap;
use crate::nv::{field_for_frequency, gslac_valid, resonance_frequencies, Branch, NvParams};
use crate::scene::Reference;

pub const DEFAULT_THRESHOLD_SIGMA: f64 = 5.0;
pub const DEFAULT_MIN_ASSIGNED_FRACTION: f64 = 0.5;
pub const DEFAULT_MIN_PIXELS_PER_BIN: usize = 3;

/// One-to-one map from frequency bins to the pixels resonating there.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationMap {
    pub width: usize,
    pub height: usize,
    pub branch: Branch,
    pub freq_axis_hz: Vec<u64>,
    /// Pixel indices (`y * width + x`) per bin, ascending.
    pub masks: Vec<Vec<u32>>,
    pub n_p: Vec<usize>,
    /// Bin lies above the level-anticrossing floor and holds pixels.
    pub valid: Vec<bool>,
    /// Fewer than the configured minimum of pixels.
    pub low_confidence: Vec<bool>,
}

impl CalibrationMap {
    /// Assemble from masks, deriving `n_p`, `valid` and `low_confidence`.
    pub fn from_masks(
        width: usize,
        height: usize,
        branch: Branch,
        freq_axis_hz: Vec<u64>,
        masks: Vec<Vec<u32>>,
        min_pixels_per_bin: usize,
        params: &NvParams,
    ) -> Result<Self> {
        let n_p: Vec<usize> = masks.iter().map(Vec::len).collect();
        let valid = freq_axis_hz.iter().zip(&n_p).map(|(&f, &n)| n > 0 && gslac_valid(f as f64, params)).collect();
        let low_confidence = n_p.iter().map(|&n| n > 0 && n < min_pixels_per_bin).collect();
        let map = Self { width, height, branch, freq_axis_hz, masks, n_p, valid, low_confidence };
        map.validate()?;
        Ok(map)
    }

    /// Ideal map straight from the field: each pixel goes to the bin nearest
    /// its `branch` resonance, if that lies on the axis.
    pub fn from_field(field: &FieldMap, branch: Branch, freq_axis_hz: Vec<u64>, params: &NvParams) -> Result<Self> {
        if freq_axis_hz.len() < 2 {
            return Err(Error::Config("frequency axis needs at least two bins".into()));
        }
        let f0 = freq_axis_hz[0] as f64;
        let step = (freq_axis_hz[1] - freq_axis_hz[0]) as f64;
        let mut masks = vec![Vec::new(); freq_axis_hz.len()];
        for (i, nu) in field.branch_frequencies(branch, params).into_iter().enumerate() {
            let k = ((nu - f0) / step).round();
            if k >= 0.0 && (k as usize) < masks.len() {
                masks[k as usize].push(i as u32);
            }
        }
        Self::from_masks(field.width, field.height, branch, freq_axis_hz, masks, DEFAULT_MIN_PIXELS_PER_BIN, params)
    }

    pub fn n_bins(&self) -> usize {
        self.freq_axis_hz.len()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Bin of every pixel, `None` when unassigned.
    pub fn pixel_bins(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.pixels()];
        for (k, mask) in self.masks.iter().enumerate() {
            for &i in mask {
                out[i as usize] = Some(k);
            }
        }
        out
    }

    pub fn assigned(&self) -> usize {
        self.n_p.iter().sum()
    }

    /// Bin whose centre is nearest `frequency_hz`, if on the axis.
    pub fn bin_of(&self, frequency_hz: f64) -> Option<usize> {
        let f0 = *self.freq_axis_hz.first()? as f64;
        let step = if self.n_bins() > 1 { (self.freq_axis_hz[1] - self.freq_axis_hz[0]) as f64 } else { 1.0 };
        let k = ((frequency_hz - f0) / step).round();
        (k >= 0.0 && (k as usize) < self.n_bins()).then_some(k as usize)
    }

    /// The binary mask `M(x, y, k)` as an image.
    pub fn mask_image(&self, k: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.pixels()];
        for &i in &self.masks[k] {
            m[i as usize] = 1.0;
        }
        m
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        self.check_shape("image", width, height)
    }

    pub fn check_shape(&self, what: &str, width: usize, height: usize) -> Result<()> {
        if (width, height) != (self.width, self.height) {
            return Err(Error::ShapeMismatch {
                what: what.into(),
                got: (width, height),
                expected: (self.width, self.height),
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_bins();
        if self.masks.len() != n || self.n_p.len() != n || self.valid.len() != n || self.low_confidence.len() != n {
            return Err(Error::Data("calibration map tables disagree in length".into()));
        }
        if self.freq_axis_hz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("calibration frequency axis is not increasing".into()));
        }
        let mut seen = vec![false; self.pixels()];
        for (mask, &np) in self.masks.iter().zip(&self.n_p) {
            if mask.len() != np {
                return Err(Error::Data("n_p disagrees with mask size".into()));
            }
            for &i in mask {
                let i = i as usize;
                if i >= seen.len() {
                    return Err(Error::Data(format!("mask index {i} outside {}x{}", self.width, self.height)));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Data(format!("pixel {i} appears in two masks")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub threshold_sigma: f64,
    pub min_assigned_fraction: f64,
    pub min_pixels_per_bin: usize,
    pub branch: Branch,
    pub physics: NvParams,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            threshold_sigma: DEFAULT_THRESHOLD_SIGMA,
            min_assigned_fraction: DEFAULT_MIN_ASSIGNED_FRACTION,
            min_pixels_per_bin: DEFAULT_MIN_PIXELS_PER_BIN,
            branch: Branch::Minus,
            physics: NvParams::default(),
        }
    }
}

/// Assigns every pixel to the bin of its contrast maximum when that maximum
/// clears `threshold_sigma` shot-noise sigmas. Ties go to the lower bin.
pub fn build_calibration(norm: &DataCube, opts: &CalibrationOptions) -> Result<CalibrationMap> {
    norm.validate()?;
    if !norm.normalized {
        return Err(Error::Data("calibration needs a normalized cube".into()));
    }
    let sigma = norm.pixel_sigma().ok_or_else(|| Error::Data("normalized cube carries no edge levels".into()))?;
    let n = norm.pixels();
    let mut masks = vec![Vec::new(); norm.n_seq()];
    for (p, &s) in sigma.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (k, d) in norm.pixel_series(p).enumerate() {
            let c = 1.0 - d;
            if c > best.1 {
                best = (k, c);
            }
        }
        if best.1 > opts.threshold_sigma * s {
            masks[best.0].push(p as u32);
        }
    }
    let assigned: usize = masks.iter().map(Vec::len).sum();
    let fraction = assigned as f64 / n.max(1) as f64;
    if fraction < opts.min_assigned_fraction {
        return Err(Error::Calibration(format!(
            "only {assigned} of {n} pixels ({:.1}%) resonate above {} sigma; need {:.1}%",
            100.0 * fraction,
            opts.threshold_sigma,
            100.0 * opts.min_assigned_fraction
        )));
    }
    CalibrationMap::from_masks(
        norm.width,
        norm.height,
        opts.branch,
        norm.freq_axis_hz.clone(),
        masks,
        opts.min_pixels_per_bin,
        &opts.physics,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    RawSum,
    PixelMean,
    Contrast,
}

#[derive(Debug, Clone, Copy)]
pub enum SpectrumMode<'a> {
    /// `S = sum I M`.
    RawSum,
    /// Raw sum divided by `n_p`.
    PixelMean,
    /// `1 - S / S_ref` against a no-signal reference.
    Contrast(&'a Reference),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub freq_axis_hz: Vec<u64>,
    /// NaN where invalid.
    pub values: Vec<f64>,
    pub sigma: Vec<f64>,
    pub n_p: Vec<usize>,
    pub valid: Vec<bool>,
    pub normalization: Normalization,
    pub timestamp_s: f64,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.freq_axis_hz.len();
        if self.values.len() != n || self.sigma.len() != n || self.n_p.len() != n || self.valid.len() != n {
            return Err(Error::Data("spectrum columns disagree in length".into()));
        }
        if self.sigma.iter().zip(&self.valid).any(|(&s, &v)| v && !(s >= 0.0)) {
            return Err(Error::Data("spectrum sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// `S(nu) = sum_{x,y} I(x,y) M(x,y,nu)` with the chosen normalization.
/// Counts are taken as Poisson for the noise estimate.
pub fn reconstruct_spectrum(frame: &Frame, map: &CalibrationMap, mode: SpectrumMode<'_>) -> Result<Spectrum> {
    map.check_dims(frame.width, frame.height)?;
    if frame.counts.len() != map.pixels() {
        return Err(Error::Data(format!("frame holds {} values, expected {}", frame.counts.len(), map.pixels())));
    }
    let reference: Option<(Vec<f64>, f64)> = match mode {
        SpectrumMode::Contrast(r) => {
            map.check_shape("reference", r.width, r.height)?;
            Some((r.scaled_to(frame.exposure_s).collect(), r.variance_factor(frame.exposure_s)))
        }
        _ => None,
    };
    let bins = map.n_bins();
    let mut values = vec![f64::NAN; bins];
    let mut sigma = vec![f64::NAN; bins];
    let mut valid = map.valid.clone();
    for k in 0..bins {
        if map.n_p[k] == 0 {
            valid[k] = false;
            continue;
        }
        let s: f64 = map.masks[k].iter().map(|&i| frame.counts[i as usize]).sum();
        let np = map.n_p[k] as f64;
        let (v, e) = match (&mode, &reference) {
            (SpectrumMode::RawSum, _) => (s, s.max(0.0).sqrt()),
            (SpectrumMode::PixelMean, _) => (s / np, s.max(0.0).sqrt() / np),
            (SpectrumMode::Contrast(_), Some((rc, vf))) => {
                let r: f64 = map.masks[k].iter().map(|&i| rc[i as usize]).sum();
                if !(r > 0.0) {
                    valid[k] = false;
                    continue;
                }
                let var = s.max(0.0) / (r * r) * (1.0 + s.max(0.0) * vf / r);
                (1.0 - s / r, var.sqrt())
            }
            (SpectrumMode::Contrast(_), None) => unreachable!(),
        };
        values[k] = v;
        sigma[k] = e;
    }
    Ok(Spectrum {
        freq_axis_hz: map.freq_axis_hz.clone(),
        values,
        sigma,
        n_p: map.n_p.clone(),
        valid,
        normalization: match mode {
            SpectrumMode::RawSum => Normalization::RawSum,
            SpectrumMode::PixelMean => Normalization::PixelMean,
            SpectrumMode::Contrast(_) => Normalization::Contrast,
        },
        timestamp_s: frame.timestamp_s,
    })
}

/// Mean normalized sweep response of a pixel set (all pixels when `None`),
/// one value per sweep step. This is the ODMR spectrum the fitting stage sees.
pub fn sweep_spectrum(norm: &DataCube, pixels: Option<&[u32]>) -> Result<Spectrum> {
    norm.validate()?;
    if !norm.normalized {
        return Err(Error::Data("sweep spectrum needs a normalized cube".into()));
    }
    let all: Vec<u32>;
    let pix = match pixels {
        Some(p) => p,
        None => {
            all = (0..norm.pixels() as u32).collect();
            &all
        }
    };
    if pix.is_empty() || pix.iter().any(|&i| i as usize >= norm.pixels()) {
        return Err(Error::Data("pixel set is empty or out of range".into()));
    }
    let ps = norm.pixel_sigma().unwrap_or_else(|| vec![0.0; norm.pixels()]);
    let np = pix.len() as f64;
    let var: f64 = pix.iter().map(|&i| ps[i as usize].powi(2)).sum::<f64>() / (np * np);
    let n = norm.pixels();
    let values: Vec<f64> =
        (0..norm.n_seq()).map(|k| pix.iter().map(|&i| norm.data[k * n + i as usize]).sum::<f64>() / np).collect();
    let bins = values.len();
    Ok(Spectrum {
        freq_axis_hz: norm.freq_axis_hz.clone(),
        values,
        sigma: vec![var.sqrt(); bins],
        n_p: vec![pix.len(); bins],
        valid: vec![true; bins],
        normalization: Normalization::PixelMean,
        timestamp_s: 0.0,
    })
}

/// A frequency that would darken a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub frequency_hz: u64,
    pub branch: Branch,
    /// From one of the three non-aligned NV families.
    pub offaxis: bool,
}

/// Every frequency that darkens each pixel, inferred from the two branch
/// maps. The plus map pins the field uniquely; with only a minus bin both
/// field solutions are kept. Duplicates merge.
pub fn ambiguity_sets(
    minus: &CalibrationMap,
    plus: &CalibrationMap,
    offaxis_enabled: bool,
    params: &NvParams,
) -> Result<Vec<Vec<Candidate>>> {
    if (minus.width, minus.height) != (plus.width, plus.height) {
        return Err(Error::Data(format!(
            "minus map is {}x{} but plus map is {}x{}",
            minus.width, minus.height, plus.width, plus.height
        )));
    }
    let d = params.d_hz().round() as i128;
    let gamma = params.gamma_hz_per_t();
    let mb = minus.pixel_bins();
    let pb = plus.pixel_bins();
    let mut out = Vec::with_capacity(mb.len());
    for (m, p) in mb.into_iter().zip(pb) {
        let mut cands = Vec::new();
        let mut fields = Vec::new();
        match (p, m) {
            (Some(k), _) => {
                let fp = plus.freq_axis_hz[k] as i128;
                // D + gamma B = fp, so the partner is |D - gamma B| = |2D - fp|
                cands.push(Candidate {
                    frequency_hz: (2 * d - fp).unsigned_abs() as u64,
                    branch: Branch::Minus,
                    offaxis: false,
                });
                cands.push(Candidate { frequency_hz: fp as u64, branch: Branch::Plus, offaxis: false });
                fields.push((fp - d) as f64 / gamma);
            }
            (None, Some(k)) => {
                let fm = minus.freq_axis_hz[k];
                cands.push(Candidate { frequency_hz: fm, branch: Branch::Minus, offaxis: false });
                let sol = field_for_frequency(fm as f64, Branch::Minus, params)?;
                for b in std::iter::once(sol.b_nv_t).chain(sol.alternate_t) {
                    let fp = (d as f64 + gamma * b).round() as u64;
                    cands.push(Candidate { frequency_hz: fp, branch: Branch::Plus, offaxis: false });
                    fields.push(b);
                }
            }
            (None, None) => {}
        }
        if offaxis_enabled {
            for b in fields {
                let (lo, hi) = resonance_frequencies(b * params.offaxis_projection, params);
                cands.push(Candidate { frequency_hz: lo.round() as u64, branch: Branch::Minus, offaxis: true });
                cands.push(Candidate { frequency_hz: hi.round() as u64, branch: Branch::Plus, offaxis: true });
            }
        }
        cands.sort_by_key(|c| (c.frequency_hz, c.offaxis, c.branch == Branch::Plus));
        cands.dedup_by_key(|c| c.frequency_hz);
        out.push(cands);
    }
    Ok(out)
}

/// A request window that passed the ambiguity check, in physical frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRequest {
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub offset_hz: f64,
    pub minus_visible: bool,
    pub plus_visible: bool,
}

const MAX_REPORTED_COLLISIONS: usize = 32;

/// Checks that `[f_lo, f_hi]` (shifted down by a heterodyne `offset_hz`)
/// maps every pixel to at most one frequency.
pub fn band_filter(
    request_hz: (f64, f64),
    offset_hz: f64,
    minus: &CalibrationMap,
    plus: &CalibrationMap,
    offaxis_enabled: bool,
    params: &NvParams,
) -> Result<BandRequest> {
    let (lo, hi) = (request_hz.0 - offset_hz, request_hz.1 - offset_hz);
    if !(request_hz.1 > request_hz.0) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("band request needs f_hi > f_lo, got {request_hz:?}")));
    }
    if lo < 0.0 {
        return Err(Error::Domain(format!("offset {offset_hz} Hz maps the request below 0 Hz")));
    }
    let sets = ambiguity_sets(minus, plus, offaxis_enabled, params)?;
    let inside = |c: &Candidate| (c.frequency_hz as f64) >= lo && (c.frequency_hz as f64) <= hi;
    let (mut minus_visible, mut plus_visible) = (false, false);
    let mut collisions: Vec<(u64, u64)> = Vec::new();
    for cands in &sets {
        let hits: Vec<&Candidate> = cands.iter().filter(|c| inside(c)).collect();
        for c in &hits {
            match c.branch {
                Branch::Minus => minus_visible = true,
                Branch::Plus => plus_visible = true,
            }
        }
        for (i, a) in hits.iter().enumerate() {
            for b in &hits[i + 1..] {
                collisions.push((a.frequency_hz, b.frequency_hz));
            }
        }
    }
    collisions.sort_unstable();
    collisions.dedup();
    let span = hi - lo;
    let limit = 2.0 * params.d_hz();
    if minus_visible && plus_visible && span > limit {
        collisions.truncate(MAX_REPORTED_COLLISIONS);
        return Err(Error::Ambiguity {
            reason: format!(
                "window span {:.3} GHz exceeds 2D = {:.3} GHz with both branches visible",
                span / 1e9,
                limit / 1e9
            ),
            colliding_hz: collisions,
        });
    }
    if !collisions.is_empty() {
        let total = collisions.len();
        collisions.truncate(MAX_REPORTED_COLLISIONS);
        return Err(Error::Ambiguity {
            reason: format!("{total} frequency pairs share a pixel inside the window"),
            colliding_hz: collisions,
        });
    }
    Ok(BandRequest { f_lo_hz: lo, f_hi_hz: hi, offset_hz, minus_visible, plus_visible })
}
