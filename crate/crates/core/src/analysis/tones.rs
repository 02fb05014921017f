use serde::{Deserialize, Serialize};

use crate::calibration::{Normalization, Spectrum};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneEstimate {
    /// Dip-weighted centroid of the merged bins.
    pub frequency_hz: f64,
    /// Centre of the deepest bin.
    pub peak_bin_hz: u64,
    pub peak_bin: usize,
    /// First and last bin of the merged group.
    pub lo_bin: usize,
    pub hi_bin: usize,
    /// Deepest dip of the group.
    pub contrast: f64,
    /// Deepest dip over its sigma.
    pub snr: f64,
    pub first_seen_s: f64,
    pub last_seen_s: f64,
}

impl ToneEstimate {
    pub fn covers(&self, bin: usize) -> bool {
        (self.lo_bin..=self.hi_bin).contains(&bin)
    }
}

/// Per-bin dip depth: the value itself for contrast spectra, one minus the
/// value for pixel-mean spectra.
pub fn dip_values(spectrum: &Spectrum) -> Result<Vec<f64>> {
    match spectrum.normalization {
        Normalization::Contrast => Ok(spectrum.values.clone()),
        Normalization::PixelMean => Ok(spectrum.values.iter().map(|v| 1.0 - v).collect()),
        Normalization::RawSum => Err(Error::Data("tone detection needs a contrast or pixel-mean spectrum".into())),
    }
}

/// Bins with dip > `k_sigma * sigma`, merged by 1-bin contiguity. An
/// undetected or invalid bin splits tones.
pub fn detect_tones(spectrum: &Spectrum, k_sigma: f64) -> Result<Vec<ToneEstimate>> {
    spectrum.validate()?;
    if !(k_sigma >= 0.0) {
        return Err(Error::Config(format!("k_sigma must be >= 0, got {k_sigma}")));
    }
    let dips = dip_values(spectrum)?;
    let hit: Vec<bool> = (0..spectrum.len())
        .map(|k| {
            let (d, s) = (dips[k], spectrum.sigma[k]);
            spectrum.valid[k] && d.is_finite() && s.is_finite() && d > k_sigma * s && d > 0.0
        })
        .collect();
    let mut tones = Vec::new();
    let mut k = 0;
    while k < hit.len() {
        if !hit[k] {
            k += 1;
            continue;
        }
        let start = k;
        while k < hit.len() && hit[k] {
            k += 1;
        }
        let group = start..k;
        let weight: f64 = group.clone().map(|j| dips[j]).sum();
        let centroid = group.clone().map(|j| dips[j] * spectrum.freq_axis_hz[j] as f64).sum::<f64>() / weight;
        // deepest bin, lower one on ties
        let peak = group.clone().fold(start, |best, j| if dips[j] > dips[best] { j } else { best });
        let sigma = spectrum.sigma[peak];
        tones.push(ToneEstimate {
            frequency_hz: centroid,
            peak_bin_hz: spectrum.freq_axis_hz[peak],
            peak_bin: peak,
            lo_bin: start,
            hi_bin: k - 1,
            contrast: dips[peak],
            snr: if sigma > 0.0 { dips[peak] / sigma } else { f64::INFINITY },
            first_seen_s: spectrum.timestamp_s,
            last_seen_s: spectrum.timestamp_s,
        });
    }
    Ok(tones)
}

/// Folds per-frame detections into tones whose peak bins stay within one
/// bin of each other, keeping first/last-seen times and the strongest dip.
pub fn merge_over_time(frames: &[Vec<ToneEstimate>]) -> Vec<ToneEstimate> {
    let mut out: Vec<ToneEstimate> = Vec::new();
    for tone in frames.iter().flatten() {
        match out.iter_mut().find(|t| t.peak_bin.abs_diff(tone.peak_bin) <= 1) {
            Some(t) => {
                t.first_seen_s = t.first_seen_s.min(tone.first_seen_s);
                t.last_seen_s = t.last_seen_s.max(tone.last_seen_s);
                if tone.snr > t.snr {
                    let (first, last) = (t.first_seen_s, t.last_seen_s);
                    *t = ToneEstimate { first_seen_s: first, last_seen_s: last, ..tone.clone() };
                }
            }
            None => out.push(tone.clone()),
        }
    }
    out.sort_by_key(|t| t.peak_bin);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spectrum(values: Vec<f64>, sigma: f64) -> Spectrum {
        let n = values.len();
        Spectrum {
            freq_axis_hz: (0..n as u64).map(|k| 1_000_000_000 + k * 1_000_000).collect(),
            values,
            sigma: vec![sigma; n],
            n_p: vec![10; n],
            valid: vec![true; n],
            normalization: Normalization::Contrast,
            timestamp_s: 0.5,
        }
    }

    #[test]
    fn two_separated_tones() {
        let mut v = vec![0.0; 20];
        v[4] = 0.01;
        v[5] = 0.03;
        v[6] = 0.01;
        v[14] = 0.02;
        let t = detect_tones(&spectrum(v, 1e-3), 3.0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].peak_bin, t[1].peak_bin), (5, 14));
        assert!((t[0].frequency_hz - 1_005_000_000.0).abs() < 1.0);
        assert!(t.iter().all(|t| t.snr >= 3.0 && t.first_seen_s == 0.5));
    }

    #[test]
    fn adjacent_tones_merge() {
        let mut v = vec![0.0; 10];
        v[4] = 0.02;
        v[5] = 0.03;
        assert_eq!(detect_tones(&spectrum(v, 1e-3), 3.0).unwrap().len(), 1);
    }

    #[test]
    fn weak_tone_not_detected_and_invalid_splits() {
        let mut v = vec![0.0; 10];
        v[3] = 1e-3;
        assert!(detect_tones(&spectrum(v, 1e-3), 3.0).unwrap().is_empty());
        let mut s = spectrum(vec![0.0, 0.1, 0.1, 0.1, 0.0], 1e-3);
        s.valid[2] = false;
        assert_eq!(detect_tones(&s, 3.0).unwrap().len(), 2);
    }

    #[test]
    fn merge_tracks_times() {
        let mut v = vec![0.0; 10];
        v[4] = 0.02;
        let mut a = spectrum(v.clone(), 1e-3);
        a.timestamp_s = 0.0;
        let mut b = spectrum(v, 1e-3);
        b.timestamp_s = 2.0;
        let m = merge_over_time(&[detect_tones(&a, 3.0).unwrap(), detect_tones(&b, 3.0).unwrap()]);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].first_seen_s, m[0].last_seen_s), (0.0, 2.0));
    }
}
