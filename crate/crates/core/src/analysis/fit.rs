//! Damped Gauss-Newton fit of the three-Lorentzian ODMR model
//! `f(nu) = 1 - c * sum_{s=-1,0,1} a^2 / (a^2 + (nu - b - s*hf)^2)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::calibration::{Normalization, Spectrum};
use crate::error::{Error, Result};
use crate::nv::{triplet_sum, NvParams};

const MAX_ITERATIONS: usize = 200;
const TOLERANCE: f64 = 1e-8;
const MIN_BINS: usize = 10;
const MAX_DAMPING: f64 = 1e12;

/// 95% confidence half-widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitUncertainty {
    pub a_hz: f64,
    pub b_hz: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Half-width at half-maximum of each line.
    pub a_hz: f64,
    /// Centre of the middle line.
    pub b_hz: f64,
    pub c: f64,
    pub fwhm_hz: f64,
    pub uncertainties: FitUncertainty,
    pub residual_rms: f64,
    pub iterations: usize,
    pub n_bins: usize,
}

/// Starting point overriding the data-driven defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitInit {
    pub a_hz: f64,
    pub b_hz: f64,
    pub c: f64,
}

impl From<&FitResult> for FitInit {
    fn from(r: &FitResult) -> Self {
        Self { a_hz: r.a_hz, b_hz: r.b_hz, c: r.c }
    }
}

/// `f(x)` with every quantity in the same frequency unit.
pub fn model_value(x: f64, a: f64, b: f64, c: f64, hf: f64) -> f64 {
    1.0 - c * triplet_sum(x - b, a, hf)
}

/// Analytic `(df/da, df/db, df/dc)`.
pub fn model_partials(x: f64, a: f64, b: f64, c: f64, hf: f64) -> [f64; 3] {
    let (mut da, mut db, mut sum) = (0.0, 0.0, 0.0);
    let a2 = a * a;
    for s in [-1.0, 0.0, 1.0] {
        let u = x - b - s * hf;
        let q = a2 + u * u;
        sum += a2 / q;
        da += 2.0 * a * u * u / (q * q);
        db += 2.0 * a2 * u / (q * q);
    }
    [-c * da, -c * db, -sum]
}

/// Fits the lineshape to a per-pixel-mean (PL-like) or contrast spectrum.
/// Only valid bins enter the fit.
pub fn fit_odmr(spectrum: &Spectrum, init: Option<FitInit>, params: &NvParams) -> Result<FitResult> {
    spectrum.validate()?;
    let flip = match spectrum.normalization {
        Normalization::PixelMean => false,
        Normalization::Contrast => true,
        Normalization::RawSum => {
            return Err(Error::Data("fit needs a per-pixel-mean or contrast spectrum, not a raw sum".into()))
        }
    };
    let idx: Vec<usize> =
        (0..spectrum.len()).filter(|&k| spectrum.valid[k] && spectrum.values[k].is_finite()).collect();
    if idx.len() < MIN_BINS {
        return Err(Error::Data(format!("fit needs >= {MIN_BINS} valid bins, got {}", idx.len())));
    }
    // Work in MHz around the deepest bin to keep the normal equations well scaled.
    let kmin = *idx.iter().min_by(|&&p, &&q| pl(spectrum, p, flip).total_cmp(&pl(spectrum, q, flip))).unwrap();
    let origin = spectrum.freq_axis_hz[kmin] as f64;
    let xs: Vec<f64> = idx.iter().map(|&k| (spectrum.freq_axis_hz[k] as f64 - origin) * 1e-6).collect();
    let ys: Vec<f64> = idx.iter().map(|&k| pl(spectrum, k, flip)).collect();
    let hf = params.hyperfine_mhz;

    let depth = 1.0 - ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let noise = noise_level(spectrum, &idx, &ys);
    if !(depth > 3.0 * noise) {
        return Err(Error::NoPeak { depth, threshold: 3.0 * noise });
    }
    let jmin = idx.iter().position(|&k| k == kmin).unwrap();
    let mut theta = match init {
        Some(i) => Vector3::new(i.a_hz * 1e-6, (i.b_hz - origin) * 1e-6, i.c),
        None => {
            let a0 = (0.5 * half_depth_width(&xs, &ys, jmin, depth)).max(min_step(&xs));
            Vector3::new(a0, 0.0, depth / triplet_sum(0.0, a0, hf))
        }
    };
    let span = xs[xs.len() - 1] - xs[0];
    if span < 2.0 * (2.0 * theta[0]) {
        return Err(Error::Data(format!(
            "spectrum spans {span:.4} MHz, less than twice the initial FWHM {:.4} MHz",
            2.0 * theta[0]
        )));
    }
    theta = project(theta);

    let rss = |t: &Vector3<f64>| -> f64 {
        xs.iter().zip(&ys).map(|(&x, &y)| (y - model_value(x, t[0], t[1], t[2], hf)).powi(2)).sum()
    };
    let mut cost = rss(&theta);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (&x, &y) in xs.iter().zip(&ys) {
            let g = Vector3::from(model_partials(x, theta[0], theta[1], theta[2], hf));
            let r = y - model_value(x, theta[0], theta[1], theta[2], hf);
            jtj += g * g.transpose();
            jtr += g * r;
        }
        let mut improved = false;
        while lambda <= MAX_DAMPING {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-30);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = project(theta + step);
            let trial_cost = rss(&trial);
            if trial_cost <= cost {
                let delta = trial - theta;
                let rel_a = delta[0].abs() / trial[0].abs().max(f64::MIN_POSITIVE);
                let rel_b = delta[1].abs() * 1e6 / (origin + trial[1] * 1e6).abs().max(1.0);
                let rel_c = delta[2].abs() / trial[2].abs().max(f64::MIN_POSITIVE);
                theta = trial;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel_a.max(rel_b).max(rel_c) < TOLERANCE {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        // no downhill step at any damping: already at the minimum
        if converged || !improved {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations,
            last: [theta[0].abs() * 1e6, origin + theta[1] * 1e6, theta[2]],
        });
    }

    let n = xs.len();
    let dof = n - 3;
    let s2 = cost / dof as f64;
    let mut jtj = Matrix3::zeros();
    for &x in &xs {
        let g = Vector3::from(model_partials(x, theta[0], theta[1], theta[2], hf));
        jtj += g * g.transpose();
    }
    let cov = jtj.try_inverse().map(|m| m * s2);
    let t = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::Data(format!("t distribution: {e}")))?
        .inverse_cdf(0.975);
    let half = |i: usize| cov.map_or(f64::INFINITY, |m| t * m[(i, i)].max(0.0).sqrt());
    let a_hz = theta[0] * 1e6;
    Ok(FitResult {
        a_hz,
        b_hz: origin + theta[1] * 1e6,
        c: theta[2],
        fwhm_hz: 2.0 * a_hz,
        uncertainties: FitUncertainty { a_hz: half(0) * 1e6, b_hz: half(1) * 1e6, c: half(2) },
        residual_rms: (cost / n as f64).sqrt(),
        iterations,
        n_bins: n,
    })
}

fn pl(s: &Spectrum, k: usize, flip: bool) -> f64 {
    if flip {
        1.0 - s.values[k]
    } else {
        s.values[k]
    }
}

fn project(t: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(t[0].abs().max(1e-9), t[1], t[2].clamp(0.0, 1.0 / 3.0))
}

fn min_step(xs: &[f64]) -> f64 {
    0.5 * xs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

/// Median of the reported sigma, or a robust scatter of first differences
/// when the spectrum carries none.
fn noise_level(s: &Spectrum, idx: &[usize], ys: &[f64]) -> f64 {
    let mut sig: Vec<f64> = idx.iter().map(|&k| s.sigma[k]).filter(|v| v.is_finite() && *v > 0.0).collect();
    if !sig.is_empty() {
        sig.sort_by(f64::total_cmp);
        return sig[sig.len() / 2];
    }
    let mut d: Vec<f64> = ys.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2] / (0.6745 * std::f64::consts::SQRT_2)
}

/// Full width of the dip at half its depth, by linear interpolation.
fn half_depth_width(xs: &[f64], ys: &[f64], jmin: usize, depth: f64) -> f64 {
    let level = 1.0 - 0.5 * depth;
    let cross = |j0: usize, j1: usize| {
        let (y0, y1) = (ys[j0], ys[j1]);
        if (y1 - y0).abs() < f64::EPSILON {
            xs[j1]
        } else {
            xs[j0] + (level - y0) / (y1 - y0) * (xs[j1] - xs[j0])
        }
    };
    let mut left = xs[0];
    for j in (1..=jmin).rev() {
        if ys[j - 1] >= level {
            left = cross(j, j - 1);
            break;
        }
    }
    let mut right = xs[xs.len() - 1];
    for j in jmin..xs.len() - 1 {
        if ys[j + 1] >= level {
            right = cross(j, j + 1);
            break;
        }
    }
    right - left
}

/// Whether the fitted curve shows three separate minima.
pub fn hyperfine_resolved(fit: &FitResult, params: &NvParams) -> bool {
    let hf = params.hyperfine_hz();
    let a = fit.a_hz;
    let reach = hf + 4.0 * a;
    let step = (a.min(hf) / 200.0).max(1.0);
    let n = (2.0 * reach / step) as usize;
    let f = |x: f64| model_value(x, a, 0.0, 1.0, hf);
    let mut minima = 0;
    let (mut prev, mut cur) = (f(-reach), f(-reach + step));
    for i in 2..=n {
        let next = f(-reach + i as f64 * step);
        if cur < prev && cur < next {
            minima += 1;
        }
        prev = cur;
        cur = next;
    }
    minima == 3
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(a: f64, b: f64, c: f64, lo: u64, hi: u64, step: u64) -> Spectrum {
        let p = NvParams::default();
        let axis: Vec<u64> = (lo..=hi).step_by(step as usize).collect();
        let values: Vec<f64> = axis.iter().map(|&f| model_value(f as f64, a, b, c, p.hyperfine_hz())).collect();
        let n = axis.len();
        Spectrum {
            freq_axis_hz: axis,
            values,
            sigma: vec![1e-6; n],
            n_p: vec![1; n],
            valid: vec![true; n],
            normalization: Normalization::PixelMean,
            timestamp_s: 0.0,
        }
    }

    #[test]
    fn noiseless_round_trip() {
        let s = synth(0.5e6, 2.80e9, 0.02, 2_790_000_000, 2_810_000_000, 50_000);
        let r = fit_odmr(&s, None, &NvParams::default()).unwrap();
        assert!((r.a_hz / 0.5e6 - 1.0).abs() < 1e-6, "{r:?}");
        assert!((r.b_hz / 2.80e9 - 1.0).abs() < 1e-6);
        assert!((r.c / 0.02 - 1.0).abs() < 1e-6);
        assert_eq!(r.fwhm_hz, 2.0 * r.a_hz);
        assert!(hyperfine_resolved(&r, &NvParams::default()));
    }

    #[test]
    fn off_grid_centre_and_contrast_mode() {
        let mut s = synth(0.8e6, 2.800_123_4e9, 0.03, 2_790_000_000, 2_810_000_000, 100_000);
        for v in &mut s.values {
            *v = 1.0 - *v;
        }
        s.normalization = Normalization::Contrast;
        let r = fit_odmr(&s, None, &NvParams::default()).unwrap();
        assert!((r.b_hz - 2.800_123_4e9).abs() < 1.0);
        assert!((r.a_hz - 0.8e6).abs() < 1e-3);
    }

    #[test]
    fn partials_match_finite_differences() {
        let hf = 2.14;
        for &(x, a, b, c) in &[(0.3, 0.5, 0.0, 0.02), (-2.0, 1.3, 0.4, 0.05), (5.0, 0.2, -1.0, 0.3)] {
            let g = model_partials(x, a, b, c, hf);
            let theta = [a, b, c];
            for i in 0..3 {
                let h = 1e-6 * theta[i].abs().max(1e-3);
                let (mut up, mut dn) = (theta, theta);
                up[i] += h;
                dn[i] -= h;
                let fd =
                    (model_value(x, up[0], up[1], up[2], hf) - model_value(x, dn[0], dn[1], dn[2], hf)) / (2.0 * h);
                assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1e-9), "param {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn flat_spectrum_has_no_peak() {
        let s = synth(0.5e6, 2.80e9, 0.0, 2_790_000_000, 2_810_000_000, 100_000);
        assert!(matches!(fit_odmr(&s, None, &NvParams::default()), Err(Error::NoPeak { .. })));
    }

    #[test]
    fn broad_lines_are_unresolved() {
        let s = synth(3e6, 2.80e9, 0.02, 2.74e9 as u64, 2.86e9 as u64, 200_000);
        let r = fit_odmr(&s, None, &NvParams::default()).unwrap();
        assert!(!hyperfine_resolved(&r, &NvParams::default()));
    }

    #[test]
    fn too_few_bins_or_raw_sum_rejected() {
        let s = synth(0.5e6, 2.80e9, 0.02, 2_799_000_000, 2_800_000_000, 200_000);
        assert!(matches!(fit_odmr(&s, None, &NvParams::default()), Err(Error::Data(_))));
        let mut s = synth(0.5e6, 2.80e9, 0.02, 2_790_000_000, 2_810_000_000, 50_000);
        s.normalization = Normalization::RawSum;
        assert!(fit_odmr(&s, None, &NvParams::default()).is_err());
    }
}
