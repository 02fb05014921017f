//! Frequency-swept acquisition into a `[freq][y][x]` data cube, edge-bin
//! normalization and contrast extraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Exposure;
use crate::error::{Error, Result};
use crate::nv::Tone;
use crate::scene::{child_seed, Scene};

pub const DEFAULT_EDGE_BINS: usize = 5;
pub const DEFAULT_EDGE_THRESHOLD_SIGMA: f64 = 5.0;

/// Offset between consecutive cycle seeds: the seed of cycle `c` of a run
/// seeded `s` is `s + c * CYCLE_SEED_STRIDE`.
pub const CYCLE_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn cycle_seed(master: u64, cycle: u32) -> u64 {
    master.wrapping_add(CYCLE_SEED_STRIDE.wrapping_mul(cycle as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub f_min_hz: u64,
    pub f_max_hz: u64,
    pub delta_f_hz: u64,
    #[serde(default = "one")]
    pub n_cycles: u32,
    pub exposure_s: f64,
    #[serde(default = "default_edge_bins")]
    pub edge_bins: usize,
    pub probe_power_dbm: f64,
}

fn one() -> u32 {
    1
}

fn default_edge_bins() -> usize {
    DEFAULT_EDGE_BINS
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f_max_hz <= self.f_min_hz {
            return Err(Error::Config(format!("sweep f_max {} <= f_min {}", self.f_max_hz, self.f_min_hz)));
        }
        if self.delta_f_hz == 0 || !(self.f_max_hz - self.f_min_hz).is_multiple_of(self.delta_f_hz) {
            return Err(Error::Config(format!(
                "sweep span {} Hz is not a whole number of {} Hz steps",
                self.f_max_hz - self.f_min_hz,
                self.delta_f_hz
            )));
        }
        if self.n_cycles == 0 {
            return Err(Error::Config("sweep n_cycles must be >= 1".into()));
        }
        if !(self.exposure_s > 0.0) {
            return Err(Error::Config("sweep exposure_s must be > 0".into()));
        }
        if self.edge_bins == 0 || 2 * self.edge_bins >= self.n_seq() {
            return Err(Error::Config(format!(
                "edge_bins {} needs 1 <= 2m < N_seq = {}",
                self.edge_bins,
                self.n_seq()
            )));
        }
        Ok(())
    }

    pub fn n_seq(&self) -> usize {
        ((self.f_max_hz - self.f_min_hz) / self.delta_f_hz.max(1)) as usize
    }

    pub fn freq_axis(&self) -> Vec<u64> {
        (0..self.n_seq() as u64).map(|k| self.f_min_hz + k * self.delta_f_hz).collect()
    }
}

/// Accumulated sweep record, row-major `[freq][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCube {
    pub width: usize,
    pub height: usize,
    pub freq_axis_hz: Vec<u64>,
    pub data: Vec<f64>,
    pub n_cycles_applied: u32,
    pub exposure_s: f64,
    pub normalized: bool,
    /// After normalization: per-pixel mean raw counts of the edge bins and
    /// the `m` used, which together fix the shot-noise level.
    pub edge_level: Option<Vec<f64>>,
    pub edge_bins: usize,
}

impl DataCube {
    pub fn n_seq(&self) -> usize {
        self.freq_axis_hz.len()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn at(&self, x: usize, y: usize, k: usize) -> f64 {
        self.data[(k * self.height + y) * self.width + x]
    }

    /// Spectrum of one pixel across the sweep.
    pub fn pixel_series(&self, pixel: usize) -> impl Iterator<Item = f64> + '_ {
        let n = self.pixels();
        (0..self.n_seq()).map(move |k| self.data[k * n + pixel])
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.pixels() * self.n_seq() {
            return Err(Error::Data(format!(
                "cube holds {} values, dims {}x{}x{} need {}",
                self.data.len(),
                self.width,
                self.height,
                self.n_seq(),
                self.pixels() * self.n_seq()
            )));
        }
        Ok(())
    }

    /// Normalized-unit shot noise of every pixel, or `None` for raw cubes.
    pub fn pixel_sigma(&self) -> Option<Vec<f64>> {
        let m = self.edge_bins.max(1) as f64;
        self.edge_level.as_ref().map(|lv| {
            lv.iter().map(|&l| if l > 0.0 { ((1.0 + 1.0 / (2.0 * m)) / l).sqrt() } else { f64::INFINITY }).collect()
        })
    }
}

/// Steps a single probe tone through the sweep, `n_cycles` times, and sums
/// the frames per step. Laser and probe are on throughout.
pub fn run_sweep(scene: &Scene, sweep: &SweepConfig, seed: u64) -> Result<DataCube> {
    sweep.validate()?;
    let (w, h) = scene.dims();
    let n = w * h;
    let axis = sweep.freq_axis();
    let n_seq = axis.len();
    let mut data = vec![0.0; n * n_seq];
    for cycle in 0..sweep.n_cycles {
        let cs = cycle_seed(seed, cycle);
        data.par_chunks_mut(n).enumerate().try_for_each(|(k, slab)| -> Result<()> {
            let drive = scene.drive.with_tones(vec![Tone::cw(axis[k] as f64, sweep.probe_power_dbm)]);
            let t0 = (cycle as usize * n_seq + k) as f64 * sweep.exposure_s;
            let frame = scene.capture(&drive, Exposure::new(t0, sweep.exposure_s), child_seed(cs, k as u64))?;
            for (acc, c) in slab.iter_mut().zip(&frame.counts) {
                *acc += c;
            }
            Ok(())
        })?;
    }
    Ok(DataCube {
        width: w,
        height: h,
        freq_axis_hz: axis,
        data,
        n_cycles_applied: sweep.n_cycles,
        exposure_s: sweep.exposure_s,
        normalized: false,
        edge_level: None,
        edge_bins: sweep.edge_bins,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizeOptions {
    pub edge_bins: usize,
    /// Abort when an edge bin dips more than this many shot-noise sigmas
    /// below the pixel's edge mean; `None` skips the check.
    pub edge_threshold_sigma: Option<f64>,
}

impl NormalizeOptions {
    pub fn new(edge_bins: usize) -> Self {
        Self { edge_bins, edge_threshold_sigma: Some(DEFAULT_EDGE_THRESHOLD_SIGMA) }
    }
}

/// `D_norm = 2m D / (sum of first m + sum of last m)` per pixel, with the
/// edge bins checked for residual resonances first.
pub fn normalize_cube(cube: &DataCube, m: usize) -> Result<DataCube> {
    normalize_cube_with(cube, &NormalizeOptions::new(m))
}

pub fn normalize_cube_with(cube: &DataCube, opts: &NormalizeOptions) -> Result<DataCube> {
    cube.validate()?;
    if cube.normalized {
        return Err(Error::Data("cube is already normalized".into()));
    }
    let m = opts.edge_bins;
    let n_seq = cube.n_seq();
    if m == 0 || 2 * m >= n_seq {
        return Err(Error::Config(format!("edge bins m = {m} needs 1 <= 2m < N_seq = {n_seq}")));
    }
    let n = cube.pixels();
    let edge_ks: Vec<usize> = (0..m).chain(n_seq - m..n_seq).collect();

    let mut denom = vec![0.0; n];
    let mut offending = Vec::new();
    let mut scratch = Vec::with_capacity(2 * m);
    for (p, slot) in denom.iter_mut().enumerate() {
        scratch.clear();
        scratch.extend(edge_ks.iter().map(|&k| cube.data[k * n + p]));
        let sum: f64 = scratch.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Data(format!("pixel {p} has zero edge-bin counts")));
        }
        *slot = sum;
        if let Some(k_sigma) = opts.edge_threshold_sigma {
            let mean = sum / (2 * m) as f64;
            let lowest = scratch.iter().cloned().fold(f64::INFINITY, f64::min);
            if mean - lowest > k_sigma * mean.sqrt() {
                offending.push(p);
            }
        }
    }
    if !offending.is_empty() {
        return Err(Error::EdgeResonance { pixels: offending });
    }

    let scale = 2.0 * m as f64;
    let mut data = cube.data.clone();
    data.par_chunks_mut(n).for_each(|slab| {
        for (v, d) in slab.iter_mut().zip(&denom) {
            *v = scale * *v / d;
        }
    });
    Ok(DataCube {
        data,
        normalized: true,
        edge_level: Some(denom.iter().map(|d| d / scale).collect()),
        edge_bins: m,
        ..cube.clone()
    })
}

/// `C = 1 - D_norm`, elementwise and unclamped.
pub fn contrast_cube(norm: &DataCube) -> Result<Vec<f64>> {
    if !norm.normalized {
        return Err(Error::Data("contrast needs a normalized cube".into()));
    }
    Ok(norm.data.iter().map(|d| 1.0 - d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::PixelOptics;
    use crate::field::FieldMap;
    use crate::nv::{resonance_frequencies, MwDrive, NvParams};

    fn raw(width: usize, height: usize, axis: Vec<u64>, data: Vec<f64>) -> DataCube {
        DataCube {
            width,
            height,
            freq_axis_hz: axis,
            data,
            n_cycles_applied: 1,
            exposure_s: 1e-3,
            normalized: false,
            edge_level: None,
            edge_bins: 0,
        }
    }

    fn ramp_scene(noiseless: bool) -> Scene {
        let p = NvParams::default();
        let width = 16;
        let b: Vec<f64> = (0..width * 2).map(|i| 0.3 + 2e-4 * (i % width) as f64).collect();
        let field = FieldMap::from_projection(width, 2, 0.66, b, &p);
        let optics = PixelOptics::flat(width, 2, 1e6);
        Scene::new(field, p, optics, MwDrive::default()).unwrap().noiseless(noiseless)
    }

    fn sweep_for(scene: &Scene, n_cycles: u32) -> SweepConfig {
        let f = scene.field.branch_frequencies(crate::nv::Branch::Minus, &scene.physics);
        let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = f.iter().cloned().fold(0.0, f64::max);
        let step = 1_000_000;
        let f_min = ((lo - 60e6) as u64 / step) * step;
        let f_max = ((hi + 60e6) as u64 / step + 1) * step;
        SweepConfig {
            f_min_hz: f_min,
            f_max_hz: f_max,
            delta_f_hz: step,
            n_cycles,
            exposure_s: 1e-3,
            edge_bins: 5,
            probe_power_dbm: 0.0,
        }
    }

    #[test]
    fn config_validation() {
        let mut s = SweepConfig {
            f_min_hz: 1_000,
            f_max_hz: 2_000,
            delta_f_hz: 100,
            n_cycles: 1,
            exposure_s: 1e-3,
            edge_bins: 2,
            probe_power_dbm: 0.0,
        };
        s.validate().unwrap();
        assert_eq!(s.n_seq(), 10);
        assert_eq!(s.freq_axis()[9], 1_900);
        s.delta_f_hz = 300;
        assert!(s.validate().is_err());
        s.delta_f_hz = 100;
        s.edge_bins = 5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn cycles_are_sums_of_split_runs() {
        let scene = ramp_scene(false);
        let two = run_sweep(&scene, &sweep_for(&scene, 2), 11).unwrap();
        let a = run_sweep(&scene, &sweep_for(&scene, 1), cycle_seed(11, 0)).unwrap();
        let b = run_sweep(&scene, &sweep_for(&scene, 1), cycle_seed(11, 1)).unwrap();
        let sum: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        assert_eq!(two.data, sum);
        assert!(two.data.iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
    }

    #[test]
    fn noiseless_dips_sit_on_resonant_pixels() {
        let scene = ramp_scene(true);
        let sweep = sweep_for(&scene, 1);
        let cube = run_sweep(&scene, &sweep, 0).unwrap();
        let (nu, _) = resonance_frequencies(scene.field.b_nv_t[5], &scene.physics);
        let k = cube.freq_axis_hz.iter().position(|&f| f as f64 >= nu).unwrap();
        let slab = cube.slice(k);
        let deepest = (0..scene.field.width).min_by(|&a, &b| slab[a].total_cmp(&slab[b])).unwrap();
        assert_eq!(deepest, 5);
        // exact against a direct evaluation of the scene
        let drive = scene.drive.with_tones(vec![Tone::cw(cube.freq_axis_hz[k] as f64, 0.0)]);
        let want = scene.expected(&drive, Exposure::new(0.0, 1e-3)).unwrap();
        for (g, w) in slab.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * w);
        }
    }

    #[test]
    fn far_sweep_is_flat() {
        let scene = ramp_scene(true);
        let sweep = SweepConfig {
            f_min_hz: 20_000_000_000,
            f_max_hz: 20_100_000_000,
            delta_f_hz: 1_000_000,
            n_cycles: 1,
            exposure_s: 1e-3,
            edge_bins: 5,
            probe_power_dbm: 0.0,
        };
        let cube = run_sweep(&scene, &sweep, 0).unwrap();
        let mean = cube.data.iter().sum::<f64>() / cube.data.len() as f64;
        assert!(cube.data.iter().all(|&v| (mean - v) / mean < 1e-3));
    }

    #[test]
    fn normalization_by_hand() {
        // one pixel, m = 2, edge mean 100, one bin at 90
        let c = raw(1, 1, (0..6).collect(), vec![100.0, 100.0, 90.0, 100.0, 100.0, 100.0]);
        let n = normalize_cube(&c, 2).unwrap();
        assert!((n.data[2] - 0.90).abs() < 1e-15);
        assert!(normalize_cube(&c, 0).is_err());
        assert!(matches!(normalize_cube(&n, 2), Err(Error::Data(_))));
        let flat = raw(2, 2, (0..8).collect(), vec![7.0; 32]);
        let nf = normalize_cube(&flat, 3).unwrap();
        assert!(nf.data.iter().all(|&v| v == 1.0));
        assert!(contrast_cube(&nf).unwrap().iter().all(|&v| v == 0.0));
        assert!(contrast_cube(&flat).is_err());
    }

    #[test]
    fn edge_resonance_is_reported() {
        let mut d = [1e4; 2 * 10];
        d[10 + 1] = 8e3; // pixel 1, bin 1
        d[0] = 1e4 - 10.0; // pixel 0, well inside noise
        let mut v = vec![0.0; 20];
        // layout [k][pixel], two pixels
        for k in 0..10 {
            v[k * 2] = d[k];
            v[k * 2 + 1] = d[10 + k];
        }
        let c = raw(2, 1, (0..10).collect(), v);
        match normalize_cube(&c, 2) {
            Err(Error::EdgeResonance { pixels }) => assert_eq!(pixels, vec![1]),
            other => panic!("{other:?}"),
        }
        let zero = raw(1, 1, (0..6).collect(), vec![0.0; 6]);
        assert!(normalize_cube(&zero, 2).is_err());
    }

    #[test]
    fn normalized_contrast_at_line_center() {
        let scene = ramp_scene(true);
        let cube = run_sweep(&scene, &sweep_for(&scene, 1), 0).unwrap();
        let norm = normalize_cube(&cube, 5).unwrap();
        let c = contrast_cube(&norm).unwrap();
        let n = cube.pixels();
        for p in 0..n {
            let kmax = (0..norm.n_seq()).max_by(|&a, &b| c[a * n + p].total_cmp(&c[b * n + p])).unwrap();
            let probe = norm.freq_axis_hz[kmax] as f64;
            let drive = scene.drive.with_tones(vec![Tone::cw(probe, 0.0)]);
            let on = scene.expected(&drive, Exposure::new(0.0, 1e-3)).unwrap()[p];
            let off = scene.expected(&scene.drive, Exposure::new(0.0, 1e-3)).unwrap()[p];
            let edge = norm.edge_level.as_ref().unwrap()[p];
            assert!((c[kmax * n + p] - (1.0 - on / edge)).abs() < 1e-12);
            assert!((edge - off).abs() / off < 1e-4);
        }
    }
}
