//! Strict JSON scenario configs and the bundled figure scenarios.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acquisition::{
    normalize_cube_with, run_sweep, DataCube, NormalizeOptions, SweepConfig, DEFAULT_EDGE_THRESHOLD_SIGMA,
};
use crate::calibration::{
    build_calibration, CalibrationMap, CalibrationOptions, DEFAULT_MIN_ASSIGNED_FRACTION, DEFAULT_MIN_PIXELS_PER_BIN,
    DEFAULT_THRESHOLD_SIGMA,
};
use crate::camera::{Exposure, Frame, OpticsConfig, PixelOptics};
use crate::error::{Error, Result};
use crate::field::{
    calibrate_surface_field, field_map, MagnetDipole, Placement, SensorGeometry, DEFAULT_ACTIVE_AREA_UM,
    DEFAULT_CLOSEST_GAP_M, DEFAULT_MAX_SURFACE_FIELD_T, DEFAULT_PIXEL_PITCH_UM, DEFAULT_RADIUS_M,
    DEFAULT_TOP_FREQUENCY_GHZ,
};
use crate::nv::{Branch, MwDrive, NvParams};
use crate::report::ReportConfig;
use crate::scene::{child_seed, Reference, Scene};

/// Magnet settings; the pole field is calibrated to `top_frequency_ghz`
/// at `closest_gap_m` unless given explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagnetConfig {
    pub radius_m: f64,
    pub surface_pole_field_t: Option<f64>,
    pub magnetization_axis: [f64; 3],
    pub top_frequency_ghz: f64,
    pub closest_gap_m: f64,
    pub max_surface_field_t: f64,
}

impl Default for MagnetConfig {
    fn default() -> Self {
        Self {
            radius_m: DEFAULT_RADIUS_M,
            surface_pole_field_t: None,
            magnetization_axis: [1.0, 0.0, 0.0],
            top_frequency_ghz: DEFAULT_TOP_FREQUENCY_GHZ,
            closest_gap_m: DEFAULT_CLOSEST_GAP_M,
            max_surface_field_t: DEFAULT_MAX_SURFACE_FIELD_T,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub active_area_um: (f64, f64),
    pub pixel_pitch_um: f64,
    /// Defaults to the magnetization axis.
    pub nv_axis: Option<[f64; 3]>,
    pub transverse_axis: [f64; 3],
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            active_area_um: DEFAULT_ACTIVE_AREA_UM,
            pixel_pitch_um: DEFAULT_PIXEL_PITCH_UM,
            nv_axis: None,
            transverse_axis: [0.0, 1.0, 0.0],
        }
    }
}

/// Time series of single frames under the scenario drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramesConfig {
    pub count: usize,
    pub exposure_s: f64,
    #[serde(default)]
    pub start_s: f64,
    #[serde(default = "default_reference_frames")]
    pub reference_frames: u32,
}

fn default_reference_frames() -> u32 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub branch: Branch,
    pub threshold_sigma: f64,
    pub min_assigned_fraction: f64,
    pub min_pixels_per_bin: usize,
    /// `None` disables the edge-bin resonance check.
    pub edge_threshold_sigma: Option<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            branch: Branch::Minus,
            threshold_sigma: DEFAULT_THRESHOLD_SIGMA,
            min_assigned_fraction: DEFAULT_MIN_ASSIGNED_FRACTION,
            min_pixels_per_bin: DEFAULT_MIN_PIXELS_PER_BIN,
            edge_threshold_sigma: Some(DEFAULT_EDGE_THRESHOLD_SIGMA),
        }
    }
}

impl CalibrationConfig {
    pub fn options(&self, physics: &NvParams) -> CalibrationOptions {
        CalibrationOptions {
            threshold_sigma: self.threshold_sigma,
            min_assigned_fraction: self.min_assigned_fraction,
            min_pixels_per_bin: self.min_pixels_per_bin,
            branch: self.branch,
            physics: physics.clone(),
        }
    }
}

/// File names, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputsConfig {
    pub cube: String,
    pub reference: String,
    pub frames_dir: String,
    pub map: String,
    pub spectrum: String,
    pub tones: String,
    pub spectrogram: String,
    pub metrics: String,
}

impl Default for OutputsConfig {
    fn default() -> Self {
        Self {
            cube: "cube.qdc".into(),
            reference: "reference.qdc".into(),
            frames_dir: "frames".into(),
            map: "map.json".into(),
            spectrum: "spectrum".into(),
            tones: "tones.json".into(),
            spectrogram: "spectrogram".into(),
            metrics: "metrics.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noiseless: bool,
    #[serde(default)]
    pub magnet: MagnetConfig,
    pub placement: Placement,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub physics: NvParams,
    #[serde(default)]
    pub optics: OpticsConfig,
    #[serde(default)]
    pub drive: MwDrive,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub frames: Option<FramesConfig>,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub outputs: OutputsConfig,
    #[serde(default)]
    pub report: Option<ReportConfig>,
}

pub const BUNDLED: &[(&str, &str)] = &[
    ("fig2b", include_str!("../scenarios/fig2b.json")),
    ("fig3a", include_str!("../scenarios/fig3a.json")),
    ("fig3b", include_str!("../scenarios/fig3b.json")),
    ("fig3c", include_str!("../scenarios/fig3c.json")),
    ("fig4a", include_str!("../scenarios/fig4a.json")),
    ("fig4b", include_str!("../scenarios/fig4b.json")),
    ("fig5b", include_str!("../scenarios/fig5b.json")),
    ("snr_scaling", include_str!("../scenarios/snr_scaling.json")),
    ("dynamic_range", include_str!("../scenarios/dynamic_range.json")),
    ("temporal_resolution", include_str!("../scenarios/temporal_resolution.json")),
    ("calibration_round_trip", include_str!("../scenarios/calibration_round_trip.json")),
];

/// Seed offsets of the independent random streams of one scenario run.
const SWEEP_STREAM: u64 = 1;
const FRAMES_STREAM: u64 = 2;
const REFERENCE_STREAM: u64 = 3;
pub const REPORT_STREAM: u64 = 4;

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("no bundled scenario named {name:?}")))?;
        Self::from_json(text)
    }

    /// A path if it exists, otherwise a bundled scenario name.
    pub fn resolve(spec: &str) -> Result<Self> {
        let p = Path::new(spec);
        if p.exists() {
            Self::load(p)
        } else if BUNDLED.iter().any(|(n, _)| *n == spec) {
            Self::bundled(spec)
        } else {
            Err(Error::Config(format!("{spec:?} is neither a file nor a bundled scenario")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        self.optics.validate()?;
        self.drive.validate()?;
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        if let Some(f) = &self.frames {
            if f.count == 0 || !(f.exposure_s > 0.0) || f.reference_frames == 0 {
                return Err(Error::Config("frames need count >= 1, exposure_s > 0 and reference_frames >= 1".into()));
            }
        }
        let c = &self.calibration;
        if !(c.threshold_sigma >= 0.0) || !(0.0..=1.0).contains(&c.min_assigned_fraction) {
            return Err(Error::Config("calibration thresholds out of range".into()));
        }
        self.geometry()?;
        if let Some(r) = &self.report {
            r.validate()?;
        }
        Ok(())
    }

    pub fn magnet(&self) -> Result<MagnetDipole> {
        let m = &self.magnet;
        let b_s = match m.surface_pole_field_t {
            Some(b) => b,
            None => calibrate_surface_field(
                m.top_frequency_ghz,
                m.closest_gap_m,
                m.radius_m,
                m.max_surface_field_t,
                &self.physics,
            )?,
        };
        MagnetDipole::new(m.radius_m, b_s, m.magnetization_axis)
    }

    pub fn geometry(&self) -> Result<SensorGeometry> {
        let magnet = self.magnet()?;
        let g = &self.geometry;
        let mut geom = SensorGeometry {
            magnet_center_to_diamond_m: 0.0,
            active_area_um: g.active_area_um,
            pixel_pitch_um: g.pixel_pitch_um,
            magnetization_axis: magnet.magnetization_axis,
            nv_axis: g.nv_axis.unwrap_or(magnet.magnetization_axis),
            transverse_axis: g.transverse_axis,
        };
        geom.magnet_center_to_diamond_m = self.placement.resolve(&magnet, geom.grid_width_m(), &self.physics)?;
        geom.validate(magnet.radius_m)?;
        Ok(geom)
    }

    pub fn build_scene(&self) -> Result<Scene> {
        let magnet = self.magnet()?;
        let geom = self.geometry()?;
        let field = field_map(&magnet, &geom, &self.physics)?;
        let (w, h) = geom.grid_dims();
        let optics = PixelOptics::new(&self.optics, w, h, geom.pixel_pitch_um);
        Ok(Scene::new(field, self.physics.clone(), optics, self.drive.clone())?.noiseless(self.noiseless))
    }

    pub fn sweep_seed(&self) -> u64 {
        child_seed(self.seed, SWEEP_STREAM)
    }

    pub fn require_sweep(&self) -> Result<&SweepConfig> {
        self.sweep.as_ref().ok_or_else(|| Error::Config(format!("scenario {} has no sweep section", self.name)))
    }

    pub fn run_sweep(&self, scene: &Scene) -> Result<DataCube> {
        run_sweep(scene, self.require_sweep()?, self.sweep_seed())
    }

    pub fn normalize_options(&self, edge_bins: usize) -> NormalizeOptions {
        NormalizeOptions { edge_bins, edge_threshold_sigma: self.calibration.edge_threshold_sigma }
    }

    /// Sweep, normalize and build the calibration map.
    pub fn calibrate(&self, scene: &Scene) -> Result<(DataCube, CalibrationMap)> {
        let raw = self.run_sweep(scene)?;
        let norm = normalize_cube_with(&raw, &self.normalize_options(self.require_sweep()?.edge_bins))?;
        let map = build_calibration(&norm, &self.calibration.options(&self.physics))?;
        Ok((norm, map))
    }

    pub fn require_frames(&self) -> Result<&FramesConfig> {
        self.frames.as_ref().ok_or_else(|| Error::Config(format!("scenario {} has no frames section", self.name)))
    }

    /// The scenario's time series under its own drive.
    pub fn capture_frames(&self, scene: &Scene) -> Result<Vec<Frame>> {
        use rayon::prelude::*;
        let f = self.require_frames()?;
        let base = child_seed(self.seed, FRAMES_STREAM);
        (0..f.count)
            .into_par_iter()
            .map(|k| {
                let window = Exposure::new(f.start_s + k as f64 * f.exposure_s, f.exposure_s);
                scene.capture_signal(window, child_seed(base, k as u64))
            })
            .collect()
    }

    pub fn capture_reference(&self, scene: &Scene) -> Result<Reference> {
        let f = self.require_frames()?;
        scene.capture_reference(f.reference_frames, f.exposure_s, child_seed(self.seed, REFERENCE_STREAM))
    }
}
