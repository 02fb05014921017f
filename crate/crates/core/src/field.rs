//! Static field of the spherical magnet over the imaged sensor plane.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nv::{field_for_frequency, resonance_frequencies, Branch, NvParams};

/// Any static field source that can be sampled at a world point (metres).
pub trait FieldSource: Sync {
    fn field_at(&self, point: &Vector3<f64>) -> Result<Vector3<f64>>;
}

/// Uniformly magnetized sphere centred at the origin. Outside the sphere
/// its field is exactly that of a point dipole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagnetDipole {
    pub radius_m: f64,
    /// |B| on the magnetization axis at the sphere surface.
    pub surface_pole_field_t: f64,
    pub magnetization_axis: [f64; 3],
}

pub const DEFAULT_RADIUS_M: f64 = 6.5e-3;
pub const DEFAULT_TOP_FREQUENCY_GHZ: f64 = 27.0;
pub const DEFAULT_CLOSEST_GAP_M: f64 = 0.5e-3;
pub const DEFAULT_MAX_SURFACE_FIELD_T: f64 = 1.5;

impl Default for MagnetDipole {
    /// K-13-C sized sphere whose pole field makes 27 GHz the plus-branch
    /// frequency at a 0.5 mm gap (about 1.08 T).
    fn default() -> Self {
        let b_s = calibrate_surface_field(
            DEFAULT_TOP_FREQUENCY_GHZ,
            DEFAULT_CLOSEST_GAP_M,
            DEFAULT_RADIUS_M,
            DEFAULT_MAX_SURFACE_FIELD_T,
            &NvParams::default(),
        )
        .expect("default calibration is reachable");
        Self { radius_m: DEFAULT_RADIUS_M, surface_pole_field_t: b_s, magnetization_axis: [1.0, 0.0, 0.0] }
    }
}

impl MagnetDipole {
    pub fn new(radius_m: f64, surface_pole_field_t: f64, axis: [f64; 3]) -> Result<Self> {
        let m = Self { radius_m, surface_pole_field_t, magnetization_axis: axis };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_m > 0.0 && self.radius_m.is_finite()) {
            return Err(Error::Config(format!("magnet radius must be > 0, got {}", self.radius_m)));
        }
        if !(self.surface_pole_field_t > 0.0 && self.surface_pole_field_t.is_finite()) {
            return Err(Error::Config(format!("surface pole field must be > 0, got {}", self.surface_pole_field_t)));
        }
        let n = Vector3::from(self.magnetization_axis).norm();
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("magnetization axis must be a unit vector, |m| = {n}")));
        }
        Ok(())
    }

    pub fn axis(&self) -> Vector3<f64> {
        Vector3::from(self.magnetization_axis)
    }

    /// On-axis field magnitude at distance `r` from the centre.
    pub fn on_axis_field(&self, r: f64) -> f64 {
        self.surface_pole_field_t * (self.radius_m / r).powi(3)
    }

    /// Distance from the centre at which the on-axis field equals `b`.
    pub fn on_axis_distance(&self, b: f64) -> f64 {
        self.radius_m * (self.surface_pole_field_t / b).cbrt()
    }
}

impl FieldSource for MagnetDipole {
    fn field_at(&self, point: &Vector3<f64>) -> Result<Vector3<f64>> {
        dipole_field(self, point)
    }
}

/// `B = B_s R^3 / 2 * [3 (m.r) r - m] / r^3`, which is `mu0/4pi [3(m.r)r - m]/r^3`
/// with the moment scaled so the on-axis surface field is `B_s`.
pub fn dipole_field(magnet: &MagnetDipole, point: &Vector3<f64>) -> Result<Vector3<f64>> {
    let r = point.norm();
    if !(r >= magnet.radius_m) {
        return Err(Error::Domain(format!(
            "point at {r:.6e} m lies inside the magnet of radius {:.6e} m",
            magnet.radius_m
        )));
    }
    let rhat = point / r;
    let m = magnet.axis();
    let k = 0.5 * magnet.surface_pole_field_t * (magnet.radius_m / r).powi(3);
    Ok(k * (3.0 * m.dot(&rhat) * rhat - m))
}

/// Pole field that puts the plus branch at `target_numax_ghz` on a pixel
/// `closest_distance_m` from the sphere surface.
pub fn calibrate_surface_field(
    target_numax_ghz: f64,
    closest_distance_m: f64,
    radius_m: f64,
    max_surface_field_t: f64,
    params: &NvParams,
) -> Result<f64> {
    if !(closest_distance_m >= 0.0) || !(radius_m > 0.0) {
        return Err(Error::Config("closest distance must be >= 0 and radius > 0".into()));
    }
    if !(target_numax_ghz > params.d_ghz) {
        return Err(Error::Calibration(format!(
            "target {target_numax_ghz} GHz needs zero or negative field (D = {} GHz)",
            params.d_ghz
        )));
    }
    let b_needed = (target_numax_ghz - params.d_ghz) / params.gamma_ghz_per_t;
    let b_s = b_needed * ((radius_m + closest_distance_m) / radius_m).powi(3);
    if b_s > max_surface_field_t {
        return Err(Error::Calibration(format!(
            "target {target_numax_ghz} GHz at {closest_distance_m} m needs B_s = {b_s:.4} T > bound {max_surface_field_t} T"
        )));
    }
    Ok(b_s)
}

/// Imaged strip of the diamond: its near edge sits on the magnetization
/// axis, x runs along that axis away from the magnet and y is transverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorGeometry {
    pub magnet_center_to_diamond_m: f64,
    pub active_area_um: (f64, f64),
    pub pixel_pitch_um: f64,
    pub magnetization_axis: [f64; 3],
    pub nv_axis: [f64; 3],
    pub transverse_axis: [f64; 3],
}

pub const DEFAULT_ACTIVE_AREA_UM: (f64, f64) = (530.0, 50.0);
pub const DEFAULT_PIXEL_PITCH_UM: f64 = 0.66;

impl SensorGeometry {
    pub fn new(magnet_center_to_diamond_m: f64) -> Self {
        Self {
            magnet_center_to_diamond_m,
            active_area_um: DEFAULT_ACTIVE_AREA_UM,
            pixel_pitch_um: DEFAULT_PIXEL_PITCH_UM,
            magnetization_axis: [1.0, 0.0, 0.0],
            nv_axis: [1.0, 0.0, 0.0],
            transverse_axis: [0.0, 1.0, 0.0],
        }
    }

    /// `(width, height)` in pixels: `floor(area / pitch)` per axis.
    pub fn grid_dims(&self) -> (usize, usize) {
        // the epsilon keeps exact multiples from flooring one pixel short
        let n = |len: f64| ((len / self.pixel_pitch_um) * (1.0 + 1e-12)).floor() as usize;
        (n(self.active_area_um.0), n(self.active_area_um.1))
    }

    pub fn validate(&self, magnet_radius_m: f64) -> Result<()> {
        if !(self.pixel_pitch_um > 0.0) {
            return Err(Error::Config("pixel pitch must be > 0".into()));
        }
        let (w, h) = self.grid_dims();
        if w == 0 || h == 0 {
            return Err(Error::Config(format!("active area {:?} um holds no pixel", self.active_area_um)));
        }
        for (name, v) in [("nv_axis", self.nv_axis), ("magnetization_axis", self.magnetization_axis)] {
            let n = Vector3::from(v).norm();
            if (n - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("{name} must be a unit vector, |v| = {n}")));
            }
        }
        if self.transverse().norm() < 0.5 {
            return Err(Error::Config("transverse axis is parallel to the magnetization axis".into()));
        }
        if !(self.magnet_center_to_diamond_m >= magnet_radius_m) {
            return Err(Error::Config(format!(
                "diamond edge at {} m is inside the magnet (radius {} m)",
                self.magnet_center_to_diamond_m, magnet_radius_m
            )));
        }
        Ok(())
    }

    fn transverse(&self) -> Vector3<f64> {
        let m = Vector3::from(self.magnetization_axis);
        let t = Vector3::from(self.transverse_axis);
        let t = t - m * m.dot(&t);
        t.try_normalize(1e-9).unwrap_or_else(Vector3::zeros)
    }

    /// World coordinate (metres) of the centre of pixel `(x, y)`.
    pub fn pixel_position(&self, x: usize, y: usize) -> Vector3<f64> {
        let (_, h) = self.grid_dims();
        let pitch = self.pixel_pitch_um * 1e-6;
        let along = self.magnet_center_to_diamond_m + (x as f64 + 0.5) * pitch;
        let across = (y as f64 + 0.5) * pitch - 0.5 * h as f64 * pitch;
        Vector3::from(self.magnetization_axis) * along + self.transverse() * across
    }

    /// Physical width of the pixel grid along x, metres.
    pub fn grid_width_m(&self) -> f64 {
        self.grid_dims().0 as f64 * self.pixel_pitch_um * 1e-6
    }
}

/// Where to put the diamond relative to the magnet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// Gap between sphere surface and the diamond's near edge.
    GapM(f64),
    /// On-axis field at the centre column.
    CenterFieldT(f64),
    /// Resonance of the centre column on a branch.
    CenterFrequency { hz: f64, branch: Branch },
}

impl Placement {
    /// Magnet-centre to near-edge distance for a strip of `width_m`.
    pub fn resolve(&self, magnet: &MagnetDipole, width_m: f64, params: &NvParams) -> Result<f64> {
        let d = match *self {
            Placement::GapM(gap) => magnet.radius_m + gap,
            Placement::CenterFieldT(b) => {
                if !(b > 0.0) {
                    return Err(Error::Config(format!("center field must be > 0, got {b}")));
                }
                magnet.on_axis_distance(b) - 0.5 * width_m
            }
            Placement::CenterFrequency { hz, branch } => {
                let b = field_for_frequency(hz, branch, params)?.b_nv_t;
                if !(b > 0.0) {
                    return Err(Error::Config(format!("{hz} Hz on {branch:?} needs zero field")));
                }
                magnet.on_axis_distance(b) - 0.5 * width_m
            }
        };
        if !(d >= magnet.radius_m) {
            return Err(Error::Config(format!("placement {self:?} puts the diamond inside the magnet")));
        }
        Ok(d)
    }
}

/// Per-pixel field projection and x-gradient, row-major `[y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_um: f64,
    pub b_nv_t: Vec<f64>,
    pub gradient_mhz_per_pixel: Vec<f64>,
}

impl FieldMap {
    /// Field map with precomputed projections; gradients follow from `gamma`.
    pub fn from_projection(
        width: usize,
        height: usize,
        pixel_pitch_um: f64,
        b_nv_t: Vec<f64>,
        params: &NvParams,
    ) -> Self {
        assert_eq!(b_nv_t.len(), width * height);
        let gamma_mhz = params.gamma_ghz_per_t * 1e3;
        let mut gradient = vec![0.0; width * height];
        if width > 1 {
            for y in 0..height {
                let row = &b_nv_t[y * width..(y + 1) * width];
                for x in 0..width {
                    let (a, b) = if x + 1 < width { (x, x + 1) } else { (x - 1, x) };
                    gradient[y * width + x] = gamma_mhz * (row[b] - row[a]).abs();
                }
            }
        }
        Self { width, height, pixel_pitch_um, b_nv_t, gradient_mhz_per_pixel: gradient }
    }

    /// Same projection on every pixel (zero gradient).
    pub fn uniform(width: usize, height: usize, pixel_pitch_um: f64, b_nv_t: f64) -> Self {
        let n = width * height;
        Self { width, height, pixel_pitch_um, b_nv_t: vec![b_nv_t; n], gradient_mhz_per_pixel: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gradient_mhz_per_um(&self, i: usize) -> f64 {
        self.gradient_mhz_per_pixel[i] / self.pixel_pitch_um
    }

    /// Resonance of every pixel on `branch`.
    pub fn branch_frequencies(&self, branch: Branch, params: &NvParams) -> Vec<f64> {
        self.b_nv_t
            .iter()
            .map(|&b| {
                let (m, p) = resonance_frequencies(b, params);
                match branch {
                    Branch::Minus => m,
                    Branch::Plus => p,
                }
            })
            .collect()
    }
}

/// Samples `source` at every pixel centre and projects on the NV axis.
pub fn field_map<S: FieldSource + ?Sized>(source: &S, geom: &SensorGeometry, params: &NvParams) -> Result<FieldMap> {
    let (w, h) = geom.grid_dims();
    let axis = Vector3::from(geom.nv_axis);
    let mut b = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            b.push(source.field_at(&geom.pixel_position(x, y))?.dot(&axis));
        }
    }
    Ok(FieldMap::from_projection(w, h, geom.pixel_pitch_um, b, params))
}

/// Constant field everywhere; test double for gradient-free scenes.
#[derive(Debug, Clone, Copy)]
pub struct UniformField(pub Vector3<f64>);

impl FieldSource for UniformField {
    fn field_at(&self, _point: &Vector3<f64>) -> Result<Vector3<f64>> {
        Ok(self.0)
    }
}

/// `B = direction * (b0 + slope * (p . direction))`; test double with an
/// exactly linear frequency encoding.
#[derive(Debug, Clone, Copy)]
pub struct LinearGradientField {
    pub direction: Vector3<f64>,
    pub b0_t: f64,
    pub slope_t_per_m: f64,
}

impl FieldSource for LinearGradientField {
    fn field_at(&self, point: &Vector3<f64>) -> Result<Vector3<f64>> {
        Ok(self.direction * (self.b0_t + self.slope_t_per_m * point.dot(&self.direction)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn magnet(b_s: f64) -> MagnetDipole {
        MagnetDipole::new(6.5e-3, b_s, [1.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn on_axis_and_equatorial_magnitudes() {
        let m = magnet(1.0);
        let r = m.radius_m;
        let at = |p: Vector3<f64>| dipole_field(&m, &p).unwrap().norm();
        assert!((at(Vector3::new(r, 0.0, 0.0)) - 1.0).abs() < 1e-15);
        assert!((at(Vector3::new(2.0 * r, 0.0, 0.0)) - 1.0 / 8.0).abs() < 1e-15);
        assert!((at(Vector3::new(0.0, 2.0 * r, 0.0)) - 1.0 / 16.0).abs() < 1e-15);
        // equatorial field points against the moment
        assert!(dipole_field(&m, &Vector3::new(0.0, 0.0, 2.0 * r)).unwrap().x < 0.0);
    }

    #[test]
    fn inside_sphere_is_rejected() {
        let m = magnet(1.0);
        assert!(matches!(dipole_field(&m, &Vector3::new(1e-3, 0.0, 0.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn surface_field_calibration() {
        let p = NvParams::default();
        let b = calibrate_surface_field(27.0, 0.0, 6.5e-3, 1.5, &p).unwrap();
        assert!((b - (27.0 - 2.87) / 28.0).abs() < 1e-12);
        assert!((b - 0.8618).abs() < 1e-4);
        let b = calibrate_surface_field(27.0, 0.5e-3, 6.5e-3, 1.5, &p).unwrap();
        assert!((b - 0.86178571 * (7.0f64 / 6.5).powi(3)).abs() < 1e-6);
        assert!((b - 1.077).abs() < 1e-3);
        assert!(matches!(calibrate_surface_field(2.87, 0.0, 6.5e-3, 1.5, &p), Err(Error::Calibration(_))));
        assert!(matches!(calibrate_surface_field(27.0, 5e-3, 6.5e-3, 1.5, &p), Err(Error::Calibration(_))));
    }

    #[test]
    fn grid_dims_floor() {
        let g = SensorGeometry::new(8e-3);
        assert_eq!(g.grid_dims(), (803, 75));
        let mut g2 = g.clone();
        g2.active_area_um = (6.6, 1.98);
        assert_eq!(g2.grid_dims(), (10, 3));
    }

    #[test]
    fn fig2b_like_span() {
        let p = NvParams::default();
        let m = MagnetDipole::default();
        let g = SensorGeometry::new(m.radius_m + 2e-3);
        let fm = field_map(&m, &g, &p).unwrap();
        let f = fm.branch_frequencies(Branch::Minus, &p);
        let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = f.iter().cloned().fold(0.0, f64::max);
        let span = hi - lo;
        assert!(span > 0.75e9 && span < 3.0e9, "span {span}");
        // b_nv decreases away from the magnet along every row
        for y in 0..fm.height {
            let row = &fm.b_nv_t[y * fm.width..(y + 1) * fm.width];
            assert!(row.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn perpendicular_nv_axis_matches_point_evaluations() {
        let p = NvParams::default();
        let m = MagnetDipole::default();
        let mut g = SensorGeometry::new(9e-3);
        g.active_area_um = (20.0, 20.0);
        g.nv_axis = [0.0, 1.0, 0.0];
        let fm = field_map(&m, &g, &p).unwrap();
        let (w, h) = g.grid_dims();
        let mut saw_pos = false;
        let mut saw_neg = false;
        for y in 0..h {
            for x in 0..w {
                let b = dipole_field(&m, &g.pixel_position(x, y)).unwrap();
                let v = fm.b_nv_t[y * w + x];
                assert_eq!(v, b.y);
                saw_pos |= v > 0.0;
                saw_neg |= v < 0.0;
            }
        }
        // the transverse component flips sign across the axis
        assert!(saw_pos && saw_neg);
    }

    #[test]
    fn uniform_stub_has_zero_gradient() {
        let p = NvParams::default();
        let mut g = SensorGeometry::new(0.0);
        g.active_area_um = (10.0, 5.0);
        let fm = field_map(&UniformField(Vector3::new(0.05, 0.0, 0.0)), &g, &p).unwrap();
        assert!(fm.gradient_mhz_per_pixel.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn placement_by_field_and_frequency() {
        let p = NvParams::default();
        let m = MagnetDipole::default();
        let w = 530e-6;
        let d = Placement::CenterFieldT(0.01).resolve(&m, w, &p).unwrap();
        assert!((m.on_axis_field(d + w / 2.0) - 0.01).abs() < 1e-12);
        let d = Placement::CenterFrequency { hz: 22e9, branch: Branch::Plus }.resolve(&m, w, &p).unwrap();
        let (_, plus) = resonance_frequencies(m.on_axis_field(d + w / 2.0), &p);
        assert!((plus - 22e9).abs() < 1.0);
        assert!(Placement::GapM(-1e-3).resolve(&m, w, &p).is_err());
    }
}
