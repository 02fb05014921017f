use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes shared by every pipeline stage.
///
/// The variants map onto the command-line exit codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// A value outside the domain of a physical formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// A scenario or operation parameter that fails validation.
    #[error("config error: {0}")]
    Config(String),

    /// Inputs with inconsistent shapes or states.
    #[error("data error: {0}")]
    Data(String),

    /// An image whose grid differs from the calibration map's.
    #[error("shape mismatch: {what} is {}x{} but calibration map is {}x{}", .got.0, .got.1, .expected.0, .expected.1)]
    ShapeMismatch { what: String, got: (usize, usize), expected: (usize, usize) },

    /// Magnet calibration could not reach the requested observable.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Output of a procedure is too poor to be trusted.
    #[error("quality error: {0}")]
    Quality(String),

    /// Edge bins of a sweep still contain resonant pixels.
    #[error("normalization error: edge bins resonate on {} pixel(s), first {:?}", .pixels.len(), &.pixels[..pixels.len().min(8)])]
    EdgeResonance { pixels: Vec<usize> },

    /// No dip above the noise floor.
    #[error("no peak: deepest dip {depth:.3e} is below {threshold:.3e}")]
    NoPeak { depth: f64, threshold: f64 },

    /// Least squares stopped without meeting the convergence criterion.
    #[error("fit did not converge after {iterations} iterations, last (a, b, c) = {last:?}")]
    NoConvergence { iterations: usize, last: [f64; 3] },

    /// Requested window cannot be unambiguously assigned.
    #[error("ambiguous band: {reason}")]
    Ambiguity { reason: String, colliding_hz: Vec<(u64, u64)> },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error: 2 config, 3 data, 4 quality.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Domain(_) | Error::Data(_) | Error::ShapeMismatch { .. } | Error::Format(_) | Error::Io(_) => 3,
            Error::Calibration(_)
            | Error::Quality(_)
            | Error::EdgeResonance { .. }
            | Error::NoPeak { .. }
            | Error::NoConvergence { .. }
            | Error::Ambiguity { .. } => 4,
        }
    }

    /// Stable machine-readable class name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Calibration(_) => "calibration",
            Error::Quality(_) => "quality",
            Error::EdgeResonance { .. } => "edge_resonance",
            Error::NoPeak { .. } => "no_peak",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Ambiguity { .. } => "ambiguity",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
