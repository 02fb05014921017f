//! Lineshape fitting, tone detection, spectrograms and instrument metrics.

mod fit;
mod metrics;
mod tones;

pub use fit::{fit_odmr, hyperfine_resolved, model_partials, model_value, FitInit, FitResult, FitUncertainty};
pub use metrics::{dynamic_range, min_exposure, spectrogram, DynamicRange, PhotonBudget, Spectrogram};
pub use tones::{detect_tones, dip_values, merge_over_time, ToneEstimate};
