use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qdisa::acquisition::{normalize_cube_with, NormalizeOptions, DEFAULT_EDGE_THRESHOLD_SIGMA};
use qdisa::analysis::{detect_tones, spectrogram};
use qdisa::calibration::{build_calibration, reconstruct_spectrum, CalibrationOptions, SpectrumMode};
use qdisa::format;
use qdisa::nv::Branch;
use qdisa::report::run_report;
use qdisa::scenario::ScenarioConfig;
use qdisa::{Error, Result};
use serde_json::json;

/// Name of the resolved config that `simulate` leaves next to its outputs.
const RESOLVED_CONFIG: &str = "scenario.json";

#[derive(Parser)]
#[command(name = "qdisa", version, about = "NV-diamond wide-field spectrum analyser simulator")]
struct Cli {
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario's sweep and frame capture and write the raw files.
    Simulate {
        /// Scenario JSON file or bundled scenario name.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Use expected counts instead of Poisson samples.
        #[arg(long)]
        noiseless: bool,
    },
    /// Normalize a sweep cube and build the pixel-to-frequency map.
    Calibrate {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scenario providing calibration options. Defaults to the one
        /// `simulate` wrote beside the cube, then to built-in defaults.
        #[arg(long)]
        config: Option<String>,
    },
    /// Reconstruct one frame's spectrum and detect tones.
    Analyze {
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// MW-off reference. Defaults to reference.qdc beside the map, then
        /// beside the frame's directory.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Frame within a multi-frame file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
        format: OutputFormat,
        #[arg(long, default_value_t = 3.0)]
        k_sigma: f64,
    },
    /// Stack the contrast spectra of a frame directory.
    Spectrogram {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
        format: OutputFormat,
    },
    /// Run a scenario's metric pipeline and print its metrics JSON.
    Report {
        /// Scenario JSON file or bundled scenario name.
        scenario: Option<String>,
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noiseless: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

fn load(spec: &str, seed: Option<u64>, noiseless: bool) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::resolve(spec)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.noiseless |= noiseless;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn simulate(spec: &str, out: &Path, seed: Option<u64>, noiseless: bool) -> Result<serde_json::Value> {
    let cfg = load(spec, seed, noiseless)?;
    if cfg.sweep.is_none() && cfg.frames.is_none() {
        return Err(Error::Config(format!("scenario {} has neither a sweep nor a frames section", cfg.name)));
    }
    create_dir(out)?;
    let scene = cfg.build_scene()?;
    let mut written = Vec::new();
    format::write_json(&out.join(RESOLVED_CONFIG), &cfg)?;
    written.push(out.join(RESOLVED_CONFIG));
    if cfg.sweep.is_some() {
        let cube = cfg.run_sweep(&scene)?;
        let p = out.join(&cfg.outputs.cube);
        format::write_cube(&p, &cube)?;
        written.push(p);
    }
    if cfg.frames.is_some() {
        let reference = cfg.capture_reference(&scene)?;
        let p = out.join(&cfg.outputs.reference);
        format::write_reference(&p, &reference)?;
        written.push(p);
        let dir = out.join(&cfg.outputs.frames_dir);
        create_dir(&dir)?;
        for (k, frame) in cfg.capture_frames(&scene)?.iter().enumerate() {
            let p = dir.join(format!("frame_{k:05}.qdc"));
            format::write_frames(&p, std::slice::from_ref(frame))?;
            written.push(p);
        }
    }
    Ok(json!({ "scenario": cfg.name, "written": written }))
}

fn calibrate(cube_path: &Path, out: &Path, config: Option<&str>) -> Result<serde_json::Value> {
    let cfg = match config {
        Some(c) => Some(ScenarioConfig::resolve(c)?),
        None => {
            let beside = cube_path.parent().unwrap_or(Path::new(".")).join(RESOLVED_CONFIG);
            if beside.exists() {
                Some(ScenarioConfig::load(&beside)?)
            } else {
                None
            }
        }
    };
    let (opts, norm_opts, map_name) = match &cfg {
        Some(c) => (c.calibration.options(&c.physics), Some(c.calibration.edge_threshold_sigma), c.outputs.map.clone()),
        None => (CalibrationOptions::default(), None, "map.json".to_string()),
    };
    let raw = format::read_cube(cube_path)?;
    let norm = if raw.normalized {
        raw
    } else {
        let edge_threshold_sigma = norm_opts.unwrap_or(Some(DEFAULT_EDGE_THRESHOLD_SIGMA));
        normalize_cube_with(&raw, &NormalizeOptions { edge_bins: raw.edge_bins, edge_threshold_sigma })?
    };
    let map = build_calibration(&norm, &opts)?;
    create_dir(out)?;
    let p = out.join(map_name);
    format::write_map(&p, &map)?;
    let valid: Vec<u64> = (0..map.n_bins()).filter(|&k| map.valid[k]).map(|k| map.freq_axis_hz[k]).collect();
    Ok(json!({
        "map": p,
        "width": map.width,
        "height": map.height,
        "branch": match map.branch { Branch::Minus => "minus", Branch::Plus => "plus" },
        "n_bins": map.n_bins(),
        "valid_bins": valid.len(),
        "f_lo_hz": valid.first(),
        "f_hi_hz": valid.last(),
        "assigned_fraction": map.assigned() as f64 / map.pixels() as f64,
    }))
}

/// First existing `reference.qdc` among the usual places.
fn find_reference(explicit: Option<&Path>, near: &[&Path]) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    near.iter()
        .flat_map(|p| {
            [
                p.parent().map(|d| d.join("reference.qdc")),
                p.parent().and_then(Path::parent).map(|d| d.join("reference.qdc")),
            ]
        })
        .flatten()
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config("no reference.qdc found; pass --reference".into()))
}

#[allow(clippy::too_many_arguments)]
fn analyze(
    frame_path: &Path,
    map_path: &Path,
    reference: Option<&Path>,
    index: usize,
    out: &Path,
    fmt: OutputFormat,
    k_sigma: f64,
) -> Result<serde_json::Value> {
    let map = format::read_map(map_path)?;
    let frames = format::read_frames(frame_path)?;
    let frame = frames
        .get(index)
        .ok_or_else(|| Error::Config(format!("frame index {index} out of range (file holds {})", frames.len())))?;
    map.check_shape("frame", frame.width, frame.height)?;
    let reference = format::read_reference(&find_reference(reference, &[map_path, frame_path])?)?;
    let spectrum = reconstruct_spectrum(frame, &map, SpectrumMode::Contrast(&reference))?;
    let tones = detect_tones(&spectrum, k_sigma)?;
    create_dir(out)?;
    let spectrum_path = match fmt {
        OutputFormat::Csv => {
            let p = out.join("spectrum.csv");
            format::write_spectrum_csv(&p, &spectrum)?;
            p
        }
        OutputFormat::Json => {
            let p = out.join("spectrum.json");
            format::write_json(&p, &spectrum)?;
            p
        }
    };
    let tones_path = out.join("tones.json");
    format::write_json(&tones_path, &tones)?;
    Ok(json!({ "spectrum": spectrum_path, "tones": tones_path, "detected": tones.len() }))
}

fn spectrogram_cmd(
    frames_dir: &Path,
    map_path: &Path,
    reference: Option<&Path>,
    out: &Path,
    fmt: OutputFormat,
) -> Result<serde_json::Value> {
    let map = format::read_map(map_path)?;
    let frames = format::read_frames_dir(frames_dir)?;
    if frames.is_empty() {
        return Err(Error::Data(format!("no frame files in {}", frames_dir.display())));
    }
    let probe = frames_dir.join("x");
    let reference = format::read_reference(&find_reference(reference, &[map_path, &probe])?)?;
    let g = spectrogram(&frames, &map, &reference)?;
    create_dir(out)?;
    let p = match fmt {
        OutputFormat::Csv => {
            let p = out.join("spectrogram.csv");
            format::write_spectrogram_csv(&p, &g)?;
            p
        }
        OutputFormat::Json => {
            let p = out.join("spectrogram.json");
            format::write_json(&p, &g)?;
            p
        }
    };
    Ok(json!({ "spectrogram": p, "rows": g.rows(), "cols": g.cols() }))
}

fn report(spec: &str, out: Option<&Path>, seed: Option<u64>, noiseless: bool) -> Result<serde_json::Value> {
    let cfg = load(spec, seed, noiseless)?;
    let metrics = serde_json::to_value(run_report(&cfg)?)?;
    let doc = json!({ "scenario": cfg.name, "metrics": metrics });
    if let Some(dir) = out {
        create_dir(dir)?;
        format::write_json(&dir.join(&cfg.outputs.metrics), &doc)?;
    }
    Ok(doc)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Simulate { config, out, seed, noiseless } => simulate(&config, &out, seed, noiseless),
        Command::Calibrate { cube, out, config } => calibrate(&cube, &out, config.as_deref()),
        Command::Analyze { frame, map, reference, index, out, format, k_sigma } => {
            analyze(&frame, &map, reference.as_deref(), index, &out, format, k_sigma)
        }
        Command::Spectrogram { frames, map, reference, out, format } => {
            spectrogram_cmd(&frames, &map, reference.as_deref(), &out, format)
        }
        Command::Report { scenario, config, out, seed, noiseless } => {
            let spec =
                scenario.or(config).ok_or_else(|| Error::Config("report needs a scenario name or --config".into()))?;
            report(&spec, out.as_deref(), seed, noiseless)
        }
    }
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut v = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() });
    match e {
        Error::ShapeMismatch { what, got, expected } => {
            v["what"] = json!(what);
            v["got"] = json!([got.0, got.1]);
            v["expected"] = json!([expected.0, expected.1]);
        }
        Error::Ambiguity { colliding_hz, .. } => v["colliding_hz"] = json!(colliding_hz),
        Error::EdgeResonance { pixels } => v["pixels"] = json!(pixels.len()),
        _ => {}
    }
    v
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let v = json!({ "error": "usage", "message": e.to_string().trim_end(), "exit_code": 2 });
            eprintln!("{v}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
