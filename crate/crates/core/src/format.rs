//! On-disk artifacts. Every writer goes through a temp file in the target
//! directory and an atomic rename.
//!
//! Cube files (`.qdc`): 8-byte magic `QDISACUB`, u16 version, u32 header
//! length, a JSON header, then a little-endian payload laid out
//! `[layer][y][x]`. Raw integral counts are stored as u32, normalized
//! values as f32, and non-integral raw values (noiseless runs) as f64. A
//! normalized sweep cube carries one extra f64 layer of edge levels.
//! The same container holds frame stacks and reference images.
//!
//! Calibration maps: a JSON sidecar plus a binary index file (`QDISAMAP`,
//! u16 version, u32 pixel indices concatenated bin by bin).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::DataCube;
use crate::analysis::Spectrogram;
use crate::calibration::{CalibrationMap, Normalization, Spectrum};
use crate::camera::Frame;
use crate::error::{Error, Result};
use crate::nv::Branch;
use crate::scene::Reference;

pub const CUBE_MAGIC: &[u8; 8] = b"QDISACUB";
pub const MAP_MAGIC: &[u8; 8] = b"QDISAMAP";
pub const FORMAT_VERSION: u16 = 1;
const MAX_HEADER_BYTES: u32 = 256 << 20;

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CubeKind {
    Sweep,
    Frames,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Payload {
    U32,
    F32,
    F64,
}

impl Payload {
    fn size(self) -> usize {
        match self {
            Payload::U32 | Payload::F32 => 4,
            Payload::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeHeader {
    pub kind: CubeKind,
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub payload: Payload,
    pub normalized: bool,
    pub exposure_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_cycles: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_bins: Option<usize>,
    #[serde(default)]
    pub has_edge_level: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_axis_hz: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps_s: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_frames: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<bool>,
}

fn raw_payload(values: &[f64]) -> Payload {
    let integral = values.iter().all(|&v| v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0);
    if integral {
        Payload::U32
    } else {
        Payload::F64
    }
}

fn encode(values: &[f64], payload: Payload, out: &mut Vec<u8>) {
    out.reserve(values.len() * payload.size());
    for &v in values {
        match payload {
            Payload::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            Payload::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Payload::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

fn decode(bytes: &[u8], payload: Payload) -> Vec<f64> {
    match payload {
        Payload::U32 => bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Payload::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Payload::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    }
}

fn container(header: &CubeHeader, body: &[f64], extra: Option<&[f64]>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(14 + json.len() + body.len() * header.payload.size());
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    encode(body, header.payload, &mut out);
    if let Some(e) = extra {
        encode(e, Payload::F64, &mut out);
    }
    Ok(out)
}

fn open_container(path: &Path) -> Result<(CubeHeader, Vec<f64>, Option<Vec<f64>>)> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 14 || &bytes[..8] != CUBE_MAGIC {
        return Err(bad("not a cube file (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
    if hlen > MAX_HEADER_BYTES || 14 + hlen as usize > bytes.len() {
        return Err(bad("truncated header"));
    }
    let header: CubeHeader =
        serde_json::from_slice(&bytes[14..14 + hlen as usize]).map_err(|e| bad(&format!("header: {e}")))?;
    let n = header.width * header.height;
    let body_len = n * header.depth * header.payload.size();
    let extra_len = if header.has_edge_level { n * 8 } else { 0 };
    let rest = &bytes[14 + hlen as usize..];
    if rest.len() != body_len + extra_len {
        return Err(bad(&format!("payload is {} bytes, header implies {}", rest.len(), body_len + extra_len)));
    }
    let body = decode(&rest[..body_len], header.payload);
    let extra = header.has_edge_level.then(|| decode(&rest[body_len..], Payload::F64));
    Ok((header, body, extra))
}

pub fn encode_cube(cube: &DataCube) -> Result<Vec<u8>> {
    cube.validate()?;
    let payload = if cube.normalized { Payload::F32 } else { raw_payload(&cube.data) };
    let header = CubeHeader {
        kind: CubeKind::Sweep,
        width: cube.width,
        height: cube.height,
        depth: cube.n_seq(),
        payload,
        normalized: cube.normalized,
        exposure_s: cube.exposure_s,
        n_cycles: Some(cube.n_cycles_applied),
        edge_bins: Some(cube.edge_bins),
        has_edge_level: cube.edge_level.is_some(),
        freq_axis_hz: Some(cube.freq_axis_hz.clone()),
        timestamps_s: None,
        reference_frames: None,
        exact: None,
    };
    container(&header, &cube.data, cube.edge_level.as_deref())
}

pub fn write_cube(path: &Path, cube: &DataCube) -> Result<()> {
    write_atomic(path, &encode_cube(cube)?)
}

pub fn read_cube(path: &Path) -> Result<DataCube> {
    let (h, data, edge_level) = open_container(path)?;
    if h.kind != CubeKind::Sweep {
        return Err(Error::Format(format!("{} holds {:?}, not a sweep cube", path.display(), h.kind)));
    }
    let freq_axis_hz = h.freq_axis_hz.ok_or_else(|| Error::Format("sweep cube lacks freq_axis_hz".into()))?;
    if freq_axis_hz.len() != h.depth {
        return Err(Error::Format("freq_axis_hz length disagrees with depth".into()));
    }
    let cube = DataCube {
        width: h.width,
        height: h.height,
        freq_axis_hz,
        data,
        n_cycles_applied: h.n_cycles.unwrap_or(1),
        exposure_s: h.exposure_s,
        normalized: h.normalized,
        edge_level,
        edge_bins: h.edge_bins.unwrap_or(0),
    };
    cube.validate()?;
    Ok(cube)
}

/// Stack of same-shaped frames in one file.
pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<()> {
    let first = frames.first().ok_or_else(|| Error::Data("no frames to write".into()))?;
    let mut body = Vec::with_capacity(frames.len() * first.counts.len());
    for f in frames {
        if (f.width, f.height) != (first.width, first.height) || f.counts.len() != f.width * f.height {
            return Err(Error::Data(format!(
                "frame is {}x{}, stack is {}x{}",
                f.width, f.height, first.width, first.height
            )));
        }
        body.extend_from_slice(&f.counts);
    }
    let header = CubeHeader {
        kind: CubeKind::Frames,
        width: first.width,
        height: first.height,
        depth: frames.len(),
        payload: raw_payload(&body),
        normalized: false,
        exposure_s: first.exposure_s,
        n_cycles: None,
        edge_bins: None,
        has_edge_level: false,
        freq_axis_hz: None,
        timestamps_s: Some(frames.iter().map(|f| f.timestamp_s).collect()),
        reference_frames: None,
        exact: None,
    };
    write_atomic(path, &container(&header, &body, None)?)
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>> {
    let (h, body, _) = open_container(path)?;
    if h.kind != CubeKind::Frames {
        return Err(Error::Format(format!("{} holds {:?}, not frames", path.display(), h.kind)));
    }
    let ts = h.timestamps_s.unwrap_or_else(|| vec![0.0; h.depth]);
    if ts.len() != h.depth {
        return Err(Error::Format("timestamps_s length disagrees with depth".into()));
    }
    let n = h.width * h.height;
    Ok(ts
        .iter()
        .enumerate()
        .map(|(k, &t)| Frame {
            width: h.width,
            height: h.height,
            counts: body[k * n..(k + 1) * n].to_vec(),
            exposure_s: h.exposure_s,
            timestamp_s: t,
        })
        .collect())
}

/// Every frame file in `dir` (`*.qdc`), in timestamp order.
pub fn read_frames_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "qdc"))
        .collect();
    paths.sort();
    let mut frames = Vec::new();
    for p in paths {
        frames.extend(read_frames(&p)?);
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("no frame files in {}", dir.display())));
    }
    frames.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
    Ok(frames)
}

pub fn write_reference(path: &Path, r: &Reference) -> Result<()> {
    let header = CubeHeader {
        kind: CubeKind::Reference,
        width: r.width,
        height: r.height,
        depth: 1,
        payload: Payload::F64,
        normalized: false,
        exposure_s: r.exposure_s,
        n_cycles: None,
        edge_bins: None,
        has_edge_level: false,
        freq_axis_hz: None,
        timestamps_s: None,
        reference_frames: Some(r.n_frames),
        exact: Some(r.exact),
    };
    write_atomic(path, &container(&header, &r.counts_per_frame, None)?)
}

pub fn read_reference(path: &Path) -> Result<Reference> {
    let (h, body, _) = open_container(path)?;
    if h.kind != CubeKind::Reference || h.depth != 1 {
        return Err(Error::Format(format!("{} is not a reference image", path.display())));
    }
    Ok(Reference {
        width: h.width,
        height: h.height,
        counts_per_frame: body,
        exposure_s: h.exposure_s,
        n_frames: h.reference_frames.unwrap_or(1),
        exact: h.exact.unwrap_or(false),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapHeader {
    version: u16,
    width: usize,
    height: usize,
    branch: Branch,
    freq_axis_hz: Vec<u64>,
    n_p: Vec<usize>,
    valid: Vec<bool>,
    low_confidence: Vec<bool>,
    index_file: String,
}

/// Writes `<stem>.json` and `<stem>.idx` next to each other; `json_path`
/// names the sidecar.
pub fn write_map(json_path: &Path, map: &CalibrationMap) -> Result<()> {
    map.validate()?;
    let idx_path = json_path.with_extension("idx");
    let index_file = idx_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("bad map path {}", json_path.display())))?
        .to_string();
    let mut idx = Vec::with_capacity(10 + 4 * map.assigned());
    idx.extend_from_slice(MAP_MAGIC);
    idx.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for mask in &map.masks {
        for &i in mask {
            idx.extend_from_slice(&i.to_le_bytes());
        }
    }
    write_atomic(&idx_path, &idx)?;
    let header = MapHeader {
        version: FORMAT_VERSION,
        width: map.width,
        height: map.height,
        branch: map.branch,
        freq_axis_hz: map.freq_axis_hz.clone(),
        n_p: map.n_p.clone(),
        valid: map.valid.clone(),
        low_confidence: map.low_confidence.clone(),
        index_file,
    };
    write_json(json_path, &header)
}

pub fn read_map(json_path: &Path) -> Result<CalibrationMap> {
    let h: MapHeader = read_json(json_path)?;
    if h.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported map version {}", h.version)));
    }
    let idx_path = json_path.with_file_name(&h.index_file);
    let bytes = fs::read(&idx_path)?;
    if bytes.len() < 10 || &bytes[..8] != MAP_MAGIC {
        return Err(Error::Format(format!("{}: not a map index file", idx_path.display())));
    }
    let total: usize = h.n_p.iter().sum();
    let body = &bytes[10..];
    if body.len() != 4 * total {
        return Err(Error::Format(format!("map index holds {} bytes, n_p implies {}", body.len(), 4 * total)));
    }
    let mut it = body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()));
    let masks = h.n_p.iter().map(|&n| it.by_ref().take(n).collect()).collect();
    let map = CalibrationMap {
        width: h.width,
        height: h.height,
        branch: h.branch,
        freq_axis_hz: h.freq_axis_hz,
        masks,
        n_p: h.n_p,
        valid: h.valid,
        low_confidence: h.low_confidence,
    };
    map.validate()?;
    Ok(map)
}

pub const SPECTRUM_CSV_HEADER: &str = "frequency_hz,value,sigma,n_p,valid";

pub fn spectrum_csv(s: &Spectrum) -> String {
    let mut out = String::with_capacity(40 * s.len());
    out.push_str(SPECTRUM_CSV_HEADER);
    out.push('\n');
    for k in 0..s.len() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.freq_axis_hz[k], s.values[k], s.sigma[k], s.n_p[k], s.valid[k] as u8
        ));
    }
    out
}

pub fn write_spectrum_csv(path: &Path, s: &Spectrum) -> Result<()> {
    write_atomic(path, spectrum_csv(s).as_bytes())
}

/// The CSV does not carry normalization or timestamp; the caller supplies them.
pub fn read_spectrum_csv(path: &Path, normalization: Normalization, timestamp_s: f64) -> Result<Spectrum> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(SPECTRUM_CSV_HEADER) {
        return Err(Error::Format(format!("{}: missing spectrum CSV header", path.display())));
    }
    let mut s = Spectrum {
        freq_axis_hz: Vec::new(),
        values: Vec::new(),
        sigma: Vec::new(),
        n_p: Vec::new(),
        valid: Vec::new(),
        normalization,
        timestamp_s,
    };
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || Error::Format(format!("{} line {}: {line:?}", path.display(), i + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad());
        }
        s.freq_axis_hz.push(cols[0].parse().map_err(|_| bad())?);
        s.values.push(cols[1].parse().map_err(|_| bad())?);
        s.sigma.push(cols[2].parse().map_err(|_| bad())?);
        s.n_p.push(cols[3].parse().map_err(|_| bad())?);
        s.valid.push(match cols[4] {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        });
    }
    s.validate()?;
    Ok(s)
}

/// Header row `time_s,<frequencies>`, then one row per frame.
pub fn spectrogram_csv(g: &Spectrogram) -> String {
    let mut out = String::from("time_s");
    for f in &g.freq_axis_hz {
        out.push_str(&format!(",{f}"));
    }
    out.push('\n');
    for (t, row) in g.time_axis_s.iter().zip(&g.values) {
        out.push_str(&t.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_spectrogram_csv(path: &Path, g: &Spectrogram) -> Result<()> {
    write_atomic(path, spectrogram_csv(g).as_bytes())
}

pub fn read_spectrogram_csv(path: &Path) -> Result<Spectrogram> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let head = lines.next().ok_or_else(|| bad("empty file"))?;
    let mut cols = head.split(',');
    if cols.next() != Some("time_s") {
        return Err(bad("header must start with time_s"));
    }
    let freq_axis_hz = cols.map(|c| c.parse().map_err(|_| bad("bad frequency"))).collect::<Result<Vec<u64>>>()?;
    let mut g = Spectrogram { freq_axis_hz, time_axis_s: Vec::new(), values: Vec::new() };
    for line in lines.filter(|l| !l.is_empty()) {
        let mut it = line.split(',').map(|c| c.parse::<f64>().map_err(|_| bad("bad number")));
        g.time_axis_s.push(it.next().ok_or_else(|| bad("empty row"))??);
        let row = it.collect::<Result<Vec<f64>>>()?;
        if row.len() != g.freq_axis_hz.len() {
            return Err(bad("row length disagrees with header"));
        }
        g.values.push(row);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(normalized: bool, fractional: bool) -> DataCube {
        let data: Vec<f64> = (0..24).map(|i| if fractional { i as f64 + 0.25 } else { i as f64 }).collect();
        DataCube {
            width: 3,
            height: 2,
            freq_axis_hz: vec![10, 20, 30, 40],
            data,
            n_cycles_applied: 2,
            exposure_s: 1e-3,
            normalized,
            edge_level: normalized.then(|| vec![100.0; 6]),
            edge_bins: if normalized { 1 } else { 0 },
        }
    }

    #[test]
    fn cubes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (norm, frac) in [(false, false), (false, true), (true, true)] {
            let c = cube(norm, frac);
            let p = dir.path().join("c.qdc");
            write_cube(&p, &c).unwrap();
            let bytes = fs::read(&p).unwrap();
            assert_eq!(&bytes[..8], CUBE_MAGIC);
            assert_eq!(read_cube(&p).unwrap(), c);
        }
    }

    #[test]
    fn corrupt_cube_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.qdc");
        write_cube(&p, &cube(false, false)).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_cube(&p), Err(Error::Format(_))));
        fs::write(&p, b"NOTACUBE\x01\x00").unwrap();
        assert!(matches!(read_cube(&p), Err(Error::Format(_))));
    }

    #[test]
    fn frames_reference_and_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Frame> = (0..3)
            .map(|k| Frame {
                width: 2,
                height: 2,
                counts: vec![k as f64; 4],
                exposure_s: 2e-3,
                timestamp_s: k as f64 * 2e-3,
            })
            .collect();
        let p = dir.path().join("f.qdc");
        write_frames(&p, &frames).unwrap();
        assert_eq!(read_frames(&p).unwrap(), frames);

        let r = Reference {
            width: 2,
            height: 2,
            counts_per_frame: vec![1.5; 4],
            exposure_s: 2e-3,
            n_frames: 10,
            exact: false,
        };
        let rp = dir.path().join("r.qdc");
        write_reference(&rp, &r).unwrap();
        assert_eq!(read_reference(&rp).unwrap(), r);

        let map = CalibrationMap::from_masks(
            2,
            2,
            Branch::Plus,
            vec![5_000_000_000, 5_001_000_000],
            vec![vec![0, 2], vec![3]],
            3,
            &Default::default(),
        )
        .unwrap();
        let mp = dir.path().join("map.json");
        write_map(&mp, &map).unwrap();
        assert!(dir.path().join("map.idx").exists());
        assert_eq!(read_map(&mp).unwrap(), map);
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = Spectrum {
            freq_axis_hz: vec![1, 2, 3],
            values: vec![0.1, f64::NAN, 1.0 / 3.0],
            sigma: vec![0.01, f64::NAN, 0.02],
            n_p: vec![4, 0, 7],
            valid: vec![true, false, true],
            normalization: Normalization::Contrast,
            timestamp_s: 0.0,
        };
        let p = dir.path().join("s.csv");
        write_spectrum_csv(&p, &s).unwrap();
        let back = read_spectrum_csv(&p, Normalization::Contrast, 0.0).unwrap();
        assert_eq!(back.values[2], s.values[2]);
        assert!(back.values[1].is_nan());
        assert_eq!(back.valid, s.valid);

        let g = Spectrogram {
            freq_axis_hz: vec![7, 8],
            time_axis_s: vec![0.0, 0.002],
            values: vec![vec![0.5, 0.25], vec![0.0, 1e-9]],
        };
        let gp = dir.path().join("g.csv");
        write_spectrogram_csv(&gp, &g).unwrap();
        assert_eq!(read_spectrogram_csv(&gp).unwrap(), g);
        assert!(fs::read_to_string(&gp).unwrap().starts_with("time_s,7,8\n"));
    }
}
