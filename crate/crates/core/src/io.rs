//! On-disk formats: scene JSON Lines with binary point files, label CSV,
//! feature grids, and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{fmt_sig, IouHistogram};
use crate::geometry::{OrientedBox3, Point3};
use crate::licl::FeatureGrid;
use crate::prelim::{LabelOrigin, ScoredLabel};
use crate::scene::{AgentPose, Extent, PointCloud, SceneFrame};

pub const PTS_MAGIC: [u8; 8] = *b"CLPTS\0\0\x01";
pub const GRID_MAGIC: [u8; 4] = *b"FGRD";
pub const LABEL_HEADER: &str = "frame_id,cx,cy,cz,l,w,h,yaw,score,origin";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io { path: path.to_path_buf(), source }
    }

    fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        IoError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
    }

    fn format(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Format { path: path.to_path_buf(), msg: msg.into() }
    }
}

/// Writes through a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| IoError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| IoError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| IoError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| IoError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

pub fn encode_pts(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + cloud.len() * 12);
    out.extend_from_slice(&PTS_MAGIC);
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for p in &cloud.points {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pts(bytes: &[u8], path: &Path) -> Result<PointCloud, IoError> {
    if bytes.len() < 16 || bytes[..8] != PTS_MAGIC {
        return Err(IoError::format(path, "missing CLPTS header"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[16..];
    if (body.len() as u64) != n.saturating_mul(12) {
        return Err(IoError::format(path, format!("header says {n} points but body has {} bytes", body.len())));
    }
    let f = |c: &[u8]| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
    let points = body.chunks_exact(12).map(|c| Point3::new(f(&c[0..4]), f(&c[4..8]), f(&c[8..12]))).collect();
    Ok(PointCloud::new(points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AgentRecord {
    id: u32,
    #[serde(rename = "box")]
    bbox: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CloudRecord {
    agent: u32,
    pts_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameRecord {
    frame_id: u64,
    extent: [f64; 4],
    agents: Vec<AgentRecord>,
    gt: Vec<[f64; 7]>,
    clouds: Vec<CloudRecord>,
    #[serde(default)]
    clutter: Vec<[f64; 7]>,
}

fn pts_name(frame_id: u64, agent: u32, kind: &str) -> String {
    format!("f{frame_id:05}_a{agent}{kind}.pts")
}

/// Writes `scene.jsonl`-style output: one JSON line per frame, point files
/// placed next to `jsonl_path` under `<stem>_pts/`.
pub fn write_scene(jsonl_path: &Path, frames: &[SceneFrame]) -> Result<(), IoError> {
    let stem = jsonl_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into());
    let pts_dir_name = format!("{stem}_pts");
    let base = jsonl_path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for f in frames {
        let mut clouds = Vec::new();
        for (i, (agent, cloud)) in f.agents.iter().zip(&f.clouds).enumerate() {
            let name = format!("{pts_dir_name}/{}", pts_name(f.frame_id, agent.agent_id, ""));
            write_atomic(&base.join(&name), &encode_pts(cloud))?;
            let ground_file = match f.ground.get(i) {
                Some(g) => {
                    let gname = format!("{pts_dir_name}/{}", pts_name(f.frame_id, agent.agent_id, "_ground"));
                    write_atomic(&base.join(&gname), &encode_pts(g))?;
                    Some(gname)
                }
                None => None,
            };
            clouds.push(CloudRecord { agent: agent.agent_id, pts_file: name, ground_file });
        }
        let rec = FrameRecord {
            frame_id: f.frame_id,
            extent: f.extent.to_array(),
            agents: f.agents.iter().map(|a| AgentRecord { id: a.agent_id, bbox: a.pose.to_array() }).collect(),
            gt: f.gt_boxes.iter().map(|b| b.to_array()).collect(),
            clouds,
            clutter: f.clutter.iter().map(|b| b.to_array()).collect(),
        };
        text.push_str(&serde_json::to_string(&rec).expect("frame record serializes"));
        text.push('\n');
    }
    write_atomic(jsonl_path, text.as_bytes())
}

fn parse_box(a: &[f64; 7], path: &Path, line: usize) -> Result<OrientedBox3, IoError> {
    OrientedBox3::from_array(*a).map_err(|e| IoError::parse(path, line, e.to_string()))
}

pub fn read_scene(jsonl_path: &Path) -> Result<Vec<SceneFrame>, IoError> {
    let text = read_text(jsonl_path)?;
    let base = jsonl_path.parent().unwrap_or(Path::new(""));
    let mut frames = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let ln = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(line).map_err(|e| IoError::parse(jsonl_path, ln, e.to_string()))?;
        let [x0, x1, y0, y1] = rec.extent;
        let agents = rec
            .agents
            .iter()
            .map(|a| Ok(AgentPose { agent_id: a.id, pose: parse_box(&a.bbox, jsonl_path, ln)? }))
            .collect::<Result<Vec<_>, IoError>>()?;
        let mut clouds = Vec::new();
        let mut ground = Vec::new();
        for (a, c) in agents.iter().zip(&rec.clouds) {
            if a.agent_id != c.agent {
                return Err(IoError::parse(jsonl_path, ln, format!("cloud for agent {} listed where agent {} expected", c.agent, a.agent_id)));
            }
            let p = base.join(&c.pts_file);
            clouds.push(decode_pts(&read_bytes(&p)?, &p)?);
            if let Some(g) = &c.ground_file {
                let p = base.join(g);
                ground.push(decode_pts(&read_bytes(&p)?, &p)?);
            }
        }
        if clouds.len() != agents.len() {
            return Err(IoError::parse(jsonl_path, ln, format!("{} agents but {} clouds", agents.len(), clouds.len())));
        }
        let frame = SceneFrame {
            frame_id: rec.frame_id,
            extent: Extent::new(x0, x1, y0, y1),
            agents,
            clouds,
            ground,
            gt_boxes: rec.gt.iter().map(|b| parse_box(b, jsonl_path, ln)).collect::<Result<_, _>>()?,
            clutter: rec.clutter.iter().map(|b| parse_box(b, jsonl_path, ln)).collect::<Result<_, _>>()?,
        };
        frame.validate().map_err(|e| IoError::parse(jsonl_path, ln, e.to_string()))?;
        frames.push(frame);
    }
    Ok(frames)
}

/// Labels tagged with the frame they belong to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameLabel {
    pub frame_id: u64,
    pub label: ScoredLabel,
}

pub fn labels_to_csv(rows: &[FrameLabel]) -> String {
    let mut s = String::from(LABEL_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.frame_id.to_string());
        for v in r.label.bbox.to_array() {
            s.push(',');
            s.push_str(&fmt_sig(v, 9));
        }
        s.push(',');
        s.push_str(&fmt_sig(r.label.score, 9));
        s.push(',');
        s.push_str(r.label.origin.as_str());
        s.push('\n');
    }
    s
}

pub fn parse_labels_csv(text: &str, path: &Path) -> Result<Vec<FrameLabel>, IoError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == LABEL_HEADER => {}
        _ => return Err(IoError::parse(path, 1, format!("expected header '{LABEL_HEADER}'"))),
    }
    let mut out = Vec::new();
    for (k, line) in lines {
        let ln = k + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(IoError::parse(path, ln, format!("expected 10 columns, got {}", cols.len())));
        }
        let frame_id = cols[0].parse::<u64>().map_err(|e| IoError::parse(path, ln, format!("frame_id: {e}")))?;
        let mut v = [0.0; 8];
        for (i, c) in cols[1..9].iter().enumerate() {
            v[i] = c.parse::<f64>().map_err(|e| IoError::parse(path, ln, format!("column {}: {e}", i + 2)))?;
        }
        let bbox = OrientedBox3::from_array([v[0], v[1], v[2], v[3], v[4], v[5], v[6]]).map_err(|e| IoError::parse(path, ln, e.to_string()))?;
        let origin: LabelOrigin = cols[9].parse().map_err(|e: String| IoError::parse(path, ln, e))?;
        let label = ScoredLabel::new(bbox, v[7], origin).map_err(|e| IoError::parse(path, ln, e.to_string()))?;
        out.push(FrameLabel { frame_id, label });
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<FrameLabel>, IoError> {
    parse_labels_csv(&read_text(path)?, path)
}

/// Groups labels by frame in the order of `frames`; unknown frame ids are rejected.
pub fn group_labels(frames: &[SceneFrame], rows: &[FrameLabel], path: &Path) -> Result<Vec<Vec<ScoredLabel>>, IoError> {
    let mut out = vec![Vec::new(); frames.len()];
    let index: std::collections::HashMap<u64, usize> = frames.iter().enumerate().map(|(i, f)| (f.frame_id, i)).collect();
    for r in rows {
        let i = index.get(&r.frame_id).ok_or_else(|| IoError::format(path, format!("label references unknown frame {}", r.frame_id)))?;
        out[*i].push(r.label);
    }
    Ok(out)
}

pub fn flatten_labels(frames: &[SceneFrame], labels: &[Vec<ScoredLabel>]) -> Vec<FrameLabel> {
    frames
        .iter()
        .zip(labels)
        .flat_map(|(f, l)| l.iter().map(move |label| FrameLabel { frame_id: f.frame_id, label: *label }))
        .collect()
}

pub fn encode_grid(grid: &FeatureGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + grid.values().len() * 8);
    out.extend_from_slice(&GRID_MAGIC);
    for d in [grid.width(), grid.height(), grid.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in grid.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Grid files carry no extent, so the caller supplies it.
pub fn decode_grid(bytes: &[u8], extent: Extent, path: &Path) -> Result<FeatureGrid, IoError> {
    if bytes.len() < 16 || bytes[..4] != GRID_MAGIC {
        return Err(IoError::format(path, "missing FGRD header"));
    }
    let d = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (w, h, c) = (d(0), d(1), d(2));
    let body = &bytes[16..];
    if !body.len().is_multiple_of(8) {
        return Err(IoError::format(path, "truncated value block"));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    FeatureGrid::new(w, h, c, values, extent).map_err(|e| IoError::format(path, e.to_string()))
}

pub fn histogram_csv(h: &IouHistogram) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        s.push_str(&format!("{},{},{}\n", fmt_sig(h.edges[i], 6), fmt_sig(h.edges[i + 1], 6), c));
    }
    s
}
