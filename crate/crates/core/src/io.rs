//! Trajnet++-style trajectory files and versioned weight files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gat::GatWeights;
use crate::geom::{Point2, Sample, Trajectory};
use crate::lstm::LstmWeights;

/// Frame rate assumed when a scene header omits `fps`.
pub const DEFAULT_FPS: f64 = 2.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajnetError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn perr(line: usize, reason: impl Into<String>) -> TrajnetError {
    TrajnetError::Parse { line, reason: reason.into() }
}

/// One scene window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scene {
    pub scene_id: u64,
    pub primary: u64,
    pub start_frame: i64,
    pub end_frame: i64,
    pub fps: f64,
    /// Frame-number step between consecutive samples.
    pub frame_stride: i64,
    /// Ordered by person id.
    pub trajectories: Vec<Trajectory>,
}

impl Scene {
    pub fn frame_of(&self, t: f64) -> i64 {
        self.start_frame + (t * self.fps).round() as i64 * self.frame_stride
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    id: u64,
    p: u64,
    s: i64,
    e: i64,
    fps: Option<f64>,
    /// Frame step between samples; inferred from the tracks when absent.
    stride: Option<i64>,
    #[allow(dead_code)]
    tag: Option<serde_json::Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackRecord {
    f: i64,
    p: u64,
    x: f64,
    y: f64,
    #[allow(dead_code)]
    prediction_number: Option<serde_json::Value>,
    #[allow(dead_code)]
    scene_id: Option<serde_json::Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
enum Record {
    #[serde(rename = "scene")]
    Scene(SceneRecord),
    #[serde(rename = "track")]
    Track(TrackRecord),
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 { a.abs() } else { gcd(b, a % b) }
}

/// Parses newline-delimited scene and track records. Every scene gets its
/// own copy of the tracks inside its frame window, so overlapping scenes
/// share observations. A person with a gap inside the window keeps only
/// the longest unbroken run (the earliest on ties).
pub fn parse_trajnet(text: &str) -> Result<Vec<Scene>, TrajnetError> {
    let mut headers = Vec::new();
    // (frame, ped) -> position, with the line it came from
    let mut tracks: BTreeMap<(i64, u64), (Point2, usize)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| perr(line, e.to_string()))?;
        match rec {
            Record::Scene(s) => {
                if s.e < s.s {
                    return Err(perr(line, format!("scene ends at frame {} before it starts at {}", s.e, s.s)));
                }
                let fps = s.fps.unwrap_or(DEFAULT_FPS);
                if !(fps > 0.0 && fps.is_finite()) {
                    return Err(perr(line, format!("fps must be positive, got {fps}")));
                }
                headers.push((line, s, fps));
            }
            Record::Track(t) => {
                let p = Point2::try_new(t.x, t.y).map_err(|e| perr(line, e.to_string()))?;
                match tracks.get(&(t.f, t.p)) {
                    Some((q, first)) if *q != p => {
                        return Err(perr(line, format!("person {} at frame {} conflicts with line {first}", t.p, t.f)));
                    }
                    Some(_) => {}
                    None => {
                        tracks.insert((t.f, t.p), (p, line));
                    }
                }
            }
        }
    }
    let mut scenes = Vec::with_capacity(headers.len());
    for (line, h, fps) in headers {
        let in_window: Vec<(i64, u64, Point2)> =
            tracks.range((h.s, 0)..=(h.e, u64::MAX)).map(|(&(f, p), &(q, _))| (f, p, q)).collect();
        if in_window.is_empty() {
            return Err(perr(line, format!("scene {} has no track records in frames {}..={}", h.id, h.s, h.e)));
        }
        let stride = match h.stride {
            Some(k) if k >= 1 => k,
            Some(k) => return Err(perr(line, format!("stride must be at least 1, got {k}"))),
            None => in_window.iter().fold(0, |g, &(f, _, _)| gcd(g, f - h.s)).max(1),
        };
        if let Some(&(f, _, _)) = in_window.iter().find(|r| (r.0 - h.s) % stride != 0) {
            return Err(perr(line, format!("frame {f} is off the stride-{stride} grid of scene {}", h.id)));
        }
        let mut per_ped: BTreeMap<u64, Vec<(i64, Point2)>> = BTreeMap::new();
        for (f, p, q) in in_window {
            per_ped.entry(p).or_default().push((f, q));
        }
        let mut trajectories = Vec::new();
        for (ped, obs) in per_ped {
            let mut best: &[(i64, Point2)] = &obs[..0];
            let mut start = 0;
            for k in 1..=obs.len() {
                if k == obs.len() || obs[k].0 - obs[k - 1].0 != stride {
                    if k - start > best.len() {
                        best = &obs[start..k];
                    }
                    start = k;
                }
            }
            let samples = best
                .iter()
                .map(|&(f, q)| Sample::new(((f - h.s) / stride) as f64 / fps, q))
                .collect();
            trajectories.push(Trajectory::new(ped, samples).map_err(|e| perr(line, e.to_string()))?);
        }
        scenes.push(Scene {
            scene_id: h.id,
            primary: h.p,
            start_frame: h.s,
            end_frame: h.e,
            fps,
            frame_stride: stride,
            trajectories,
        });
    }
    Ok(scenes)
}

/// Scene headers, then every distinct observation once, ordered by frame
/// and person.
pub fn write_trajnet(scenes: &[Scene]) -> String {
    let mut out = String::new();
    for s in scenes {
        let rec = serde_json::json!({"scene": {"id": s.scene_id, "p": s.primary, "s": s.start_frame, "e": s.end_frame, "fps": s.fps, "stride": s.frame_stride}});
        let _ = writeln!(out, "{rec}");
    }
    let mut seen = BTreeMap::new();
    for s in scenes {
        for t in &s.trajectories {
            for sample in t.samples() {
                seen.entry((s.frame_of(sample.t), t.ped_id())).or_insert(sample.p);
            }
        }
    }
    for ((f, p), q) in seen {
        let rec = serde_json::json!({"track": {"f": f, "p": p, "x": q.x, "y": q.y}});
        let _ = writeln!(out, "{rec}");
    }
    out
}

/// Packs trajectory lists into scenes on disjoint frame ranges with
/// globally unique person ids, ready for `write_trajnet`.
pub fn pack_scenes(scenes: &[Vec<Trajectory>], fps: f64) -> Vec<Scene> {
    let mut next_frame = 0i64;
    let mut next_id = 1u64;
    let mut out = Vec::new();
    for (k, trajs) in scenes.iter().enumerate() {
        if trajs.is_empty() {
            continue;
        }
        let t_end = trajs.iter().map(|t| t.last().t).fold(0.0, f64::max);
        let span = (t_end * fps).round() as i64;
        let relabelled: Vec<Trajectory> = trajs
            .iter()
            .map(|t| {
                let id = next_id;
                next_id += 1;
                Trajectory::new(id, t.samples().to_vec()).expect("valid source trajectory")
            })
            .collect();
        out.push(Scene {
            scene_id: k as u64,
            primary: relabelled[0].ped_id(),
            start_frame: next_frame,
            end_frame: next_frame + span,
            fps,
            frame_stride: 1,
            trajectories: relabelled,
        });
        next_frame += span + 1;
    }
    out
}

/// Scenes as plain trajectory lists.
pub fn scene_trajectories(scenes: &[Scene]) -> Vec<Vec<Trajectory>> {
    scenes.iter().map(|s| s.trajectories.clone()).collect()
}

pub const WEIGHTS_FORMAT: &str = "socnav-weights";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightsError {
    #[error("weights file is damaged: {0}")]
    Integrity(String),
    #[error("weights format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("expected {expected} weights, file holds {found}")]
    Kind { expected: String, found: String },
    #[error("weights are inconsistent: {0}")]
    Invalid(String),
}

/// Types that can be written as a weight file.
pub trait WeightsKind: Serialize + DeserializeOwned {
    const KIND: &'static str;
    fn check(&self) -> Result<(), String>;
}

impl WeightsKind for LstmWeights {
    const KIND: &'static str = "lstm_autoencoder";
    fn check(&self) -> Result<(), String> {
        self.validate().map_err(|e| e.to_string())
    }
}

impl WeightsKind for GatWeights {
    const KIND: &'static str = "gat_predictor";
    fn check(&self) -> Result<(), String> {
        self.validate().map_err(|e| e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    kind: String,
    sha256: String,
    payload: serde_json::Value,
}

fn digest(payload: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(payload).expect("json value serializes");
    Sha256::digest(&bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn weights_to_string<W: WeightsKind>(w: &W) -> String {
    let payload = serde_json::to_value(w).expect("weights serialize");
    let env = Envelope {
        format: WEIGHTS_FORMAT.into(),
        version: WEIGHTS_VERSION,
        kind: W::KIND.into(),
        sha256: digest(&payload),
        payload,
    };
    serde_json::to_string(&env).expect("envelope serializes")
}

pub fn weights_from_str<W: WeightsKind>(text: &str) -> Result<W, WeightsError> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| WeightsError::Integrity(e.to_string()))?;
    let found = v.get("version").and_then(|x| x.as_u64());
    if let Some(found) = found {
        if found != WEIGHTS_VERSION as u64 {
            return Err(WeightsError::VersionMismatch { found: found as u32, expected: WEIGHTS_VERSION });
        }
    }
    let env: Envelope = serde_json::from_value(v).map_err(|e| WeightsError::Integrity(e.to_string()))?;
    if env.format != WEIGHTS_FORMAT {
        return Err(WeightsError::Integrity(format!("unknown format tag {:?}", env.format)));
    }
    if env.kind != W::KIND {
        return Err(WeightsError::Kind { expected: W::KIND.into(), found: env.kind });
    }
    if digest(&env.payload) != env.sha256 {
        return Err(WeightsError::Integrity("checksum mismatch".into()));
    }
    let w: W = serde_json::from_value(env.payload).map_err(|e| WeightsError::Integrity(e.to_string()))?;
    w.check().map_err(WeightsError::Invalid)?;
    Ok(w)
}

#[derive(Debug, Error)]
pub enum FileError<E: std::error::Error + 'static> {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Content { path: String, source: E },
}

pub fn save_weights<W: WeightsKind>(w: &W, path: &std::path::Path) -> std::io::Result<()> {
    std::fs::write(path, weights_to_string(w))
}

pub fn load_weights<W: WeightsKind>(path: &std::path::Path) -> Result<W, FileError<WeightsError>> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| FileError::Io { path: p.clone(), source })?;
    weights_from_str(&text).map_err(|source| FileError::Content { path: p, source })
}

pub fn load_trajnet(path: &std::path::Path) -> Result<Vec<Scene>, FileError<TrajnetError>> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| FileError::Io { path: p.clone(), source })?;
    parse_trajnet(&text).map_err(|source| FileError::Content { path: p, source })
}

/// Distinct person ids over all scenes.
pub fn people(scenes: &[Scene]) -> BTreeSet<u64> {
    scenes.iter().flat_map(|s| s.trajectories.iter().map(|t| t.ped_id())).collect()
}
