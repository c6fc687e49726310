//! Person localization from a point cloud and instance masks, and track
//! maintenance across frames.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Point2, Sample, Trajectory};

pub const DEFAULT_K_MIN: usize = 3;
pub const DEFAULT_GATE_PX: f64 = 40.0;
pub const DEFAULT_STALE_AFTER: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("no point lies in front of the camera")]
    EmptyProjection,
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("mask {instance_id} has a pixel outside the {width}x{height} image")]
    MaskBounds { instance_id: u64, width: u32, height: u32 },
    #[error("frame time {t} is not after the last observation at {last}")]
    TimeOrder { t: f64, last: f64 },
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal_length: f64,
    pub principal_point: (f64, f64),
    pub image_size: (u32, u32),
    /// Sensor frame to camera frame.
    pub extrinsic: RigidTransform,
}

impl CameraModel {
    pub fn new(
        focal_length: f64,
        principal_point: (f64, f64),
        image_size: (u32, u32),
        extrinsic: RigidTransform,
    ) -> Result<Self, PerceptionError> {
        if !(focal_length > 0.0 && focal_length.is_finite()) {
            return Err(PerceptionError::Camera(format!("focal length {focal_length}")));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(PerceptionError::Camera(format!("image size {image_size:?}")));
        }
        Ok(Self { focal_length, principal_point, image_size, extrinsic })
    }

    /// Forward-looking camera on a planar robot: sensor x forward, y left,
    /// z up; camera X right, Y down, Z forward. `height` is how far the
    /// camera sits above the sensor origin.
    pub fn forward_facing(focal_length: f64, image_size: (u32, u32), height: f64) -> Self {
        let rotation = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        Self {
            focal_length,
            principal_point: (image_size.0 as f64 / 2.0, image_size.1 as f64 / 2.0),
            image_size,
            extrinsic: RigidTransform { rotation, translation: [0.0, height, 0.0] },
        }
    }

    fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.image_size.0 as f64 && v < self.image_size.1 as f64
    }
}

/// A projected point and the index of its source point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub index: usize,
}

impl Projection {
    pub fn pixel(&self) -> (u32, u32) {
        (self.u.floor() as u32, self.v.floor() as u32)
    }
}

/// Mean camera depth of the points in front of the camera.
pub fn mean_depth(points: &[[f64; 3]], cam: &CameraModel) -> Option<f64> {
    let depths: Vec<f64> = points.iter().map(|p| cam.extrinsic.apply(*p)[2]).filter(|&z| z > 0.0).collect();
    (!depths.is_empty()).then(|| depths.iter().sum::<f64>() / depths.len() as f64)
}

/// Projects with every point at the shared mean depth of the in-front
/// points; behind-camera and out-of-image points are dropped.
pub fn project_weak_perspective(points: &[[f64; 3]], cam: &CameraModel) -> Result<Vec<Projection>, PerceptionError> {
    let zbar = mean_depth(points, cam).ok_or(PerceptionError::EmptyProjection)?;
    Ok(project_at_depth(points, cam, zbar))
}

/// Weak-perspective projection at a given shared depth.
pub fn project_at_depth(points: &[[f64; 3]], cam: &CameraModel, zbar: f64) -> Vec<Projection> {
    let (cx, cy) = cam.principal_point;
    points
        .iter()
        .enumerate()
        .filter_map(|(index, p)| {
            let c = cam.extrinsic.apply(*p);
            if c[2] <= 0.0 {
                return None;
            }
            let u = cam.focal_length * c[0] / zbar + cx;
            let v = cam.focal_length * c[1] / zbar + cy;
            cam.in_image(u, v).then_some(Projection { u, v, index })
        })
        .collect()
}

/// One horizontal run of mask pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Run {
    pub row: u32,
    pub start: u32,
    pub len: u32,
}

/// Instance mask stored as sorted, non-overlapping row runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub instance_id: u64,
    pub runs: Vec<Run>,
}

impl Mask {
    pub fn from_pixels(instance_id: u64, pixels: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut px: Vec<(u32, u32)> = pixels.into_iter().map(|(u, v)| (v, u)).collect();
        px.sort_unstable();
        px.dedup();
        let mut runs: Vec<Run> = Vec::new();
        for (row, u) in px {
            match runs.last_mut() {
                Some(r) if r.row == row && r.start + r.len == u => r.len += 1,
                _ => runs.push(Run { row, start: u, len: 1 }),
            }
        }
        Self { instance_id, runs }
    }

    /// Filled axis-aligned rectangle, inclusive bounds.
    pub fn rect(instance_id: u64, u0: u32, v0: u32, u1: u32, v1: u32) -> Self {
        let runs = (v0..=v1).map(|row| Run { row, start: u0, len: u1 - u0 + 1 }).collect();
        Self { instance_id, runs }
    }

    pub fn contains(&self, u: u32, v: u32) -> bool {
        let i = self.runs.partition_point(|r| (r.row, r.start) <= (v, u));
        i > 0 && {
            let r = self.runs[i - 1];
            r.row == v && u < r.start + r.len
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.runs.iter().map(|r| r.len as usize).sum()
    }

    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.runs.iter().flat_map(|r| (r.start..r.start + r.len).map(move |u| (u, r.row)))
    }

    /// Mean pixel coordinate.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.pixel_count();
        if n == 0 {
            return None;
        }
        let (mut su, mut sv) = (0.0, 0.0);
        for r in &self.runs {
            let len = r.len as f64;
            su += len * (r.start as f64 + (len - 1.0) / 2.0);
            sv += len * r.row as f64;
        }
        Some((su / n as f64, sv / n as f64))
    }

    pub fn check_bounds(&self, width: u32, height: u32) -> Result<(), PerceptionError> {
        if self.runs.iter().all(|r| r.row < height && r.start as u64 + r.len as u64 <= width as u64) {
            Ok(())
        } else {
            Err(PerceptionError::MaskBounds { instance_id: self.instance_id, width, height })
        }
    }
}

/// Pixel displacements sampled on a regular grid of nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub spacing: u32,
    pub cols: u32,
    pub rows: u32,
    /// Row-major `(du, dv)` per node; node `(i, j)` sits at pixel
    /// `(i·spacing, j·spacing)`.
    pub vectors: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zeros(spacing: u32, image_size: (u32, u32)) -> Self {
        let cols = image_size.0.div_ceil(spacing).max(1);
        let rows = image_size.1.div_ceil(spacing).max(1);
        Self { spacing, cols, rows, vectors: vec![[0.0; 2]; (cols * rows) as usize] }
    }

    fn node(&self, u: f64, v: f64) -> usize {
        let s = self.spacing as f64;
        let i = ((u / s).round().max(0.0) as u32).min(self.cols - 1);
        let j = ((v / s).round().max(0.0) as u32).min(self.rows - 1);
        (j * self.cols + i) as usize
    }

    /// Displacement at the node nearest to `(u, v)`.
    pub fn at(&self, u: f64, v: f64) -> [f64; 2] {
        self.vectors[self.node(u, v)]
    }

    pub fn set_nearest(&mut self, u: f64, v: f64, d: [f64; 2]) {
        let k = self.node(u, v);
        self.vectors[k] = d;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub t: f64,
    /// Points in the sensor frame, meters.
    pub points: Vec<[f64; 3]>,
    pub masks: Vec<Mask>,
    pub flow: Option<FlowField>,
}

/// A localized person.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub instance_id: u64,
    /// Ground-plane position in the sensor frame.
    pub position: Point2,
    pub pixel_centroid: (f64, f64),
    pub support: usize,
}

/// Ground-plane centroid of the points projecting onto each mask. Masks
/// catching fewer than `k_min` points yield nothing. Output is ordered by
/// instance id.
pub fn localize_instances(frame: &SensorFrame, cam: &CameraModel, k_min: usize) -> Vec<Detection> {
    let Ok(proj) = project_weak_perspective(&frame.points, cam) else {
        return Vec::new();
    };
    let mut masks: Vec<&Mask> = frame.masks.iter().collect();
    masks.sort_by_key(|m| m.instance_id);
    let mut out = Vec::new();
    for mask in masks {
        let mut sum = [0.0; 2];
        let mut n = 0usize;
        for p in &proj {
            let (u, v) = p.pixel();
            if mask.contains(u, v) {
                let src = frame.points[p.index];
                sum[0] += src[0];
                sum[1] += src[1];
                n += 1;
            }
        }
        if n < k_min.max(1) {
            continue;
        }
        let Some(pixel_centroid) = mask.centroid() else { continue };
        out.push(Detection {
            instance_id: mask.instance_id,
            position: Point2::new(sum[0] / n as f64, sum[1] / n as f64),
            pixel_centroid,
            support: n,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Track {
    pub track_id: u64,
    pub trajectory: Trajectory,
    pub last_seen: f64,
    pub last_centroid_px: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    pub gate_px: f64,
    pub stale_after: f64,
    /// Nominal frame period; gaps that are whole multiples of it are
    /// bridged by linear interpolation.
    pub period: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { gate_px: DEFAULT_GATE_PX, stale_after: DEFAULT_STALE_AFTER, period: 0.4 }
    }
}

/// A detection handed to the tracker, already in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldDetection {
    pub instance_id: u64,
    pub position: Point2,
    pub pixel_centroid: (f64, f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssociationReport {
    /// `(track_id, instance_id)` pairs.
    pub matched: Vec<(u64, u64)>,
    pub spawned: Vec<u64>,
    pub retired: Vec<u64>,
}

/// Track store with never-reused ids.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub config: TrackerConfig,
    tracks: BTreeMap<u64, Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Self { config, tracks: BTreeMap::new(), next_id: 1 }
    }

    pub fn tracks(&self) -> impl Iterator<Item = &Track> {
        self.tracks.values()
    }

    pub fn get(&self, id: u64) -> Option<&Track> {
        self.tracks.get(&id)
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    /// Advects every track by the flow, matches detections greedily by
    /// pixel distance within the gate, spawns tracks for the rest and
    /// retires stale ones.
    pub fn associate(
        &mut self,
        detections: &[WorldDetection],
        flow: Option<&FlowField>,
        t: f64,
    ) -> Result<AssociationReport, PerceptionError> {
        if let Some(last) = self.tracks.values().map(|k| k.last_seen).reduce(f64::max) {
            if t <= last {
                return Err(PerceptionError::TimeOrder { t, last });
            }
        }
        let predicted: Vec<(u64, (f64, f64))> = self
            .tracks
            .values()
            .map(|k| {
                let (u, v) = k.last_centroid_px;
                let d = flow.map_or([0.0, 0.0], |f| f.at(u, v));
                (k.track_id, (u + d[0], v + d[1]))
            })
            .collect();
        let mut candidates = Vec::new();
        for (ti, (_, (u, v))) in predicted.iter().enumerate() {
            for (di, d) in detections.iter().enumerate() {
                let dist = (d.pixel_centroid.0 - u).hypot(d.pixel_centroid.1 - v);
                if dist <= self.config.gate_px {
                    candidates.push((dist, ti, di));
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; predicted.len()];
        let mut det_used = vec![false; detections.len()];
        let mut report = AssociationReport::default();
        for (_, ti, di) in candidates {
            if track_used[ti] || det_used[di] {
                continue;
            }
            track_used[ti] = true;
            det_used[di] = true;
            let id = predicted[ti].0;
            let det = detections[di];
            let period = self.config.period;
            let track = self.tracks.get_mut(&id).expect("known track");
            extend_track(track, det.position, t, period);
            track.last_seen = t;
            track.last_centroid_px = det.pixel_centroid;
            report.matched.push((id, det.instance_id));
        }
        for (di, det) in detections.iter().enumerate() {
            if det_used[di] {
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            self.tracks.insert(
                id,
                Track {
                    track_id: id,
                    trajectory: Trajectory::new(id, vec![Sample::new(t, det.position)]).expect("finite detection"),
                    last_seen: t,
                    last_centroid_px: det.pixel_centroid,
                },
            );
            report.spawned.push(id);
        }
        let stale = self.config.stale_after;
        let retired: Vec<u64> = self.tracks.values().filter(|k| t - k.last_seen > stale).map(|k| k.track_id).collect();
        for id in &retired {
            self.tracks.remove(id);
        }
        report.retired = retired;
        Ok(report)
    }
}

/// Appends an observation, bridging whole-period gaps by interpolation and
/// restarting the trajectory when the gap does not fit the period.
fn extend_track(track: &mut Track, p: Point2, t: f64, period: f64) {
    let last = *track.trajectory.last();
    let steps = (t - last.t) / period;
    let k = steps.round();
    let fits = k >= 1.0 && (steps - k).abs() < 1e-6;
    if fits {
        let k = k as usize;
        for i in 1..k {
            let s = i as f64 / k as f64;
            let ts = last.t + period * i as f64;
            if track.trajectory.push(Sample::new(ts, last.p.lerp(&p, s))).is_err() {
                break;
            }
        }
        let ts = last.t + period * k as f64;
        if track.trajectory.push(Sample::new(ts, p)).is_ok() {
            return;
        }
    }
    track.trajectory = Trajectory::new(track.track_id, vec![Sample::new(t, p)]).expect("finite detection");
}
