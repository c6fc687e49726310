//! Deterministic world stepper tying perception, forecasting, planning and
//! the gesture loop together.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path as FsPath, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::Forecaster;
use crate::gat::{GatWeights, DEFAULT_WINDOW};
use crate::geom::{Point2, Trajectory};
use crate::gesture::{classify, GestureClass, GestureReferences, HandLandmarks};
use crate::grid::{Cell, OccupancyGrid};
use crate::io::{load_weights, WeightsError};
use crate::lstm::LstmWeights;
use crate::nav::{Mode, NavConfig, NavEvent, Navigator, Pose};
use crate::perception::{
    localize_instances, mean_depth, CameraModel, FlowField, Mask, SensorFrame, Tracker, TrackerConfig,
    WorldDetection,
};

pub const LOG_SCHEMA: &str = "socnav-episode";
pub const LOG_VERSION: u32 = 1;
pub const FRAME_SCHEMA: &str = "socnav-state";
pub const FRAME_VERSION: u32 = 1;
/// Ticks of path ahead the safety filter steers toward when it overrides.
const CARROT_STEPS: f64 = 10.0;

fn default_dt() -> f64 {
    0.08
}
fn default_max_ticks() -> u64 {
    2000
}
fn default_pipeline_every() -> u64 {
    5
}
fn default_resolution() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallSpec {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub origin: [f64; 2],
    /// Extent in meters.
    pub width: f64,
    pub height: f64,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default)]
    pub walls: Vec<WallSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub start: [f64; 2],
    #[serde(default)]
    pub heading: f64,
    pub goal: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PedestrianSpec {
    pub id: u64,
    pub waypoints: Vec<[f64; 2]>,
    pub speed: f64,
    /// Stands at the first waypoint until this tick.
    #[serde(default)]
    pub start_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionSpec {
    pub focal_length: f64,
    pub image_size: [u32; 2],
    /// Camera height above the scan plane.
    pub camera_height: f64,
    /// Scan plane height above the floor.
    pub scan_height: f64,
    pub body_height: f64,
    pub body_radius: f64,
    pub points_per_person: usize,
    pub point_noise: f64,
    pub max_range: f64,
    pub flow_spacing: u32,
    pub k_min: usize,
    pub gate_px: f64,
    pub stale_after: f64,
}

impl Default for PerceptionSpec {
    fn default() -> Self {
        Self {
            focal_length: 300.0,
            image_size: [640, 480],
            camera_height: 0.5,
            scan_height: 0.3,
            body_height: 1.7,
            body_radius: 0.2,
            points_per_person: 12,
            point_noise: 0.01,
            max_range: 10.0,
            flow_spacing: 16,
            k_min: crate::perception::DEFAULT_K_MIN,
            gate_px: crate::perception::DEFAULT_GATE_PX,
            stale_after: crate::perception::DEFAULT_STALE_AFTER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastModel {
    ConstantVelocity,
    Gat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSpec {
    pub model: ForecastModel,
    /// Weight files, relative to the scenario file.
    pub lstm: Option<PathBuf>,
    pub gat: Option<PathBuf>,
    pub horizon: usize,
}

impl Default for ForecastSpec {
    fn default() -> Self {
        Self { model: ForecastModel::ConstantVelocity, lstm: None, gat: None, horizon: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GestureSpec {
    pub threshold: f64,
}

impl Default for GestureSpec {
    fn default() -> Self {
        Self { threshold: crate::gesture::DEFAULT_THRESHOLD }
    }
}

/// Last-resort motion filter run every tick on the raw range scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetySpec {
    pub enabled: bool,
    /// Extra distance kept beyond the clearance.
    pub margin: f64,
    pub scan_range: f64,
    /// Ends the episode when closer than this.
    pub collision_distance: f64,
}

impl Default for SafetySpec {
    fn default() -> Self {
        Self { enabled: true, margin: 0.1, scan_range: 4.0, collision_distance: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepulsionSpec {
    pub gain: f64,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
    /// Ticks between perception and planning cycles.
    #[serde(default = "default_pipeline_every")]
    pub pipeline_every: u64,
    pub grid: GridSpec,
    pub robot: RobotSpec,
    #[serde(default)]
    pub pedestrians: Vec<PedestrianSpec>,
    #[serde(default)]
    pub nav: NavConfig,
    #[serde(default)]
    pub perception: PerceptionSpec,
    #[serde(default)]
    pub forecast: ForecastSpec,
    #[serde(default)]
    pub gesture: GestureSpec,
    #[serde(default)]
    pub safety: SafetySpec,
    /// Pedestrians sidestep the robot and each other when set.
    #[serde(default)]
    pub pedestrian_repulsion: Option<RepulsionSpec>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("forecast model: {0}")]
    Model(#[from] crate::io::FileError<WeightsError>),
}

fn cfg_err(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Config { path: path.into(), message: message.into() }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            cfg_err(if path == "." { "scenario".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn inside(&self, p: [f64; 2]) -> bool {
        let g = &self.grid;
        p[0] >= g.origin[0] && p[1] >= g.origin[1] && p[0] < g.origin[0] + g.width && p[1] < g.origin[1] + g.height
    }

    fn in_wall(&self, p: [f64; 2]) -> bool {
        self.grid.walls.iter().any(|w| p[0] >= w.min[0] && p[0] <= w.max[0] && p[1] >= w.min[1] && p[1] <= w.max[1])
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let positive = |v: f64, path: &str| {
            if v > 0.0 && v.is_finite() { Ok(()) } else { Err(cfg_err(path, format!("must be positive, got {v}"))) }
        };
        positive(self.dt, "dt")?;
        if self.pipeline_every == 0 {
            return Err(cfg_err("pipeline_every", "must be at least 1"));
        }
        let g = &self.grid;
        positive(g.resolution, "grid.resolution")?;
        positive(g.width, "grid.width")?;
        positive(g.height, "grid.height")?;
        let hi = [g.origin[0] + g.width, g.origin[1] + g.height];
        for (i, w) in g.walls.iter().enumerate() {
            let path = format!("grid.walls[{i}]");
            if w.min[0] > w.max[0] || w.min[1] > w.max[1] {
                return Err(cfg_err(path, "min corner exceeds max corner"));
            }
            if w.min[0] < g.origin[0] || w.min[1] < g.origin[1] || w.max[0] > hi[0] || w.max[1] > hi[1] {
                return Err(cfg_err(path, format!("wall {:?}..{:?} lies outside the grid {:?}..{hi:?}", w.min, w.max, g.origin)));
            }
        }
        for (name, p) in [("robot.start", self.robot.start), ("robot.goal", self.robot.goal)] {
            if !self.inside(p) {
                return Err(cfg_err(name, format!("{p:?} is outside the grid")));
            }
            if self.in_wall(p) {
                return Err(cfg_err(name, format!("{p:?} is inside a wall")));
            }
        }
        let mut ids = BTreeMap::new();
        for (i, ped) in self.pedestrians.iter().enumerate() {
            if let Some(j) = ids.insert(ped.id, i) {
                return Err(cfg_err(format!("pedestrians[{i}].id"), format!("id {} already used by pedestrians[{j}]", ped.id)));
            }
            if ped.waypoints.is_empty() {
                return Err(cfg_err(format!("pedestrians[{i}].waypoints"), "needs at least one waypoint"));
            }
            for (k, w) in ped.waypoints.iter().enumerate() {
                if !self.inside(*w) {
                    return Err(cfg_err(format!("pedestrians[{i}].waypoints[{k}]"), format!("{w:?} is outside the grid")));
                }
            }
            if !(ped.speed >= 0.0 && ped.speed.is_finite()) {
                return Err(cfg_err(format!("pedestrians[{i}].speed"), format!("must be non-negative, got {}", ped.speed)));
            }
        }
        let n = &self.nav;
        positive(n.speed, "nav.speed")?;
        positive(n.clearance, "nav.clearance")?;
        positive(n.predicted_radius, "nav.predicted_radius")?;
        positive(n.artificial_radius, "nav.artificial_radius")?;
        positive(n.goal_tolerance, "nav.goal_tolerance")?;
        if !(n.inflation >= 0.0) {
            return Err(cfg_err("nav.inflation", "must be non-negative"));
        }
        if n.lookahead == 0 {
            return Err(cfg_err("nav.lookahead", "must be at least 1"));
        }
        if !(n.straight_band >= 0.0) {
            return Err(cfg_err("nav.straight_band", "must be non-negative"));
        }
        let p = &self.perception;
        positive(p.focal_length, "perception.focal_length")?;
        if p.image_size[0] == 0 || p.image_size[1] == 0 {
            return Err(cfg_err("perception.image_size", "must be non-zero"));
        }
        if p.flow_spacing == 0 {
            return Err(cfg_err("perception.flow_spacing", "must be at least 1"));
        }
        positive(p.gate_px, "perception.gate_px")?;
        positive(p.stale_after, "perception.stale_after")?;
        if !(p.point_noise >= 0.0) {
            return Err(cfg_err("perception.point_noise", "must be non-negative"));
        }
        if self.forecast.horizon == 0 {
            return Err(cfg_err("forecast.horizon", "must be at least 1"));
        }
        if self.forecast.model == ForecastModel::Gat {
            if self.forecast.lstm.is_none() {
                return Err(cfg_err("forecast.lstm", "required by the gat model"));
            }
            if self.forecast.gat.is_none() {
                return Err(cfg_err("forecast.gat", "required by the gat model"));
            }
        }
        if !(self.gesture.threshold >= 0.0) {
            return Err(cfg_err("gesture.threshold", "must be non-negative"));
        }
        Ok(())
    }

    /// Loads the forecaster, resolving weight paths against `base`.
    pub fn forecaster(&self, base: &FsPath) -> Result<Forecaster, ScenarioError> {
        match self.forecast.model {
            ForecastModel::ConstantVelocity => Ok(Forecaster::ConstantVelocity),
            ForecastModel::Gat => {
                let lstm: LstmWeights = load_weights(&base.join(self.forecast.lstm.as_ref().expect("validated")))?;
                let gat: GatWeights = load_weights(&base.join(self.forecast.gat.as_ref().expect("validated")))?;
                Ok(Forecaster::Gat { gat, lstm })
            }
        }
    }

    /// Static occupancy with every cell whose center lies in a wall marked.
    pub fn build_grid(&self) -> OccupancyGrid {
        let g = &self.grid;
        let w = (g.width / g.resolution).round().max(1.0) as usize;
        let h = (g.height / g.resolution).round().max(1.0) as usize;
        let mut grid = OccupancyGrid::new(Point2::new(g.origin[0], g.origin[1]), g.resolution, w, h).expect("validated grid");
        for iy in 0..h {
            for ix in 0..w {
                let c = Cell { ix, iy };
                let p = grid.center(c);
                if self.in_wall([p.x, p.y]) {
                    grid.set_static(c, true);
                }
            }
        }
        grid
    }
}

/// Reads and validates a scenario file and loads its forecaster.
pub fn load_scenario(path: &FsPath) -> Result<(ScenarioConfig, Forecaster), ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    let cfg = ScenarioConfig::from_json(&text)?;
    let base = path.parent().unwrap_or(FsPath::new("."));
    let f = cfg.forecaster(base)?;
    Ok((cfg, f))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pedestrian {
    pub id: u64,
    pub position: Point2,
    pub velocity: Point2,
    pub next_waypoint: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirectiveInput {
    Class { class: GestureClass },
    Landmarks { landmarks: HandLandmarks },
}

/// One scripted directive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub tick: u64,
    #[serde(flatten)]
    pub directive: DirectiveInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Running,
    GoalReached,
    MaxTicks,
    Collision,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorldEvent {
    Directive { class: GestureClass, source: &'static str, person: Option<u64> },
    DirectiveFailed { class: GestureClass, error: String },
    DirectiveDropped { class: Option<GestureClass> },
    TrackSpawned { track_id: u64 },
    TrackRetired { track_id: u64 },
    PerceptionError { error: String },
    SafetyOverride { clearance: f64 },
    GoalReached,
    Collision { ped_id: u64, distance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum EventKind {
    Nav(NavEvent),
    World(WorldEvent),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRecord {
    /// Unique and increasing within an episode.
    pub id: u64,
    pub tick: u64,
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotView {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub mode: Mode,
    pub goal: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PedView {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackView {
    pub id: u64,
    pub points: Vec<[f64; 2]>,
}

/// Immutable snapshot handed to readers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateFrame {
    pub schema: &'static str,
    pub version: u32,
    pub scenario: String,
    pub tick: u64,
    pub t: f64,
    pub status: EpisodeStatus,
    pub bounds: [f64; 4],
    pub walls: Vec<WallSpec>,
    pub robot: RobotView,
    pub path: Vec<[f64; 2]>,
    pub previous_path: Option<Vec<[f64; 2]>>,
    pub pedestrians: Vec<PedView>,
    pub tracks: Vec<TrackView>,
    pub forecasts: Vec<TrackView>,
    pub artificial_cells: Vec<[f64; 2]>,
    /// Events raised during this tick.
    pub events: Vec<EventRecord>,
}

fn arr(p: Point2) -> [f64; 2] {
    [p.x, p.y]
}

/// Pixel box and centroid of the mask rendered for one person.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskBox {
    pub centroid: (f64, f64),
    /// Inclusive `[u0, v0, u1, v1]`.
    pub rect: [u32; 4],
}

pub type MaskBoxes = BTreeMap<u64, MaskBox>;

/// Renders the people in front of a robot at `pose` as one sensor frame:
/// scan returns from the half of each body facing the sensor, one box
/// mask per visible person, and flow from each person's box in `prev`.
/// Also returns this frame's boxes keyed by person id.
pub fn render_sensor_frame(
    t: f64,
    pose: Pose,
    people: &[(u64, Point2)],
    camera: &CameraModel,
    ps: &PerceptionSpec,
    prev: &MaskBoxes,
    rng: &mut ChaCha8Rng,
) -> (SensorFrame, MaskBoxes) {
    let (c, s) = (pose.heading.cos(), pose.heading.sin());
    let to_sensor = |p: Point2| {
        let d = p - pose.position;
        (c * d.x + s * d.y, -s * d.x + c * d.y)
    };
    let noise = Normal::new(0.0, ps.point_noise.max(1e-12)).expect("valid std");
    let mut points = Vec::new();
    let mut owners = Vec::new();
    for &(id, position) in people {
        let (x, y) = to_sensor(position);
        if x <= ps.body_radius || x.hypot(y) > ps.max_range {
            continue;
        }
        let facing = y.atan2(x) + std::f64::consts::PI;
        let n = ps.points_per_person.max(1);
        for k in 0..n {
            let a = facing - std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * (k as f64 + 0.5) / n as f64;
            let mut px = x + ps.body_radius * a.cos();
            let mut py = y + ps.body_radius * a.sin();
            if ps.point_noise > 0.0 {
                px += noise.sample(rng);
                py += noise.sample(rng);
            }
            points.push([px, py, 0.0]);
        }
        owners.push((id, x, y));
    }
    let mut boxes = MaskBoxes::new();
    let Some(zbar) = mean_depth(&points, camera) else {
        return (SensorFrame { t, points, masks: Vec::new(), flow: None }, boxes);
    };
    let (w, h) = camera.image_size;
    let (cx, cy) = camera.principal_point;
    let f = camera.focal_length;
    let mut masks = Vec::new();
    // nearer people first; instance ids carry no identity
    owners.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    for (id, x, y) in owners {
        // weak perspective at the scene depth, clipped to the image
        let r = ps.body_radius * 1.2;
        let a = camera.extrinsic.apply([x, y + r, ps.body_height - ps.scan_height]);
        let b = camera.extrinsic.apply([x, y - r, -ps.scan_height]);
        let u0 = (f * a[0] / zbar + cx).max(0.0);
        let u1 = (f * b[0] / zbar + cx).min(w as f64 - 1.0);
        let v0 = (f * a[1] / zbar + cy).max(0.0);
        let v1 = (f * b[1] / zbar + cy).min(h as f64 - 1.0);
        if u1 < u0 || v1 < v0 {
            continue;
        }
        let rect = [u0.floor() as u32, v0.floor() as u32, u1.floor() as u32, v1.floor() as u32];
        let mask = Mask::rect(masks.len() as u64 + 1, rect[0], rect[1], rect[2], rect[3]);
        let centroid = mask.centroid().expect("non-empty box");
        boxes.insert(id, MaskBox { centroid, rect });
        masks.push(mask);
    }
    let mut flow = FlowField::zeros(ps.flow_spacing, (w, h));
    let sp = ps.flow_spacing;
    for (id, old) in prev {
        if let Some(new) = boxes.get(id) {
            let d = [new.centroid.0 - old.centroid.0, new.centroid.1 - old.centroid.1];
            let r = old.rect;
            for j in r[1].div_ceil(sp)..=r[3] / sp {
                for i in r[0].div_ceil(sp)..=r[2] / sp {
                    flow.set_nearest((i * sp) as f64, (j * sp) as f64, d);
                }
            }
        }
    }
    (SensorFrame { t, points, masks, flow: Some(flow) }, boxes)
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: ScenarioConfig,
    tick: u64,
    status: EpisodeStatus,
    nav: Navigator,
    peds: Vec<Pedestrian>,
    tracker: Tracker,
    camera: CameraModel,
    forecaster: Forecaster,
    forecasts: Vec<Trajectory>,
    refs: GestureReferences,
    rng: ChaCha8Rng,
    pending: VecDeque<DirectiveInput>,
    /// Directives dropped upstream since the last tick.
    dropped: Vec<Option<GestureClass>>,
    prev_boxes: MaskBoxes,
    next_event_id: u64,
    tick_events: Vec<EventRecord>,
    log: Vec<String>,
    min_distance: f64,
    path_changed: bool,
}

impl World {
    pub fn new(config: ScenarioConfig, forecaster: Forecaster) -> Self {
        let grid = config.build_grid();
        let pose = Pose {
            position: Point2::new(config.robot.start[0], config.robot.start[1]),
            heading: config.robot.heading,
        };
        let goal = Point2::new(config.robot.goal[0], config.robot.goal[1]);
        let nav = Navigator::new(config.nav.clone(), grid, pose, goal);
        let peds = config
            .pedestrians
            .iter()
            .map(|p| Pedestrian {
                id: p.id,
                position: Point2::new(p.waypoints[0][0], p.waypoints[0][1]),
                velocity: Point2::ORIGIN,
                next_waypoint: 1.min(p.waypoints.len() - 1),
            })
            .collect();
        let ps = &config.perception;
        let camera = CameraModel::forward_facing(ps.focal_length, (ps.image_size[0], ps.image_size[1]), ps.camera_height);
        let tracker = Tracker::new(TrackerConfig {
            gate_px: ps.gate_px,
            stale_after: ps.stale_after,
            period: config.dt * config.pipeline_every as f64,
        });
        let header = serde_json::json!({
            "schema": LOG_SCHEMA,
            "version": LOG_VERSION,
            "scenario": config.name,
            "seed": config.seed,
            "dt": config.dt,
            "forecaster": forecaster.name(),
        });
        let mut w = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            tick: 0,
            status: EpisodeStatus::Running,
            nav,
            peds,
            tracker,
            camera,
            forecaster,
            forecasts: Vec::new(),
            refs: GestureReferences::builtin(),
            pending: VecDeque::new(),
            dropped: Vec::new(),
            prev_boxes: BTreeMap::new(),
            next_event_id: 1,
            tick_events: Vec::new(),
            log: vec![header.to_string()],
            min_distance: f64::INFINITY,
            path_changed: false,
        };
        w.min_distance = w.nearest_person().map_or(f64::INFINITY, |x| x.1);
        w
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.config.dt
    }

    pub fn status(&self) -> EpisodeStatus {
        self.status
    }

    pub fn navigator(&self) -> &Navigator {
        &self.nav
    }

    pub fn pedestrians(&self) -> &[Pedestrian] {
        &self.peds
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn forecasts(&self) -> &[Trajectory] {
        &self.forecasts
    }

    pub fn min_distance(&self) -> f64 {
        self.min_distance
    }

    pub fn log_lines(&self) -> &[String] {
        &self.log
    }

    /// Queues a directive for the start of the next tick.
    pub fn submit_directive(&mut self, d: DirectiveInput) {
        self.pending.push_back(d);
    }

    /// Records a directive that never reached the world; it shows up in
    /// the next tick's events.
    pub fn note_dropped(&mut self, d: &DirectiveInput) {
        self.dropped.push(match d {
            DirectiveInput::Class { class } => Some(*class),
            DirectiveInput::Landmarks { .. } => None,
        });
    }

    fn emit(&mut self, kind: EventKind) {
        let rec = EventRecord { id: self.next_event_id, tick: self.tick, t: self.time(), kind };
        self.next_event_id += 1;
        self.tick_events.push(rec);
    }

    fn emit_nav(&mut self, events: Vec<NavEvent>) {
        for e in events {
            if matches!(e, NavEvent::Replanned { .. }) {
                self.path_changed = true;
            }
            self.emit(EventKind::Nav(e));
        }
    }

    fn nearest_person(&self) -> Option<(u64, f64)> {
        let r = self.nav.state.pose.position;
        self.peds.iter().map(|p| (p.id, p.position.distance(&r))).min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Tracked person closest to the robot, as `(track id, position)`.
    fn gesturing_person(&self) -> Option<(u64, Point2)> {
        let r = self.nav.state.pose.position;
        self.tracker
            .tracks()
            .map(|t| (t.track_id, t.trajectory.last().p))
            .min_by(|a, b| a.1.distance(&r).total_cmp(&b.1.distance(&r)).then(a.0.cmp(&b.0)))
    }

    fn handle_directive(&mut self, d: DirectiveInput) {
        let (class, source) = match &d {
            DirectiveInput::Class { class } => (Ok(*class), "class"),
            DirectiveInput::Landmarks { landmarks } => {
                (classify(landmarks, &self.refs, self.config.gesture.threshold), "landmarks")
            }
        };
        let class = match class {
            Ok(c) => c,
            Err(e) => {
                self.emit(EventKind::World(WorldEvent::DirectiveFailed { class: GestureClass::Unknown, error: e.to_string() }));
                return;
            }
        };
        let person = self.gesturing_person();
        self.emit(EventKind::World(WorldEvent::Directive { class, source, person: person.map(|p| p.0) }));
        let now = self.time();
        match self.nav.apply_gesture(class, person, now) {
            Ok(ev) => self.emit_nav(ev),
            Err(e) => self.emit(EventKind::World(WorldEvent::DirectiveFailed { class, error: e.to_string() })),
        }
    }

    fn run_pipeline(&mut self) {
        let people: Vec<(u64, Point2)> = self.peds.iter().map(|p| (p.id, p.position)).collect();
        let (frame, boxes) = render_sensor_frame(
            self.time(),
            self.nav.state.pose,
            &people,
            &self.camera,
            &self.config.perception,
            &self.prev_boxes,
            &mut self.rng,
        );
        self.prev_boxes = boxes;
        let detections = localize_instances(&frame, &self.camera, self.config.perception.k_min);
        let pose = self.nav.state.pose;
        let (c, s) = (pose.heading.cos(), pose.heading.sin());
        let world: Vec<WorldDetection> = detections
            .iter()
            .map(|d| WorldDetection {
                instance_id: d.instance_id,
                position: Point2::new(
                    pose.position.x + c * d.position.x - s * d.position.y,
                    pose.position.y + s * d.position.x + c * d.position.y,
                ),
                pixel_centroid: d.pixel_centroid,
            })
            .collect();
        match self.tracker.associate(&world, frame.flow.as_ref(), frame.t) {
            Ok(rep) => {
                for track_id in rep.spawned {
                    self.emit(EventKind::World(WorldEvent::TrackSpawned { track_id }));
                }
                for track_id in rep.retired {
                    self.emit(EventKind::World(WorldEvent::TrackRetired { track_id }));
                }
            }
            Err(e) => self.emit(EventKind::World(WorldEvent::PerceptionError { error: e.to_string() })),
        }
        let window = match &self.forecaster {
            Forecaster::Gat { gat, .. } => gat.window,
            Forecaster::ConstantVelocity => DEFAULT_WINDOW,
        };
        let trajs: Vec<Trajectory> = self.tracker.tracks().map(|t| t.trajectory.tail(window)).collect();
        let period = self.tracker.config.period;
        let robot = self.nav.state.pose.position;
        self.forecasts = match self.forecaster.forecast(&trajs, robot, &self.nav.grid, self.config.forecast.horizon, period) {
            Ok(f) => f,
            Err(e) => {
                self.emit(EventKind::World(WorldEvent::PerceptionError { error: e.to_string() }));
                crate::forecast::constant_velocity(&trajs, self.config.forecast.horizon, period)
            }
        };
        let now = self.time();
        let preds = self.forecasts.clone();
        let ev = self.nav.on_forecasts(&preds, now);
        self.emit_nav(ev);
    }

    fn move_pedestrians(&mut self) {
        let dt = self.config.dt;
        let robot = self.nav.state.pose.position;
        let snapshot: Vec<Point2> = self.peds.iter().map(|p| p.position).collect();
        for (i, ped) in self.peds.iter_mut().enumerate() {
            let spec = &self.config.pedestrians[i];
            if self.tick < spec.start_tick {
                ped.velocity = Point2::ORIGIN;
                continue;
            }
            let mut step = spec.speed * dt;
            let mut pos = ped.position;
            // consume waypoints, carrying leftover distance into the next leg
            while step > 0.0 {
                let target = Point2::new(spec.waypoints[ped.next_waypoint][0], spec.waypoints[ped.next_waypoint][1]);
                let d = pos.distance(&target);
                if d > step {
                    pos = pos.lerp(&target, step / d);
                    break;
                }
                pos = target;
                step -= d;
                if ped.next_waypoint + 1 >= spec.waypoints.len() {
                    break;
                }
                ped.next_waypoint += 1;
            }
            if let Some(rep) = &self.config.pedestrian_repulsion {
                let mut push = Point2::ORIGIN;
                let others = snapshot.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| *q);
                for q in others.chain(std::iter::once(robot)) {
                    let d = ped.position.distance(&q);
                    if d > 1e-9 && d < rep.range {
                        push = push + (ped.position - q) * ((rep.range - d) / (rep.range * d));
                    }
                }
                pos = pos + push * (rep.gain * dt);
            }
            ped.velocity = (pos - ped.position) * (1.0 / dt);
            ped.position = pos;
        }
    }

    fn free_for_robot(&self, p: Point2) -> bool {
        self.nav.grid.cell_at(p).is_some_and(|c| !self.nav.grid.is_static(c))
    }

    /// Chooses the robot's motion for this tick. The path step is taken
    /// when everyone in the range scan stays beyond clearance plus margin
    /// next tick. Otherwise the robot takes the safe move that best closes
    /// on a point further along its path, holds still if none does, and
    /// backs off when even holding is unsafe.
    fn move_robot(&mut self) {
        let dt = self.config.dt;
        let pos = self.nav.state.pose.position;
        let desired = self.nav.desired_position(dt);
        if self.nav.state.mode == Mode::Waiting {
            return;
        }
        let safety = &self.config.safety;
        if !safety.enabled {
            if let Some(d) = desired {
                self.nav.commit_motion(d, true, dt);
            }
            return;
        }
        let scan: Vec<Point2> = self
            .peds
            .iter()
            .filter(|p| p.position.distance(&pos) <= safety.scan_range)
            .map(|p| p.position + p.velocity * dt)
            .collect();
        let clearance = |q: Point2| scan.iter().map(|p| p.distance(&q)).fold(f64::INFINITY, f64::min);
        let need = self.nav.config.clearance + safety.margin;
        let step = self.nav.config.speed * dt;
        let mut candidates = vec![pos];
        for k in 0..8 {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            candidates.push(Point2::new(pos.x + step * a.cos(), pos.y + step * a.sin()));
        }
        if let Some(d) = desired {
            if clearance(d) >= need {
                self.nav.commit_motion(d, true, dt);
                return;
            }
        }
        // a point further along the path so that sidesteps still make headway
        let carrot = self.nav.desired_position(dt * CARROT_STEPS).unwrap_or(pos);
        let admissible: Vec<Point2> = candidates.iter().copied().filter(|&q| q == pos || self.free_for_robot(q)).collect();
        let here = pos.distance(&carrot);
        let safe_progress = admissible
            .iter()
            .copied()
            .filter(|&q| q != pos && clearance(q) >= need && q.distance(&carrot) < here - 1e-9)
            .min_by(|a, b| a.distance(&carrot).total_cmp(&b.distance(&carrot)));
        let chosen = match safe_progress {
            Some(q) => q,
            None if clearance(pos) >= need => pos,
            None => admissible.iter().copied().max_by(|a, b| clearance(*a).total_cmp(&clearance(*b))).unwrap_or(pos),
        };
        if Some(chosen) != desired {
            let m = clearance(chosen);
            self.emit(EventKind::World(WorldEvent::SafetyOverride { clearance: m }));
            let near: Vec<Point2> = scan.iter().copied().filter(|p| p.distance(&pos) < need + 2.0 * step).collect();
            self.nav.note_blocked(near, need + 2.0 * self.nav.grid.resolution());
        }
        let followed = Some(chosen) == desired;
        if chosen != pos || followed {
            self.nav.commit_motion(chosen, followed, dt);
        } else if desired.is_some() {
            self.nav.commit_motion(pos, false, dt);
        }
    }

    /// Advances one tick: queued directives, then the perception and
    /// planning cycle when due, then motion.
    pub fn step(&mut self) -> StateFrame {
        if self.status != EpisodeStatus::Running {
            return self.frame();
        }
        self.tick_events.clear();
        self.path_changed = false;
        for class in std::mem::take(&mut self.dropped) {
            self.emit(EventKind::World(WorldEvent::DirectiveDropped { class }));
        }
        while let Some(d) = self.pending.pop_front() {
            self.handle_directive(d);
        }
        if self.tick % self.config.pipeline_every == 0 {
            self.run_pipeline();
        }
        self.move_pedestrians();
        self.move_robot();
        self.tick += 1;
        if let Some((ped_id, d)) = self.nearest_person() {
            self.min_distance = self.min_distance.min(d);
            if d < self.config.safety.collision_distance {
                self.status = EpisodeStatus::Collision;
                self.emit(EventKind::World(WorldEvent::Collision { ped_id, distance: d }));
            }
        }
        if self.status == EpisodeStatus::Running && self.nav.at_goal() {
            self.status = EpisodeStatus::GoalReached;
            self.emit(EventKind::World(WorldEvent::GoalReached));
        } else if self.status == EpisodeStatus::Running && self.tick >= self.config.max_ticks {
            self.status = EpisodeStatus::MaxTicks;
        }
        self.log_tick();
        self.frame()
    }

    fn log_tick(&mut self) {
        let r = &self.nav.state.pose;
        let mut rec = serde_json::json!({
            "tick": self.tick,
            "t": self.time(),
            "robot": {"x": r.position.x, "y": r.position.y, "heading": r.heading, "mode": self.nav.state.mode},
            "pedestrians": self.peds.iter().map(|p| serde_json::json!({"id": p.id, "x": p.position.x, "y": p.position.y})).collect::<Vec<_>>(),
            "events": self.tick_events,
        });
        if (self.tick - 1) % self.config.pipeline_every == 0 {
            rec["forecasts"] = serde_json::json!(self
                .forecasts
                .iter()
                .map(|f| TrackView { id: f.ped_id(), points: f.positions().map(arr).collect() })
                .collect::<Vec<_>>());
        }
        if self.path_changed {
            if let Some(p) = &self.nav.state.path {
                rec["path"] = serde_json::json!(p.points.iter().map(|q| arr(*q)).collect::<Vec<_>>());
            }
        }
        if self.status != EpisodeStatus::Running {
            rec["status"] = serde_json::json!(self.status);
            rec["min_distance"] = serde_json::json!(self.min_distance);
        }
        self.log.push(rec.to_string());
    }

    /// Snapshot of the current state with the events of the last tick.
    pub fn frame(&self) -> StateFrame {
        let st = &self.nav.state;
        let g = &self.config.grid;
        let grid = &self.nav.grid;
        StateFrame {
            schema: FRAME_SCHEMA,
            version: FRAME_VERSION,
            scenario: self.config.name.clone(),
            tick: self.tick,
            t: self.time(),
            status: self.status,
            bounds: [g.origin[0], g.origin[1], g.origin[0] + g.width, g.origin[1] + g.height],
            walls: g.walls.clone(),
            robot: RobotView {
                x: st.pose.position.x,
                y: st.pose.position.y,
                heading: st.pose.heading,
                mode: st.mode,
                goal: arr(st.goal),
            },
            path: self.nav.remaining_points().into_iter().map(arr).collect(),
            previous_path: st.last_pair.as_ref().map(|p| p.previous.iter().map(|q| arr(*q)).collect()),
            pedestrians: self.peds.iter().map(|p| PedView { id: p.id, x: p.position.x, y: p.position.y }).collect(),
            tracks: self
                .tracker
                .tracks()
                .map(|t| TrackView { id: t.track_id, points: t.trajectory.positions().map(arr).collect() })
                .collect(),
            forecasts: self
                .forecasts
                .iter()
                .map(|f| TrackView { id: f.ped_id(), points: f.positions().map(arr).collect() })
                .collect(),
            artificial_cells: grid.artificial_layer().into_iter().map(|i| arr(grid.center(grid.cell_of_index(i)))).collect(),
            events: self.tick_events.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeReport {
    pub status: EpisodeStatus,
    pub ticks: u64,
    pub min_distance: f64,
    pub events: Vec<EventRecord>,
    pub log: Vec<String>,
}

/// Runs a scripted episode to goal, collision or the tick limit.
pub fn run_episode(config: ScenarioConfig, forecaster: Forecaster, script: &[ScriptEntry]) -> EpisodeReport {
    let mut world = World::new(config, forecaster);
    let mut script: Vec<&ScriptEntry> = script.iter().collect();
    script.sort_by_key(|e| e.tick);
    let mut next = 0;
    let mut events = Vec::new();
    while world.status() == EpisodeStatus::Running {
        while next < script.len() && script[next].tick <= world.tick() {
            world.submit_directive(script[next].directive.clone());
            next += 1;
        }
        let frame = world.step();
        events.extend(frame.events);
    }
    EpisodeReport {
        status: world.status(),
        ticks: world.tick(),
        min_distance: world.min_distance(),
        events,
        log: world.log.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{"name": "empty", "grid": {"width": 6.0, "height": 3.0}, "robot": {"start": [0.55, 1.55], "goal": [5.05, 1.55]}}"#.into()
    }

    #[test]
    fn minimal_config_loads() {
        let cfg = ScenarioConfig::from_json(&minimal()).unwrap();
        let w = World::new(cfg, Forecaster::ConstantVelocity);
        assert!(w.pedestrians().is_empty());
        assert_eq!(w.tick(), 0);
        let f = w.frame();
        assert_eq!(f.tick, 0);
        assert_eq!(f.status, EpisodeStatus::Running);
    }

    #[test]
    fn wall_outside_names_entry() {
        let text = minimal().replace(r#""height": 3.0}"#, r#""height": 3.0, "walls": [{"min": [1, 1], "max": [2, 2]}, {"min": [5, 1], "max": [7, 2]}]}"#);
        match ScenarioConfig::from_json(&text) {
            Err(ScenarioError::Config { path, .. }) => assert_eq!(path, "grid.walls[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_errors_carry_field_paths() {
        let text = minimal().replace(r#""goal": [5.05, 1.55]"#, r#""goal": [5.05, 1.55], "heading": "east""#);
        match ScenarioConfig::from_json(&text) {
            Err(ScenarioError::Config { path, .. }) => assert_eq!(path, "robot.heading"),
            other => panic!("{other:?}"),
        }
        let text = minimal().replace("}}", r#"}, "pedestrians": [{"id": 1, "waypoints": [[1, 1]], "speed": 0.3}, {"id": 1, "waypoints": [[2, 1]], "speed": 0.3}]}"#);
        match ScenarioConfig::from_json(&text) {
            Err(ScenarioError::Config { path, .. }) => assert_eq!(path, "pedestrians[1].id"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_world_reaches_goal_on_time() {
        let cfg = ScenarioConfig::from_json(&minimal()).unwrap();
        let dt = cfg.dt;
        let rep = run_episode(cfg, Forecaster::ConstantVelocity, &[]);
        assert_eq!(rep.status, EpisodeStatus::GoalReached);
        let expected = (5.05 - 0.55) / 0.5 / dt;
        assert!((rep.ticks as f64 - expected).abs() <= 1.0, "{} vs {expected}", rep.ticks);
    }

    #[test]
    fn max_ticks_exit() {
        let mut cfg = ScenarioConfig::from_json(&minimal()).unwrap();
        cfg.max_ticks = 1;
        let rep = run_episode(cfg, Forecaster::ConstantVelocity, &[]);
        assert_eq!(rep.status, EpisodeStatus::MaxTicks);
        assert_eq!(rep.ticks, 1);
    }

    #[test]
    fn unknown_directive_is_only_logged() {
        let cfg = ScenarioConfig::from_json(&minimal()).unwrap();
        let script = [ScriptEntry { tick: 3, directive: DirectiveInput::Class { class: GestureClass::Unknown } }];
        let a = run_episode(cfg.clone(), Forecaster::ConstantVelocity, &script);
        let b = run_episode(cfg, Forecaster::ConstantVelocity, &[]);
        assert_eq!(a.ticks, b.ticks);
        let d: Vec<&EventRecord> = a.events.iter().filter(|e| matches!(e.kind, EventKind::World(WorldEvent::Directive { .. }))).collect();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].tick, 3);
        assert!(!a.events.iter().any(|e| matches!(e.kind, EventKind::Nav(_)) && e.tick == 3));
    }

    #[test]
    fn waiting_freezes_robot() {
        let text = minimal().replace("}}", r#"}, "pedestrians": [{"id": 1, "waypoints": [[3.0, 2.5]], "speed": 0.0}]}"#);
        let cfg = ScenarioConfig::from_json(&text).unwrap();
        let mut w = World::new(cfg, Forecaster::ConstantVelocity);
        for _ in 0..6 {
            w.step();
        }
        w.submit_directive(DirectiveInput::Class { class: GestureClass::Wait });
        w.step();
        assert_eq!(w.navigator().state.mode, Mode::Waiting);
        let pose = w.navigator().state.pose;
        for _ in 0..3 {
            w.step();
            assert_eq!(w.navigator().state.pose, pose);
        }
    }

    #[test]
    fn synthetic_perception_tracks_a_walker() {
        let text = minimal().replace("}}", r#"}, "pedestrians": [{"id": 1, "waypoints": [[4.0, 0.5], [4.0, 2.9]], "speed": 0.3}]}"#);
        let mut cfg = ScenarioConfig::from_json(&text).unwrap();
        cfg.max_ticks = 40;
        let mut w = World::new(cfg, Forecaster::ConstantVelocity);
        for _ in 0..40 {
            w.step();
        }
        let tracks: Vec<_> = w.tracker().tracks().collect();
        assert_eq!(tracks.len(), 1);
        let truth = w.pedestrians()[0].position;
        let est = tracks[0].trajectory.last().p;
        // returns come from the near side of the body
        assert!(est.distance(&truth) < 0.25, "{est:?} vs {truth:?}");
        assert!(tracks[0].trajectory.len() >= 6);
    }
}
