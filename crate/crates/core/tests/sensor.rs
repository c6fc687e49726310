use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use socnav_core::geom::Point2;
use socnav_core::nav::Pose;
use socnav_core::perception::{localize_instances, CameraModel, SensorFrame, Tracker, TrackerConfig, WorldDetection};
use socnav_core::sim::{render_sensor_frame, MaskBoxes, PerceptionSpec};

const PERIOD: f64 = 0.4;
const FRAMES: usize = 20;

fn walker(k: usize) -> Point2 {
    Point2::new(4.0, 2.0 - 0.5 * PERIOD * k as f64)
}

fn camera() -> CameraModel {
    CameraModel::forward_facing(300.0, (640, 480), 0.5)
}

/// Where the sensor-facing half of the body averages to: the centre pulled
/// toward the sensor by r / (n sin(pi / 2n)).
fn surface_centroid(c: Point2, spec: &PerceptionSpec) -> Point2 {
    let n = spec.points_per_person as f64;
    let pull = spec.body_radius / (n * (std::f64::consts::PI / (2.0 * n)).sin());
    let d = c.distance(&Point2::new(0.0, 0.0));
    Point2::new(c.x - pull * c.x / d, c.y - pull * c.y / d)
}

fn load_frames() -> Vec<SensorFrame> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/sensor/walker.jsonl");
    if std::env::var_os("SOCNAV_BLESS").is_some() {
        let spec = PerceptionSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut prev = MaskBoxes::new();
        let mut text = String::new();
        for k in 0..FRAMES {
            let pose = Pose { position: Point2::new(0.0, 0.0), heading: 0.0 };
            let (frame, boxes) = render_sensor_frame(k as f64 * PERIOD, pose, &[(1, walker(k))], &camera(), &spec, &prev, &mut rng);
            prev = boxes;
            text.push_str(&serde_json::to_string(&frame).unwrap());
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
    }
    std::fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn recorded_walker_localizes_to_its_visible_surface() {
    let spec = PerceptionSpec::default();
    let frames = load_frames();
    assert_eq!(frames.len(), FRAMES);
    for (k, f) in frames.iter().enumerate() {
        let d = localize_instances(f, &camera(), 3);
        assert_eq!(d.len(), 1, "frame {k}");
        assert_eq!(d[0].support, spec.points_per_person);
        let want = surface_centroid(walker(k), &spec);
        // 1 cm point noise averaged over 12 points
        assert!(d[0].position.distance(&want) < 0.02, "frame {k}: {:?} vs {want:?}", d[0].position);
    }
}

#[test]
fn recorded_walker_is_one_track_with_the_right_velocity() {
    let frames = load_frames();
    let mut tracker = Tracker::new(TrackerConfig::default());
    for f in &frames {
        let dets: Vec<WorldDetection> = localize_instances(f, &camera(), 3)
            .into_iter()
            .map(|d| WorldDetection { instance_id: d.instance_id, position: d.position, pixel_centroid: d.pixel_centroid })
            .collect();
        let rep = tracker.associate(&dets, f.flow.as_ref(), f.t).unwrap();
        assert!(rep.retired.is_empty());
    }
    assert_eq!(tracker.len(), 1);
    let track = tracker.tracks().next().unwrap();
    let s = track.trajectory.samples();
    assert_eq!(s.len(), FRAMES);
    let (a, b) = (s[0], s[FRAMES - 1]);
    let v = Point2::new((b.p.x - a.p.x) / (b.t - a.t), (b.p.y - a.p.y) / (b.t - a.t));
    // the surface pull swings with bearing, so the net drift is only
    // roughly the walking velocity
    assert!((v.y + 0.5).abs() < 0.05 && v.x.abs() < 0.05, "{v:?}");
}
