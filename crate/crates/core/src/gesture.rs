//! Hand-pose directive classification by mean per-joint angle error.
//!
//! Landmarks follow the 21-point hand layout: wrist (0), then four points
//! per finger from base to tip: thumb 1–4, index 5–8, middle 9–12,
//! ring 13–16, pinky 17–20. Each finger contributes the interior angles
//! at its three non-terminal points, 15 angles in total.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LANDMARK_COUNT: usize = 21;
pub const JOINT_COUNT: usize = 15;
/// Default acceptance radius around a reference pose, radians.
pub const DEFAULT_THRESHOLD: f64 = 0.25;

const DEGENERATE_BONE: f64 = 1e-9;

/// Landmark indices of each finger chain, wrist first.
const CHAINS: [[usize; 5]; 5] = [
    [0, 1, 2, 3, 4],
    [0, 5, 6, 7, 8],
    [0, 9, 10, 11, 12],
    [0, 13, 14, 15, 16],
    [0, 17, 18, 19, 20],
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GestureError {
    #[error("degenerate bone at landmark {landmark}")]
    DegeneratePose { landmark: usize },
    #[error("expected {LANDMARK_COUNT} landmarks, got {0}")]
    LandmarkCount(usize),
    #[error("non-finite landmark {0}")]
    NonFinite(usize),
    #[error("reference set must contain exactly wait, go_left, go_right and continue")]
    References,
    #[error("unknown gesture class '{0}'; expected one of wait, go_left, go_right, continue, unknown")]
    UnknownClass(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GestureClass {
    Wait,
    GoLeft,
    GoRight,
    Continue,
    Unknown,
}

impl GestureClass {
    /// The four classes backed by reference poses, in tie-break order.
    pub const DIRECTIVES: [GestureClass; 4] = [
        GestureClass::Wait,
        GestureClass::GoLeft,
        GestureClass::GoRight,
        GestureClass::Continue,
    ];

    pub const ALL_NAMES: [&'static str; 5] = ["wait", "go_left", "go_right", "continue", "unknown"];

    pub fn as_str(&self) -> &'static str {
        match self {
            GestureClass::Wait => "wait",
            GestureClass::GoLeft => "go_left",
            GestureClass::GoRight => "go_right",
            GestureClass::Continue => "continue",
            GestureClass::Unknown => "unknown",
        }
    }
}

impl fmt::Display for GestureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GestureClass {
    type Err = GestureError;
    fn from_str(s: &str) -> Result<Self, GestureError> {
        match s {
            "wait" => Ok(GestureClass::Wait),
            "go_left" => Ok(GestureClass::GoLeft),
            "go_right" => Ok(GestureClass::GoRight),
            "continue" => Ok(GestureClass::Continue),
            "unknown" => Ok(GestureClass::Unknown),
            other => Err(GestureError::UnknownClass(other.to_string())),
        }
    }
}

/// 21 hand landmarks in image-relative units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 3]>", into = "Vec<[f64; 3]>")]
pub struct HandLandmarks([[f64; 3]; LANDMARK_COUNT]);

impl TryFrom<Vec<[f64; 3]>> for HandLandmarks {
    type Error = GestureError;
    fn try_from(v: Vec<[f64; 3]>) -> Result<Self, GestureError> {
        let arr: [[f64; 3]; LANDMARK_COUNT] =
            v.try_into().map_err(|v: Vec<_>| GestureError::LandmarkCount(v.len()))?;
        Self::new(arr)
    }
}

impl From<HandLandmarks> for Vec<[f64; 3]> {
    fn from(h: HandLandmarks) -> Self {
        h.0.to_vec()
    }
}

impl HandLandmarks {
    pub fn new(points: [[f64; 3]; LANDMARK_COUNT]) -> Result<Self, GestureError> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(GestureError::NonFinite(i));
        }
        Ok(Self(points))
    }

    pub fn points(&self) -> &[[f64; 3]; LANDMARK_COUNT] {
        &self.0
    }

    /// Applies `p ↦ scale · R · p + offset` to every landmark.
    pub fn transformed(&self, rotation: [[f64; 3]; 3], scale: f64, offset: [f64; 3]) -> Self {
        let mut out = self.0;
        for p in out.iter_mut() {
            let q = *p;
            for r in 0..3 {
                p[r] = scale * (rotation[r][0] * q[0] + rotation[r][1] * q[1] + rotation[r][2] * q[2]) + offset[r];
            }
        }
        Self(out)
    }
}

/// Interior joint angles, finger by finger from thumb to pinky.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointAngleVector(pub [f64; JOINT_COUNT]);

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Interior angle at every non-terminal finger joint.
pub fn joint_angles(h: &HandLandmarks) -> Result<JointAngleVector, GestureError> {
    let p = h.points();
    let mut out = [0.0; JOINT_COUNT];
    for (f, chain) in CHAINS.iter().enumerate() {
        for j in 0..3 {
            let (prev, at, next) = (chain[j], chain[j + 1], chain[j + 2]);
            let a = sub(p[prev], p[at]);
            let b = sub(p[next], p[at]);
            let (na, nb) = (norm(a), norm(b));
            if na <= DEGENERATE_BONE {
                return Err(GestureError::DegeneratePose { landmark: prev });
            }
            if nb <= DEGENERATE_BONE {
                return Err(GestureError::DegeneratePose { landmark: next });
            }
            let cos = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
            out[f * 3 + j] = cos.clamp(-1.0, 1.0).acos();
        }
    }
    Ok(JointAngleVector(out))
}

/// Mean absolute per-joint angle difference.
pub fn mpjae(a: &JointAngleVector, b: &JointAngleVector) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).sum::<f64>() / JOINT_COUNT as f64
}

/// Joint-angle references for the four directive classes.
#[derive(Debug, Clone, PartialEq)]
pub struct GestureReferences {
    refs: BTreeMap<GestureClass, JointAngleVector>,
}

impl GestureReferences {
    pub fn new(refs: BTreeMap<GestureClass, JointAngleVector>) -> Result<Self, GestureError> {
        let ok = refs.len() == 4 && GestureClass::DIRECTIVES.iter().all(|c| refs.contains_key(c));
        if !ok {
            return Err(GestureError::References);
        }
        Ok(Self { refs })
    }

    pub fn from_landmarks(
        poses: impl IntoIterator<Item = (GestureClass, HandLandmarks)>,
    ) -> Result<Self, GestureError> {
        let mut refs = BTreeMap::new();
        for (class, lm) in poses {
            refs.insert(class, joint_angles(&lm)?);
        }
        Self::new(refs)
    }

    /// The shipped reference poses.
    pub fn builtin() -> Self {
        let poses = builtin_reference_poses().expect("builtin gesture fixtures are valid");
        Self::from_landmarks(poses).expect("builtin gesture fixtures are complete")
    }

    pub fn get(&self, class: GestureClass) -> Option<&JointAngleVector> {
        self.refs.get(&class)
    }

    /// Nearest reference class and its distance, ties resolved in
    /// [`GestureClass::DIRECTIVES`] order.
    pub fn nearest(&self, angles: &JointAngleVector) -> (GestureClass, f64) {
        let mut best = (GestureClass::Unknown, f64::INFINITY);
        for class in GestureClass::DIRECTIVES {
            let d = mpjae(angles, &self.refs[&class]);
            if d < best.1 {
                best = (class, d);
            }
        }
        best
    }

    pub fn classify_angles(&self, angles: &JointAngleVector, threshold: f64) -> GestureClass {
        let (class, d) = self.nearest(angles);
        if d <= threshold {
            class
        } else {
            GestureClass::Unknown
        }
    }
}

/// Classifies a hand pose; returns `Unknown` when the nearest reference is
/// farther than `threshold`.
pub fn classify(
    h: &HandLandmarks,
    refs: &GestureReferences,
    threshold: f64,
) -> Result<GestureClass, GestureError> {
    Ok(refs.classify_angles(&joint_angles(h)?, threshold))
}

/// Fixture file layout for one reference pose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseFixture {
    pub class: GestureClass,
    pub landmarks: HandLandmarks,
}

const FIXTURES: [&str; 4] = [
    include_str!("../fixtures/gestures/wait.json"),
    include_str!("../fixtures/gestures/go_left.json"),
    include_str!("../fixtures/gestures/go_right.json"),
    include_str!("../fixtures/gestures/continue.json"),
];

pub fn builtin_reference_poses() -> Result<Vec<(GestureClass, HandLandmarks)>, serde_json::Error> {
    FIXTURES
        .iter()
        .map(|s| serde_json::from_str::<PoseFixture>(s).map(|f| (f.class, f.landmarks)))
        .collect()
}

/// Synthetic hand model: each finger bends in the plane spanned by its
/// base direction and the palm normal, so the interior angle at a joint
/// is `π - flexion`.
pub mod model {
    use super::*;

    /// Base direction of each finger in the palm plane (radians from +y).
    const BASE_ANGLES: [f64; 5] = [-0.9, -0.25, 0.0, 0.22, 0.45];
    /// Bone lengths from wrist to tip for each finger.
    const BONES: [[f64; 4]; 5] = [
        [0.040, 0.040, 0.032, 0.025],
        [0.090, 0.045, 0.028, 0.022],
        [0.088, 0.050, 0.031, 0.024],
        [0.082, 0.046, 0.029, 0.023],
        [0.078, 0.036, 0.022, 0.020],
    ];

    /// Builds landmarks from 15 flexion angles (0 = straight).
    pub fn pose_from_flexion(flex: &[f64; JOINT_COUNT]) -> HandLandmarks {
        let mut pts = [[0.0; 3]; LANDMARK_COUNT];
        for (f, chain) in CHAINS.iter().enumerate() {
            let u = [BASE_ANGLES[f].sin(), BASE_ANGLES[f].cos(), 0.0];
            let n = [0.0, 0.0, 1.0];
            let mut p = [0.0; 3];
            let mut theta = 0.0;
            for (seg, &idx) in chain[1..].iter().enumerate() {
                if seg > 0 {
                    theta += flex[f * 3 + seg - 1];
                }
                let d = [
                    theta.cos() * u[0] - theta.sin() * n[0],
                    theta.cos() * u[1] - theta.sin() * n[1],
                    theta.cos() * u[2] - theta.sin() * n[2],
                ];
                let len = BONES[f][seg];
                p = [p[0] + len * d[0], p[1] + len * d[1], p[2] + len * d[2]];
                pts[idx] = p;
            }
        }
        HandLandmarks(pts)
    }

    const CURLED: [f64; 3] = [1.5, 1.6, 1.0];
    const STRAIGHT: [f64; 3] = [0.0, 0.0, 0.0];
    const THUMB_TUCKED: [f64; 3] = [0.9, 0.8, 0.6];

    /// Canonical flexion for each directive class.
    ///
    /// Joint angles do not see hand orientation, so the two pointing
    /// directives differ by thumb state: index alone for go-left, index
    /// and thumb (an "L") for go-right.
    pub fn canonical_flexion(class: GestureClass) -> Option<[f64; JOINT_COUNT]> {
        let fingers: [[f64; 3]; 5] = match class {
            GestureClass::Wait => [STRAIGHT; 5],
            GestureClass::GoLeft => [THUMB_TUCKED, STRAIGHT, CURLED, CURLED, CURLED],
            GestureClass::GoRight => [STRAIGHT, STRAIGHT, CURLED, CURLED, CURLED],
            GestureClass::Continue => [STRAIGHT, CURLED, CURLED, CURLED, CURLED],
            GestureClass::Unknown => return None,
        };
        let mut out = [0.0; JOINT_COUNT];
        for (f, v) in fingers.iter().enumerate() {
            out[f * 3..f * 3 + 3].copy_from_slice(v);
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::model::*;
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn straight_hand() -> HandLandmarks {
        pose_from_flexion(&[0.0; JOINT_COUNT])
    }

    #[test]
    fn straight_chain_is_pi() {
        let a = joint_angles(&straight_hand()).unwrap();
        for v in a.0 {
            assert!((v - PI).abs() < 1e-7, "{v}");
        }
    }

    #[test]
    fn right_angle_bend() {
        let mut flex = [0.0; JOINT_COUNT];
        flex[4] = FRAC_PI_2;
        let a = joint_angles(&pose_from_flexion(&flex)).unwrap();
        assert!((a.0[4] - FRAC_PI_2).abs() < 1e-12);
        assert!((a.0[3] - PI).abs() < 1e-7);
    }

    #[test]
    fn coincident_landmarks_are_degenerate() {
        let mut pts = *straight_hand().points();
        pts[6] = pts[5];
        let h = HandLandmarks::new(pts).unwrap();
        assert!(matches!(joint_angles(&h), Err(GestureError::DegeneratePose { .. })));
    }

    #[test]
    fn landmark_count_checked_on_deserialize() {
        let short: Vec<[f64; 3]> = vec![[0.0; 3]; 20];
        assert_eq!(HandLandmarks::try_from(short), Err(GestureError::LandmarkCount(20)));
    }

    #[test]
    fn mpjae_examples() {
        let a = JointAngleVector([1.0; JOINT_COUNT]);
        let mut b = a;
        assert_eq!(mpjae(&a, &b), 0.0);
        b.0[7] += 0.3;
        assert!((mpjae(&a, &b) - 0.02).abs() < 1e-15);
        assert_eq!(mpjae(&a, &b), mpjae(&b, &a));
    }

    #[test]
    fn fixtures_match_the_hand_model() {
        for (class, lm) in builtin_reference_poses().unwrap() {
            let want = pose_from_flexion(&canonical_flexion(class).unwrap());
            for (p, q) in lm.points().iter().zip(want.points()) {
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn references_classify_as_themselves() {
        let refs = GestureReferences::builtin();
        for (class, lm) in builtin_reference_poses().unwrap() {
            let a = joint_angles(&lm).unwrap();
            let (c, d) = refs.nearest(&a);
            assert_eq!(c, class);
            assert_eq!(d, 0.0);
            assert_eq!(classify(&lm, &refs, DEFAULT_THRESHOLD).unwrap(), class);
        }
    }

    #[test]
    fn far_from_everything_is_unknown() {
        let refs = GestureReferences::builtin();
        // equidistant from nothing in particular, beyond θ from all
        let angles = JointAngleVector([0.3; JOINT_COUNT]);
        assert_eq!(refs.classify_angles(&angles, DEFAULT_THRESHOLD), GestureClass::Unknown);
    }

    #[test]
    fn reference_set_must_be_complete() {
        let mut m = BTreeMap::new();
        m.insert(GestureClass::Wait, JointAngleVector([PI; JOINT_COUNT]));
        assert_eq!(GestureReferences::new(m), Err(GestureError::References));
    }

    #[test]
    fn ties_follow_class_order() {
        let mut m = BTreeMap::new();
        let same = JointAngleVector([1.0; JOINT_COUNT]);
        for c in GestureClass::DIRECTIVES {
            m.insert(c, same);
        }
        let refs = GestureReferences::new(m).unwrap();
        assert_eq!(refs.nearest(&same).0, GestureClass::Wait);
    }

    #[test]
    fn class_names_round_trip() {
        for name in GestureClass::ALL_NAMES {
            assert_eq!(name.parse::<GestureClass>().unwrap().as_str(), name);
        }
        assert!("bogus".parse::<GestureClass>().is_err());
        assert_eq!(serde_json::to_string(&GestureClass::GoRight).unwrap(), "\"go_right\"");
    }

    fn rotation(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
        let (cy, sy) = (yaw.cos(), yaw.sin());
        let (cp, sp) = (pitch.cos(), pitch.sin());
        let (cr, sr) = (roll.cos(), roll.sin());
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    }

    proptest! {
        #[test]
        fn mpjae_is_a_metric(
            a in proptest::array::uniform15(0.0..PI),
            b in proptest::array::uniform15(0.0..PI),
            c in proptest::array::uniform15(0.0..PI),
        ) {
            let (a, b, c) = (JointAngleVector(a), JointAngleVector(b), JointAngleVector(c));
            prop_assert!(mpjae(&a, &b) >= 0.0);
            prop_assert_eq!(mpjae(&a, &b), mpjae(&b, &a));
            prop_assert!(mpjae(&a, &c) <= mpjae(&a, &b) + mpjae(&b, &c) + 1e-12);
        }

        #[test]
        fn joint_angles_match_direct_recomputation(flex in proptest::array::uniform15(0.0..2.5)) {
            let h = pose_from_flexion(&flex);
            let a = joint_angles(&h).unwrap();
            let p = h.points();
            for (f, chain) in CHAINS.iter().enumerate() {
                for j in 0..3 {
                    let u = sub(p[chain[j]], p[chain[j + 1]]);
                    let v = sub(p[chain[j + 2]], p[chain[j + 1]]);
                    let want = ((u[0]*v[0] + u[1]*v[1] + u[2]*v[2]) / (norm(u) * norm(v))).clamp(-1.0, 1.0).acos();
                    prop_assert!((a.0[f * 3 + j] - want).abs() < 1e-12);
                    prop_assert!((a.0[f * 3 + j] - (PI - flex[f * 3 + j])).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn classification_is_pose_frame_invariant(
            class_idx in 0usize..4,
            yaw in -PI..PI, pitch in -1.5f64..1.5, roll in -PI..PI,
            scale in 0.2f64..5.0, ox in -1.0f64..1.0, oy in -1.0f64..1.0, oz in -1.0f64..1.0,
        ) {
            let class = GestureClass::DIRECTIVES[class_idx];
            let refs = GestureReferences::builtin();
            let h = pose_from_flexion(&canonical_flexion(class).unwrap());
            let moved = h.transformed(rotation(yaw, pitch, roll), scale, [ox, oy, oz]);
            prop_assert_eq!(classify(&moved, &refs, DEFAULT_THRESHOLD).unwrap(), class);
        }

        #[test]
        fn larger_threshold_never_produces_unknown(
            angles in proptest::array::uniform15(0.0..PI),
            t1 in 0.0f64..1.0, extra in 0.0f64..1.0,
        ) {
            let refs = GestureReferences::builtin();
            let a = JointAngleVector(angles);
            let small = refs.classify_angles(&a, t1);
            let large = refs.classify_angles(&a, t1 + extra);
            if small != GestureClass::Unknown {
                prop_assert_eq!(small, large);
            }
        }
    }
}
