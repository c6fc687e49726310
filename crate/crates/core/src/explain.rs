//! Verbal explanation of rerouting decisions.
//!
//! A replan is described by comparing the path the robot was following
//! with the new one from the point where they part ways.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{signed_angle, DirectionVector, GeomError, Point2};
use crate::gesture::GestureClass;
use crate::planner::Path;

pub const DEFAULT_LOOKAHEAD: usize = 5;
/// Half-width of the band classified as going straight, radians.
pub const DEFAULT_STRAIGHT_BAND: f64 = 0.1;

/// The seven sentences, indexed by sentence id − 1.
pub const SENTENCES: [&str; 7] = [
    "I'm going straight to avoid future collusion.",
    "I'm passing on the right to avoid future collusion.",
    "I'm passing on the left to avoid future collusion.",
    "I'm passing on the right as desired.",
    "I'm passing on the left as desired.",
    "I continue my route, as desired.",
    "I wait until you pass, as desired.",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error("paths start at different points ({a:?} vs {b:?})")]
    Pairing { a: Point2, b: Point2 },
    #[error("cannot pair an empty path")]
    EmptyPath,
    #[error("paths do not diverge")]
    NoDivergence,
    #[error("need {needed} points past the common position, previous has {previous}, new has {new}")]
    Lookahead { needed: usize, previous: usize, new: usize },
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error("no sentence for {trigger:?} with {redirection:?}")]
    Selection { trigger: Trigger, redirection: Redirection },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "gesture", rename_all = "snake_case")]
pub enum Trigger {
    AutonomousAvoidance,
    GestureDirective(GestureClass),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Redirection {
    Left,
    Right,
    Straight,
    Wait,
    Continue,
}

impl Redirection {
    pub fn mirrored(self) -> Self {
        match self {
            Redirection::Left => Redirection::Right,
            Redirection::Right => Redirection::Left,
            other => other,
        }
    }
}

/// A previous and a new path sharing their first point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathPair {
    pub obstacle_id: Option<u64>,
    pub previous: Vec<Point2>,
    pub new: Vec<Point2>,
    /// First index where the paths differ; `None` when one is a prefix of
    /// the other.
    pub divergence: Option<usize>,
}

/// First index at which the two point sequences differ.
pub fn first_divergence(a: &[Point2], b: &[Point2]) -> Option<usize> {
    a.iter().zip(b).position(|(p, q)| p != q)
}

pub fn pair_points(obstacle_id: Option<u64>, previous: Vec<Point2>, new: Vec<Point2>) -> Result<PathPair, ExplainError> {
    let (Some(a), Some(b)) = (previous.first(), new.first()) else {
        return Err(ExplainError::EmptyPath);
    };
    if a != b {
        return Err(ExplainError::Pairing { a: *a, b: *b });
    }
    let divergence = first_divergence(&previous, &new);
    Ok(PathPair { obstacle_id, previous, new, divergence })
}

pub fn pair_paths(obstacle_id: Option<u64>, previous: &Path, new: &Path) -> Result<PathPair, ExplainError> {
    pair_points(obstacle_id, previous.points.clone(), new.points.clone())
}

/// Signed angle from the previous path's direction to the new one, both
/// measured from the last common point over `lookahead` points.
pub fn redirection_angle(pair: &PathPair, lookahead: usize) -> Result<f64, ExplainError> {
    let d = pair.divergence.ok_or(ExplainError::NoDivergence)?;
    let common = d - 1;
    let k = common + lookahead.max(1);
    if k >= pair.previous.len() || k >= pair.new.len() {
        return Err(ExplainError::Lookahead {
            needed: lookahead.max(1),
            previous: pair.previous.len() - 1 - common,
            new: pair.new.len() - 1 - common,
        });
    }
    let origin = pair.new[common];
    let actual = DirectionVector::between(origin, pair.new[k])?;
    let surrogate = DirectionVector::between(origin, pair.previous[k])?;
    Ok(signed_angle(actual, surrogate))
}

pub fn classify_angle(angle: f64, band: f64) -> Redirection {
    if angle > band {
        Redirection::Left
    } else if angle < -band {
        Redirection::Right
    } else {
        Redirection::Straight
    }
}

pub fn redirection_direction(pair: &PathPair, lookahead: usize, band: f64) -> Result<Redirection, ExplainError> {
    Ok(classify_angle(redirection_angle(pair, lookahead)?, band))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplanationEvent {
    pub timestamp: f64,
    pub trigger: Trigger,
    pub redirection: Redirection,
    pub sentence_id: u8,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obstacle_id: Option<u64>,
}

/// Sentence id for a trigger and redirection, if the pair is describable.
pub fn sentence_id(trigger: Trigger, redirection: Redirection) -> Option<u8> {
    use GestureClass as G;
    use Redirection as R;
    match (trigger, redirection) {
        (Trigger::AutonomousAvoidance, R::Straight) => Some(1),
        (Trigger::AutonomousAvoidance, R::Right) => Some(2),
        (Trigger::AutonomousAvoidance, R::Left) => Some(3),
        (Trigger::GestureDirective(G::GoLeft | G::GoRight), R::Right) => Some(4),
        (Trigger::GestureDirective(G::GoLeft | G::GoRight), R::Left) => Some(5),
        (Trigger::GestureDirective(G::Continue), R::Continue) => Some(6),
        (Trigger::GestureDirective(G::Wait), R::Wait) => Some(7),
        _ => None,
    }
}

pub fn select_sentence(trigger: Trigger, redirection: Redirection, timestamp: f64) -> Result<ExplanationEvent, ExplainError> {
    let id = sentence_id(trigger, redirection).ok_or(ExplainError::Selection { trigger, redirection })?;
    Ok(ExplanationEvent {
        timestamp,
        trigger,
        redirection,
        sentence_id: id,
        text: SENTENCES[id as usize - 1].to_string(),
        angle: None,
        obstacle_id: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point2> {
        v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    fn straight(n: usize) -> Vec<Point2> {
        (0..n).map(|i| Point2::new(i as f64 * 0.1, 0.0)).collect()
    }

    /// Follows the straight path up to index `d - 1`, then bends by
    /// `slope` in y per step.
    fn veer(n: usize, d: usize, slope: f64) -> Vec<Point2> {
        (0..n)
            .map(|i| {
                let off = if i >= d { (i + 1 - d) as f64 * slope } else { 0.0 };
                Point2::new(i as f64 * 0.1, off)
            })
            .collect()
    }

    #[test]
    fn sentences_are_byte_exact() {
        let t = |tr, r| select_sentence(tr, r, 0.0).unwrap().text;
        assert_eq!(t(Trigger::GestureDirective(GestureClass::GoRight), Redirection::Right), "I'm passing on the right as desired.");
        assert_eq!(t(Trigger::AutonomousAvoidance, Redirection::Straight), "I'm going straight to avoid future collusion.");
        assert_eq!(t(Trigger::GestureDirective(GestureClass::Wait), Redirection::Wait), "I wait until you pass, as desired.");
        assert_eq!(t(Trigger::GestureDirective(GestureClass::Continue), Redirection::Continue), "I continue my route, as desired.");
        assert_eq!(t(Trigger::AutonomousAvoidance, Redirection::Left), "I'm passing on the left to avoid future collusion.");
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        for r in [Redirection::Wait, Redirection::Continue] {
            assert!(select_sentence(Trigger::AutonomousAvoidance, r, 0.0).is_err());
        }
        let go = Trigger::GestureDirective(GestureClass::GoLeft);
        assert!(select_sentence(go, Redirection::Straight, 0.0).is_err());
        assert!(select_sentence(Trigger::GestureDirective(GestureClass::Unknown), Redirection::Left, 0.0).is_err());
        assert!(select_sentence(Trigger::GestureDirective(GestureClass::Wait), Redirection::Continue, 0.0).is_err());
    }

    #[test]
    fn every_sentence_is_reachable_once() {
        let triggers = [
            Trigger::AutonomousAvoidance,
            Trigger::GestureDirective(GestureClass::Wait),
            Trigger::GestureDirective(GestureClass::GoLeft),
            Trigger::GestureDirective(GestureClass::GoRight),
            Trigger::GestureDirective(GestureClass::Continue),
            Trigger::GestureDirective(GestureClass::Unknown),
        ];
        let reds = [Redirection::Left, Redirection::Right, Redirection::Straight, Redirection::Wait, Redirection::Continue];
        let mut hit = [false; 7];
        for t in triggers {
            for r in reds {
                if let Some(id) = sentence_id(t, r) {
                    hit[id as usize - 1] = true;
                }
            }
        }
        assert!(hit.iter().all(|&h| h));
    }

    #[test]
    fn pairing() {
        let a = straight(8);
        let pair = pair_points(Some(1), a.clone(), a.clone()).unwrap();
        assert_eq!(pair.divergence, None);
        let b = veer(8, 3, 0.1);
        assert_eq!(pair_points(None, a.clone(), b).unwrap().divergence, Some(3));
        let shifted: Vec<Point2> = a.iter().map(|p| Point2::new(p.x, p.y + 1.0)).collect();
        assert!(matches!(pair_points(None, a, shifted), Err(ExplainError::Pairing { .. })));
        assert_eq!(pair_points(None, vec![], straight(2)), Err(ExplainError::EmptyPath));
    }

    #[test]
    fn veer_left_and_right() {
        let pair = pair_points(None, straight(12), veer(12, 4, 0.1)).unwrap();
        assert_eq!(redirection_direction(&pair, 5, 0.1).unwrap(), Redirection::Left);
        let pair = pair_points(None, straight(12), veer(12, 4, -0.1)).unwrap();
        assert_eq!(redirection_direction(&pair, 5, 0.1).unwrap(), Redirection::Right);
    }

    #[test]
    fn near_collinear_is_straight() {
        // 5 steps of 0.1 along x, offset chosen so the angle is 0.05 rad
        let off = 0.5 * 0.05f64.tan();
        let mut new = straight(10);
        for (k, p) in new.iter_mut().enumerate().skip(1) {
            *p = Point2::new(p.x, off * k as f64 / 5.0);
        }
        let pair = pair_points(None, straight(10), new).unwrap();
        let angle = redirection_angle(&pair, 5).unwrap();
        assert!((angle - 0.05).abs() < 1e-12);
        assert_eq!(redirection_direction(&pair, 5, 0.1).unwrap(), Redirection::Straight);
    }

    #[test]
    fn band_boundary_is_straight() {
        assert_eq!(classify_angle(0.1, 0.1), Redirection::Straight);
        assert_eq!(classify_angle(-0.1, 0.1), Redirection::Straight);
        assert_eq!(classify_angle(0.1 + 1e-12, 0.1), Redirection::Left);
        assert_eq!(classify_angle(-0.1 - 1e-12, 0.1), Redirection::Right);
    }

    #[test]
    fn lookahead_and_divergence_errors() {
        let pair = pair_points(None, straight(6), veer(6, 3, 0.1)).unwrap();
        assert!(matches!(redirection_direction(&pair, 5, 0.1), Err(ExplainError::Lookahead { .. })));
        let same = pair_points(None, straight(6), straight(6)).unwrap();
        assert_eq!(redirection_direction(&same, 5, 0.1), Err(ExplainError::NoDivergence));
        let p = pts(&[(0.0, 0.0), (1.0, 0.0)]);
        assert_eq!(pair_points(None, p.clone(), p).unwrap().divergence, None);
    }

    proptest! {
        #[test]
        fn divergence_matches_linear_scan(
            a in proptest::collection::vec((0i32..3, 0i32..3), 1..12),
            b in proptest::collection::vec((0i32..3, 0i32..3), 1..12),
        ) {
            let to = |v: &Vec<(i32, i32)>| {
                let mut p = vec![Point2::ORIGIN];
                p.extend(v.iter().map(|&(x, y)| Point2::new(x as f64, y as f64)));
                p
            };
            let (pa, pb) = (to(&a), to(&b));
            let pair = pair_points(None, pa.clone(), pb.clone()).unwrap();
            let mut want = None;
            for i in 0..pa.len().min(pb.len()) {
                if pa[i] != pb[i] {
                    want = Some(i);
                    break;
                }
            }
            prop_assert_eq!(pair.divergence, want);
        }

        #[test]
        fn mirror_swaps_left_and_right(
            prev in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 7),
            new in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 6),
            band in 0.0f64..0.3,
        ) {
            let mut a = vec![Point2::ORIGIN];
            a.extend(prev.iter().map(|&(x, y)| Point2::new(x, y)));
            let mut b = vec![Point2::ORIGIN, a[1]];
            b.extend(new.iter().map(|&(x, y)| Point2::new(x, y)));
            let pair = pair_points(None, a.clone(), b.clone()).unwrap();
            let flip = |v: &[Point2]| v.iter().map(|p| Point2::new(p.x, -p.y)).collect::<Vec<_>>();
            let mirrored = pair_points(None, flip(&a), flip(&b)).unwrap();
            let (Ok(angle), Ok(m)) = (redirection_angle(&pair, 5), redirection_angle(&mirrored, 5)) else {
                return Ok(());
            };
            prop_assume!(angle.abs() < std::f64::consts::PI);
            prop_assert_eq!(m, -angle);
            let r = classify_angle(angle, band);
            prop_assert_eq!(classify_angle(m, band), r.mirrored());
        }
    }
}
