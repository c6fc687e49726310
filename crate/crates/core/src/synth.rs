//! Seeded synthetic trajectory sets for training and evaluation.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geom::{Point2, Trajectory};

/// Trajnet++ sampling period (2.5 Hz).
pub const DEFAULT_PERIOD: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Line,
    Arc,
    Sine,
}

/// Lines, arcs and sine paths, cycling through the three shapes.
///
/// Each trajectory has `samples` positions spaced [`DEFAULT_PERIOD`] apart
/// with walking speeds between 0.5 and 1.5 m/s.
pub fn shape_trajectories(count: usize, samples: usize, seed: u64) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [ShapeKind::Line, ShapeKind::Arc, ShapeKind::Sine];
    (0..count)
        .map(|i| shape_trajectory(kinds[i % 3], i as u64, samples, &mut rng))
        .collect()
}

pub fn shape_trajectory<R: Rng>(kind: ShapeKind, ped_id: u64, samples: usize, rng: &mut R) -> Trajectory {
    let start = Point2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
    let heading = rng.random_range(-PI..PI);
    let step = rng.random_range(0.2..0.6);
    let (turn, amp, freq, phase) = match kind {
        ShapeKind::Line => (0.0, 0.0, 0.0, 0.0),
        ShapeKind::Arc => {
            let mag = rng.random_range(0.04..0.15);
            (if rng.random_bool(0.5) { mag } else { -mag }, 0.0, 0.0, 0.0)
        }
        ShapeKind::Sine => (
            0.0,
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.5),
            rng.random_range(0.0..2.0 * PI),
        ),
    };
    let (c, s) = (heading.cos(), heading.sin());
    let mut pts = Vec::with_capacity(samples);
    let mut p = start;
    let mut th = heading;
    for k in 0..samples {
        match kind {
            ShapeKind::Sine => {
                let along = step * k as f64;
                let lateral = amp * ((freq * k as f64 + phase).sin() - phase.sin());
                p = start + Point2::new(c * along - s * lateral, s * along + c * lateral);
            }
            _ => {
                if k > 0 {
                    p = p + Point2::new(th.cos(), th.sin()) * step;
                    th += turn;
                }
            }
        }
        pts.push(p);
    }
    Trajectory::from_positions(ped_id, 0.0, DEFAULT_PERIOD, &pts).expect("finite synthetic positions")
}

/// Parameters of the crossing-pedestrians scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossingParams {
    pub min_peds: usize,
    pub max_peds: usize,
    pub samples: usize,
    /// Largest per-step heading change in radians.
    pub max_turn: f64,
    /// Repulsion gain between pedestrians closer than `repulsion_range`.
    pub repulsion: f64,
    pub repulsion_range: f64,
    pub position_noise: f64,
}

impl Default for CrossingParams {
    fn default() -> Self {
        Self {
            min_peds: 2,
            max_peds: 4,
            samples: 21,
            max_turn: 0.12,
            repulsion: 0.15,
            repulsion_range: 1.5,
            position_noise: 0.0,
        }
    }
}

/// Scenes of pedestrians crossing a shared area from different sides.
///
/// Every pedestrian starts on a circle of radius ~4 m heading roughly
/// through the centre, follows a curved path with its own constant turn
/// rate, and is nudged away from nearby pedestrians.
pub fn crossing_scenes(count: usize, params: &CrossingParams, seed: u64) -> Vec<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.position_noise.max(1e-12)).expect("valid std");
    (0..count)
        .map(|_| {
            let n = rng.random_range(params.min_peds..=params.max_peds);
            let base = rng.random_range(-PI..PI);
            let mut pos = Vec::with_capacity(n);
            let mut heading = Vec::with_capacity(n);
            let mut speed = Vec::with_capacity(n);
            let mut turn = Vec::with_capacity(n);
            for i in 0..n {
                let bearing = base + 2.0 * PI * i as f64 / n as f64 + rng.random_range(-0.4..0.4);
                let r = rng.random_range(3.0..5.0);
                pos.push(Point2::new(r * bearing.cos(), r * bearing.sin()));
                heading.push(bearing + PI + rng.random_range(-0.3..0.3));
                speed.push(rng.random_range(0.25..0.55));
                turn.push(rng.random_range(-params.max_turn..params.max_turn));
            }
            let mut paths: Vec<Vec<Point2>> = pos.iter().map(|p| vec![*p]).collect();
            for _ in 1..params.samples {
                let snapshot = pos.clone();
                for i in 0..n {
                    let mut push = Point2::ORIGIN;
                    for (j, other) in snapshot.iter().enumerate() {
                        if j == i {
                            continue;
                        }
                        let d = snapshot[i] - *other;
                        let dist = d.norm();
                        if dist < params.repulsion_range && dist > 1e-6 {
                            push = push + d * (params.repulsion * (params.repulsion_range - dist) / dist);
                        }
                    }
                    let dir = Point2::new(heading[i].cos(), heading[i].sin());
                    let mv = dir * speed[i] + push;
                    pos[i] = pos[i] + mv;
                    heading[i] += turn[i];
                }
                for i in 0..n {
                    let jitter = if params.position_noise > 0.0 {
                        Point2::new(noise.sample(&mut rng), noise.sample(&mut rng))
                    } else {
                        Point2::ORIGIN
                    };
                    paths[i].push(pos[i] + jitter);
                }
            }
            paths
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    Trajectory::from_positions(i as u64, 0.0, DEFAULT_PERIOD, p)
                        .expect("finite synthetic positions")
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_seeded_and_sized() {
        let a = shape_trajectories(9, 20, 4);
        assert_eq!(a.len(), 9);
        assert!(a.iter().all(|t| t.len() == 20));
        assert_eq!(a, shape_trajectories(9, 20, 4));
        assert_ne!(a, shape_trajectories(9, 20, 5));
    }

    #[test]
    fn line_steps_are_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = shape_trajectory(ShapeKind::Line, 0, 6, &mut rng);
        let d = t.displacements();
        for w in d.windows(2) {
            assert!((w[0] - w[1]).norm() < 1e-12);
        }
    }

    #[test]
    fn crossing_scene_shape() {
        let scenes = crossing_scenes(5, &CrossingParams::default(), 2);
        for s in &scenes {
            assert!((2..=4).contains(&s.len()));
            assert!(s.iter().all(|t| t.len() == 21));
        }
    }
}
