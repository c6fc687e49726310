//! Planar geometry shared by every subsystem.
//!
//! World frame convention: x forward, y left, angles counter-clockwise
//! positive. A positive signed angle therefore means "to the left".

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance on the sampling period of a [`Trajectory`].
pub const PERIOD_REL_TOL: f64 = 1e-9;

/// Displacements shorter than this cannot define a direction.
pub const MIN_DIRECTION_NORM: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("non-finite coordinate ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("trajectory needs at least one sample")]
    EmptyTrajectory,
    #[error("timestamps must be strictly increasing (sample {index})")]
    NonIncreasingTime { index: usize },
    #[error("non-uniform sampling at sample {index}: step {step} vs period {period}")]
    NonUniformPeriod { index: usize, step: f64, period: f64 },
    #[error("displacement norm {0} too small to define a direction")]
    DegenerateDirection(f64),
}

/// A position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Checked constructor rejecting NaN and infinities.
    pub fn try_new(x: f64, y: f64) -> Result<Self, GeomError> {
        if x.is_finite() && y.is_finite() {
            Ok(Self { x, y })
        } else {
            Err(GeomError::NonFinite(x, y))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (*self - *other).norm()
    }

    pub fn dot(&self, other: &Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product `self × other`.
    pub fn cross(&self, other: &Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn lerp(&self, other: &Point2, s: f64) -> Point2 {
        Point2::new(self.x + (other.x - self.x) * s, self.y + (other.y - self.y) * s)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// One timestamped observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub p: Point2,
}

impl Sample {
    pub const fn new(t: f64, p: Point2) -> Self {
        Self { t, p }
    }
}

/// Uniformly sampled positions of one tracked person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory", into = "RawTrajectory")]
pub struct Trajectory {
    ped_id: u64,
    samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct RawTrajectory {
    ped_id: u64,
    samples: Vec<Sample>,
}

impl TryFrom<RawTrajectory> for Trajectory {
    type Error = GeomError;
    fn try_from(raw: RawTrajectory) -> Result<Self, GeomError> {
        Trajectory::new(raw.ped_id, raw.samples)
    }
}

impl From<Trajectory> for RawTrajectory {
    fn from(t: Trajectory) -> Self {
        RawTrajectory {
            ped_id: t.ped_id,
            samples: t.samples,
        }
    }
}

fn check_step(prev: f64, next: f64, period: Option<f64>, index: usize) -> Result<(), GeomError> {
    let step = next - prev;
    if !(step > 0.0) {
        return Err(GeomError::NonIncreasingTime { index });
    }
    if let Some(period) = period {
        if (step - period).abs() > PERIOD_REL_TOL * period {
            return Err(GeomError::NonUniformPeriod { index, step, period });
        }
    }
    Ok(())
}

impl Trajectory {
    pub fn new(ped_id: u64, samples: Vec<Sample>) -> Result<Self, GeomError> {
        if samples.is_empty() {
            return Err(GeomError::EmptyTrajectory);
        }
        let mut period = None;
        for (i, s) in samples.iter().enumerate() {
            if !s.p.is_finite() || !s.t.is_finite() {
                return Err(GeomError::NonFinite(s.p.x, s.p.y));
            }
            if i > 0 {
                check_step(samples[i - 1].t, s.t, period, i)?;
                if period.is_none() {
                    period = Some(s.t - samples[0].t);
                }
            }
        }
        Ok(Self { ped_id, samples })
    }

    /// Builds `t0, t0 + dt, ...` timestamps for the given positions.
    pub fn from_positions(
        ped_id: u64,
        t0: f64,
        dt: f64,
        positions: &[Point2],
    ) -> Result<Self, GeomError> {
        let samples = positions
            .iter()
            .enumerate()
            .map(|(k, p)| Sample::new(t0 + dt * k as f64, *p))
            .collect();
        Self::new(ped_id, samples)
    }

    pub fn ped_id(&self) -> u64 {
        self.ped_id
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        &self.samples[self.samples.len() - 1]
    }

    pub fn positions(&self) -> impl Iterator<Item = Point2> + '_ {
        self.samples.iter().map(|s| s.p)
    }

    /// Sampling period, `None` for a single-sample trajectory.
    pub fn period(&self) -> Option<f64> {
        (self.samples.len() >= 2).then(|| self.samples[1].t - self.samples[0].t)
    }

    /// Per-step displacements `p[k] - p[k-1]`.
    pub fn displacements(&self) -> Vec<Point2> {
        self.samples.windows(2).map(|w| w[1].p - w[0].p).collect()
    }

    /// Appends a sample, enforcing the uniform-period invariant.
    pub fn push(&mut self, sample: Sample) -> Result<(), GeomError> {
        if !sample.p.is_finite() || !sample.t.is_finite() {
            return Err(GeomError::NonFinite(sample.p.x, sample.p.y));
        }
        check_step(self.last().t, sample.t, self.period(), self.samples.len())?;
        self.samples.push(sample);
        Ok(())
    }

    /// Appends a position one period after the last sample.
    pub fn push_next(&mut self, p: Point2, fallback_period: f64) -> Result<(), GeomError> {
        let dt = self.period().unwrap_or(fallback_period);
        let t = self.last().t + dt;
        self.push(Sample::new(t, p))
    }

    /// The trailing `n` samples (or all of them when shorter).
    pub fn tail(&self, n: usize) -> Trajectory {
        let start = self.samples.len().saturating_sub(n.max(1));
        Trajectory {
            ped_id: self.ped_id,
            samples: self.samples[start..].to_vec(),
        }
    }

    /// Samples from index `start` onwards.
    pub fn slice_from(&self, start: usize) -> Option<Trajectory> {
        (start < self.samples.len()).then(|| Trajectory {
            ped_id: self.ped_id,
            samples: self.samples[start..].to_vec(),
        })
    }

    pub fn translated(&self, offset: Point2) -> Trajectory {
        Trajectory {
            ped_id: self.ped_id,
            samples: self
                .samples
                .iter()
                .map(|s| Sample::new(s.t, s.p + offset))
                .collect(),
        }
    }
}

/// A unit-length planar direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionVector {
    dx: f64,
    dy: f64,
}

impl DirectionVector {
    pub fn new(dx: f64, dy: f64) -> Result<Self, GeomError> {
        if !(dx.is_finite() && dy.is_finite()) {
            return Err(GeomError::NonFinite(dx, dy));
        }
        let n = dx.hypot(dy);
        if n < MIN_DIRECTION_NORM {
            return Err(GeomError::DegenerateDirection(n));
        }
        Ok(Self { dx: dx / n, dy: dy / n })
    }

    pub fn from_heading(theta: f64) -> Self {
        Self {
            dx: theta.cos(),
            dy: theta.sin(),
        }
    }

    /// Direction from `from` towards `to`.
    pub fn between(from: Point2, to: Point2) -> Result<Self, GeomError> {
        Self::new(to.x - from.x, to.y - from.y)
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn heading(&self) -> f64 {
        self.dy.atan2(self.dx)
    }
}

/// Signed angle rotating `surrogate` onto `actual`, in `(-π, π]`.
///
/// Positive means `actual` lies counter-clockwise of (to the left of)
/// `surrogate`. Antipodal directions return `+π`.
pub fn signed_angle(actual: DirectionVector, surrogate: DirectionVector) -> f64 {
    let cross = surrogate.dx * actual.dy - surrogate.dy * actual.dx;
    let dot = surrogate.dx * actual.dx + surrogate.dy * actual.dy;
    let angle = cross.atan2(dot);
    if angle <= -PI {
        PI
    } else {
        angle
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}
