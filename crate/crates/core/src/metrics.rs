//! Trajectory forecast error metrics (L2 distance based).

use thiserror::Error;

use crate::geom::Trajectory;

/// Stationary ground-truth steps are normalized by at least this length.
pub const RME_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("trajectory lengths differ: predicted {pred}, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("timestamps differ at step {step}: predicted {pred}, ground truth {gt}")]
    TimeMismatch { step: usize, pred: f64, gt: f64 },
    #[error("metric needs at least {need} samples, got {got}")]
    TooShort { need: usize, got: usize },
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn check_aligned(pred: &Trajectory, gt: &Trajectory, need: usize) -> Result<(), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.len() < need {
        return Err(MetricError::TooShort {
            need,
            got: pred.len(),
        });
    }
    for (step, (a, b)) in pred.samples().iter().zip(gt.samples()).enumerate() {
        if !same_time(a.t, b.t) {
            return Err(MetricError::TimeMismatch {
                step,
                pred: a.t,
                gt: b.t,
            });
        }
    }
    Ok(())
}

/// Average displacement error: mean per-step L2 distance.
pub fn ade(pred: &Trajectory, gt: &Trajectory) -> Result<f64, MetricError> {
    check_aligned(pred, gt, 1)?;
    let total: f64 = pred
        .positions()
        .zip(gt.positions())
        .map(|(a, b)| a.distance(&b))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Final displacement error: L2 distance between the last positions.
pub fn fde(pred: &Trajectory, gt: &Trajectory) -> Result<f64, MetricError> {
    let (a, b) = (pred.last(), gt.last());
    if !same_time(a.t, b.t) {
        return Err(MetricError::TimeMismatch {
            step: pred.len() - 1,
            pred: a.t,
            gt: b.t,
        });
    }
    Ok(a.p.distance(&b.p))
}

/// Relative mean error over per-step displacements.
///
/// Each step contributes `|Δpred - Δgt| / max(|Δgt|, ε)`, so a constant
/// positional offset does not accumulate into the score.
pub fn rme(pred: &Trajectory, gt: &Trajectory) -> Result<f64, MetricError> {
    check_aligned(pred, gt, 2)?;
    let dp = pred.displacements();
    let dg = gt.displacements();
    let total: f64 = dp
        .iter()
        .zip(&dg)
        .map(|(a, b)| (*a - *b).norm() / b.norm().max(RME_EPSILON))
        .sum();
    Ok(total / dp.len() as f64)
}

/// ADE, FDE and RME for one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct ForecastErrors {
    pub ade: f64,
    pub fde: f64,
    pub rme: f64,
}

impl ForecastErrors {
    pub fn compute(pred: &Trajectory, gt: &Trajectory) -> Result<Self, MetricError> {
        Ok(Self {
            ade: ade(pred, gt)?,
            fde: fde(pred, gt)?,
            rme: rme(pred, gt)?,
        })
    }

    /// Component-wise mean; `None` for an empty set.
    pub fn mean(items: &[ForecastErrors]) -> Option<ForecastErrors> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = items.iter().fold(ForecastErrors::default(), |acc, e| ForecastErrors {
            ade: acc.ade + e.ade,
            fde: acc.fde + e.fde,
            rme: acc.rme + e.rme,
        });
        Some(ForecastErrors {
            ade: sum.ade / n,
            fde: sum.fde / n,
            rme: sum.rme / n,
        })
    }
}
