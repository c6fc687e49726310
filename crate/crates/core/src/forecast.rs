//! Forecasters used by the simulator and the evaluation harness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autoencoder::{train_autoencoder, AutoencoderConfig};
use crate::gat::{bounds, rollout, train_predictor, training_grid, GatConfig, GatError, GatWeights};
use crate::geom::{Point2, Sample, Trajectory};
use crate::grid::OccupancyGrid;
use crate::lstm::LstmWeights;
use crate::metrics::{ForecastErrors, MetricError};

/// Repeats each person's last displacement; a single-sample track stays
/// put.
pub fn constant_velocity(trajs: &[Trajectory], horizon: usize, fallback_period: f64) -> Vec<Trajectory> {
    trajs
        .iter()
        .map(|t| {
            let dt = t.period().unwrap_or(fallback_period);
            let v = t.displacements().last().copied().unwrap_or(Point2::ORIGIN);
            let last = *t.last();
            let samples = (1..=horizon)
                .map(|k| Sample::new(last.t + dt * k as f64, last.p + v * k as f64))
                .collect();
            Trajectory::new(t.ped_id(), samples).expect("uniform finite forecast")
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum Forecaster {
    ConstantVelocity,
    Gat { gat: GatWeights, lstm: LstmWeights },
}

impl Forecaster {
    pub fn name(&self) -> &'static str {
        match self {
            Forecaster::ConstantVelocity => "constant_velocity",
            Forecaster::Gat { .. } => "gat",
        }
    }

    /// Forecasts `horizon` samples for every trajectory. With the graph
    /// model, people observed only once are predicted stationary and left
    /// out of the graph.
    pub fn forecast(
        &self,
        trajs: &[Trajectory],
        robot: Point2,
        grid: &OccupancyGrid,
        horizon: usize,
        fallback_period: f64,
    ) -> Result<Vec<Trajectory>, GatError> {
        if horizon == 0 {
            return Err(GatError::ZeroHorizon);
        }
        match self {
            Forecaster::ConstantVelocity => Ok(constant_velocity(trajs, horizon, fallback_period)),
            Forecaster::Gat { gat, lstm } => {
                let (moving, idx): (Vec<Trajectory>, Vec<usize>) = trajs
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.len() >= 2)
                    .map(|(i, t)| (t.clone(), i))
                    .unzip();
                let mut out = constant_velocity(trajs, horizon, fallback_period);
                if !moving.is_empty() {
                    for (k, pred) in rollout(gat, lstm, &moving, robot, grid, horizon)?.into_iter().enumerate() {
                        out[idx[k]] = pred;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Observation/ground-truth split of one person in one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub observed: Vec<Trajectory>,
    pub truth: Vec<Trajectory>,
}

/// Splits each scene at `obs_len` samples; only people observed for the
/// full `obs_len + horizon` span from the scene's first frame take part.
pub fn eval_cases(scenes: &[Vec<Trajectory>], obs_len: usize, horizon: usize) -> Vec<EvalCase> {
    let mut out = Vec::new();
    for scene in scenes {
        let Some(dt) = scene.iter().find_map(|t| t.period()) else { continue };
        let t0 = scene.iter().map(|t| t.first().t).fold(f64::INFINITY, f64::min);
        let mut observed = Vec::new();
        let mut truth = Vec::new();
        for t in scene {
            let offset = ((t.first().t - t0) / dt).round() as usize;
            if offset != 0 || t.len() < obs_len + horizon {
                continue;
            }
            let s = t.samples();
            observed.push(Trajectory::new(t.ped_id(), s[..obs_len].to_vec()).expect("sub-trajectory"));
            truth.push(Trajectory::new(t.ped_id(), s[obs_len..obs_len + horizon].to_vec()).expect("sub-trajectory"));
        }
        if !observed.is_empty() {
            out.push(EvalCase { observed, truth });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub model: ForecastErrors,
    pub baseline: ForecastErrors,
    pub people: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no person covers the observation and prediction span")]
    NoCases,
    #[error(transparent)]
    Model(#[from] GatError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Mean ADE/FDE/RME of `model` and of the constant-velocity baseline.
pub fn evaluate(
    model: &Forecaster,
    scenes: &[Vec<Trajectory>],
    obs_len: usize,
    horizon: usize,
) -> Result<EvaluationReport, EvalError> {
    let cases = eval_cases(scenes, obs_len, horizon);
    let mut m = Vec::new();
    let mut b = Vec::new();
    for case in &cases {
        let (lo, hi) = bounds(&case.observed);
        let grid = training_grid(lo, hi);
        let robot = lo.lerp(&hi, 0.5);
        let dt = case.observed[0].period().unwrap_or(crate::synth::DEFAULT_PERIOD);
        let pm = model.forecast(&case.observed, robot, &grid, horizon, dt)?;
        let pb = constant_velocity(&case.observed, horizon, dt);
        for ((pm, pb), gt) in pm.iter().zip(&pb).zip(&case.truth) {
            m.push(ForecastErrors::compute(pm, gt)?);
            b.push(ForecastErrors::compute(pb, gt)?);
        }
    }
    Ok(EvaluationReport {
        model: ForecastErrors::mean(&m).ok_or(EvalError::NoCases)?,
        baseline: ForecastErrors::mean(&b).ok_or(EvalError::NoCases)?,
        people: m.len(),
    })
}

/// Encoder training set drawn from scenes: every `window`-sample history
/// window (shorter at trajectory starts), subsampled to `max_count`.
pub fn history_windows(scenes: &[Vec<Trajectory>], window: usize, max_count: usize, seed: u64) -> Vec<Trajectory> {
    let mut all = Vec::new();
    for t in scenes.iter().flatten() {
        let s = t.samples();
        for end in 2..=s.len() {
            let start = end.saturating_sub(window);
            if end - start == window || start == 0 {
                all.push(Trajectory::new(t.ped_id(), s[start..end].to_vec()).expect("sub-trajectory"));
            }
        }
    }
    if all.len() > max_count {
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        all.truncate(max_count);
    }
    all
}

/// End-to-end training: the encoder is fit on history windows drawn from
/// the scenes, then the graph model on the scenes themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecipe {
    pub autoencoder: AutoencoderConfig,
    pub predictor: GatConfig,
    pub max_windows: usize,
    pub seed: u64,
}

impl Default for ForecastRecipe {
    fn default() -> Self {
        Self {
            autoencoder: AutoencoderConfig { epochs: 300, ..Default::default() },
            predictor: GatConfig::default(),
            max_windows: 800,
            seed: 3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RecipeError {
    #[error(transparent)]
    Autoencoder(#[from] crate::lstm::LstmError),
    #[error(transparent)]
    Predictor(#[from] GatError),
}

pub fn fit_forecaster(scenes: &[Vec<Trajectory>], recipe: &ForecastRecipe) -> Result<(LstmWeights, GatWeights), RecipeError> {
    let windows = history_windows(scenes, recipe.predictor.window, recipe.max_windows, recipe.seed);
    let (lstm, _) = train_autoencoder(&windows, &recipe.autoencoder)?;
    let (gat, _) = train_predictor(scenes, &lstm, &recipe.predictor)?;
    Ok((lstm, gat))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(id: u64, pts: &[(f64, f64)]) -> Trajectory {
        let p: Vec<Point2> = pts.iter().map(|&(x, y)| Point2::new(x, y)).collect();
        Trajectory::from_positions(id, 0.0, 0.4, &p).unwrap()
    }

    #[test]
    fn constant_velocity_extends_last_step() {
        let t = traj(1, &[(0.0, 0.0), (1.0, 0.0), (1.5, 0.5)]);
        let out = constant_velocity(&[t], 2, 0.4);
        let pts: Vec<Point2> = out[0].positions().collect();
        assert_eq!(pts, vec![Point2::new(2.0, 1.0), Point2::new(2.5, 1.5)]);
        assert!((out[0].samples()[1].t - 1.6).abs() < 1e-12);
    }

    #[test]
    fn single_sample_is_stationary() {
        let t = traj(3, &[(2.0, 1.0)]);
        let out = Forecaster::ConstantVelocity
            .forecast(&[t], Point2::ORIGIN, &training_grid(Point2::ORIGIN, Point2::ORIGIN), 3, 0.4)
            .unwrap();
        assert!(out[0].positions().all(|p| p == Point2::new(2.0, 1.0)));
    }

    #[test]
    fn eval_cases_split() {
        let long: Vec<(f64, f64)> = (0..6).map(|k| (k as f64, 0.0)).collect();
        let scene = vec![traj(1, &long), traj(2, &long[..4])];
        let cases = eval_cases(&[scene], 3, 3);
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].observed.len(), 1);
        assert_eq!(cases[0].observed[0].len(), 3);
        assert_eq!(cases[0].truth[0].first().p, Point2::new(3.0, 0.0));
    }

    #[test]
    fn baseline_is_perfect_on_straight_lines() {
        let line: Vec<(f64, f64)> = (0..8).map(|k| (0.5 * k as f64, 1.0)).collect();
        let rep = evaluate(&Forecaster::ConstantVelocity, &[vec![traj(1, &line)]], 4, 4).unwrap();
        assert!(rep.model.ade < 1e-12 && rep.baseline.fde < 1e-12);
        assert_eq!(rep.people, 1);
    }

    #[test]
    fn windows_cover_history() {
        let pts: Vec<(f64, f64)> = (0..5).map(|k| (k as f64, 0.0)).collect();
        let w = history_windows(&[vec![traj(1, &pts)]], 3, 100, 0);
        let lens: Vec<usize> = w.iter().map(|t| t.len()).collect();
        assert_eq!(lens, vec![2, 3, 3, 3]);
    }
}
