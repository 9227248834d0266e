//! Euler rollouts and reconstruction scores.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::coupling::solve_assignment;
use crate::datasets::{Marginal, PointSet, WhitenTransform};
use crate::error::{check_finite, Error, Result};
use crate::matching::VectorFieldModel;
use crate::matrix::Matrix;
use crate::rng::stream;

/// States of a batch on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Matrix>,
}

impl Trajectory {
    pub fn last(&self) -> &Matrix {
        self.states.last().expect("trajectories hold at least the initial state")
    }

    /// State at the grid time closest to `t`.
    pub fn nearest(&self, t: f64) -> (f64, &Matrix) {
        let k = (0..self.times.len())
            .min_by(|&i, &j| (self.times[i] - t).abs().total_cmp(&(self.times[j] - t).abs()))
            .expect("non-empty");
        (self.times[k], &self.states[k])
    }
}

pub const DEFAULT_EULER_STEPS: usize = 100;

fn integrate(vf: &VectorFieldModel, x0: &Matrix, t_start: f64, t_end: f64, steps: usize) -> Result<Trajectory> {
    if x0.cols() != vf.dim() {
        return Err(Error::Shape(format!("states have d={}, field d={}", x0.cols(), vf.dim())));
    }
    check_finite(x0.data(), "initial state")?;
    let dt = (t_end - t_start) / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(t_start);
    states.push(x0.clone());
    for k in 0..steps {
        let t = t_start + k as f64 * dt;
        let x = &states[k];
        let v = vf.velocity(t, x);
        let next = x.zip_map(&v, |a, b| a + dt * b);
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("Euler state became non-finite at step {}", k + 1)));
        }
        times.push(if k + 1 == steps { t_end } else { t_start + (k + 1) as f64 * dt });
        states.push(next);
    }
    Ok(Trajectory { times, states })
}

/// Fixed-step forward Euler from `t_start` to `t_end`, keeping every state.
pub fn euler_rollout(vf: &VectorFieldModel, x0: &Matrix, t_start: f64, t_end: f64, steps: usize) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidArgument("Euler rollout needs at least one step".into()));
    }
    if !(t_end > t_start) {
        return Err(Error::InvalidArgument(format!("rollout needs t_end > t_start (got {t_start} → {t_end})")));
    }
    integrate(vf, x0, t_start, t_end, steps)
}

/// Largest set size solved exactly; bigger inputs are subsampled.
pub const EMD_MAX_POINTS: usize = 2000;

/// Exact W1 between equal-size empirical measures: mean Euclidean cost of the optimal matching.
pub fn emd(a: &PointSet, b: &PointSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("EMD of an empty set".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!("exact EMD needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("EMD dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = a.point(i).iter().zip(b.point(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    }
    let assignment = solve_assignment(&cost, n)?;
    Ok(assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

/// EMD after subsampling both sets (seeded) to `min(|a|, |b|, max_points)`.
pub fn emd_subsampled(a: &PointSet, b: &PointSet, max_points: usize, seed: u64) -> Result<(f64, usize)> {
    let n = a.len().min(b.len()).min(max_points);
    let mut rng = stream(seed, "eval.emd");
    let sa = if a.len() > n { a.subsample(n, &mut rng) } else { a.clone() };
    let sb = if b.len() > n { b.subsample(n, &mut rng) } else { b.clone() };
    Ok((emd(&sa, &sb)?, n))
}

/// Mean of `| ‖x‖ − radius |` over 3D points.
pub fn sphere_distance(points: &PointSet, radius: f64) -> Result<f64> {
    if points.dim() != 3 {
        return Err(Error::Shape(format!("sphere distance needs 3D points, got d={}", points.dim())));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("sphere distance of an empty set".into()));
    }
    let total: f64 = (0..points.len())
        .map(|i| (points.point(i).iter().map(|v| v * v).sum::<f64>().sqrt() - radius).abs())
        .sum();
    Ok(total / points.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    /// Points per side that entered the computation.
    pub sample_size: usize,
    pub seed: u64,
    pub runtime_secs: f64,
}

/// Which observed neighbour seeds the rollout to a held-out time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RolloutOrigin {
    #[default]
    Preceding,
    /// Integrates backwards in time from the next marginal.
    Following,
}

/// Reconstructs the held-out marginal `left_out` from a neighbour and scores it with W1.
///
/// `marginals` are in data space. When `whiten` is given the field was trained on
/// whitened coordinates: the start set is whitened and the result un-whitened before scoring.
pub fn leave_one_out_score(
    marginals: &[Marginal],
    left_out: usize,
    vf: &VectorFieldModel,
    whiten: Option<&WhitenTransform>,
    origin: RolloutOrigin,
    steps: usize,
    seed: u64,
) -> Result<EvalReport> {
    if left_out == 0 || left_out + 1 >= marginals.len() {
        return Err(Error::InvalidArgument(format!(
            "left-out index {left_out} must be interior (1..={})",
            marginals.len().saturating_sub(2)
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one step".into()));
    }
    let started = Instant::now();
    let from = match origin {
        RolloutOrigin::Preceding => &marginals[left_out - 1],
        RolloutOrigin::Following => &marginals[left_out + 1],
    };
    let held = &marginals[left_out];
    let start = match whiten {
        Some(w) => w.apply(&from.points)?,
        None => from.points.clone(),
    };
    let traj = integrate(vf, start.matrix(), from.time, held.time, steps)?;
    let mut reconstructed = PointSet::new(traj.last().clone())?;
    if let Some(w) = whiten {
        reconstructed = w.invert(&reconstructed)?;
    }
    let (value, n) = emd_subsampled(&reconstructed, &held.points, EMD_MAX_POINTS, seed)?;
    Ok(EvalReport {
        metric: "w1_left_out".into(),
        value,
        sample_size: n,
        seed,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}
