//! Reference geodesics by direct minimisation of a discrete path energy.
//!
//! A path is a polyline `γ_0, …, γ_M` with pinned endpoints. Its energy is
//! `E = Σ_k M · Δ_kᵀ G(m_k) Δ_k` with `Δ_k = γ_{k+1} − γ_k` and `m_k` the segment
//! midpoint, which approximates `∫₀¹ γ̇ᵀ G γ̇ dt` on a uniform time grid.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::PointSet;
use crate::error::{check_finite, Error, Result};
use crate::interpolant::InterpolantModel;
use crate::matrix::Matrix;
use crate::metrics::DiagonalMetric;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    /// (M+1)×d waypoints.
    pub points: Matrix,
}

impl DiscretePath {
    pub fn chord(x0: &[f64], x1: &[f64], segments: usize) -> Self {
        let d = x0.len();
        let mut points = Matrix::zeros(segments + 1, d);
        for k in 0..=segments {
            let s = k as f64 / segments as f64;
            for (j, p) in points.row_mut(k).iter_mut().enumerate() {
                *p = (1.0 - s) * x0[j] + s * x1[j];
            }
        }
        DiscretePath { points }
    }

    pub fn segments(&self) -> usize {
        self.points.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Midpoints inserted between consecutive waypoints (2M segments).
    pub fn refined(&self) -> Self {
        let m = self.segments();
        let d = self.dim();
        let mut points = Matrix::zeros(2 * m + 1, d);
        for k in 0..m {
            points.row_mut(2 * k).copy_from_slice(self.points.row(k));
            let (a, b) = (self.points.row(k), self.points.row(k + 1));
            for (j, p) in points.row_mut(2 * k + 1).iter_mut().enumerate() {
                *p = 0.5 * (a[j] + b[j]);
            }
        }
        points.row_mut(2 * m).copy_from_slice(self.points.row(m));
        DiscretePath { points }
    }
}

/// Discrete energy `Σ_k M · Δ_kᵀ G(m_k) Δ_k`.
pub fn discrete_energy<M: DiagonalMetric + ?Sized>(path: &DiscretePath, metric: &M) -> f64 {
    let m = path.segments();
    let d = path.dim();
    let mut mid = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut total = 0.0;
    for k in 0..m {
        let (a, b) = (path.points.row(k), path.points.row(k + 1));
        for j in 0..d {
            mid[j] = 0.5 * (a[j] + b[j]);
        }
        metric.diag_into(&mid, &mut g);
        for j in 0..d {
            let delta = b[j] - a[j];
            total += g[j] * delta * delta;
        }
    }
    total * m as f64
}

/// Energy and its gradient over all waypoints (endpoint rows included but unused).
fn energy_and_grad<M: DiagonalMetric + ?Sized>(path: &DiscretePath, metric: &M) -> (f64, Matrix) {
    let m = path.segments();
    let d = path.dim();
    let scale = m as f64;
    let mut grad = Matrix::zeros(m + 1, d);
    let mut mid = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut delta = vec![0.0; d];
    let mut total = 0.0;
    for k in 0..m {
        let (a, b) = (path.points.row(k), path.points.row(k + 1));
        for j in 0..d {
            mid[j] = 0.5 * (a[j] + b[j]);
            delta[j] = b[j] - a[j];
        }
        metric.diag_and_jacobian(&mid, &mut g, &mut jac);
        for j in 0..d {
            total += g[j] * delta[j] * delta[j];
        }
        for beta in 0..d {
            let through_mid: f64 = (0..d).map(|alpha| delta[alpha] * delta[alpha] * jac[alpha * d + beta]).sum::<f64>() * 0.5;
            let through_delta = 2.0 * g[beta] * delta[beta];
            grad.row_mut(k)[beta] += scale * (through_mid - through_delta);
            grad.row_mut(k + 1)[beta] += scale * (through_mid + through_delta);
        }
    }
    (total * scale, grad)
}

/// Riemannian length `Σ_k √(Δ_kᵀ G(m_k) Δ_k)`.
pub fn path_length<M: DiagonalMetric + ?Sized>(path: &DiscretePath, metric: &M) -> f64 {
    let d = path.dim();
    let mut mid = vec![0.0; d];
    let mut g = vec![0.0; d];
    (0..path.segments())
        .map(|k| {
            let (a, b) = (path.points.row(k), path.points.row(k + 1));
            for j in 0..d {
                mid[j] = 0.5 * (a[j] + b[j]);
            }
            metric.diag_into(&mid, &mut g);
            (0..d).map(|j| g[j] * (b[j] - a[j]).powi(2)).sum::<f64>().sqrt()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeodesicSolverConfig {
    pub segments: usize,
    pub max_iters: usize,
    /// Extra starts: the chord bent by seeded random sine bumps.
    pub restarts: usize,
    /// Stop when the largest gradient entry falls below this times `max(1, E)`.
    pub grad_tol: f64,
    /// Also stop once the energy has dropped by less than this fraction over the
    /// last `STALL_WINDOW` steps. Stiff LAND problems reach the gradient noise floor
    /// well before `grad_tol`.
    pub energy_tol: f64,
}

impl Default for GeodesicSolverConfig {
    fn default() -> Self {
        GeodesicSolverConfig { segments: 32, max_iters: 3000, restarts: 8, grad_tol: 1e-9, energy_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicSolution {
    pub path: DiscretePath,
    pub energy: f64,
    pub chord_energy: f64,
    /// False when the best start hit `max_iters` before meeting the gradient tolerance.
    pub converged: bool,
    pub iterations: usize,
}

const LBFGS_MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const STALL_WINDOW: usize = 10;

/// Descent from `path` along limited-memory quasi-Newton directions with
/// backtracking; every accepted step lowers the energy.
fn descend<M: DiagonalMetric + ?Sized>(mut path: DiscretePath, metric: &M, cfg: &GeodesicSolverConfig) -> (DiscretePath, f64, bool, usize) {
    let m = path.segments();
    let d = path.dim();
    let interior = |mat: &Matrix| -> Vec<f64> { mat.data()[d..m * d].to_vec() };
    let (mut energy, g) = energy_and_grad(&path, metric);
    let mut grad = interior(&g);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut step0 = 1.0 / grad.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let mut recent: VecDeque<f64> = VecDeque::from([energy]);
    for iter in 0..cfg.max_iters {
        let gmax = grad.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if gmax <= cfg.grad_tol * energy.max(1.0) {
            return (path, energy, true, iter);
        }
        // two-loop recursion
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(&mut q, -a, y);
            alphas.push(a);
        }
        let gamma = history.back().map(|(s, y, _)| dot(s, y) / dot(y, y)).unwrap_or(step0);
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(&mut q, a - b, s);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &grad);
        if !(slope < 0.0) {
            history.clear();
            dir = grad.iter().map(|v| -v * step0).collect();
            slope = dot(&dir, &grad);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = path.clone();
            for (p, dv) in trial.points.data_mut()[d..m * d].iter_mut().zip(&dir) {
                *p += step * dv;
            }
            let (e, g) = energy_and_grad(&trial, metric);
            if e.is_finite() && e <= energy + ARMIJO * step * slope {
                accepted = Some((trial, e, interior(&g)));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, e, g_new)) = accepted else {
            // no decrease along any tried step: stationary to working precision
            return (path, energy, true, iter);
        };
        let s: Vec<f64> = dir.iter().map(|v| v * step).collect();
        let y: Vec<f64> = g_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let improved = energy - e;
        path = trial;
        energy = e;
        grad = g_new;
        if improved <= 1e-15 * energy.abs() {
            step0 *= 0.5;
        }
        recent.push_back(energy);
        if recent.len() > STALL_WINDOW {
            let old = recent.pop_front().unwrap_or(energy);
            if old - energy <= cfg.energy_tol * energy.abs().max(1e-300) {
                return (path, energy, true, iter + 1);
            }
        }
    }
    (path, energy, false, cfg.max_iters)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Chord bent by `Σ_j c_j sin(jπs)` along random directions orthogonal to the chord.
fn bent_start(x0: &[f64], x1: &[f64], segments: usize, rng: &mut crate::rng::Rng) -> DiscretePath {
    let d = x0.len();
    let mut path = DiscretePath::chord(x0, x1, segments);
    let chord: Vec<f64> = x1.iter().zip(x0).map(|(a, b)| a - b).collect();
    let len = dot(&chord, &chord).sqrt();
    let amplitude = len.max(1e-3);
    for mode in 1..=2 {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if len > 0.0 {
            let proj = dot(&dir, &chord) / (len * len);
            axpy(&mut dir, -proj, &chord);
        }
        let norm = dot(&dir, &dir).sqrt();
        if norm == 0.0 {
            continue;
        }
        let c = rng.gen_range(-0.75..0.75) * amplitude / mode as f64;
        for k in 1..segments {
            let s = k as f64 / segments as f64;
            let w = c * (mode as f64 * std::f64::consts::PI * s).sin() / norm;
            axpy(path.points.row_mut(k), w, &dir);
        }
    }
    path
}

/// Minimum-energy polyline between `x0` and `x1`, started from the chord and from
/// `cfg.restarts` seeded bent chords; the lowest final energy wins.
pub fn solve_discrete_geodesic<M: DiagonalMetric + ?Sized>(
    x0: &[f64],
    x1: &[f64],
    metric: &M,
    cfg: &GeodesicSolverConfig,
    seed: u64,
) -> Result<GeodesicSolution> {
    if cfg.segments < 2 {
        return Err(Error::InvalidArgument("a discrete geodesic needs at least 2 segments".into()));
    }
    if x0.len() != metric.dim() || x1.len() != metric.dim() {
        return Err(Error::Shape(format!("endpoints must have d={}", metric.dim())));
    }
    check_finite(x0, "x0")?;
    check_finite(x1, "x1")?;
    let chord = DiscretePath::chord(x0, x1, cfg.segments);
    let chord_energy = discrete_energy(&chord, metric);
    let mut rng = stream(seed, "oracle.restarts");
    let mut starts = vec![chord];
    for _ in 0..cfg.restarts {
        starts.push(bent_start(x0, x1, cfg.segments, &mut rng));
    }
    let mut best: Option<GeodesicSolution> = None;
    for start in starts {
        let (path, energy, converged, iterations) = descend(start, metric, cfg);
        if best.as_ref().map_or(true, |b| energy < b.energy) {
            best = Some(GeodesicSolution { path, energy, chord_energy, converged, iterations });
        }
    }
    let best = best.expect("at least the chord start");
    if !best.converged {
        log::warn!("discrete geodesic stopped after {} iterations without meeting the tolerance", best.iterations);
    }
    Ok(best)
}

/// Minimizes the discrete energy from a given initial path (e.g. a refined coarse
/// solution). The endpoints of `start` are kept fixed; `cfg.segments` and
/// `cfg.restarts` are ignored.
pub fn refine_discrete_geodesic<M: DiagonalMetric + ?Sized>(
    start: DiscretePath,
    metric: &M,
    cfg: &GeodesicSolverConfig,
) -> Result<GeodesicSolution> {
    if start.segments() < 2 {
        return Err(Error::InvalidArgument("a discrete geodesic needs at least 2 segments".into()));
    }
    if start.dim() != metric.dim() {
        return Err(Error::Shape(format!("path has d={}, metric expects {}", start.dim(), metric.dim())));
    }
    check_finite(start.points.data(), "path")?;
    let m = start.segments();
    let chord = DiscretePath::chord(start.points.row(0), start.points.row(m), m);
    let chord_energy = discrete_energy(&chord, metric);
    let (path, energy, converged, iterations) = descend(start, metric, cfg);
    if !converged {
        log::warn!("discrete geodesic stopped after {iterations} iterations without meeting the tolerance");
    }
    Ok(GeodesicSolution { path, energy, chord_energy, converged, iterations })
}

/// Constants of the containment statement: tube radius ρ, data proximity δ, length
/// bound Γ and metric floor κ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContainmentSpec {
    pub rho: f64,
    pub delta: f64,
    pub gamma: f64,
    pub kappa: f64,
}

impl ContainmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > self.delta && self.delta > 0.0 && self.gamma > 0.0 && self.kappa > 0.0) {
            return Err(Error::InvalidArgument(format!("containment needs rho > delta > 0, gamma > 0, kappa > 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Containment {
    pub contained: bool,
    /// `max_k min_i ‖γ_k − x_i‖`.
    pub max_distance: f64,
}

/// Whether every waypoint lies within `2ρ` of the data.
pub fn check_containment(path: &DiscretePath, data: &PointSet, spec: &ContainmentSpec) -> Result<Containment> {
    spec.validate()?;
    if data.is_empty() || data.dim() != path.dim() {
        return Err(Error::Shape("containment needs non-empty data of the path's dimension".into()));
    }
    let max_distance = (0..path.points.rows())
        .map(|k| {
            let w = path.points.row(k);
            (0..data.len())
                .map(|i| w.iter().zip(data.point(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .fold(0.0, f64::max);
    Ok(Containment { contained: max_distance <= 2.0 * spec.rho, max_distance })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolantComparison {
    /// Discrete energy of the interpolant sampled on the same grid.
    pub interpolant_energy: f64,
    pub geodesic_energy: f64,
    pub chord_energy: f64,
    pub energy_gap: f64,
    pub relative_gap: f64,
    /// Largest distance from an interpolant sample to the geodesic polyline.
    pub max_pointwise_gap: f64,
    pub geodesic: GeodesicSolution,
}

/// Samples the interpolant at `t_k = k/M` as a polyline.
pub fn interpolant_path(interpolant: &InterpolantModel, x0: &[f64], x1: &[f64], segments: usize) -> Result<DiscretePath> {
    let t: Vec<f64> = (0..=segments).map(|k| k as f64 / segments as f64).collect();
    let rep = |x: &[f64]| Matrix::from_rows(&vec![x; segments + 1]);
    let (points, _) = interpolant.evaluate(&t, 0.0, 1.0, &rep(x0)?, &rep(x1)?)?;
    Ok(DiscretePath { points })
}

fn distance_to_polyline(p: &[f64], path: &DiscretePath) -> f64 {
    (0..path.segments())
        .map(|k| {
            let (a, b) = (path.points.row(k), path.points.row(k + 1));
            let ab: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
            let ap: Vec<f64> = p.iter().zip(a).map(|(x, y)| x - y).collect();
            let len2 = dot(&ab, &ab);
            let s = if len2 > 0.0 { (dot(&ap, &ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
            ap.iter().zip(&ab).map(|(u, v)| (u - s * v).powi(2)).sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Energy and pointwise gaps between a learned interpolant and the reference geodesic.
pub fn interpolant_vs_geodesic<M: DiagonalMetric + ?Sized>(
    interpolant: &InterpolantModel,
    metric: &M,
    x0: &[f64],
    x1: &[f64],
    cfg: &GeodesicSolverConfig,
    seed: u64,
) -> Result<InterpolantComparison> {
    let geodesic = solve_discrete_geodesic(x0, x1, metric, cfg, seed)?;
    let sampled = interpolant_path(interpolant, x0, x1, cfg.segments)?;
    let interpolant_energy = discrete_energy(&sampled, metric);
    let max_pointwise_gap = (0..sampled.points.rows())
        .map(|k| distance_to_polyline(sampled.points.row(k), &geodesic.path))
        .fold(0.0, f64::max);
    let energy_gap = interpolant_energy - geodesic.energy;
    Ok(InterpolantComparison {
        interpolant_energy,
        geodesic_energy: geodesic.energy,
        chord_energy: geodesic.chord_energy,
        energy_gap,
        relative_gap: energy_gap / geodesic.energy,
        max_pointwise_gap,
        geodesic,
    })
}
