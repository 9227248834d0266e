//! Data-dependent diagonal Riemannian metrics.
//!
//! Every metric here is diagonal: `G(x) = diag(g_1(x), …, g_d(x))` with
//! `g_α(x) = 1 / (h_α(x) + ε)` for LAND and `1 / (h̃_α(x)^p + ε)` for RBF, where
//! `h` grows near the data so that paths through data-dense regions are cheap.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::PointSet;
use crate::error::{check_finite, Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Checkpoint, Optimizer, OptimizerConfig};
use crate::rng::stream;

/// Evaluation interface shared by every metric variant.
pub trait DiagonalMetric {
    fn dim(&self) -> usize;

    /// Writes the diagonal of `G(x)` into `out`.
    fn diag_into(&self, x: &[f64], out: &mut [f64]);

    /// Writes the diagonal and its Jacobian `jac[a*d + b] = ∂G_a/∂x_b`.
    fn diag_and_jacobian(&self, x: &[f64], diag: &mut [f64], jac: &mut [f64]);

    fn diag(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.diag_into(x, &mut out);
        out
    }

    /// `vᵀ G(x) v`.
    fn quadratic_form(&self, x: &[f64], v: &[f64]) -> f64 {
        self.diag(x).iter().zip(v).map(|(g, vi)| g * vi * vi).sum()
    }
}

fn check_point(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::Shape(format!("point has dimension {}, metric expects {dim}", x.len())));
    }
    check_finite(x, "point")
}

/// Anchors with `‖x − x_i‖² / 2σ² > LAND_KERNEL_CUTOFF` are skipped; their weight
/// is below `e^{-40} ≈ 4e-18`.
pub const LAND_KERNEL_CUTOFF: f64 = 40.0;

/// Locally adaptive metric built from kernel-weighted second moments of the anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct LandMetric {
    /// Sorted by the first coordinate.
    anchors: Matrix,
    /// First coordinate of each anchor.
    keys: Vec<f64>,
    sigma: f64,
    eps: f64,
}

impl LandMetric {
    pub fn new(anchors: &PointSet, sigma: f64, eps: f64) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::InvalidArgument("LAND needs at least one anchor".into()));
        }
        if !(sigma > 0.0 && eps > 0.0) {
            return Err(Error::InvalidArgument(format!("LAND needs sigma > 0 and eps > 0 (got {sigma}, {eps})")));
        }
        let m = anchors.matrix();
        let mut order: Vec<usize> = (0..m.rows()).collect();
        order.sort_by(|&a, &b| m.get(a, 0).total_cmp(&m.get(b, 0)));
        let anchors = m.select_rows(&order);
        let keys = (0..anchors.rows()).map(|i| anchors.get(i, 0)).collect();
        Ok(LandMetric { anchors, keys, sigma, eps })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn anchors(&self) -> &Matrix {
        &self.anchors
    }

    /// `h_α(x) = Σ_i (x_i^α − x^α)² exp(−‖x − x_i‖² / 2σ²)`.
    pub fn moments(&self, x: &[f64]) -> Vec<f64> {
        let d = self.anchors.cols();
        let mut h = vec![0.0; d];
        self.sums(x, &mut h, None);
        h
    }

    /// Kernel sums over the anchors: `h_p`, and when requested `first_p = Σ u_p w`
    /// and `second_pq = Σ u_p² u_q w` with `u = x_i − x`.
    fn sums(&self, x: &[f64], h: &mut [f64], jac: Option<(&mut [f64], &mut [f64])>) {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        // only anchors with |a_0 − x_0| within the cutoff radius can contribute
        let reach = (LAND_KERNEL_CUTOFF / inv).sqrt();
        let lo = self.keys.partition_point(|&k| k < x[0] - reach);
        let hi = self.keys.partition_point(|&k| k <= x[0] + reach);
        let d = self.anchors.cols();
        let a = &self.anchors.data()[lo * d..hi * d];
        match d {
            1 => land_sums::<1>(a, x, inv, h, jac),
            2 => land_sums::<2>(a, x, inv, h, jac),
            3 => land_sums::<3>(a, x, inv, h, jac),
            d => land_sums_dyn(a, d, x, inv, h, jac),
        }
    }
}

fn land_sums<const D: usize>(anchors: &[f64], x: &[f64], inv: f64, out_h: &mut [f64], jac: Option<(&mut [f64], &mut [f64])>) {
    let x: [f64; D] = x.try_into().expect("point dimension checked by caller");
    let mut h = [0.0; D];
    let mut u = [0.0; D];
    match jac {
        None => {
            for a in anchors.chunks_exact(D) {
                let mut r2 = 0.0;
                for j in 0..D {
                    u[j] = a[j] - x[j];
                    r2 += u[j] * u[j];
                }
                if r2 * inv > LAND_KERNEL_CUTOFF {
                    continue;
                }
                let w = (-r2 * inv).exp();
                for j in 0..D {
                    h[j] += u[j] * (u[j] * w);
                }
            }
        }
        Some((out_first, out_second)) => {
            let mut first = [0.0; D];
            let mut second = [[0.0; D]; D];
            for a in anchors.chunks_exact(D) {
                let mut r2 = 0.0;
                for j in 0..D {
                    u[j] = a[j] - x[j];
                    r2 += u[j] * u[j];
                }
                if r2 * inv > LAND_KERNEL_CUTOFF {
                    continue;
                }
                let w = (-r2 * inv).exp();
                for p in 0..D {
                    let uw = u[p] * w;
                    let u2w = u[p] * uw;
                    h[p] += u2w;
                    first[p] += uw;
                    for q in 0..D {
                        second[p][q] += u2w * u[q];
                    }
                }
            }
            out_first.copy_from_slice(&first);
            for p in 0..D {
                out_second[p * D..(p + 1) * D].copy_from_slice(&second[p]);
            }
        }
    }
    out_h.copy_from_slice(&h);
}

fn land_sums_dyn(anchors: &[f64], d: usize, x: &[f64], inv: f64, h: &mut [f64], mut jac: Option<(&mut [f64], &mut [f64])>) {
    h.fill(0.0);
    if let Some((first, second)) = jac.as_mut() {
        first.fill(0.0);
        second.fill(0.0);
    }
    let mut u = vec![0.0; d];
    for a in anchors.chunks_exact(d) {
        let mut r2 = 0.0;
        for j in 0..d {
            u[j] = a[j] - x[j];
            r2 += u[j] * u[j];
        }
        if r2 * inv > LAND_KERNEL_CUTOFF {
            continue;
        }
        let w = (-r2 * inv).exp();
        match jac.as_mut() {
            None => {
                for j in 0..d {
                    h[j] += u[j] * (u[j] * w);
                }
            }
            Some((first, second)) => {
                for p in 0..d {
                    let uw = u[p] * w;
                    let u2w = u[p] * uw;
                    h[p] += u2w;
                    first[p] += uw;
                    for q in 0..d {
                        second[p * d + q] += u2w * u[q];
                    }
                }
            }
        }
    }
}

impl DiagonalMetric for LandMetric {
    fn dim(&self) -> usize {
        self.anchors.cols()
    }

    fn diag_into(&self, x: &[f64], out: &mut [f64]) {
        self.sums(x, out, None);
        for o in out.iter_mut() {
            *o = 1.0 / (*o + self.eps);
        }
    }

    fn diag_and_jacobian(&self, x: &[f64], diag: &mut [f64], jac: &mut [f64]) {
        let d = self.anchors.cols();
        let s2 = self.sigma * self.sigma;
        let mut first = vec![0.0; d];
        // second[p*d + q] = Σ u_p² u_q w
        let mut second = vec![0.0; d * d];
        self.sums(x, diag, Some((&mut first, &mut second)));
        for p in 0..d {
            let g = 1.0 / (diag[p] + self.eps);
            diag[p] = g;
            for q in 0..d {
                let mut dh = second[p * d + q] / s2;
                if p == q {
                    dh -= 2.0 * first[p];
                }
                jac[p * d + q] = -g * g * dh;
            }
        }
    }
}

/// LAND diagonal at `x`, with input validation.
pub fn land_diag(metric: &LandMetric, x: &[f64]) -> Result<Vec<f64>> {
    check_point(x, metric.dim())?;
    Ok(metric.diag(x))
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centers: Matrix,
    pub assignments: Vec<usize>,
    /// Inertia after every Lloyd iteration.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub const KMEANS_MAX_ITER: usize = 300;

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded with the
/// point farthest from its current center.
pub fn kmeans(points: &PointSet, k: usize, seed: u64) -> Result<KMeans> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidArgument("k-means on an empty point set".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= K <= N (K={k}, N={n})")));
    }
    let d = points.dim();
    let mut rng = stream(seed, "metrics.kmeans");

    // k-means++ seeding
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(points.point(i), points.point(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if b > 0.0 && target < b {
                    pick = i;
                    break;
                }
                target -= b;
            }
            if best[pick] == 0.0 {
                (0..n).rev().find(|&i| best[i] > 0.0).unwrap_or(pick)
            } else {
                pick
            }
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for i in 0..n {
            best[i] = best[i].min(sq_dist(points.point(i), points.point(next)));
        }
    }
    let mut centers = points.matrix().select_rows(&chosen);

    let mut assignments = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    let mut converged = false;
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for i in 0..n {
            let p = points.point(i);
            let mut arg = 0;
            let mut bd = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(p, centers.row(c));
                if dist < bd {
                    bd = dist;
                    arg = c;
                }
            }
            if assignments[i] != arg {
                assignments[i] = arg;
                changed = true;
            }
        }
        repair_empty_clusters(points, &mut centers, &mut assignments, k);
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, v) in sums.row_mut(assignments[i]).iter_mut().zip(points.point(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            let cnt = counts[c] as f64;
            for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / cnt;
            }
        }
        inertia.push((0..n).map(|i| sq_dist(points.point(i), centers.row(assignments[i]))).sum());
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(KMeans { centers, assignments, inertia, converged })
}

fn repair_empty_clusters(points: &PointSet, centers: &mut Matrix, assignments: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let (far, _) = (0..points.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .map(|i| (i, sq_dist(points.point(i), centers.row(assignments[i]))))
            .fold((usize::MAX, -1.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
        if far == usize::MAX {
            return;
        }
        assignments[far] = empty;
        centers.row_mut(empty).copy_from_slice(points.point(far));
    }
}

/// Upper clamp applied to bandwidths of clusters with zero spread.
pub const LAMBDA_MAX: f64 = 1e6;

/// `λ_k = ½ (κ/|C_k| Σ_{x∈C_k} ‖x − x̂_k‖²)^{-2}`, clamped to [`LAMBDA_MAX`].
pub fn rbf_bandwidths(points: &PointSet, assignments: &[usize], centers: &Matrix, kappa: f64) -> Result<Vec<f64>> {
    if kappa <= 0.0 {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
    }
    if assignments.len() != points.len() {
        return Err(Error::Shape("one assignment per point required".into()));
    }
    let k = centers.rows();
    let mut spread = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        spread[a] += sq_dist(points.point(i), centers.row(a));
        counts[a] += 1;
    }
    spread
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(c, (&s, &n))| {
            if n == 0 {
                return Err(Error::InvalidArgument(format!("cluster {c} is empty")));
            }
            let mean = kappa * s / n as f64;
            Ok(if mean > 0.0 { (0.5 / (mean * mean)).min(LAMBDA_MAX) } else { LAMBDA_MAX })
        })
        .collect()
}

/// RBF-network metric over k-means centers.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfMetric {
    /// K×d
    centers: Matrix,
    /// K×d, `λ_{α,k}` stored at `[k, α]`.
    bandwidths: Matrix,
    /// K×d, `ω_{α,k}` stored at `[k, α]`.
    weights: Matrix,
    eps: f64,
    power: u32,
}

impl RbfMetric {
    /// Per-cluster bandwidths broadcast across dimensions, all weights 1.
    pub fn new(centers: Matrix, cluster_bandwidths: &[f64], eps: f64, power: u32) -> Result<Self> {
        let (k, d) = centers.shape();
        if cluster_bandwidths.len() != k {
            return Err(Error::Shape(format!("{} bandwidths for {k} centers", cluster_bandwidths.len())));
        }
        let mut bandwidths = Matrix::zeros(k, d);
        for (c, &l) in cluster_bandwidths.iter().enumerate() {
            bandwidths.row_mut(c).iter_mut().for_each(|v| *v = l);
        }
        Self::from_parts(centers, bandwidths, Matrix::filled(k, d, 1.0), eps, power)
    }

    /// Fully specified metric, including per-dimension bandwidths.
    pub fn from_parts(centers: Matrix, bandwidths: Matrix, weights: Matrix, eps: f64, power: u32) -> Result<Self> {
        if bandwidths.shape() != centers.shape() || weights.shape() != centers.shape() {
            return Err(Error::Shape("centers, bandwidths and weights must all be K×d".into()));
        }
        if centers.rows() == 0 {
            return Err(Error::InvalidArgument("RBF metric needs at least one center".into()));
        }
        if bandwidths.data().iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::InvalidArgument("bandwidths must be >= 0".into()));
        }
        if weights.data().iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("weights must be > 0".into()));
        }
        if !(eps > 0.0) || power == 0 {
            return Err(Error::InvalidArgument(format!("need eps > 0 and power >= 1 (got {eps}, {power})")));
        }
        Ok(RbfMetric { centers, bandwidths, weights, eps, power })
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn bandwidths(&self) -> &Matrix {
        &self.bandwidths
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn power(&self) -> u32 {
        self.power
    }

    pub fn set_eps(&mut self, eps: f64) -> Result<()> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
        }
        self.eps = eps;
        Ok(())
    }

    /// `h̃_α(x) = Σ_k ω_{α,k} exp(−λ_{α,k}/2 ‖x − x̂_k‖²)`.
    pub fn activations(&self, x: &[f64]) -> Vec<f64> {
        let (k, d) = self.centers.shape();
        let mut h = vec![0.0; d];
        for c in 0..k {
            let r2 = sq_dist(x, self.centers.row(c));
            for (a, ha) in h.iter_mut().enumerate() {
                *ha += self.weights.get(c, a) * (-0.5 * self.bandwidths.get(c, a) * r2).exp();
            }
        }
        h
    }
}

impl DiagonalMetric for RbfMetric {
    fn dim(&self) -> usize {
        self.centers.cols()
    }

    fn diag_into(&self, x: &[f64], out: &mut [f64]) {
        let p = self.power as i32;
        for (o, h) in out.iter_mut().zip(self.activations(x)) {
            *o = 1.0 / (h.powi(p) + self.eps);
        }
    }

    fn diag_and_jacobian(&self, x: &[f64], diag: &mut [f64], jac: &mut [f64]) {
        let (k, d) = self.centers.shape();
        let mut h = vec![0.0; d];
        let mut dh = vec![0.0; d * d];
        for c in 0..k {
            let center = self.centers.row(c);
            let r2 = sq_dist(x, center);
            for a in 0..d {
                let lam = self.bandwidths.get(c, a);
                let term = self.weights.get(c, a) * (-0.5 * lam * r2).exp();
                h[a] += term;
                for b in 0..d {
                    dh[a * d + b] -= term * lam * (x[b] - center[b]);
                }
            }
        }
        let p = self.power as i32;
        for a in 0..d {
            let hp = h[a].powi(p);
            let g = 1.0 / (hp + self.eps);
            diag[a] = g;
            let dhp = f64::from(self.power) * h[a].powi(p - 1);
            for b in 0..d {
                jac[a * d + b] = -g * g * dhp * dh[a * d + b];
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfTrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for RbfTrainConfig {
    fn default() -> Self {
        RbfTrainConfig { epochs: 2000, lr: 0.05 }
    }
}

#[derive(Debug, Clone)]
pub struct RbfTrainReport {
    /// `Σ_i (1 − h̃_α(x_i))²` averaged over α, per epoch.
    pub loss: Vec<f64>,
    pub final_loss: f64,
    /// Mean of h̃ over training points and dimensions after training.
    pub mean_activation: f64,
}

/// Fits ω by full-batch Adam on `L = Σ_i (1 − h̃_α(x_i))²` with `ω = softplus(ρ)`.
pub fn train_rbf_weights(metric: &mut RbfMetric, data: &PointSet, cfg: &RbfTrainConfig) -> Result<RbfTrainReport> {
    let (k, d) = metric.centers.shape();
    if data.dim() != d {
        return Err(Error::Shape(format!("data has d={}, metric d={d}", data.dim())));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training points for RBF weights".into()));
    }
    let n = data.len();
    // Dimensions sharing a bandwidth column share a kernel matrix.
    let column = |a: usize| -> Vec<f64> { (0..k).map(|c| metric.bandwidths.get(c, a)).collect() };
    let mut kernels: Vec<(Vec<f64>, Matrix)> = Vec::new();
    let mut kernel_of = vec![0usize; d];
    for a in 0..d {
        let col = column(a);
        if let Some(j) = kernels.iter().position(|(c, _)| *c == col) {
            kernel_of[a] = j;
            continue;
        }
        let mut phi = Matrix::zeros(n, k);
        for i in 0..n {
            for c in 0..k {
                phi.set(i, c, (-0.5 * col[c] * sq_dist(data.point(i), metric.centers.row(c))).exp());
            }
        }
        kernel_of[a] = kernels.len();
        kernels.push((col, phi));
    }

    let mut rho: Vec<Vec<f64>> = (0..d).map(|a| (0..k).map(|c| softplus_inverse(metric.weights.get(c, a))).collect()).collect();
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.lr), &vec![k; d]);
    let mut trace = Vec::with_capacity(cfg.epochs);

    let evaluate = |rho: &[Vec<f64>], with_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut total = 0.0;
        let mut grads = vec![vec![0.0; k]; d];
        for a in 0..d {
            let phi = &kernels[kernel_of[a]].1;
            let w: Vec<f64> = rho[a].iter().map(|&r| softplus(r)).collect();
            for i in 0..n {
                let row = phi.row(i);
                let h: f64 = row.iter().zip(&w).map(|(p, wc)| p * wc).sum();
                let r = 1.0 - h;
                total += r * r;
                if with_grad {
                    for c in 0..k {
                        grads[a][c] -= 2.0 * r * row[c];
                    }
                }
            }
            if with_grad {
                for c in 0..k {
                    grads[a][c] *= sigmoid(rho[a][c]);
                }
            }
        }
        (total / d as f64, grads)
    };

    for epoch in 0..cfg.epochs {
        let (loss, grads) = evaluate(&rho, true);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("RBF weight loss became {loss} at epoch {epoch}")));
        }
        trace.push(loss);
        let mut params: Vec<&mut Vec<f64>> = rho.iter_mut().collect();
        opt.step(&mut params, &grads)?;
    }
    let (final_loss, _) = evaluate(&rho, false);
    if !final_loss.is_finite() {
        return Err(Error::Diverged(format!("RBF weight loss became {final_loss}")));
    }
    for a in 0..d {
        for c in 0..k {
            // softplus can underflow to exactly 0 for very negative ρ
            metric.weights.set(c, a, softplus(rho[a][c]).max(f64::MIN_POSITIVE));
        }
    }
    let mean_activation = (0..n).map(|i| metric.activations(data.point(i)).iter().sum::<f64>()).sum::<f64>() / (n * d) as f64;
    Ok(RbfTrainReport { loss: trace, final_loss, mean_activation })
}

/// How ε is chosen for an RBF metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EpsilonRule {
    Fixed { value: f64 },
    /// `ε = max(1e-4, 1 − L_final / N)` from the weight-training loss.
    Complement,
}

impl EpsilonRule {
    pub fn resolve(&self, final_loss: f64, n_points: usize) -> f64 {
        match *self {
            EpsilonRule::Fixed { value } => value,
            EpsilonRule::Complement => (1.0 - final_loss / n_points as f64).max(1e-4),
        }
    }
}

/// k-means, bandwidths, weight training and ε resolution in one call.
pub fn fit_rbf_metric(
    data: &PointSet,
    clusters: usize,
    kappa: f64,
    eps: EpsilonRule,
    power: u32,
    train: &RbfTrainConfig,
    seed: u64,
) -> Result<(RbfMetric, RbfTrainReport)> {
    let km = kmeans(data, clusters, seed)?;
    let lambdas = rbf_bandwidths(data, &km.assignments, &km.centers, kappa)?;
    let initial_eps = match eps {
        EpsilonRule::Fixed { value } => value,
        EpsilonRule::Complement => 1.0,
    };
    let mut metric = RbfMetric::new(km.centers, &lambdas, initial_eps, power)?;
    let report = train_rbf_weights(&mut metric, data, train)?;
    metric.set_eps(eps.resolve(report.final_loss, data.len()))?;
    Ok((metric, report))
}

/// The metric used by a pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricField {
    Identity { dim: usize },
    Land(LandMetric),
    Rbf(RbfMetric),
}

impl MetricField {
    pub fn name(&self) -> &'static str {
        match self {
            MetricField::Identity { .. } => "identity",
            MetricField::Land(_) => "land",
            MetricField::Rbf(_) => "rbf",
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, MetricField::Identity { .. })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("metric").with_meta("variant", self.name());
        match self {
            MetricField::Identity { dim } => c = c.with_meta("dim", dim),
            MetricField::Land(m) => {
                c = c.with_meta("sigma", format!("{:e}", m.sigma)).with_meta("eps", format!("{:e}", m.eps));
                c.push("anchors", m.anchors.clone());
            }
            MetricField::Rbf(m) => {
                c = c.with_meta("eps", format!("{:e}", m.eps)).with_meta("power", m.power);
                c.push("centers", m.centers.clone());
                c.push("bandwidths", m.bandwidths.clone());
                c.push("weights", m.weights.clone());
            }
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("metric")?;
        match c.meta_str("variant")? {
            "identity" => Ok(MetricField::Identity {
                dim: c.meta_str("dim")?.parse().map_err(|_| Error::Parse("bad dim".into()))?,
            }),
            "land" => Ok(MetricField::Land(LandMetric::new(
                &PointSet::new(c.tensor("anchors")?.clone())?,
                c.meta_f64("sigma")?,
                c.meta_f64("eps")?,
            )?)),
            "rbf" => Ok(MetricField::Rbf(RbfMetric::from_parts(
                c.tensor("centers")?.clone(),
                c.tensor("bandwidths")?.clone(),
                c.tensor("weights")?.clone(),
                c.meta_f64("eps")?,
                c.meta_str("power")?.parse().map_err(|_| Error::Parse("bad power".into()))?,
            )?)),
            other => Err(Error::Parse(format!("unknown metric variant `{other}`"))),
        }
    }
}

impl DiagonalMetric for MetricField {
    fn dim(&self) -> usize {
        match self {
            MetricField::Identity { dim } => *dim,
            MetricField::Land(m) => m.dim(),
            MetricField::Rbf(m) => m.dim(),
        }
    }

    fn diag_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            MetricField::Identity { .. } => out.iter_mut().for_each(|v| *v = 1.0),
            MetricField::Land(m) => m.diag_into(x, out),
            MetricField::Rbf(m) => m.diag_into(x, out),
        }
    }

    fn diag_and_jacobian(&self, x: &[f64], diag: &mut [f64], jac: &mut [f64]) {
        match self {
            MetricField::Identity { .. } => {
                diag.iter_mut().for_each(|v| *v = 1.0);
                jac.iter_mut().for_each(|v| *v = 0.0);
            }
            MetricField::Land(m) => m.diag_and_jacobian(x, diag, jac),
            MetricField::Rbf(m) => m.diag_and_jacobian(x, diag, jac),
        }
    }
}

/// Diagonal of `G(x)` for any metric variant, with input validation.
pub fn metric_diag(metric: &MetricField, x: &[f64]) -> Result<Vec<f64>> {
    check_point(x, metric.dim())?;
    Ok(metric.diag(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_arch, WhitenTransform};
    use proptest::prelude::*;

    fn two_anchor() -> LandMetric {
        LandMetric::new(&PointSet::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap(), 1.0, 0.001).unwrap()
    }

    #[test]
    fn land_single_anchor_at_query() {
        let m = LandMetric::new(&PointSet::from_rows(&[[0.0, 0.0]]).unwrap(), 0.3, 0.001).unwrap();
        let g = land_diag(&m, &[0.0, 0.0]).unwrap();
        assert!((g[0] - 1000.0).abs() < 1e-9 && (g[1] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn land_two_anchors_by_hand() {
        let g = land_diag(&two_anchor(), &[0.0, 0.0]).unwrap();
        let h1 = 2.0 * (-0.5f64).exp();
        assert!((h1 - 1.21306).abs() < 1e-5);
        assert!((g[0] - 1.0 / (h1 + 0.001)).abs() < 1e-12);
        assert!((g[1] - 1000.0).abs() < 1e-9);
        assert!(land_diag(&two_anchor(), &[0.0]).is_err());
    }

    #[test]
    fn land_decays_to_inverse_eps_far_away() {
        let m = two_anchor();
        let g = m.diag(&[40.0, 40.0]);
        assert!(g.iter().all(|v| (v - 1000.0).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_land_parameters() {
        let p = PointSet::from_rows(&[[0.0]]).unwrap();
        assert!(LandMetric::new(&p, 0.0, 0.1).is_err());
        assert!(LandMetric::new(&p, 1.0, 0.0).is_err());
    }

    fn check_jacobian(metric: &dyn DiagonalMetric, x: &[f64]) {
        let d = metric.dim();
        let mut diag = vec![0.0; d];
        let mut jac = vec![0.0; d * d];
        metric.diag_and_jacobian(x, &mut diag, &mut jac);
        assert_eq!(diag, metric.diag(x));
        let h = 1e-6;
        for b in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[b] += h;
            xm[b] -= h;
            let (gp, gm) = (metric.diag(&xp), metric.diag(&xm));
            for a in 0..d {
                let fd = (gp[a] - gm[a]) / (2.0 * h);
                let an = jac[a * d + b];
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3), "∂G{a}/∂x{b}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn land_jacobian_matches_finite_differences() {
        let arch = generate_arch(200, 1).unwrap();
        let m = LandMetric::new(&arch.source, 0.3, 0.01).unwrap();
        for x in [[0.9, 0.1], [0.3, 0.8], [-0.2, 0.0]] {
            check_jacobian(&m, &x);
        }
    }

    #[test]
    fn rbf_jacobian_matches_finite_differences() {
        let centers = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.5]]).unwrap();
        let bw = Matrix::from_rows(&[[2.0, 1.0], [0.5, 3.0]]).unwrap();
        let w = Matrix::from_rows(&[[0.7, 1.2], [1.1, 0.4]]).unwrap();
        for p in [1, 3] {
            let m = RbfMetric::from_parts(centers.clone(), bw.clone(), w.clone(), 0.01, p).unwrap();
            check_jacobian(&m, &[0.4, 0.2]);
            check_jacobian(&m, &[-0.5, 1.0]);
        }
    }

    #[test]
    fn rbf_at_its_center() {
        let m = RbfMetric::new(Matrix::from_rows(&[[0.5, -0.5]]).unwrap(), &[3.0], 0.01, 1).unwrap();
        let g = metric_diag(&MetricField::Rbf(m), &[0.5, -0.5]).unwrap();
        assert!(g.iter().all(|v| (v - 1.0 / 1.01).abs() < 1e-15));
    }

    #[test]
    fn identity_and_dispatch() {
        assert_eq!(metric_diag(&MetricField::Identity { dim: 3 }, &[1.0, 2.0, 3.0]).unwrap(), vec![1.0; 3]);
        let land = two_anchor();
        assert_eq!(metric_diag(&MetricField::Land(land.clone()), &[0.0, 0.0]).unwrap(), land_diag(&land, &[0.0, 0.0]).unwrap());
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let p = PointSet::from_rows(&[[0.0, 1.0], [2.0, 3.0], [4.0, -1.0]]).unwrap();
        let km = kmeans(&p, 1, 0).unwrap();
        assert_eq!(km.centers.row(0), &[2.0, 1.0]);
    }

    #[test]
    fn kmeans_recovers_blob_means() {
        let mut rows = Vec::new();
        for i in 0..20 {
            let dx = (i as f64 * 0.37).sin() * 0.1;
            let dy = (i as f64 * 0.91).cos() * 0.1;
            rows.push([dx, dy]);
            rows.push([10.0 + dy, 10.0 + dx]);
        }
        let p = PointSet::from_rows(&rows).unwrap();
        let km = kmeans(&p, 2, 3).unwrap();
        assert!(km.converged);
        let mean = |off: usize| -> [f64; 2] {
            let mut m = [0.0; 2];
            for r in rows.iter().skip(off).step_by(2) {
                m[0] += r[0] / 20.0;
                m[1] += r[1] / 20.0;
            }
            m
        };
        let (a, b) = (mean(0), mean(1));
        let mut centers: Vec<&[f64]> = (0..2).map(|c| km.centers.row(c)).collect();
        centers.sort_by(|x, y| x[0].total_cmp(&y[0]));
        for (c, m) in centers.iter().zip([a, b]) {
            assert!((c[0] - m[0]).abs() < 1e-9 && (c[1] - m[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_k_equals_n() {
        let p = PointSet::from_rows(&[[0.0], [1.0], [5.0], [9.0]]).unwrap();
        let km = kmeans(&p, 4, 1).unwrap();
        assert_eq!(*km.inertia.last().unwrap(), 0.0);
        assert!(kmeans(&p, 5, 1).is_err());
        assert!(kmeans(&p, 0, 1).is_err());
    }

    #[test]
    fn kmeans_handles_duplicate_points() {
        let p = PointSet::from_rows(&[[1.0], [1.0], [1.0], [2.0]]).unwrap();
        let km = kmeans(&p, 3, 2).unwrap();
        let mut counts = vec![0; 3];
        km.assignments.iter().for_each(|&a| counts[a] += 1);
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn kmeans_inertia_never_increases() {
        let p = generate_arch(500, 2).unwrap().source;
        let km = kmeans(&p, 12, 5).unwrap();
        for w in km.inertia.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", km.inertia);
        }
    }

    #[test]
    fn bandwidth_formula() {
        let p = PointSet::from_rows(&[[1.0], [-1.0]]).unwrap();
        let centers = Matrix::from_rows(&[[0.0]]).unwrap();
        assert_eq!(rbf_bandwidths(&p, &[0, 0], &centers, 1.0).unwrap(), vec![0.5]);
        assert_eq!(rbf_bandwidths(&p, &[0, 0], &centers, 2.0).unwrap(), vec![0.125]);
        let flat = PointSet::from_rows(&[[0.0], [0.0]]).unwrap();
        assert_eq!(rbf_bandwidths(&flat, &[0, 0], &centers, 1.0).unwrap(), vec![LAMBDA_MAX]);
    }

    #[test]
    fn rbf_weight_exact_interpolation() {
        let p = PointSet::from_rows(&[[0.3, 0.3]]).unwrap();
        let mut m = RbfMetric::new(Matrix::from_rows(&[[0.3, 0.3]]).unwrap(), &[5.0], 0.01, 1).unwrap();
        let rep = train_rbf_weights(&mut m, &p, &RbfTrainConfig::default()).unwrap();
        assert!(rep.final_loss < 1e-8);
        assert!((m.weights().get(0, 0) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn rbf_weight_closed_form_one_cluster() {
        // Two points at distance 1 from the center with λ = 2: kernel e^{-1} each,
        // so the least-squares optimum is ω = e.
        let p = PointSet::from_rows(&[[1.0], [-1.0]]).unwrap();
        let mut m = RbfMetric::new(Matrix::from_rows(&[[0.0]]).unwrap(), &[2.0], 0.01, 1).unwrap();
        let kernel = (-1.0f64).exp();
        train_rbf_weights(&mut m, &p, &RbfTrainConfig { epochs: 4000, lr: 0.05 }).unwrap();
        assert!((m.weights().get(0, 0) - 1.0 / kernel).abs() < 1e-3, "{}", m.weights().get(0, 0));
    }

    #[test]
    fn rbf_trained_on_arch_fits_and_prefers_data() {
        // the bandwidth rule scales as 1/spread², so the fit is done on whitened data
        let arch = generate_arch(500, 3).unwrap();
        let raw = PointSet::concat(&[&arch.source, &arch.target]).unwrap();
        let data = WhitenTransform::fit(&raw).unwrap().apply(&raw).unwrap();
        let (m, rep) = fit_rbf_metric(&data, 2, 1.5, EpsilonRule::Fixed { value: 1e-3 }, 1, &RbfTrainConfig::default(), 3).unwrap();
        assert!((0.5..=1.5).contains(&rep.mean_activation), "{}", rep.mean_activation);
        let mean_abs_gap = (0..data.len())
            .map(|i| m.activations(data.point(i)).iter().map(|h| (1.0 - h).abs()).sum::<f64>() / 2.0)
            .sum::<f64>()
            / data.len() as f64;
        assert!(mean_abs_gap < 0.2, "mean |1 − h̃| = {mean_abs_gap}");
        let mut diameter: f64 = 0.0;
        for i in 0..data.len() {
            for j in 0..i {
                diameter = diameter.max(sq_dist(data.point(i), data.point(j)).sqrt());
            }
        }
        let far: f64 = (0..16)
            .map(|j| {
                let a = j as f64 * std::f64::consts::PI / 8.0;
                let r = 3.0 * diameter;
                m.activations(&[r * a.cos(), r * a.sin()]).iter().sum::<f64>() / 2.0
            })
            .sum::<f64>()
            / 16.0;
        assert!(rep.mean_activation >= 10.0 * far, "near {} far {far}", rep.mean_activation);
    }

    #[test]
    fn epsilon_complement_rule() {
        assert_eq!(EpsilonRule::Complement.resolve(10.0, 100), 0.9);
        assert_eq!(EpsilonRule::Complement.resolve(200.0, 100), 1e-4);
        assert_eq!(EpsilonRule::Fixed { value: 0.5 }.resolve(1.0, 1), 0.5);
    }

    #[test]
    fn metric_checkpoint_round_trip() {
        let m = MetricField::Land(two_anchor());
        let back = MetricField::from_checkpoint(&Checkpoint::parse(&m.to_checkpoint().to_text()).unwrap()).unwrap();
        assert_eq!(m, back);
        let r = MetricField::Rbf(RbfMetric::new(Matrix::from_rows(&[[0.1, 0.2]]).unwrap(), &[0.3], 0.01, 8).unwrap());
        assert_eq!(r, MetricField::from_checkpoint(&Checkpoint::parse(&r.to_checkpoint().to_text()).unwrap()).unwrap());
    }

    proptest! {
        #[test]
        fn land_diagonal_is_positive_and_bounded(x in -3.0f64..3.0, y in -3.0f64..3.0, sigma in 0.05f64..2.0) {
            let anchors = PointSet::from_rows(&[[0.2, 0.1], [-0.7, 0.4], [1.5, -1.0]]).unwrap();
            let eps = 0.01;
            let m = LandMetric::new(&anchors, sigma, eps).unwrap();
            for g in m.diag(&[x, y]) {
                prop_assert!(g > 0.0 && g <= 1.0 / eps);
            }
        }

        #[test]
        fn rbf_diagonal_is_positive(x in -10.0f64..10.0, y in -10.0f64..10.0) {
            let m = RbfMetric::new(Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap(), &[1.0, 4.0], 1e-4, 2).unwrap();
            for g in m.diag(&[x, y]) {
                prop_assert!(g.is_finite() && g > 0.0);
            }
        }
    }
}
