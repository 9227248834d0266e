//! Learned interpolants `x_t = a(t)·x0 + b(t)·x1 + c(t)·φ(t, x0, x1)`.
//!
//! On a segment `[t0, t1]` with `a = (t1 − t)/Δ` and `b = (t − t0)/Δ`, the gate is
//! `c = a·b` for the pairwise form (which is `t(1 − t)` on `[0, 1]`) and
//! `c = 1 − a² − b²` for the multi-marginal form. Both vanish at the endpoints, so
//! the boundary conditions hold for any network.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{DiagonalMetric, MetricField};
use crate::nn::{Checkpoint, MlpParams, MlpVars, Optimizer, OptimizerConfig, Tape, Var};
use crate::rng::{stream, Rng};
use crate::training::{early_stopping, LossTrace, PairBatch, PairSampler, StoppingConfig, ValidationSet};

pub const DEFAULT_FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolantVariant {
    Pairwise,
    Multi,
}

impl InterpolantVariant {
    pub fn name(self) -> &'static str {
        match self {
            InterpolantVariant::Pairwise => "pairwise",
            InterpolantVariant::Multi => "multi",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolantModel {
    net: MlpParams,
    dim: usize,
    variant: InterpolantVariant,
    fd_step: f64,
    time_input: bool,
}

fn input_width(dim: usize, time_input: bool) -> usize {
    2 * dim + usize::from(time_input)
}

impl InterpolantModel {
    /// Randomly initialised correction network with `depth` hidden layers of width `hidden`.
    pub fn new(dim: usize, hidden: usize, depth: usize, variant: InterpolantVariant, rng: &mut Rng) -> Self {
        let net = MlpParams::new(input_width(dim, true), hidden, depth, dim, rng);
        InterpolantModel { net, dim, variant, fd_step: DEFAULT_FD_STEP, time_input: true }
    }

    /// φ ≡ 0, i.e. straight lines.
    pub fn straight(dim: usize, variant: InterpolantVariant) -> Self {
        let net = MlpParams::zeros(input_width(dim, true), 1, 0, dim);
        InterpolantModel { net, dim, variant, fd_step: DEFAULT_FD_STEP, time_input: true }
    }

    pub fn from_network(net: MlpParams, variant: InterpolantVariant, fd_step: f64, time_input: bool) -> Result<Self> {
        let dim = net.output_width();
        if net.input_width() != input_width(dim, time_input) {
            return Err(Error::Shape(format!(
                "correction network takes {} inputs, expected {} for d={dim}",
                net.input_width(),
                input_width(dim, time_input)
            )));
        }
        if !(fd_step > 0.0 && fd_step < 0.5) {
            return Err(Error::InvalidArgument(format!("finite-difference step {fd_step} outside (0, 0.5)")));
        }
        Ok(InterpolantModel { net, dim, variant, fd_step, time_input })
    }

    /// Ablation: φ ignores time, so its time derivative is zero.
    pub fn without_time_input(dim: usize, hidden: usize, depth: usize, variant: InterpolantVariant, rng: &mut Rng) -> Self {
        let net = MlpParams::new(input_width(dim, false), hidden, depth, dim, rng);
        InterpolantModel { net, dim, variant, fd_step: DEFAULT_FD_STEP, time_input: false }
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpParams {
        &mut self.net
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn variant(&self) -> InterpolantVariant {
        self.variant
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    pub fn time_input(&self) -> bool {
        self.time_input
    }

    fn check(&self, t: &[f64], t0: f64, t1: f64, x0: &Matrix, x1: &Matrix) -> Result<()> {
        if x0.shape() != x1.shape() || x0.cols() != self.dim || t.len() != x0.rows() {
            return Err(Error::Shape(format!(
                "interpolant of d={} got endpoints {:?}/{:?} and {} times",
                self.dim,
                x0.shape(),
                x1.shape(),
                t.len()
            )));
        }
        if !(t1 > t0) {
            return Err(Error::InvalidArgument(format!("segment [{t0}, {t1}] is empty")));
        }
        if let Some(bad) = t.iter().find(|&&s| !(t0..=t1).contains(&s)) {
            return Err(Error::InvalidArgument(format!("t = {bad} outside [{t0}, {t1}]")));
        }
        check_finite(x0.data(), "x0")?;
        check_finite(x1.data(), "x1")
    }

    fn net_input(&self, t: &[f64], x0: &Matrix, x1: &Matrix) -> Matrix {
        if self.time_input {
            Matrix::hconcat(&[&Matrix::column(t.to_vec()), x0, x1])
        } else {
            Matrix::hconcat(&[x0, x1])
        }
    }

    /// Records positions and velocities at times `t` on `[t0, t1]`.
    pub fn record(&self, tape: &mut Tape, vars: &MlpVars, t: &[f64], t0: f64, t1: f64, x0: &Matrix, x1: &Matrix) -> PathVars {
        let span = t1 - t0;
        let n = t.len();
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        let mut gate = Vec::with_capacity(n);
        let mut gate_rate = Vec::with_capacity(n);
        for &s in t {
            let (ai, bi) = ((t1 - s) / span, (s - t0) / span);
            a.push(ai);
            b.push(bi);
            match self.variant {
                InterpolantVariant::Pairwise => {
                    gate.push(ai * bi);
                    gate_rate.push((ai - bi) / span);
                }
                InterpolantVariant::Multi => {
                    gate.push(1.0 - ai * ai - bi * bi);
                    gate_rate.push(2.0 * (ai - bi) / span);
                }
            }
        }
        let x0v = tape.leaf(x0.clone());
        let x1v = tape.leaf(x1.clone());
        let input = tape.leaf(self.net_input(t, x0, x1));
        let phi = self.net.forward_tape(tape, vars, input);

        let ca = tape.leaf(Matrix::column(a));
        let cb = tape.leaf(Matrix::column(b));
        let cg = tape.leaf(Matrix::column(gate));
        let p0 = tape.mul_col(x0v, ca);
        let p1 = tape.mul_col(x1v, cb);
        let line = tape.add(p0, p1);
        let bend = tape.mul_col(phi, cg);
        let x = tape.add(line, bend);

        let chord = tape.leaf(x1.zip_map(x0, |p, q| (p - q) / span));
        let rate = tape.leaf(Matrix::column(gate_rate));
        let turn = tape.mul_col(phi, rate);
        let v = tape.add(chord, turn);
        let v = if self.time_input {
            let h = self.fd_step * span;
            let tp: Vec<f64> = t.iter().map(|&s| (s + h).min(t1)).collect();
            let tm: Vec<f64> = t.iter().map(|&s| (s - h).max(t0)).collect();
            let inv: Vec<f64> = tp.iter().zip(&tm).map(|(p, m)| 1.0 / (p - m)).collect();
            let ip = tape.leaf(self.net_input(&tp, x0, x1));
            let im = tape.leaf(self.net_input(&tm, x0, x1));
            let fp = self.net.forward_tape(tape, vars, ip);
            let fm = self.net.forward_tape(tape, vars, im);
            let diff = tape.sub(fp, fm);
            let cinv = tape.leaf(Matrix::column(inv));
            let phidot = tape.mul_col(diff, cinv);
            let drift = tape.mul_col(phidot, cg);
            tape.add(v, drift)
        } else {
            v
        };
        PathVars { x, v }
    }

    /// Positions and velocities for a batch, one time per row.
    pub fn evaluate(&self, t: &[f64], t0: f64, t1: f64, x0: &Matrix, x1: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check(t, t0, t1, x0, x1)?;
        let mut tape = Tape::new();
        let vars = self.net.register(&mut tape);
        let p = self.record(&mut tape, &vars, t, t0, t1, x0, x1);
        Ok((tape.value(p.x).clone(), tape.value(p.v).clone()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("interpolant")
            .with_meta("variant", self.variant.name())
            .with_meta("fd_step", format!("{:e}", self.fd_step))
            .with_meta("time_input", self.time_input);
        self.net.write_tensors(&mut c, "phi.");
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("interpolant")?;
        let variant = match c.meta_str("variant")? {
            "pairwise" => InterpolantVariant::Pairwise,
            "multi" => InterpolantVariant::Multi,
            other => return Err(Error::Parse(format!("unknown interpolant variant `{other}`"))),
        };
        let time_input = match c.meta_str("time_input")? {
            "true" => true,
            "false" => false,
            other => return Err(Error::Parse(format!("bad time_input `{other}`"))),
        };
        Self::from_network(MlpParams::read_tensors(c, "phi.")?, variant, c.meta_f64("fd_step")?, time_input)
    }
}

/// Tape handles for interpolant positions and velocities.
#[derive(Debug, Clone, Copy)]
pub struct PathVars {
    pub x: Var,
    pub v: Var,
}

fn single(x: &[f64]) -> Result<Matrix> {
    Matrix::from_vec(1, x.len(), x.to_vec())
}

/// Point on the pairwise interpolant at `t ∈ [0, 1]`.
pub fn interpolate(t: f64, x0: &[f64], x1: &[f64], model: &InterpolantModel) -> Result<Vec<f64>> {
    Ok(model.evaluate(&[t], 0.0, 1.0, &single(x0)?, &single(x1)?)?.0.into_vec())
}

/// Velocity of the pairwise interpolant at `t ∈ [0, 1]`.
pub fn interpolant_velocity(t: f64, x0: &[f64], x1: &[f64], model: &InterpolantModel) -> Result<Vec<f64>> {
    Ok(model.evaluate(&[t], 0.0, 1.0, &single(x0)?, &single(x1)?)?.1.into_vec())
}

/// Point on a segment `[t_i, t_j]` between two observed marginals.
pub fn interpolate_multi(t: f64, xi: &[f64], xj: &[f64], ti: f64, tj: f64, model: &InterpolantModel) -> Result<Vec<f64>> {
    Ok(model.evaluate(&[t], ti, tj, &single(xi)?, &single(xj)?)?.0.into_vec())
}

/// `ẋᵀ G(x) ẋ` at a single time.
pub fn geodesic_energy(t: f64, x0: &[f64], x1: &[f64], model: &InterpolantModel, metric: &MetricField) -> Result<f64> {
    if metric.dim() != model.dim() {
        return Err(Error::Shape(format!("metric d={} vs interpolant d={}", metric.dim(), model.dim())));
    }
    let (x, v) = model.evaluate(&[t], 0.0, 1.0, &single(x0)?, &single(x1)?)?;
    Ok(metric.quadratic_form(x.data(), v.data()))
}

/// `(‖ẋ‖², ẋᵀ(G − I)ẋ)`.
pub fn potential_decomposition(t: f64, x0: &[f64], x1: &[f64], model: &InterpolantModel, metric: &MetricField) -> Result<(f64, f64)> {
    if metric.dim() != model.dim() {
        return Err(Error::Shape(format!("metric d={} vs interpolant d={}", metric.dim(), model.dim())));
    }
    let (x, v) = model.evaluate(&[t], 0.0, 1.0, &single(x0)?, &single(x1)?)?;
    let g = metric.diag(x.data());
    let kinetic = v.data().iter().map(|u| u * u).sum();
    let potential = g.iter().zip(v.data()).map(|(gi, u)| (gi - 1.0) * u * u).sum();
    Ok((kinetic, potential))
}

/// Monte Carlo energy over a set of evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyEstimate {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

impl EnergyEstimate {
    pub fn from_samples(per_sample: Vec<f64>) -> Self {
        let mean = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
        EnergyEstimate { mean, per_sample }
    }

    pub fn count(&self) -> usize {
        self.per_sample.len()
    }
}

/// Per-row `ẋᵀ G(x) ẋ` for a batch.
pub fn batch_energy(model: &InterpolantModel, metric: &MetricField, batch: &PairBatch, t: &[f64]) -> Result<EnergyEstimate> {
    let (x, v) = model.evaluate(t, batch.t0, batch.t1, &batch.x0, &batch.x1)?;
    let energies = (0..x.rows()).map(|i| metric.quadratic_form(x.row(i), v.row(i))).collect();
    Ok(EnergyEstimate::from_samples(energies))
}

/// Records the mean energy of a batch; returns the scalar loss node.
fn record_energy(tape: &mut Tape, metric: &MetricField, path: PathVars) -> Var {
    let v2 = tape.mul(path.v, path.v);
    let weighted = if metric.is_identity() {
        v2
    } else {
        let g = tape.metric_diag(path.x, metric);
        tape.mul(g, v2)
    };
    let rows = tape.sum_cols(weighted);
    tape.mean(rows)
}

/// Mean energy of a batch and its gradient with respect to the correction network.
pub fn energy_loss_and_grad(model: &InterpolantModel, metric: &MetricField, batch: &PairBatch, t: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    model.check(t, batch.t0, batch.t1, &batch.x0, &batch.x1)?;
    let mut tape = Tape::new();
    let vars = model.net.register(&mut tape);
    let path = model.record(&mut tape, &vars, t, batch.t0, batch.t1, &batch.x0, &batch.x1);
    let loss = record_energy(&mut tape, metric, path);
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), model.net.collect_grads(&grads, &vars)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolantTrainConfig {
    pub optimizer: OptimizerConfig,
    pub stopping: StoppingConfig,
    /// Divide the loss by the straight-line validation energy.
    #[serde(default)]
    pub normalize_by_straight_energy: bool,
}

impl Default for InterpolantTrainConfig {
    fn default() -> Self {
        InterpolantTrainConfig {
            optimizer: OptimizerConfig::adam(1e-4),
            stopping: StoppingConfig { max_epochs: 1000, patience: 3 },
            normalize_by_straight_energy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolantTrainReport {
    pub trace: LossTrace,
    /// Validation energy of straight lines (φ ≡ 0) on the same pairs and times.
    pub straight_energy: f64,
}

/// Validation energy of straight paths on a fixed validation set.
pub fn straight_energy(metric: &MetricField, dim: usize, val: &ValidationSet) -> Result<f64> {
    let straight = InterpolantModel::straight(dim, InterpolantVariant::Pairwise);
    val.mean_loss(|b, t| Ok(batch_energy(&straight, metric, b, t)?.mean))
}

/// Minimises the mean metric energy of the interpolants over coupled pairs.
pub fn train_interpolant(
    model: &mut InterpolantModel,
    metric: &MetricField,
    train: &PairSampler,
    validation: &PairSampler,
    cfg: &InterpolantTrainConfig,
    seed: u64,
) -> Result<InterpolantTrainReport> {
    cfg.optimizer.validate()?;
    if metric.dim() != model.dim() || train.dim() != model.dim() {
        return Err(Error::Shape("metric, data and interpolant dimensions differ".into()));
    }
    let val = ValidationSet::draw(validation, &mut stream(seed, "interpolant.validation"))?;
    let straight = straight_energy(metric, model.dim(), &val)?;
    let scale = if cfg.normalize_by_straight_energy && straight > 0.0 { 1.0 / straight } else { 1.0 };

    let mut batch_rng = stream(seed, "interpolant.batches");
    let mut time_rng = stream(seed, "interpolant.times");
    let shapes: Vec<usize> = model.net.tensors().iter().map(|t| t.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, &shapes);
    let cell = std::cell::RefCell::new(model);

    let trace = early_stopping(
        &cfg.stopping,
        |_| {
            let mut total = 0.0;
            let mut count = 0usize;
            for batch in train.epoch(&mut batch_rng)? {
                let t = batch.sample_times(&mut time_rng);
                let mut m = cell.borrow_mut();
                let (loss, mut grads) = energy_loss_and_grad(&m, metric, &batch, &t)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("interpolant energy became {loss}")));
                }
                if scale != 1.0 {
                    grads.iter_mut().flatten().for_each(|g| *g *= scale);
                }
                opt.step(&mut m.net.tensors_mut(), &grads)?;
                total += loss * scale * batch.len() as f64;
                count += batch.len();
            }
            Ok(total / count.max(1) as f64)
        },
        || {
            let m = cell.borrow();
            val.mean_loss(|b, t| Ok(batch_energy(&m, metric, b, t)?.mean))
        },
        || cell.borrow().net.clone(),
        |net| cell.borrow_mut().net = net,
    )?;
    Ok(InterpolantTrainReport { trace, straight_energy: straight })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::PointSet;
    use crate::metrics::LandMetric;
    use crate::nn::Linear;

    /// φ(t, x0, x1) = c + slope·t via a single linear layer.
    fn affine(c: [f64; 2], slope: [f64; 2], variant: InterpolantVariant) -> InterpolantModel {
        let mut w = vec![0.0; 5 * 2];
        w[0] = slope[0];
        w[1] = slope[1];
        let l = Linear { inputs: 5, outputs: 2, weight: w, bias: c.to_vec() };
        InterpolantModel::from_network(MlpParams::from_layers(vec![l]).unwrap(), variant, DEFAULT_FD_STEP, true).unwrap()
    }

    #[test]
    fn straight_line_examples() {
        let m = InterpolantModel::straight(2, InterpolantVariant::Pairwise);
        assert_eq!(interpolate(0.5, &[0.0, 0.0], &[2.0, 0.0], &m).unwrap(), vec![1.0, 0.0]);
        assert_eq!(interpolant_velocity(0.3, &[1.0, 1.0], &[2.0, -1.0], &m).unwrap(), vec![1.0, -2.0]);
        assert!(interpolate(1.5, &[0.0, 0.0], &[2.0, 0.0], &m).is_err());
        assert!(interpolate(0.5, &[0.0], &[2.0, 0.0], &m).is_err());
    }

    #[test]
    fn constant_correction() {
        let m = affine([0.0, 4.0], [0.0, 0.0], InterpolantVariant::Pairwise);
        assert_eq!(interpolate(0.5, &[0.0, 0.0], &[2.0, 0.0], &m).unwrap(), vec![1.0, 1.0]);
        let v = interpolant_velocity(0.25, &[0.0, 0.0], &[2.0, 0.0], &m).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12, "{v:?}");
    }

    #[test]
    fn affine_in_time_derivative_is_exact() {
        let m = affine([0.3, -0.2], [1.5, -0.7], InterpolantVariant::Pairwise);
        let (x0, x1) = ([0.0, 1.0], [2.0, -1.0]);
        for t in [0.0, 0.0004, 0.3, 0.9995, 1.0] {
            let v = interpolant_velocity(t, &x0, &x1, &m).unwrap();
            let phi = [0.3 + 1.5 * t, -0.2 - 0.7 * t];
            for k in 0..2 {
                let exact = x1[k] - x0[k] + t * (1.0 - t) * [1.5, -0.7][k] + (1.0 - 2.0 * t) * phi[k];
                assert!((v[k] - exact).abs() < 1e-10, "t={t}: {} vs {exact}", v[k]);
            }
        }
    }

    #[test]
    fn multi_examples() {
        let m = InterpolantModel::straight(2, InterpolantVariant::Multi);
        assert_eq!(interpolate_multi(2.0, &[1.0, 2.0], &[5.0, 0.0], 2.0, 4.0, &m).unwrap(), vec![1.0, 2.0]);
        assert_eq!(interpolate_multi(3.0, &[1.0, 2.0], &[5.0, 0.0], 2.0, 4.0, &m).unwrap(), vec![3.0, 1.0]);
        let c = affine([2.0, -4.0], [0.0, 0.0], InterpolantVariant::Multi);
        assert_eq!(interpolate_multi(3.0, &[1.0, 2.0], &[5.0, 0.0], 2.0, 4.0, &c).unwrap(), vec![4.0, -1.0]);
        assert!(interpolate_multi(4.5, &[1.0, 2.0], &[5.0, 0.0], 2.0, 4.0, &c).is_err());
    }

    #[test]
    fn energy_examples() {
        let straight = InterpolantModel::straight(2, InterpolantVariant::Pairwise);
        let id = MetricField::Identity { dim: 2 };
        for t in [0.0, 0.2, 0.7, 1.0] {
            assert_eq!(geodesic_energy(t, &[0.0, 0.0], &[3.0, 4.0], &straight, &id).unwrap(), 25.0);
        }
        let land = MetricField::Land(LandMetric::new(&PointSet::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap(), 1.0, 0.001).unwrap());
        let e = geodesic_energy(0.5, &[-0.5, 0.0], &[0.5, 0.0], &straight, &land).unwrap();
        assert!((e - 1.0 / (2.0 * (-0.5f64).exp() + 0.001)).abs() < 1e-12);
        assert!((e - 0.8237).abs() < 1e-4);
        let (k, p) = potential_decomposition(0.5, &[-0.5, 0.0], &[0.5, 0.0], &straight, &land).unwrap();
        assert_eq!(k, 1.0);
        assert!((k + p - e).abs() < 1e-12);
        assert_eq!(potential_decomposition(0.3, &[0.0, 0.0], &[3.0, 4.0], &straight, &id).unwrap(), (25.0, 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = InterpolantModel::new(3, 8, 2, InterpolantVariant::Multi, &mut stream(2, "i"));
        let back = InterpolantModel::from_checkpoint(&Checkpoint::parse(&m.to_checkpoint().to_text()).unwrap()).unwrap();
        assert_eq!(m, back);
        let a = InterpolantModel::without_time_input(2, 8, 1, InterpolantVariant::Pairwise, &mut stream(2, "i"));
        assert_eq!(a, InterpolantModel::from_checkpoint(&a.to_checkpoint()).unwrap());
    }

    #[test]
    fn no_time_ablation_has_no_phi_dot() {
        let m = InterpolantModel::without_time_input(2, 8, 1, InterpolantVariant::Pairwise, &mut stream(3, "i"));
        let (x0, x1) = ([0.1, 0.2], [1.0, -0.5]);
        let phi = m.net().forward(&[x0[0], x0[1], x1[0], x1[1]]).unwrap();
        let v = interpolant_velocity(0.25, &x0, &x1, &m).unwrap();
        for k in 0..2 {
            assert!((v[k] - (x1[k] - x0[k] + 0.5 * phi[k])).abs() < 1e-14);
        }
    }
}
