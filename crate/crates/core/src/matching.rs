//! Vector-field regression onto interpolant velocities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::InterpolantModel;
use crate::matrix::Matrix;
use crate::metrics::{DiagonalMetric, MetricField};
use crate::nn::{Checkpoint, MlpParams, Optimizer, OptimizerConfig, Tape};
use crate::rng::{stream, Rng};
use crate::training::{early_stopping, LossTrace, PairBatch, PairSampler, StoppingConfig, ValidationSet};

/// `v_θ(t, x)`, one network over time and state.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldModel {
    net: MlpParams,
}

impl VectorFieldModel {
    pub fn new(dim: usize, hidden: usize, depth: usize, rng: &mut Rng) -> Self {
        VectorFieldModel { net: MlpParams::new(dim + 1, hidden, depth, dim, rng) }
    }

    pub fn from_network(net: MlpParams) -> Result<Self> {
        if net.input_width() != net.output_width() + 1 {
            return Err(Error::Shape(format!(
                "vector field maps (t, x) to x, got {} inputs and {} outputs",
                net.input_width(),
                net.output_width()
            )));
        }
        Ok(VectorFieldModel { net })
    }

    pub fn dim(&self) -> usize {
        self.net.output_width()
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    /// Velocities at the rows of `x`, all at time `t`.
    pub fn velocity(&self, t: f64, x: &Matrix) -> Matrix {
        self.velocity_at(&vec![t; x.rows()], x)
    }

    /// Velocities with a separate time per row.
    pub fn velocity_at(&self, t: &[f64], x: &Matrix) -> Matrix {
        self.net.forward_batch(&Matrix::hconcat(&[&Matrix::column(t.to_vec()), x]))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("vector_field");
        self.net.write_tensors(&mut c, "v.");
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("vector_field")?;
        Self::from_network(MlpParams::read_tensors(c, "v.")?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `‖v − ẋ‖²`
    Normalized,
    /// `(v − ẋ)ᵀ G(x) (v − ẋ)`
    Riemannian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub mode: NormMode,
    pub optimizer: OptimizerConfig,
    pub stopping: StoppingConfig,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            mode: NormMode::Normalized,
            optimizer: OptimizerConfig::adamw(1e-3, 1e-5),
            stopping: StoppingConfig { max_epochs: 1000, patience: 3 },
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.stopping.validate()
    }
}

/// Regression inputs for one minibatch: times, states, target velocities and, in
/// Riemannian mode, the metric diagonal at each state.
#[derive(Debug, Clone)]
pub struct Targets {
    pub t: Vec<f64>,
    pub x: Matrix,
    pub v: Matrix,
    pub weights: Option<Matrix>,
}

impl Targets {
    /// Straight-path targets `x = a·x0 + b·x1`, `ẋ = (x1 − x0)/Δ`.
    pub fn straight(batch: &PairBatch, t: &[f64]) -> Self {
        let span = batch.t1 - batch.t0;
        let mut x = batch.x0.clone();
        for (i, &s) in t.iter().enumerate() {
            let (a, b) = ((batch.t1 - s) / span, (s - batch.t0) / span);
            let (p, q) = (batch.x0.row(i), batch.x1.row(i));
            for (k, o) in x.row_mut(i).iter_mut().enumerate() {
                *o = p[k] * a + q[k] * b;
            }
        }
        let v = batch.x1.zip_map(&batch.x0, |p, q| (p - q) / span);
        Targets { t: t.to_vec(), x, v, weights: None }
    }

    /// Targets along a frozen learned interpolant.
    pub fn along(interpolant: &InterpolantModel, metric: &MetricField, mode: NormMode, batch: &PairBatch, t: &[f64]) -> Result<Self> {
        let (x, v) = interpolant.evaluate(t, batch.t0, batch.t1, &batch.x0, &batch.x1)?;
        let weights = match mode {
            NormMode::Normalized => None,
            NormMode::Riemannian => {
                let mut g = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    metric.diag_into(x.row(i), g.row_mut(i));
                }
                Some(g)
            }
        };
        Ok(Targets { t: t.to_vec(), x, v, weights })
    }
}

/// Mean regression loss and parameter gradients for one minibatch.
pub fn regression_loss_and_grad(vf: &VectorFieldModel, targets: &Targets) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = vf.net.register(&mut tape);
    let input = tape.leaf(Matrix::hconcat(&[&Matrix::column(targets.t.clone()), &targets.x]));
    let out = vf.net.forward_tape(&mut tape, &vars, input);
    let target = tape.leaf(targets.v.clone());
    let r = tape.sub(out, target);
    let r2 = tape.mul(r, r);
    let weighted = match &targets.weights {
        Some(g) => {
            let gv = tape.leaf(g.clone());
            tape.mul(gv, r2)
        }
        None => r2,
    };
    let rows = tape.sum_cols(weighted);
    let loss = tape.mean(rows);
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), vf.net.collect_grads(&grads, &vars)))
}

/// Mean regression loss without gradients.
pub fn regression_loss(vf: &VectorFieldModel, targets: &Targets) -> f64 {
    let pred = vf.velocity_at(&targets.t, &targets.x);
    let n = pred.rows();
    let mut total = 0.0;
    for i in 0..n {
        let (p, y) = (pred.row(i), targets.v.row(i));
        let mut row = 0.0;
        for k in 0..p.len() {
            let r = p[k] - y[k];
            row += match &targets.weights {
                Some(g) => g.get(i, k) * (r * r),
                None => r * r,
            };
        }
        total += row;
    }
    total / n as f64
}

/// Single-sample MFM loss on the pairwise interpolant.
pub fn mfm_loss(
    t: f64,
    x0: &[f64],
    x1: &[f64],
    interpolant: &InterpolantModel,
    metric: &MetricField,
    vf: &VectorFieldModel,
    mode: NormMode,
) -> Result<f64> {
    if vf.dim() != interpolant.dim() || metric.dim() != interpolant.dim() {
        return Err(Error::Shape("vector field, interpolant and metric dimensions differ".into()));
    }
    let batch = PairBatch {
        x0: Matrix::from_vec(1, x0.len(), x0.to_vec())?,
        x1: Matrix::from_vec(1, x1.len(), x1.to_vec())?,
        t0: 0.0,
        t1: 1.0,
    };
    Ok(regression_loss(vf, &Targets::along(interpolant, metric, mode, &batch, &[t])?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub trace: LossTrace,
}

/// Generic stage-2 loop: `targets` turns a minibatch and its times into regression data.
fn fit(
    vf: &mut VectorFieldModel,
    train: &PairSampler,
    validation: &PairSampler,
    cfg: &MatchConfig,
    seed: u64,
    targets: impl Fn(&PairBatch, &[f64]) -> Result<Targets>,
) -> Result<MatchReport> {
    cfg.validate()?;
    if train.dim() != vf.dim() {
        return Err(Error::Shape(format!("data d={} vs vector field d={}", train.dim(), vf.dim())));
    }
    let val = ValidationSet::draw(validation, &mut stream(seed, "matching.validation"))?;
    let val_targets: Vec<Targets> = val.batches.iter().map(|(b, t)| targets(b, t)).collect::<Result<_>>()?;
    let val_weights: Vec<f64> = val.batches.iter().map(|(b, _)| b.len() as f64).collect();
    let val_total: f64 = val_weights.iter().sum();

    let mut batch_rng = stream(seed, "matching.batches");
    let mut time_rng = stream(seed, "matching.times");
    let shapes: Vec<usize> = vf.net.tensors().iter().map(|t| t.len()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, &shapes);
    let cell = std::cell::RefCell::new(vf);

    let trace = early_stopping(
        &cfg.stopping,
        |_| {
            let mut total = 0.0;
            let mut count = 0usize;
            for batch in train.epoch(&mut batch_rng)? {
                let t = batch.sample_times(&mut time_rng);
                let data = targets(&batch, &t)?;
                let mut m = cell.borrow_mut();
                let (loss, grads) = regression_loss_and_grad(&m, &data)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged(format!("vector-field loss became {loss}")));
                }
                opt.step(&mut m.net.tensors_mut(), &grads)?;
                total += loss * batch.len() as f64;
                count += batch.len();
            }
            Ok(total / count.max(1) as f64)
        },
        || {
            let m = cell.borrow();
            let sum: f64 = val_targets.iter().zip(&val_weights).map(|(d, w)| regression_loss(&m, d) * w).sum();
            Ok(sum / val_total)
        },
        || cell.borrow().net.clone(),
        |net| cell.borrow_mut().net = net,
    )?;
    Ok(MatchReport { trace })
}

/// Trains `vf` on velocities of the frozen `interpolant`.
pub fn train_vector_field(
    vf: &mut VectorFieldModel,
    interpolant: &InterpolantModel,
    metric: &MetricField,
    train: &PairSampler,
    validation: &PairSampler,
    cfg: &MatchConfig,
    seed: u64,
) -> Result<MatchReport> {
    if interpolant.dim() != vf.dim() || metric.dim() != vf.dim() {
        return Err(Error::Shape("vector field, interpolant and metric dimensions differ".into()));
    }
    let mode = cfg.mode;
    fit(vf, train, validation, cfg, seed, |b, t| Targets::along(interpolant, metric, mode, b, t))
}

/// Plain conditional flow matching on straight paths.
pub fn train_straight_cfm(
    vf: &mut VectorFieldModel,
    train: &PairSampler,
    validation: &PairSampler,
    cfg: &MatchConfig,
    seed: u64,
) -> Result<MatchReport> {
    fit(vf, train, validation, cfg, seed, |b, t| Ok(Targets::straight(b, t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::Coupling;
    use crate::datasets::PointSet;
    use crate::interpolant::InterpolantVariant;
    use crate::nn::Linear;

    fn constant_field(c: [f64; 2]) -> VectorFieldModel {
        VectorFieldModel::from_network(MlpParams::from_layers(vec![Linear { inputs: 3, outputs: 2, weight: vec![0.0; 6], bias: c.to_vec() }]).unwrap()).unwrap()
    }

    #[test]
    fn exact_field_has_zero_loss() {
        let straight = InterpolantModel::straight(2, InterpolantVariant::Pairwise);
        let vf = constant_field([1.0, -2.0]);
        let land = MetricField::Land(crate::metrics::LandMetric::new(&PointSet::from_rows(&[[0.0, 0.0]]).unwrap(), 1.0, 0.1).unwrap());
        for mode in [NormMode::Normalized, NormMode::Riemannian] {
            assert_eq!(mfm_loss(0.4, &[0.0, 0.0], &[1.0, -2.0], &straight, &land, &vf, mode).unwrap(), 0.0);
        }
    }

    #[test]
    fn residual_examples() {
        let targets = Targets {
            t: vec![0.0],
            x: Matrix::from_rows(&[[0.0, 0.0]]).unwrap(),
            v: Matrix::from_rows(&[[0.0, 0.0]]).unwrap(),
            weights: Some(Matrix::from_rows(&[[2.0, 3.0]]).unwrap()),
        };
        let vf = constant_field([1.0, 1.0]);
        assert_eq!(regression_loss(&vf, &targets), 5.0);
        assert_eq!(regression_loss(&vf, &Targets { weights: None, ..targets.clone() }), 2.0);
        assert_eq!(regression_loss_and_grad(&vf, &targets).unwrap().0, 5.0);
    }

    #[test]
    fn modes_agree_under_identity() {
        let straight = InterpolantModel::new(2, 8, 2, InterpolantVariant::Pairwise, &mut stream(1, "i"));
        let vf = VectorFieldModel::new(2, 8, 2, &mut stream(1, "v"));
        let id = MetricField::Identity { dim: 2 };
        let a = mfm_loss(0.3, &[0.1, 0.2], &[1.0, 0.5], &straight, &id, &vf, NormMode::Normalized).unwrap();
        let b = mfm_loss(0.3, &[0.1, 0.2], &[1.0, 0.5], &straight, &id, &vf, NormMode::Riemannian).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn straight_targets_match_zero_interpolant() {
        let batch = PairBatch {
            x0: Matrix::from_rows(&[[0.1, 0.7], [-1.3, 2.2]]).unwrap(),
            x1: Matrix::from_rows(&[[3.1, -0.4], [0.9, 0.05]]).unwrap(),
            t0: 0.0,
            t1: 1.0,
        };
        let t = [0.37, 0.81];
        let a = Targets::straight(&batch, &t);
        let b = Targets::along(&InterpolantModel::straight(2, InterpolantVariant::Pairwise), &MetricField::Identity { dim: 2 }, NormMode::Normalized, &batch, &t).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn learns_a_constant_shift() {
        let src: Vec<[f64; 2]> = (0..200).map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.73).cos()]).collect();
        let tgt: Vec<[f64; 2]> = src.iter().map(|p| [p[0] + 1.0, p[1] - 0.5]).collect();
        let (a, b) = (PointSet::from_rows(&src).unwrap(), PointSet::from_rows(&tgt).unwrap());
        let sampler = PairSampler::pairwise(a.clone(), b.clone(), Coupling::Ot, 200).unwrap();
        let mut vf = VectorFieldModel::new(2, 32, 2, &mut stream(5, "vf"));
        let cfg = MatchConfig {
            optimizer: OptimizerConfig::adamw(1e-2, 0.0),
            stopping: StoppingConfig { max_epochs: 1000, patience: 50 },
            ..MatchConfig::default()
        };
        let rep = train_straight_cfm(&mut vf, &sampler, &sampler, &cfg, 5).unwrap();
        assert!(rep.trace.best_validation() < 1e-2, "{}", rep.trace.best_validation());
        let probe = vf.velocity(0.5, &Matrix::from_rows(&[[0.0, 0.0], [0.5, 0.5]]).unwrap());
        for i in 0..2 {
            assert!((probe.get(i, 0) - 1.0).abs() < 0.1 && (probe.get(i, 1) + 0.5).abs() < 0.1, "{probe:?}");
        }
    }

    #[test]
    fn zero_epochs_leave_the_field_unchanged() {
        let a = PointSet::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let sampler = PairSampler::pairwise(a.clone(), a, Coupling::Ot, 2).unwrap();
        let mut vf = VectorFieldModel::new(2, 4, 1, &mut stream(0, "vf"));
        let before = vf.clone();
        let cfg = MatchConfig { stopping: StoppingConfig { max_epochs: 0, patience: 3 }, ..MatchConfig::default() };
        train_straight_cfm(&mut vf, &sampler, &sampler, &cfg, 0).unwrap();
        assert_eq!(vf, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let vf = VectorFieldModel::new(3, 8, 2, &mut stream(0, "vf"));
        assert_eq!(vf, VectorFieldModel::from_checkpoint(&Checkpoint::parse(&vf.to_checkpoint().to_text()).unwrap()).unwrap());
    }
}
