//! Random instances and finite-difference checks shared by the integration tests.
#![allow(dead_code)]

use metric_flow::interpolant::{batch_energy, energy_loss_and_grad};
use metric_flow::matching::{regression_loss, regression_loss_and_grad, Targets};
use metric_flow::nn::MlpParams;
use metric_flow::rng::{stream, Rng};
use metric_flow::training::PairBatch;
use metric_flow::{InterpolantModel, InterpolantVariant, LandMetric, Matrix, MetricField, NormMode, PointSet, RbfMetric, VectorFieldModel};
use rand::Rng as _;

pub fn uniform_matrix(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Identity, LAND or RBF with random anchors and scales.
pub fn random_metric(rng: &mut Rng, d: usize) -> MetricField {
    match rng.gen_range(0..3) {
        0 => MetricField::Identity { dim: d },
        1 => {
            let anchors = PointSet::new(uniform_matrix(rng, 24, d, -1.5, 1.5)).unwrap();
            MetricField::Land(LandMetric::new(&anchors, rng.gen_range(0.4..1.0), rng.gen_range(0.02..0.2)).unwrap())
        }
        _ => {
            let k = rng.gen_range(1..5);
            let centers = uniform_matrix(rng, k, d, -1.0, 1.0);
            let bandwidths = uniform_matrix(rng, k, d, 0.3, 2.0);
            let weights = uniform_matrix(rng, k, d, 0.2, 1.5);
            MetricField::Rbf(RbfMetric::from_parts(centers, bandwidths, weights, rng.gen_range(0.05..0.5), rng.gen_range(1..3)).unwrap())
        }
    }
}

/// Randomizes every parameter so no layer sits at its zero initialization.
pub fn jitter(net: &mut MlpParams, rng: &mut Rng, scale: f64) {
    for t in net.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

pub fn random_interpolant(rng: &mut Rng, d: usize) -> InterpolantModel {
    let variant = if rng.gen_bool(0.5) { InterpolantVariant::Pairwise } else { InterpolantVariant::Multi };
    let mut m = InterpolantModel::new(d, rng.gen_range(3..10), rng.gen_range(1..4), variant, rng);
    jitter(m.net_mut(), rng, 0.6);
    m
}

pub fn random_batch(rng: &mut Rng, d: usize, n: usize, variant: InterpolantVariant) -> (PairBatch, Vec<f64>) {
    let (t0, t1) = match variant {
        InterpolantVariant::Pairwise => (0.0, 1.0),
        InterpolantVariant::Multi => {
            let a = rng.gen_range(0.0..2.0);
            (a, a + rng.gen_range(0.3..1.5))
        }
    };
    let batch = PairBatch { x0: uniform_matrix(rng, n, d, -1.0, 1.0), x1: uniform_matrix(rng, n, d, -1.0, 1.0), t0, t1 };
    let t = (0..n).map(|_| rng.gen_range(t0..t1)).collect();
    (batch, t)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all parameters.
pub fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Central differences of `f` in every parameter of `net`.
pub fn central_differences(net: &mut MlpParams, f: &mut dyn FnMut(&MlpParams) -> f64) -> Vec<Vec<f64>> {
    let shapes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (ti, len) in shapes.into_iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let p = net.tensors()[ti][i];
            let h = 1e-5 * p.abs().max(1.0);
            net.tensors_mut()[ti][i] = p + h;
            let up = f(net);
            net.tensors_mut()[ti][i] = p - h;
            let down = f(net);
            net.tensors_mut()[ti][i] = p;
            *gi = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Relative error of the reverse-mode gradient of the mean geodesic energy on one
/// random (network, metric, batch) instance.
pub fn geodesic_gradient_error(seed: u64) -> f64 {
    let mut rng = stream(seed, "gradcheck.geodesic");
    let d = rng.gen_range(1..4);
    let metric = random_metric(&mut rng, d);
    let mut model = random_interpolant(&mut rng, d);
    let n = rng.gen_range(1..6);
    let (batch, t) = random_batch(&mut rng, d, n, model.variant());
    let (_, grad) = energy_loss_and_grad(&model, &metric, &batch, &t).unwrap();
    let template = model.clone();
    let fd = central_differences(model.net_mut(), &mut |net| {
        let m = InterpolantModel::from_network(net.clone(), template.variant(), template.fd_step(), template.time_input()).unwrap();
        batch_energy(&m, &metric, &batch, &t).unwrap().mean
    });
    relative_error(&grad, &fd)
}

/// Same for the matching loss against targets along a random frozen interpolant.
pub fn matching_gradient_error(seed: u64) -> f64 {
    let mut rng = stream(seed, "gradcheck.matching");
    let d = rng.gen_range(1..4);
    let metric = random_metric(&mut rng, d);
    let interp = random_interpolant(&mut rng, d);
    let n = rng.gen_range(1..6);
    let (batch, t) = random_batch(&mut rng, d, n, interp.variant());
    let mode = if rng.gen_bool(0.5) { NormMode::Normalized } else { NormMode::Riemannian };
    let targets = Targets::along(&interp, &metric, mode, &batch, &t).unwrap();
    let mut vf = VectorFieldModel::new(d, rng.gen_range(3..10), rng.gen_range(1..4), &mut rng);
    let mut net = vf.net().clone();
    jitter(&mut net, &mut rng, 0.6);
    vf = VectorFieldModel::from_network(net.clone()).unwrap();
    let (_, grad) = regression_loss_and_grad(&vf, &targets).unwrap();
    let fd = central_differences(&mut net, &mut |n| regression_loss(&VectorFieldModel::from_network(n.clone()).unwrap(), &targets));
    relative_error(&grad, &fd)
}
