use crate::datasets::{
    generate_arch, generate_arch_marginals, generate_gaussian_line, generate_sphere, load_marginals_csv, split, Marginal, PointSet,
    SyntheticPair, WhitenTransform,
};
use crate::error::{Error, Result};
use crate::eval::{emd_subsampled, euler_rollout, leave_one_out_score, sphere_distance, EvalReport, Trajectory, EMD_MAX_POINTS};
use crate::interpolant::{train_interpolant, InterpolantModel, InterpolantTrainReport};
use crate::matching::{train_vector_field, MatchReport, VectorFieldModel};
use crate::metrics::{fit_rbf_metric, LandMetric, MetricField, RbfTrainReport};
use crate::rng::stream;
use crate::training::PairSampler;

use super::config::{DatasetSpec, ExperimentConfig, MetricSpec, Protocol};

/// Raw data as produced by a generator or read from disk, in data coordinates.
#[derive(Debug, Clone)]
pub enum Dataset {
    Pair(SyntheticPair),
    Marginals(Vec<Marginal>),
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(match &cfg.dataset {
        DatasetSpec::Arch { n } => Dataset::Pair(generate_arch(*n, cfg.seed)?),
        DatasetSpec::Sphere { n } => Dataset::Pair(generate_sphere(*n, cfg.seed)?),
        DatasetSpec::GaussianLine { n } => Dataset::Marginals(generate_gaussian_line(*n, cfg.seed)?),
        DatasetSpec::ArchMarginals { n } => Dataset::Marginals(generate_arch_marginals(*n, cfg.seed)?),
        DatasetSpec::Csv { path, schema } => {
            let loaded = load_marginals_csv(path, schema)?;
            if loaded.dropped_rows > 0 {
                log::warn!("dropped {} row(s) with missing values from {}", loaded.dropped_rows, path.display());
            }
            Dataset::Marginals(loaded.marginals)
        }
    })
}

/// Train/validation marginals in model coordinates, plus the data-space view
/// needed for scoring.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<Marginal>,
    pub validation: Vec<Marginal>,
    pub whiten: Option<WhitenTransform>,
    pub dataset: Dataset,
}

impl Prepared {
    pub fn dim(&self) -> usize {
        self.train[0].points.dim()
    }

    /// Union of the training marginals (the metric anchors).
    pub fn train_points(&self) -> Result<PointSet> {
        let parts: Vec<&PointSet> = self.train.iter().map(|m| &m.points).collect();
        PointSet::concat(&parts)
    }

    pub fn samplers(&self, cfg: &ExperimentConfig) -> Result<(PairSampler, PairSampler)> {
        Ok((
            PairSampler::from_marginals(&self.train, cfg.coupling, cfg.batch_size)?,
            PairSampler::from_marginals(&self.validation, cfg.coupling, cfg.batch_size)?,
        ))
    }
}

/// Marginals the model is fitted on: both endpoints for pairwise runs, all but the
/// held-out one for leave-one-out.
fn observed(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<Marginal>> {
    match (dataset, cfg.protocol) {
        (Dataset::Pair(p), Protocol::Pairwise) => Ok(vec![
            Marginal { time: 0.0, points: p.source.clone() },
            Marginal { time: 1.0, points: p.target.clone() },
        ]),
        (Dataset::Marginals(ms), Protocol::LeaveOneOut { left_out, .. }) => {
            if ms.len() < 3 {
                return Err(Error::InvalidArgument(format!("leave-one-out needs >= 3 marginals, found {}", ms.len())));
            }
            if left_out == 0 || left_out + 1 >= ms.len() {
                return Err(Error::InvalidArgument(format!(
                    "left-out index {left_out} must be interior (1..={})",
                    ms.len() - 2
                )));
            }
            Ok(ms.iter().enumerate().filter(|(i, _)| *i != left_out).map(|(_, m)| m.clone()).collect())
        }
        _ => Err(Error::Config("dataset and protocol do not match".into())),
    }
}

/// Splits every observed marginal 90/10 (stratified, seeded) and optionally whitens
/// with statistics of the training part.
pub fn prepare(cfg: &ExperimentConfig, dataset: Dataset) -> Result<Prepared> {
    let marginals = observed(cfg, &dataset)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (k, m) in marginals.iter().enumerate() {
        for i in 0..m.points.len() {
            rows.push(m.points.point(i).to_vec());
            labels.push(k);
        }
    }
    let all = PointSet::with_labels(crate::matrix::Matrix::from_rows(&rows)?, labels)?;
    let (train_all, val_all) = split(&all, cfg.train_fraction, cfg.seed)?;
    let whiten = if cfg.whiten { Some(WhitenTransform::fit(&train_all)?) } else { None };
    let regroup = |set: &PointSet| -> Result<Vec<Marginal>> {
        let set = match &whiten {
            Some(w) => w.apply(set)?,
            None => set.clone(),
        };
        let labels = set.labels().expect("split keeps labels").to_vec();
        marginals
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
                Ok(Marginal { time: m.time, points: PointSet::new(set.subset(&idx).into_matrix())? })
            })
            .collect()
    };
    Ok(Prepared { train: regroup(&train_all)?, validation: regroup(&val_all)?, whiten, dataset })
}

/// Stage 0: build the metric from the training samples.
pub fn fit_metric(cfg: &ExperimentConfig, data: &Prepared) -> Result<(MetricField, Option<RbfTrainReport>)> {
    match &cfg.metric {
        MetricSpec::Identity => Ok((MetricField::Identity { dim: data.dim() }, None)),
        MetricSpec::Land { sigma, eps } => Ok((MetricField::Land(LandMetric::new(&data.train_points()?, *sigma, *eps)?), None)),
        MetricSpec::Rbf { clusters, kappa, eps, power, train } => {
            let (m, report) = fit_rbf_metric(&data.train_points()?, *clusters, *kappa, *eps, *power, train, cfg.seed)?;
            Ok((MetricField::Rbf(m), Some(report)))
        }
    }
}

/// Stage 1: learn φ, or return the straight interpolant when it is frozen.
pub fn fit_interpolant(
    cfg: &ExperimentConfig,
    data: &Prepared,
    metric: &MetricField,
) -> Result<(InterpolantModel, Option<InterpolantTrainReport>)> {
    let d = data.dim();
    let spec = &cfg.interpolant;
    if !spec.learn {
        return Ok((InterpolantModel::straight(d, cfg.variant()), None));
    }
    let mut rng = stream(cfg.seed, "interpolant.init");
    let fresh = if spec.time_input {
        InterpolantModel::new(d, spec.width, spec.depth, cfg.variant(), &mut rng)
    } else {
        InterpolantModel::without_time_input(d, spec.width, spec.depth, cfg.variant(), &mut rng)
    };
    let mut model = InterpolantModel::from_network(fresh.net().clone(), cfg.variant(), spec.fd_step, spec.time_input)?;
    let (train, val) = data.samplers(cfg)?;
    let report = train_interpolant(&mut model, metric, &train, &val, &spec.train_config(), cfg.seed)?;
    Ok((model, Some(report)))
}

/// Stage 2: regress the vector field on the (frozen) interpolant.
pub fn fit_vector_field(
    cfg: &ExperimentConfig,
    data: &Prepared,
    metric: &MetricField,
    interpolant: &InterpolantModel,
) -> Result<(VectorFieldModel, MatchReport)> {
    let spec = &cfg.vector_field;
    let mut vf = VectorFieldModel::new(data.dim(), spec.width, spec.depth, &mut stream(cfg.seed, "matching.init"));
    let (train, val) = data.samplers(cfg)?;
    let report = train_vector_field(&mut vf, interpolant, metric, &train, &val, &spec.match_config(), cfg.seed)?;
    Ok((vf, report))
}

#[derive(Debug, Clone)]
pub struct PairwiseEvaluation {
    pub reports: Vec<EvalReport>,
    /// Rollout of the source samples over [0, 1], in data coordinates.
    pub trajectory: Trajectory,
    pub midpoints: PointSet,
}

impl PairwiseEvaluation {
    pub fn value(&self, metric: &str) -> Option<f64> {
        self.reports.iter().find(|r| r.metric == metric).map(|r| r.value)
    }
}

/// Pushes every source sample through the field with Euler steps over [0, 1] and
/// scores the state at t = ½ against the midpoint truth.
pub fn evaluate_pairwise(cfg: &ExperimentConfig, data: &Prepared, vf: &VectorFieldModel) -> Result<PairwiseEvaluation> {
    let Dataset::Pair(pair) = &data.dataset else {
        return Err(Error::Config("pairwise evaluation needs a source/target dataset".into()));
    };
    if cfg.euler_steps % 2 != 0 {
        return Err(Error::Config(format!("euler_steps must be even to land on t = 1/2, got {}", cfg.euler_steps)));
    }
    let started = std::time::Instant::now();
    let start = match &data.whiten {
        Some(w) => w.apply(&pair.source)?,
        None => pair.source.clone(),
    };
    let mut trajectory = euler_rollout(vf, start.matrix(), 0.0, 1.0, cfg.euler_steps)?;
    if let Some(w) = &data.whiten {
        for s in trajectory.states.iter_mut() {
            *s = w.invert(&PointSet::new(s.clone())?)?.into_matrix();
        }
    }
    let midpoints = PointSet::new(trajectory.states[cfg.euler_steps / 2].clone())?;
    let (emd, n) = emd_subsampled(&midpoints, &pair.truth, EMD_MAX_POINTS, cfg.seed)?;
    let mut reports = vec![EvalReport {
        metric: "emd_t0.5".into(),
        value: emd,
        sample_size: n,
        seed: cfg.seed,
        runtime_secs: started.elapsed().as_secs_f64(),
    }];
    if matches!(cfg.dataset, DatasetSpec::Sphere { .. }) {
        reports.push(EvalReport {
            metric: "sphere_distance_t0.5".into(),
            value: sphere_distance(&midpoints, 1.0)?,
            sample_size: midpoints.len(),
            seed: cfg.seed,
            runtime_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok(PairwiseEvaluation { reports, trajectory, midpoints })
}

/// Scores the held-out marginal of a leave-one-out run.
pub fn evaluate_left_out(cfg: &ExperimentConfig, data: &Prepared, vf: &VectorFieldModel) -> Result<EvalReport> {
    let (Dataset::Marginals(ms), Protocol::LeaveOneOut { left_out, origin }) = (&data.dataset, cfg.protocol) else {
        return Err(Error::Config("leave-one-out evaluation needs a multi-marginal dataset".into()));
    };
    leave_one_out_score(ms, left_out, vf, data.whiten.as_ref(), origin, cfg.euler_steps, cfg.seed)
}

/// Everything a full in-memory run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metric: MetricField,
    pub metric_report: Option<RbfTrainReport>,
    pub interpolant: InterpolantModel,
    pub interpolant_report: Option<InterpolantTrainReport>,
    pub vector_field: VectorFieldModel,
    pub match_report: MatchReport,
    pub reports: Vec<EvalReport>,
    pub pairwise: Option<PairwiseEvaluation>,
    pub data: Prepared,
}

/// All stages followed by evaluation, without touching the filesystem.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = prepare(cfg, load_dataset(cfg)?)?;
    let (metric, metric_report) = fit_metric(cfg, &data)?;
    let (interpolant, interpolant_report) = fit_interpolant(cfg, &data, &metric)?;
    let (vector_field, match_report) = fit_vector_field(cfg, &data, &metric, &interpolant)?;
    let (reports, pairwise) = match cfg.protocol {
        Protocol::Pairwise => {
            let ev = evaluate_pairwise(cfg, &data, &vector_field)?;
            (ev.reports.clone(), Some(ev))
        }
        Protocol::LeaveOneOut { .. } => (vec![evaluate_left_out(cfg, &data, &vector_field)?], None),
    };
    Ok(RunOutcome { metric, metric_report, interpolant, interpolant_report, vector_field, match_report, reports, pairwise, data })
}
