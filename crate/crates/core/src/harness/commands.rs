//! Filesystem-backed commands: every run lives in `<output_dir>/<config hash>/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;

use crate::datasets::{fmt_decimal, save_marginals_csv, save_points_csv, Marginal, PointSet};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Trajectory};
use crate::interpolant::InterpolantModel;
use crate::matching::VectorFieldModel;
use crate::metrics::MetricField;
use crate::nn::Checkpoint;
use crate::oracle::{check_containment, interpolant_vs_geodesic, solve_discrete_geodesic, ContainmentSpec, GeodesicSolverConfig};
use crate::rng::stream;
use crate::training::LossTrace;

use super::config::{DatasetSpec, ExperimentConfig, Protocol};
use super::manifest::{RunManifest, StageRecord, StageStatus};
use super::pipeline::{self, Dataset, Prepared};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRIC_CKPT: &str = "metric.ckpt";
pub const INTERPOLANT_CKPT: &str = "interpolant.ckpt";
pub const VECTOR_FIELD_CKPT: &str = "vector_field.ckpt";
pub const RESULTS_FILE: &str = "results.csv";
/// Trajectories written for plotting.
pub const PLOTTED_TRAJECTORIES: usize = 256;

/// An opened run directory with its prepared data.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub data: Prepared,
}

impl Run {
    pub fn open(cfg: &ExperimentConfig) -> Result<Run> {
        cfg.validate()?;
        let dir = cfg.run_dir();
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
        let manifest = RunManifest::open(&dir, &cfg.hash(), cfg.seed)?;
        let data = pipeline::prepare(cfg, pipeline::load_dataset(cfg)?)?;
        Ok(Run { cfg: cfg.clone(), dir, manifest, data })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Runs one stage, recording success or failure in the manifest.
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Run) -> Result<(T, StageRecord)>) -> Result<T> {
        let started = Instant::now();
        match f(self) {
            Ok((value, mut record)) => {
                record.wall_clock_secs = started.elapsed().as_secs_f64();
                log::info!("stage {name}: {:?} in {:.1}s", record.status, record.wall_clock_secs);
                self.manifest.set_stage(record);
                self.manifest.save(&self.dir)?;
                Ok(value)
            }
            Err(e) => {
                self.manifest.set_stage(StageRecord {
                    name: name.into(),
                    status: StageStatus::Failed,
                    wall_clock_secs: started.elapsed().as_secs_f64(),
                    checkpoint: None,
                    trace: None,
                    error: Some(e.to_string()),
                });
                self.manifest.save(&self.dir)?;
                Err(e)
            }
        }
    }

    fn previous_trace(&self, name: &str) -> Option<LossTrace> {
        self.manifest.stage(name).and_then(|s| s.trace.clone())
    }

    /// Stage 0. With `resume`, an existing checkpoint is loaded instead of refitting.
    pub fn metric(&mut self, resume: bool) -> Result<MetricField> {
        self.stage("metric", |run| {
            let path = run.path(METRIC_CKPT);
            if resume && path.exists() {
                let m = MetricField::from_checkpoint(&Checkpoint::load(&path)?)?;
                return Ok((m, record("metric", StageStatus::Resumed, Some(METRIC_CKPT), None)));
            }
            let (m, report) = pipeline::fit_metric(&run.cfg, &run.data)?;
            m.to_checkpoint().save(&path)?;
            let status = if m.is_identity() { StageStatus::Skipped } else { StageStatus::Completed };
            let trace = report.map(|r| LossTrace { train: r.loss.clone(), validation: vec![r.final_loss], best: 0, stopped_early: false });
            Ok((m, record("metric", status, Some(METRIC_CKPT), trace)))
        })
    }

    /// Stage 1; a frozen interpolant is written too so later stages can load it.
    pub fn interpolant(&mut self, metric: &MetricField, resume: bool) -> Result<InterpolantModel> {
        self.stage("interpolant", |run| {
            let path = run.path(INTERPOLANT_CKPT);
            if resume && path.exists() {
                let m = InterpolantModel::from_checkpoint(&Checkpoint::load(&path)?)?;
                let trace = run.previous_trace("interpolant");
                return Ok((m, record("interpolant", StageStatus::Resumed, Some(INTERPOLANT_CKPT), trace)));
            }
            let (m, report) = pipeline::fit_interpolant(&run.cfg, &run.data, metric)?;
            m.to_checkpoint().save(&path)?;
            let status = if report.is_some() { StageStatus::Completed } else { StageStatus::Skipped };
            let trace = report.map(|r| r.trace);
            if let Some(t) = &trace {
                write_trace(&run.path("interpolant_trace.csv"), t)?;
            }
            Ok((m, record("interpolant", status, Some(INTERPOLANT_CKPT), trace)))
        })
    }

    /// Stage 2.
    pub fn vector_field(&mut self, metric: &MetricField, interpolant: &InterpolantModel, resume: bool) -> Result<VectorFieldModel> {
        self.stage("vector_field", |run| {
            let path = run.path(VECTOR_FIELD_CKPT);
            if resume && path.exists() {
                let m = VectorFieldModel::from_checkpoint(&Checkpoint::load(&path)?)?;
                let trace = run.previous_trace("vector_field");
                return Ok((m, record("vector_field", StageStatus::Resumed, Some(VECTOR_FIELD_CKPT), trace)));
            }
            let (m, report) = pipeline::fit_vector_field(&run.cfg, &run.data, metric, interpolant)?;
            m.to_checkpoint().save(&path)?;
            write_trace(&run.path("vector_field_trace.csv"), &report.trace)?;
            Ok((m, record("vector_field", StageStatus::Completed, Some(VECTOR_FIELD_CKPT), Some(report.trace))))
        })
    }

    pub fn load_metric(&self) -> Result<MetricField> {
        MetricField::from_checkpoint(&load_ckpt(&self.path(METRIC_CKPT))?)
    }

    pub fn load_interpolant(&self) -> Result<InterpolantModel> {
        InterpolantModel::from_checkpoint(&load_ckpt(&self.path(INTERPOLANT_CKPT))?)
    }

    pub fn load_vector_field(&self) -> Result<VectorFieldModel> {
        VectorFieldModel::from_checkpoint(&load_ckpt(&self.path(VECTOR_FIELD_CKPT))?)
    }

    /// Scores the trained field and writes `results.csv` (plus trajectories for
    /// pairwise runs).
    pub fn evaluate(&mut self, vf: &VectorFieldModel) -> Result<Vec<EvalReport>> {
        let reports = match self.cfg.protocol {
            Protocol::Pairwise => {
                let ev = pipeline::evaluate_pairwise(&self.cfg, &self.data, vf)?;
                write_trajectories(&self.path("trajectories.csv"), &ev.trajectory, PLOTTED_TRAJECTORIES)?;
                save_points_csv(&self.path("midpoints.csv"), &ev.midpoints)?;
                ev.reports
            }
            Protocol::LeaveOneOut { .. } => vec![pipeline::evaluate_left_out(&self.cfg, &self.data, vf)?],
        };
        write_results(&self.path(RESULTS_FILE), &reports)?;
        self.manifest.set_metrics(&reports);
        self.manifest.save(&self.dir)?;
        Ok(reports)
    }
}

fn record(name: &str, status: StageStatus, checkpoint: Option<&str>, trace: Option<LossTrace>) -> StageRecord {
    StageRecord { name: name.into(), status, wall_clock_secs: 0.0, checkpoint: checkpoint.map(Into::into), trace, error: None }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Missing(format!("{} (train the earlier stage first)", path.display())));
    }
    Checkpoint::load(path)
}

fn write_trace(path: &Path, trace: &LossTrace) -> Result<()> {
    let mut out = String::from("epoch,train,validation\n");
    let _ = writeln!(out, "0,,{}", fmt_decimal(trace.validation[0]));
    for (e, tr) in trace.train.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", e + 1, fmt_decimal(*tr), fmt_decimal(trace.validation[e + 1]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Deterministic result rows; wall-clock times live in the manifest only.
pub fn write_results(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = String::from("metric,value,sample_size,seed\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{},{}", r.metric, fmt_decimal(r.value), r.sample_size, r.seed);
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_trajectories(path: &Path, traj: &Trajectory, max_particles: usize) -> Result<()> {
    let d = traj.states[0].cols();
    let mut out = String::from("particle,t");
    for j in 0..d {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    let n = traj.states[0].rows().min(max_particles);
    for p in 0..n {
        for (t, s) in traj.times.iter().zip(&traj.states) {
            let _ = write!(out, "{p},{}", fmt_decimal(*t));
            for v in s.row(p) {
                let _ = write!(out, ",{}", fmt_decimal(*v));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes the dataset's CSVs into `out` and returns the manifest.
pub fn generate(spec: &DatasetSpec, seed: u64, out: &Path) -> Result<RunManifest> {
    let cfg = ExperimentConfig {
        dataset: spec.clone(),
        seed,
        protocol: if spec.is_pairwise() { Protocol::Pairwise } else { Protocol::LeaveOneOut { left_out: 1, origin: Default::default() } },
        ..super::config::preset("arch-ot-cfm")?
    };
    std::fs::create_dir_all(out)?;
    let started = Instant::now();
    match pipeline::load_dataset(&cfg)? {
        Dataset::Pair(p) => {
            save_points_csv(&out.join("source.csv"), &p.source)?;
            save_points_csv(&out.join("target.csv"), &p.target)?;
            save_points_csv(&out.join("truth.csv"), &p.truth)?;
        }
        Dataset::Marginals(ms) => save_marginals_csv(&out.join("marginals.csv"), &ms)?,
    }
    let mut manifest = RunManifest::new(cfg.hash(), seed);
    manifest.set_stage(StageRecord {
        name: format!("generate_{}", spec.name()),
        status: StageStatus::Completed,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint: None,
        trace: None,
        error: None,
    });
    manifest.save(out)?;
    Ok(manifest)
}

pub fn train_metric(cfg: &ExperimentConfig) -> Result<Run> {
    let mut run = Run::open(cfg)?;
    run.metric(false)?;
    Ok(run)
}

pub fn train_interpolant(cfg: &ExperimentConfig) -> Result<Run> {
    let mut run = Run::open(cfg)?;
    let metric = run.metric(true)?;
    run.interpolant(&metric, false)?;
    Ok(run)
}

pub fn train_vector_field(cfg: &ExperimentConfig) -> Result<Run> {
    let mut run = Run::open(cfg)?;
    let metric = run.metric(true)?;
    let interpolant = if cfg.interpolant.learn { run.load_interpolant()? } else { run.interpolant(&metric, true)? };
    run.vector_field(&metric, &interpolant, false)?;
    Ok(run)
}

/// All stages in order. With `resume`, stages whose checkpoint exists are loaded.
pub fn train(cfg: &ExperimentConfig, resume: bool) -> Result<Run> {
    let mut run = Run::open(cfg)?;
    let metric = run.metric(resume)?;
    let interpolant = run.interpolant(&metric, resume)?;
    run.vector_field(&metric, &interpolant, resume)?;
    Ok(run)
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<(Run, Vec<EvalReport>)> {
    let mut run = Run::open(cfg)?;
    let vf = run.load_vector_field()?;
    let reports = run.evaluate(&vf)?;
    Ok((run, reports))
}

/// Train (resuming finished stages) and evaluate.
pub fn train_and_evaluate(cfg: &ExperimentConfig) -> Result<(Run, Vec<EvalReport>)> {
    let mut run = train(cfg, true)?;
    let vf = run.load_vector_field()?;
    let reports = run.evaluate(&vf)?;
    Ok((run, reports))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooRow {
    pub left_out: usize,
    pub time: f64,
    pub seed: u64,
    pub w1: f64,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        MeanStd { mean, std, count: n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooSummary {
    pub rows: Vec<LooRow>,
    /// Mean and spread across seeds, per left-out marginal.
    pub per_timestep: Vec<(usize, MeanStd)>,
    /// Mean of the per-timestep means; spread of those means.
    pub per_timestep_average: MeanStd,
    /// Mean and spread over every (left-out, seed) run.
    pub pooled: MeanStd,
    pub dir: PathBuf,
}

/// One leave-one-out run per (left-out index, seed); results are aggregated both
/// per time step and pooled over all runs.
pub fn leave_one_out(base: &ExperimentConfig, left_out: &[usize], seeds: &[u64]) -> Result<LooSummary> {
    base.validate()?;
    let Protocol::LeaveOneOut { origin, .. } = base.protocol else {
        return Err(Error::Config("the loo command needs protocol kind = \"leave_one_out\"".into()));
    };
    if left_out.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one left-out index and one seed".into()));
    }
    let mut rows = Vec::new();
    for &k in left_out {
        for &seed in seeds {
            let cfg = ExperimentConfig { seed, protocol: Protocol::LeaveOneOut { left_out: k, origin }, ..base.clone() };
            let (run, reports) = train_and_evaluate(&cfg)?;
            let Dataset::Marginals(ms) = &run.data.dataset else { unreachable!("validated multi-marginal dataset") };
            rows.push(LooRow { left_out: k, time: ms[k].time, seed, w1: reports[0].value, run_dir: run.dir.clone() });
        }
    }
    let per_timestep: Vec<(usize, MeanStd)> = left_out
        .iter()
        .map(|&k| (k, MeanStd::of(&rows.iter().filter(|r| r.left_out == k).map(|r| r.w1).collect::<Vec<_>>())))
        .collect();
    let per_timestep_average = MeanStd::of(&per_timestep.iter().map(|(_, m)| m.mean).collect::<Vec<_>>());
    let pooled = MeanStd::of(&rows.iter().map(|r| r.w1).collect::<Vec<_>>());

    let mut key = base.clone();
    key.seed = 0;
    key.protocol = Protocol::LeaveOneOut { left_out: 0, origin };
    let dir = base.output_dir.join(format!("loo-{}", key.hash()));
    std::fs::create_dir_all(&dir)?;
    let mut out = String::from("left_out,time,seed,w1,run\n");
    for r in &rows {
        let name = r.run_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{name}", r.left_out, fmt_decimal(r.time), r.seed, fmt_decimal(r.w1));
    }
    std::fs::write(dir.join("loo_results.csv"), out)?;
    let mut out = String::from("aggregation,left_out,mean,std,count\n");
    for (k, m) in &per_timestep {
        let _ = writeln!(out, "per_timestep,{k},{},{},{}", fmt_decimal(m.mean), fmt_decimal(m.std), m.count);
    }
    for (name, m) in [("per_timestep_average", per_timestep_average), ("pooled", pooled)] {
        let _ = writeln!(out, "{name},,{},{},{}", fmt_decimal(m.mean), fmt_decimal(m.std), m.count);
    }
    std::fs::write(dir.join("loo_summary.csv"), out)?;
    let mut manifest = RunManifest::new(key.hash(), base.seed);
    manifest.metrics = rows
        .iter()
        .map(|r| EvalReport { metric: format!("w1_left_out_{}", r.left_out), value: r.w1, sample_size: 0, seed: r.seed, runtime_secs: 0.0 })
        .collect();
    manifest.save(&dir)?;
    Ok(LooSummary { rows, per_timestep, per_timestep_average, pooled, dir })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub pair: usize,
    pub chord_energy: f64,
    pub geodesic_energy: f64,
    pub converged: bool,
    /// Present when the run has a trained interpolant.
    pub interpolant_energy: Option<f64>,
    pub max_distance_to_data: f64,
    pub contained: Option<bool>,
}

/// Solves discrete geodesics between random training source/target endpoints of
/// the run's metric and, when available, compares the run's interpolant.
pub fn oracle(
    cfg: &ExperimentConfig,
    pairs: usize,
    solver: &GeodesicSolverConfig,
    containment: Option<ContainmentSpec>,
) -> Result<Vec<OracleRow>> {
    let mut run = Run::open(cfg)?;
    let metric = run.metric(true)?;
    let interpolant = if run.path(INTERPOLANT_CKPT).exists() { Some(run.load_interpolant()?) } else { None };
    let (first, last): (&Marginal, &Marginal) = (&run.data.train[0], run.data.train.last().expect("two marginals"));
    let anchors = run.data.train_points()?;
    let mut rng = stream(cfg.seed, "oracle.pairs");
    let dir = run.path("oracle");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::with_capacity(pairs);
    let mut paths = String::from("pair,k,path");
    for j in 0..first.points.dim() {
        let _ = write!(paths, ",x{j}");
    }
    paths.push('\n');
    for p in 0..pairs {
        let x0 = first.points.point(rng.gen_range(0..first.points.len())).to_vec();
        let x1 = last.points.point(rng.gen_range(0..last.points.len())).to_vec();
        let (geo, interp) = match &interpolant {
            Some(i) => {
                let cmp = interpolant_vs_geodesic(i, &metric, &x0, &x1, solver, cfg.seed.wrapping_add(p as u64))?;
                let path = crate::oracle::interpolant_path(i, &x0, &x1, solver.segments)?;
                (cmp.geodesic, Some((cmp.interpolant_energy, path)))
            }
            None => (solve_discrete_geodesic(&x0, &x1, &metric, solver, cfg.seed.wrapping_add(p as u64))?, None),
        };
        let c = match containment {
            Some(spec) => Some(check_containment(&geo.path, &anchors, &spec)?),
            None => None,
        };
        let max_distance_to_data = match c {
            Some(c) => c.max_distance,
            None => (0..geo.path.points.rows())
                .map(|k| nearest_distance(geo.path.points.row(k), &anchors))
                .fold(0.0, f64::max),
        };
        for (label, path) in std::iter::once(("geodesic", &geo.path)).chain(interp.as_ref().map(|(_, p)| ("interpolant", p))) {
            for k in 0..path.points.rows() {
                let _ = write!(paths, "{p},{k},{label}");
                for v in path.points.row(k) {
                    let _ = write!(paths, ",{}", fmt_decimal(*v));
                }
                paths.push('\n');
            }
        }
        rows.push(OracleRow {
            pair: p,
            chord_energy: geo.chord_energy,
            geodesic_energy: geo.energy,
            converged: geo.converged,
            interpolant_energy: interp.map(|(e, _)| e),
            max_distance_to_data,
            contained: c.map(|c| c.contained),
        });
    }
    std::fs::write(dir.join("paths.csv"), paths)?;
    let mut out = String::from("pair,chord_energy,geodesic_energy,converged,interpolant_energy,max_distance_to_data,contained\n");
    for r in &rows {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.pair,
            fmt_decimal(r.chord_energy),
            fmt_decimal(r.geodesic_energy),
            r.converged,
            opt(r.interpolant_energy.map(fmt_decimal)),
            fmt_decimal(r.max_distance_to_data),
            opt(r.contained.map(|c| c.to_string()))
        );
    }
    std::fs::write(dir.join("summary.csv"), out)?;
    run.manifest.save(&run.dir)?;
    Ok(rows)
}

fn nearest_distance(x: &[f64], data: &PointSet) -> f64 {
    (0..data.len())
        .map(|i| data.point(i).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}
