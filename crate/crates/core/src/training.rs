//! Minibatch pair sampling and the early-stopping loop shared by both training stages.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::coupling::{independent_pairs, ot_pairs, Coupling};
use crate::datasets::{Marginal, PointSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Coupled endpoints for one minibatch on the time segment `[t0, t1]`.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x0: Matrix,
    pub x1: Matrix,
    pub t0: f64,
    pub t1: f64,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.rows() == 0
    }

    /// `n` times drawn uniformly on the segment.
    pub fn sample_times(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.len()).map(|_| self.t0 + (self.t1 - self.t0) * rng.gen::<f64>()).collect()
    }
}

#[derive(Debug, Clone)]
struct Segment {
    t0: f64,
    t1: f64,
    source: PointSet,
    target: PointSet,
}

/// Draws coupled minibatches from consecutive marginals.
#[derive(Debug, Clone)]
pub struct PairSampler {
    segments: Vec<Segment>,
    coupling: Coupling,
    batch_size: usize,
}

impl PairSampler {
    /// Source at t = 0, target at t = 1.
    pub fn pairwise(source: PointSet, target: PointSet, coupling: Coupling, batch_size: usize) -> Result<Self> {
        Self::from_marginals(
            &[Marginal { time: 0.0, points: source }, Marginal { time: 1.0, points: target }],
            coupling,
            batch_size,
        )
    }

    /// One segment per pair of consecutive marginals (which must be sorted by time).
    pub fn from_marginals(marginals: &[Marginal], coupling: Coupling, batch_size: usize) -> Result<Self> {
        if marginals.len() < 2 {
            return Err(Error::InvalidArgument("need at least two marginals to form pairs".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut segments = Vec::with_capacity(marginals.len() - 1);
        for w in marginals.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::InvalidArgument(format!("marginal times must increase ({} then {})", w[0].time, w[1].time)));
            }
            if w[0].points.is_empty() || w[1].points.is_empty() {
                return Err(Error::InvalidArgument(format!("empty marginal on segment [{}, {}]", w[0].time, w[1].time)));
            }
            if w[0].points.dim() != w[1].points.dim() {
                return Err(Error::Shape("marginals have different dimensions".into()));
            }
            segments.push(Segment { t0: w[0].time, t1: w[1].time, source: w[0].points.clone(), target: w[1].points.clone() });
        }
        Ok(PairSampler { segments, coupling, batch_size })
    }

    pub fn dim(&self) -> usize {
        self.segments[0].source.dim()
    }

    pub fn coupling(&self) -> Coupling {
        self.coupling
    }

    /// `(t0, t1)` of every segment.
    pub fn segments(&self) -> Vec<(f64, f64)> {
        self.segments.iter().map(|s| (s.t0, s.t1)).collect()
    }

    /// One pass: every segment is shuffled and cut into batches of equal source and
    /// target size; the batches of all segments are then visited in random order.
    pub fn epoch(&self, rng: &mut Rng) -> Result<Vec<PairBatch>> {
        let mut batches = Vec::new();
        for seg in &self.segments {
            let n = seg.source.len().min(seg.target.len());
            let mut src: Vec<usize> = (0..seg.source.len()).collect();
            let mut tgt: Vec<usize> = (0..seg.target.len()).collect();
            src.shuffle(rng);
            tgt.shuffle(rng);
            let mut start = 0;
            while start < n {
                let end = (start + self.batch_size).min(n);
                let a = seg.source.subset(&src[start..end]);
                let b = seg.target.subset(&tgt[start..end]);
                let plan = match self.coupling {
                    Coupling::Ot => ot_pairs(&a, &b)?,
                    Coupling::Independent => independent_pairs(&a, &b, rng)?,
                };
                batches.push(PairBatch {
                    x0: a.matrix().select_rows(&plan.source),
                    x1: b.matrix().select_rows(&plan.target),
                    t0: seg.t0,
                    t1: seg.t1,
                });
                start = end;
            }
        }
        batches.shuffle(rng);
        Ok(batches)
    }
}

/// Validation minibatches with their times frozen so the loss is comparable across epochs.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub batches: Vec<(PairBatch, Vec<f64>)>,
}

impl ValidationSet {
    pub fn draw(sampler: &PairSampler, rng: &mut Rng) -> Result<Self> {
        let batches = sampler
            .epoch(rng)?
            .into_iter()
            .map(|b| {
                let t = b.sample_times(rng);
                (b, t)
            })
            .collect();
        Ok(ValidationSet { batches })
    }

    pub fn len(&self) -> usize {
        self.batches.iter().map(|(b, _)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample-weighted mean of a per-batch mean loss.
    pub fn mean_loss(&self, mut batch_loss: impl FnMut(&PairBatch, &[f64]) -> Result<f64>) -> Result<f64> {
        let mut total = 0.0;
        for (b, t) in &self.batches {
            total += batch_loss(b, t)? * b.len() as f64;
        }
        Ok(total / self.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingConfig {
    pub max_epochs: usize,
    pub patience: usize,
}

impl StoppingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Mean minibatch loss of every completed epoch.
    pub train: Vec<f64>,
    /// Validation loss before training, then after every epoch.
    pub validation: Vec<f64>,
    /// Index into `validation` of the restored parameters.
    pub best: usize,
    pub stopped_early: bool,
}

impl LossTrace {
    pub fn best_validation(&self) -> f64 {
        self.validation[self.best]
    }
}

/// Runs `epoch` until validation stops improving for `patience` epochs, then hands
/// back the snapshot with the lowest validation loss.
///
/// `epoch` trains one pass and returns the mean training loss; `validate` scores the
/// current parameters; `snapshot`/`restore` save and reinstate them.
pub fn early_stopping<S>(
    cfg: &StoppingConfig,
    mut epoch: impl FnMut(usize) -> Result<f64>,
    mut validate: impl FnMut() -> Result<f64>,
    mut snapshot: impl FnMut() -> S,
    mut restore: impl FnMut(S),
) -> Result<LossTrace> {
    cfg.validate()?;
    let initial = validate()?;
    if !initial.is_finite() {
        return Err(Error::Diverged(format!("initial validation loss is {initial}")));
    }
    let mut trace = LossTrace { validation: vec![initial], ..LossTrace::default() };
    let mut best = snapshot();
    let mut since_best = 0;
    for e in 0..cfg.max_epochs {
        let train = epoch(e)?;
        if !train.is_finite() {
            return Err(Error::Diverged(format!("training loss became {train} in epoch {e}")));
        }
        let val = validate()?;
        if !val.is_finite() {
            return Err(Error::Diverged(format!("validation loss became {val} after epoch {e}")));
        }
        trace.train.push(train);
        trace.validation.push(val);
        if val < trace.validation[trace.best] {
            trace.best = trace.validation.len() - 1;
            best = snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                trace.stopped_early = true;
                break;
            }
        }
    }
    log::debug!("early stopping: best epoch {} of {}", trace.best, trace.train.len());
    restore(best);
    Ok(trace)
}
