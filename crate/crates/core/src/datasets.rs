//! Point sets, synthetic generators, CSV ingestion, whitening and splits.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{check_finite, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, Rng};

/// Standard deviation of the half-Gaussians placing Arch and Sphere samples along [0, 1].
pub const HALF_GAUSSIAN_STD: f64 = 1.0 / (2.0 * PI);
/// Standard deviation of the radial noise on the Arch.
pub const ARCH_RADIAL_NOISE: f64 = 0.1;

/// N×d samples with optional per-point marginal labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Matrix,
    labels: Option<Vec<usize>>,
}

impl PointSet {
    pub fn new(points: Matrix) -> Result<Self> {
        check_finite(points.data(), "points")?;
        Ok(PointSet { points, labels: None })
    }

    pub fn with_labels(points: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != points.rows() {
            return Err(Error::Shape(format!("{} labels for {} points", labels.len(), points.rows())));
        }
        let mut p = Self::new(points)?;
        p.labels = Some(labels);
        Ok(p)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.points
    }

    pub fn into_matrix(self) -> Matrix {
        self.points
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn subset(&self, indices: &[usize]) -> PointSet {
        PointSet {
            points: self.points.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Concatenates sets of equal dimension; labels are dropped.
    pub fn concat(parts: &[&PointSet]) -> Result<PointSet> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| &p.points).collect();
        Ok(PointSet { points: Matrix::vconcat(&mats)?, labels: None })
    }

    /// Uniform subsample without replacement down to `n` points (identity when already ≤ n).
    pub fn subsample(&self, n: usize, rng: &mut Rng) -> PointSet {
        if self.len() <= n {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        self.subset(&idx)
    }
}

/// One observed time marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub time: f64,
    pub points: PointSet,
}

/// Source, target and held-out ground-truth midpoint of a synthetic benchmark.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub source: PointSet,
    pub target: PointSet,
    pub truth: PointSet,
}

/// `n` positions of |N(0, s)| (or 1 − |N(0, s)| when `mirrored`), clamped to [0, 1].
fn half_gaussian_positions(n: usize, mirrored: bool, rng: &mut Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, HALF_GAUSSIAN_STD).unwrap();
    (0..n)
        .map(|_| {
            let z = normal.sample(rng).abs();
            let p = if mirrored { 1.0 - z } else { z };
            p.clamp(0.0, 1.0)
        })
        .collect()
}

/// Monotone (1D exact OT) interpolant at t = 1/2 between two position samples.
fn ot_midpoints_1d(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    sa.iter().zip(&sb).map(|(x, y)| 0.5 * (x + y)).collect()
}

fn embed_arch(positions: &[f64], rng: &mut Rng) -> PointSet {
    let noise = Normal::new(0.0, ARCH_RADIAL_NOISE).unwrap();
    let rows: Vec<[f64; 2]> = positions
        .iter()
        .map(|&p| {
            let r = 1.0 + noise.sample(rng);
            let theta = PI * p;
            [r * theta.cos(), r * theta.sin()]
        })
        .collect();
    PointSet::from_rows(&rows).expect("finite arch points")
}

fn embed_sphere(positions: &[f64], rng: &mut Rng) -> PointSet {
    let rows: Vec<[f64; 3]> = positions
        .iter()
        .map(|&p| {
            let polar = PI * p;
            let lon = rng.gen_range(0.0..2.0 * PI);
            [polar.sin() * lon.cos(), polar.sin() * lon.sin(), polar.cos()]
        })
        .collect();
    PointSet::from_rows(&rows).expect("finite sphere points")
}

/// Noisy half-circle benchmark: source near angle 0, target near angle π.
pub fn generate_arch(n: usize, seed: u64) -> Result<SyntheticPair> {
    if n == 0 {
        return Err(Error::InvalidArgument("arch needs n >= 1".into()));
    }
    let mut rng = stream(seed, "datasets.arch");
    let a = half_gaussian_positions(n, false, &mut rng);
    let b = half_gaussian_positions(n, true, &mut rng);
    let mid = ot_midpoints_1d(&a, &b);
    Ok(SyntheticPair {
        source: embed_arch(&a, &mut rng),
        target: embed_arch(&b, &mut rng),
        truth: embed_arch(&mid, &mut rng),
    })
}

/// Unit-sphere benchmark: source around the north pole, target around the south pole.
pub fn generate_sphere(n: usize, seed: u64) -> Result<SyntheticPair> {
    if n == 0 {
        return Err(Error::InvalidArgument("sphere needs n >= 1".into()));
    }
    let mut rng = stream(seed, "datasets.sphere");
    let a = half_gaussian_positions(n, false, &mut rng);
    let b = half_gaussian_positions(n, true, &mut rng);
    let mid = ot_midpoints_1d(&a, &b);
    Ok(SyntheticPair {
        source: embed_sphere(&a, &mut rng),
        target: embed_sphere(&b, &mut rng),
        truth: embed_sphere(&mid, &mut rng),
    })
}

/// Three isotropic 2D Gaussians (std 0.1) centred at (0,0), (1,0), (2,0) at times 0, 1, 2.
pub fn generate_gaussian_line(n: usize, seed: u64) -> Result<Vec<Marginal>> {
    if n == 0 {
        return Err(Error::InvalidArgument("gaussian line needs n >= 1".into()));
    }
    let mut rng = stream(seed, "datasets.line3");
    let normal = Normal::new(0.0, 0.1).unwrap();
    (0..3)
        .map(|k| {
            let rows: Vec<[f64; 2]> =
                (0..n).map(|_| [k as f64 + normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
            Ok(Marginal { time: k as f64, points: PointSet::from_rows(&rows)? })
        })
        .collect()
}

/// The Arch benchmark as three marginals at times 0, 1/2, 1 (the middle one is the OT truth).
pub fn generate_arch_marginals(n: usize, seed: u64) -> Result<Vec<Marginal>> {
    let arch = generate_arch(n, seed)?;
    Ok(vec![
        Marginal { time: 0.0, points: arch.source },
        Marginal { time: 0.5, points: arch.truth },
        Marginal { time: 1.0, points: arch.target },
    ])
}

/// Column layout of a marginals CSV.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CsvSchema {
    /// Time column; when absent from the file every row belongs to time 0.
    #[serde(default = "default_time_column")]
    pub time_column: String,
    /// Feature columns in order; `None` selects every non-time column.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
}

fn default_time_column() -> String {
    "t".to_string()
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { time_column: default_time_column(), feature_columns: None }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedMarginals {
    pub marginals: Vec<Marginal>,
    /// Rows skipped because a value was NaN.
    pub dropped_rows: usize,
}

pub fn load_marginals_csv(path: &Path, schema: &CsvSchema) -> Result<LoadedMarginals> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let time_idx = find(&schema.time_column);
    let feature_idx: Vec<usize> = match &schema.feature_columns {
        Some(cols) => cols
            .iter()
            .map(|c| find(c).ok_or_else(|| Error::Parse(format!("missing feature column `{c}`"))))
            .collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| Some(i) != time_idx).collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::Parse("no feature columns".into()));
    }
    if schema.feature_columns.is_some() && time_idx.is_none() && schema.time_column != default_time_column() {
        return Err(Error::Parse(format!("missing time column `{}`", schema.time_column)));
    }

    let parse = |raw: &str, line: usize, col: &str| -> Result<f64> {
        raw.parse::<f64>().map_err(|_| Error::Parse(format!("line {line}, column `{col}`: `{raw}` is not a number")))
    };

    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut dropped = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let line = r + 2;
        let t = match time_idx {
            Some(i) => parse(record.get(i).unwrap_or(""), line, &schema.time_column)?,
            None => 0.0,
        };
        let features = feature_idx
            .iter()
            .map(|&i| parse(record.get(i).unwrap_or(""), line, &headers[i]))
            .collect::<Result<Vec<f64>>>()?;
        if t.is_nan() || features.iter().any(|v| v.is_nan()) {
            dropped += 1;
            continue;
        }
        if !t.is_finite() || features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("line {line}: infinite value")));
        }
        rows.push((t, features));
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rows containing NaN", path.display());
    }

    let mut times: Vec<f64> = rows.iter().map(|(t, _)| *t).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    if times.is_empty() {
        return Err(Error::Parse(format!("{}: no usable rows", path.display())));
    }
    let marginals = times
        .iter()
        .map(|&t| {
            let pts: Vec<&Vec<f64>> = rows.iter().filter(|(rt, _)| *rt == t).map(|(_, f)| f).collect();
            Ok(Marginal { time: t, points: PointSet::from_rows(&pts)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedMarginals { marginals, dropped_rows: dropped })
}

/// Shortest decimal representation that parses back to the same `f64`.
pub fn fmt_decimal(v: f64) -> String {
    format!("{v}")
}

/// Writes `t,x0..x{d-1}` rows, one block per marginal.
pub fn save_marginals_csv(path: &Path, marginals: &[Marginal]) -> Result<()> {
    let dim = marginals.first().map_or(0, |m| m.points.dim());
    let mut out = String::from("t");
    for j in 0..dim {
        out.push_str(&format!(",x{j}"));
    }
    out.push('\n');
    for m in marginals {
        for i in 0..m.points.len() {
            out.push_str(&fmt_decimal(m.time));
            for v in m.points.point(i) {
                out.push(',');
                out.push_str(&fmt_decimal(*v));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes `x0..x{d-1}` rows.
pub fn save_points_csv(path: &Path, points: &PointSet) -> Result<()> {
    let mut out = (0..points.dim()).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..points.len() {
        out.push_str(&points.point(i).iter().map(|v| fmt_decimal(*v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_points_csv(path: &Path) -> Result<PointSet> {
    let loaded = load_marginals_csv(path, &CsvSchema::default())?;
    let parts: Vec<&PointSet> = loaded.marginals.iter().map(|m| &m.points).collect();
    PointSet::concat(&parts)
}

/// Per-dimension standardisation fitted on a training split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WhitenTransform {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const MIN_WHITEN_STD: f64 = 1e-8;

impl WhitenTransform {
    pub fn fit(points: &PointSet) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("cannot fit whitening on an empty set".into()));
        }
        let (n, d) = (points.len() as f64, points.dim());
        let mut mean = vec![0.0; d];
        for i in 0..points.len() {
            for (m, v) in mean.iter_mut().zip(points.point(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..points.len() {
            for ((s, v), m) in var.iter_mut().zip(points.point(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let sd = (s / n).sqrt();
                if sd < MIN_WHITEN_STD {
                    log::warn!("dimension {j} has (near) zero variance; clamping std to {MIN_WHITEN_STD}");
                    MIN_WHITEN_STD
                } else {
                    sd
                }
            })
            .collect();
        Ok(WhitenTransform { mean, std })
    }

    fn check(&self, points: &PointSet) -> Result<()> {
        if points.dim() != self.mean.len() {
            return Err(Error::Shape(format!("whitening fitted for d={}, got d={}", self.mean.len(), points.dim())));
        }
        Ok(())
    }

    pub fn apply(&self, points: &PointSet) -> Result<PointSet> {
        self.check(points)?;
        let mut m = points.matrix().clone();
        for i in 0..m.rows() {
            for ((v, mu), sd) in m.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        Ok(PointSet { points: m, labels: points.labels.clone() })
    }

    pub fn invert(&self, points: &PointSet) -> Result<PointSet> {
        self.check(points)?;
        let mut m = points.matrix().clone();
        for i in 0..m.rows() {
            for ((v, mu), sd) in m.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * sd + mu;
            }
        }
        Ok(PointSet { points: m, labels: points.labels.clone() })
    }
}

/// Seeded shuffle split, stratified by label when labels exist.
pub fn split(points: &PointSet, fraction: f64, seed: u64) -> Result<(PointSet, PointSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for i in 0..points.len() {
        let g = points.labels().map_or(0, |l| l[i]);
        groups.entry(g).or_default().push(i);
    }
    let mut rng = stream(seed, "datasets.split");
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (g, mut idx) in groups {
        if idx.len() < 2 {
            return Err(Error::InvalidArgument(format!("marginal {g} has {} point(s); need at least 2 to split", idx.len())));
        }
        idx.shuffle(&mut rng);
        let n_train = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    Ok((points.subset(&train), points.subset(&val)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radial_gaps(p: &PointSet) -> Vec<f64> {
        (0..p.len()).map(|i| p.point(i).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).collect()
    }

    #[test]
    fn arch_radial_noise_statistics() {
        let arch = generate_arch(5000, 7).unwrap();
        let gaps = radial_gaps(&arch.source);
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (gaps.len() - 1) as f64).sqrt();
        assert!(mean.abs() < 0.01, "mean radial gap {mean}");
        assert!((sd - 0.1).abs() < 0.02, "radial std {sd}");
        assert_eq!(arch.truth.len(), 5000);
    }

    #[test]
    fn generators_are_seeded() {
        let a = generate_arch(50, 3).unwrap();
        let b = generate_arch(50, 3).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.truth, b.truth);
        assert_ne!(generate_arch(50, 4).unwrap().source, a.source);
        assert_eq!(generate_sphere(20, 1).unwrap().target, generate_sphere(20, 1).unwrap().target);
    }

    #[test]
    fn sphere_points_have_unit_norm() {
        let s = generate_sphere(1000, 2).unwrap();
        for set in [&s.source, &s.target, &s.truth] {
            for g in radial_gaps(set) {
                assert!(g.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sphere_source_latitude_mean() {
        let n = 5000;
        let s = generate_sphere(n, 5).unwrap();
        let lat: Vec<f64> = (0..n).map(|i| s.source.point(i)[2].clamp(-1.0, 1.0).acos()).collect();
        let mean = lat.iter().sum::<f64>() / n as f64;
        // polar angle is π·|N(0, s)|: mean π s √(2/π), variance π² s² (1 − 2/π)
        let expected = PI * HALF_GAUSSIAN_STD * (2.0 / PI).sqrt();
        let se = PI * HALF_GAUSSIAN_STD * (1.0 - 2.0 / PI).sqrt() / (n as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} ± {se}");
    }

    #[test]
    fn whitening_by_hand() {
        let p = PointSet::from_rows(&[[0.0], [2.0]]).unwrap();
        let w = WhitenTransform::fit(&p).unwrap();
        assert_eq!(w.mean, vec![1.0]);
        assert_eq!(w.std, vec![1.0]);
        let z = w.apply(&PointSet::from_rows(&[[2.0]]).unwrap()).unwrap();
        assert_eq!(z.point(0), &[1.0]);
    }

    #[test]
    fn whitening_constant_dataset() {
        let p = PointSet::from_rows(&[[3.0, 1.0], [3.0, 2.0]]).unwrap();
        let w = WhitenTransform::fit(&p).unwrap();
        assert_eq!(w.std[0], MIN_WHITEN_STD);
        let z = w.apply(&p).unwrap();
        assert_eq!(z.point(0)[0], 0.0);
        assert_eq!(z.point(1)[0], 0.0);
    }

    #[test]
    fn whitening_inverse() {
        let p = generate_arch(200, 1).unwrap().source;
        let w = WhitenTransform::fit(&p).unwrap();
        let back = w.invert(&w.apply(&p).unwrap()).unwrap();
        for i in 0..p.len() {
            for (a, b) in p.point(i).iter().zip(back.point(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn split_sizes_and_membership() {
        let rows: Vec<[f64; 1]> = (0..10).map(|i| [i as f64]).collect();
        let p = PointSet::from_rows(&rows).unwrap();
        let (tr, va) = split(&p, 0.9, 4).unwrap();
        assert_eq!((tr.len(), va.len()), (9, 1));
        let mut all: Vec<f64> = (0..tr.len()).map(|i| tr.point(i)[0]).chain((0..va.len()).map(|i| va.point(i)[0])).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        let (tr2, _) = split(&p, 0.9, 4).unwrap();
        assert_eq!(tr, tr2);
    }

    #[test]
    fn split_is_stratified() {
        let rows: Vec<[f64; 1]> = (0..30).map(|i| [i as f64]).collect();
        let labels: Vec<usize> = (0..30).map(|i| if i < 20 { 0 } else { 1 }).collect();
        let p = PointSet::with_labels(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
        let (tr, _) = split(&p, 0.9, 1).unwrap();
        let l = tr.labels().unwrap();
        assert_eq!(l.iter().filter(|&&g| g == 0).count(), 18);
        assert_eq!(l.iter().filter(|&&g| g == 1).count(), 9);
        let tiny = PointSet::with_labels(Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap(), vec![0, 0, 1]).unwrap();
        assert!(split(&tiny, 0.5, 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_nan_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = generate_gaussian_line(5, 9).unwrap();
        save_marginals_csv(&path, &m).unwrap();
        let back = load_marginals_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(back.dropped_rows, 0);
        assert_eq!(back.marginals, m);

        std::fs::write(&path, "t,x0,x1\n0,1.5,2\n1,NaN,3\n1,4,5\n").unwrap();
        let back = load_marginals_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(back.dropped_rows, 1);
        assert_eq!(back.marginals.len(), 2);
        assert_eq!(back.marginals[1].points.point(0), &[4.0, 5.0]);

        std::fs::write(&path, "t,x0\n0,abc\n").unwrap();
        assert!(matches!(load_marginals_csv(&path, &CsvSchema::default()), Err(Error::Parse(_))));
        let schema = CsvSchema { time_column: "t".into(), feature_columns: Some(vec!["x9".into()]) };
        std::fs::write(&path, "t,x0\n0,1\n").unwrap();
        assert!(load_marginals_csv(&path, &schema).is_err());
    }

    #[test]
    fn two_row_file_gives_two_singletons() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.csv");
        std::fs::write(&path, "t,x0\n1,5\n0,3\n").unwrap();
        let back = load_marginals_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(back.marginals.len(), 2);
        assert_eq!(back.marginals[0].time, 0.0);
        assert_eq!(back.marginals[0].points.point(0), &[3.0]);
    }
}
