use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coupling::Coupling;
use crate::datasets::CsvSchema;
use crate::error::{Error, Result};
use crate::eval::{RolloutOrigin, DEFAULT_EULER_STEPS};
use crate::interpolant::{InterpolantTrainConfig, InterpolantVariant, DEFAULT_FD_STEP};
use crate::matching::{MatchConfig, NormMode};
use crate::metrics::{EpsilonRule, RbfTrainConfig};
use crate::nn::OptimizerConfig;
use crate::training::StoppingConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Arch { n: usize },
    Sphere { n: usize },
    /// Three Gaussians on a line, observed at t = 0, 1, 2.
    GaussianLine { n: usize },
    /// Arch source, midpoint truth and target as marginals at t = 0, ½, 1.
    ArchMarginals { n: usize },
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Arch { .. } => "arch",
            DatasetSpec::Sphere { .. } => "sphere",
            DatasetSpec::GaussianLine { .. } => "gaussian_line",
            DatasetSpec::ArchMarginals { .. } => "arch_marginals",
            DatasetSpec::Csv { .. } => "csv",
        }
    }

    /// Pairwise benchmarks with a known midpoint.
    pub fn is_pairwise(&self) -> bool {
        matches!(self, DatasetSpec::Arch { .. } | DatasetSpec::Sphere { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    Identity,
    Land {
        sigma: f64,
        eps: f64,
    },
    Rbf {
        clusters: usize,
        kappa: f64,
        eps: EpsilonRule,
        #[serde(default = "one")]
        power: u32,
        #[serde(default)]
        train: RbfTrainConfig,
    },
}

fn one() -> u32 {
    1
}

impl MetricSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MetricSpec::Identity => "identity",
            MetricSpec::Land { .. } => "land",
            MetricSpec::Rbf { .. } => "rbf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolantSpec {
    /// `false` freezes φ ≡ 0, i.e. straight interpolants.
    pub learn: bool,
    pub width: usize,
    /// Hidden layers.
    pub depth: usize,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub fd_step: f64,
    #[serde(default = "yes")]
    pub time_input: bool,
    #[serde(default)]
    pub normalize_by_straight_energy: bool,
}

fn yes() -> bool {
    true
}

impl InterpolantSpec {
    pub fn train_config(&self) -> InterpolantTrainConfig {
        InterpolantTrainConfig {
            optimizer: OptimizerConfig::adam(self.lr),
            stopping: StoppingConfig { max_epochs: self.epochs, patience: self.patience },
            normalize_by_straight_energy: self.normalize_by_straight_energy,
        }
    }
}

impl Default for InterpolantSpec {
    fn default() -> Self {
        InterpolantSpec {
            learn: true,
            width: 64,
            depth: 3,
            lr: 1e-4,
            epochs: 1000,
            patience: 3,
            fd_step: DEFAULT_FD_STEP,
            time_input: true,
            normalize_by_straight_energy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorFieldSpec {
    pub width: usize,
    pub depth: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub norm: NormMode,
}

impl VectorFieldSpec {
    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            mode: self.norm,
            optimizer: OptimizerConfig::adamw(self.lr, self.weight_decay),
            stopping: StoppingConfig { max_epochs: self.epochs, patience: self.patience },
        }
    }
}

impl Default for VectorFieldSpec {
    fn default() -> Self {
        VectorFieldSpec { width: 64, depth: 3, lr: 1e-3, weight_decay: 1e-5, epochs: 1000, patience: 3, norm: NormMode::Normalized }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    /// Source → target, scored against the midpoint truth at t = ½.
    Pairwise,
    /// Hold out one interior marginal and reconstruct it from a neighbour.
    LeaveOneOut {
        left_out: usize,
        #[serde(default)]
        origin: RolloutOrigin,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub metric: MetricSpec,
    pub coupling: Coupling,
    #[serde(default)]
    pub interpolant: InterpolantSpec,
    #[serde(default)]
    pub vector_field: VectorFieldSpec,
    pub batch_size: usize,
    pub train_fraction: f64,
    /// Train on whitened coordinates and un-whiten before scoring.
    #[serde(default)]
    pub whiten: bool,
    pub euler_steps: usize,
    pub protocol: Protocol,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        match &self.dataset {
            DatasetSpec::Arch { n } | DatasetSpec::Sphere { n } | DatasetSpec::GaussianLine { n } | DatasetSpec::ArchMarginals { n } => {
                if *n < 4 {
                    return bad(format!("dataset needs n >= 4, got {n}"));
                }
            }
            DatasetSpec::Csv { .. } => {}
        }
        match &self.metric {
            MetricSpec::Identity => {}
            MetricSpec::Land { sigma, eps } => {
                if !(*sigma > 0.0 && *eps > 0.0 && sigma.is_finite() && eps.is_finite()) {
                    return bad(format!("LAND needs sigma > 0 and eps > 0, got sigma={sigma} eps={eps}"));
                }
            }
            MetricSpec::Rbf { clusters, kappa, eps, power, train } => {
                if *clusters == 0 || !(*kappa > 0.0) || *power == 0 || train.epochs == 0 || !(train.lr > 0.0) {
                    return bad("RBF needs clusters >= 1, kappa > 0, power >= 1, epochs >= 1, lr > 0".into());
                }
                if let EpsilonRule::Fixed { value } = eps {
                    if !(*value > 0.0) {
                        return bad(format!("RBF eps must be positive, got {value}"));
                    }
                }
            }
        }
        let i = &self.interpolant;
        if i.width == 0 || !(i.lr > 0.0) || i.patience == 0 || !(i.fd_step > 0.0 && i.fd_step < 0.5) {
            return bad("interpolant needs width >= 1, lr > 0, patience >= 1, fd_step in (0, 0.5)".into());
        }
        let v = &self.vector_field;
        if v.width == 0 || !(v.lr > 0.0) || !(v.weight_decay >= 0.0) || v.patience == 0 {
            return bad("vector field needs width >= 1, lr > 0, weight_decay >= 0, patience >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if self.euler_steps == 0 {
            return bad("euler_steps must be positive".into());
        }
        match self.protocol {
            Protocol::Pairwise if !self.dataset.is_pairwise() => {
                bad(format!("pairwise protocol needs the arch or sphere dataset, got {}", self.dataset.name()))
            }
            Protocol::LeaveOneOut { left_out, .. } => {
                if self.dataset.is_pairwise() {
                    return bad("leave-one-out needs a multi-marginal dataset".into());
                }
                if left_out == 0 {
                    return bad("left_out must be an interior marginal index (>= 1)".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn variant(&self) -> InterpolantVariant {
        match self.protocol {
            Protocol::Pairwise => InterpolantVariant::Pairwise,
            Protocol::LeaveOneOut { .. } => InterpolantVariant::Multi,
        }
    }

    /// SHA-256 over the canonical TOML rendering, first 16 hex digits. The output
    /// directory is excluded so moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let text = canon.to_toml().expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    /// `<output_dir>/<hash>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.hash())
    }
}

pub const PRESETS: &[&str] = &[
    "arch-ot-cfm",
    "arch-ot-mfm",
    "arch-i-cfm",
    "arch-i-mfm",
    "sphere-ot-cfm",
    "sphere-ot-mfm",
    "line-loo-ot-cfm",
    "line-loo-ot-mfm",
    "arch-loo-ot-mfm",
    "eb-loo-ot-mfm",
    "eb-loo-ot-cfm",
];

fn base(dataset: DatasetSpec, metric: MetricSpec, coupling: Coupling, protocol: Protocol) -> ExperimentConfig {
    let learn = !matches!(metric, MetricSpec::Identity);
    ExperimentConfig {
        version: CONFIG_VERSION,
        seed: 0,
        output_dir: PathBuf::from("runs"),
        dataset,
        metric,
        coupling,
        interpolant: InterpolantSpec { learn, ..InterpolantSpec::default() },
        vector_field: VectorFieldSpec::default(),
        batch_size: 256,
        train_fraction: 0.9,
        whiten: false,
        euler_steps: DEFAULT_EULER_STEPS,
        protocol,
    }
}

fn land() -> MetricSpec {
    MetricSpec::Land { sigma: 0.125, eps: 1e-3 }
}

/// Shipped configurations with the published hyperparameters.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let loo = Protocol::LeaveOneOut { left_out: 1, origin: RolloutOrigin::Preceding };
    let eb = || DatasetSpec::Csv { path: PathBuf::from("eb_5d.csv"), schema: CsvSchema::default() };
    let cfg = match name {
        "arch-ot-cfm" => base(DatasetSpec::Arch { n: 5000 }, MetricSpec::Identity, Coupling::Ot, Protocol::Pairwise),
        "arch-ot-mfm" => base(DatasetSpec::Arch { n: 5000 }, land(), Coupling::Ot, Protocol::Pairwise),
        "arch-i-cfm" => base(DatasetSpec::Arch { n: 5000 }, MetricSpec::Identity, Coupling::Independent, Protocol::Pairwise),
        "arch-i-mfm" => base(DatasetSpec::Arch { n: 5000 }, land(), Coupling::Independent, Protocol::Pairwise),
        "sphere-ot-cfm" => base(DatasetSpec::Sphere { n: 5000 }, MetricSpec::Identity, Coupling::Ot, Protocol::Pairwise),
        "sphere-ot-mfm" => base(DatasetSpec::Sphere { n: 5000 }, land(), Coupling::Ot, Protocol::Pairwise),
        "line-loo-ot-cfm" => base(DatasetSpec::GaussianLine { n: 1000 }, MetricSpec::Identity, Coupling::Ot, loo),
        "line-loo-ot-mfm" => base(DatasetSpec::GaussianLine { n: 1000 }, land(), Coupling::Ot, loo),
        "arch-loo-ot-mfm" => base(DatasetSpec::ArchMarginals { n: 2000 }, land(), Coupling::Ot, loo),
        "eb-loo-ot-mfm" => ExperimentConfig { whiten: true, ..base(eb(), land(), Coupling::Ot, loo) },
        "eb-loo-ot-cfm" => ExperimentConfig { whiten: true, ..base(eb(), MetricSpec::Identity, Coupling::Ot, loo) },
        other => return Err(Error::Config(format!("unknown preset {other:?}; available: {}", PRESETS.join(", ")))),
    };
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(cfg, back, "{name}");
            assert_eq!(cfg.hash(), back.hash());
        }
    }

    #[test]
    fn published_values() {
        let cfg = preset("arch-ot-mfm").unwrap();
        assert_eq!(cfg.metric, MetricSpec::Land { sigma: 0.125, eps: 0.001 });
        assert_eq!((cfg.interpolant.width, cfg.interpolant.depth, cfg.interpolant.lr), (64, 3, 1e-4));
        assert_eq!((cfg.interpolant.epochs, cfg.interpolant.patience), (1000, 3));
        let v = &cfg.vector_field;
        assert_eq!((v.width, v.depth, v.lr, v.weight_decay, v.epochs, v.patience), (64, 3, 1e-3, 1e-5, 1000, 3));
        assert_eq!((cfg.train_fraction, cfg.euler_steps, cfg.batch_size), (0.9, 100, 256));
        assert!(!preset("arch-ot-cfm").unwrap().interpolant.learn);
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = preset("arch-ot-cfm").unwrap();
        let b = ExperimentConfig { output_dir: "elsewhere".into(), ..a.clone() };
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn rejects_bad_values() {
        let good = preset("arch-ot-mfm").unwrap();
        for bad in [
            ExperimentConfig { version: 9, ..good.clone() },
            ExperimentConfig { metric: MetricSpec::Land { sigma: 0.0, eps: 1e-3 }, ..good.clone() },
            ExperimentConfig { train_fraction: 1.0, ..good.clone() },
            ExperimentConfig { batch_size: 0, ..good.clone() },
            ExperimentConfig { protocol: Protocol::LeaveOneOut { left_out: 1, origin: RolloutOrigin::Preceding }, ..good.clone() },
            ExperimentConfig { dataset: DatasetSpec::GaussianLine { n: 100 }, ..good.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
        assert!(ExperimentConfig::from_toml("version = 1\nbogus = 3").is_err());
    }
}
