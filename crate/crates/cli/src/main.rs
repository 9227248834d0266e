use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metric_flow::error::{Error, Result};
use metric_flow::harness::commands;
use metric_flow::harness::{preset, DatasetSpec, ExperimentConfig, PRESETS};
use metric_flow::oracle::{ContainmentSpec, GeodesicSolverConfig};

#[derive(Parser)]
#[command(name = "mfm", version, about = "Train and evaluate flow matching along data-dependent interpolants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named experiment (see `mfm presets`).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => ExperimentConfig::load(path)?,
            (None, Some(name)) => preset(name)?,
            _ => return Err(Error::Config("pass exactly one of --config or --preset".into())),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in experiment presets.
    Presets,
    /// Print a preset as TOML.
    ShowConfig(ConfigArgs),
    /// Write a synthetic dataset as CSV.
    Generate {
        /// arch, sphere, gaussian_line or arch_marginals.
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the data-dependent metric.
    TrainMetric(ConfigArgs),
    /// Fit the interpolant (stage 1); reuses a metric checkpoint if present.
    TrainInterpolant(ConfigArgs),
    /// Fit the vector field (stage 2) against a trained interpolant.
    TrainVf(ConfigArgs),
    /// All stages in order.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Load stages whose checkpoints already exist.
        #[arg(long)]
        resume: bool,
    },
    /// Score a trained vector field and write results.csv.
    Eval(ConfigArgs),
    /// Leave-one-out sweep over held-out marginals and seeds.
    Loo {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        left_out: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Discrete geodesics between training endpoints under the run's metric.
    Oracle {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long, default_value_t = 32)]
        segments: usize,
        #[arg(long, default_value_t = 8)]
        restarts: usize,
        /// Containment check parameters rho,delta,gamma,kappa.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        containment: Option<Vec<f64>>,
    },
}

/// Ignores write errors so a closed pipe (`mfm presets | head`) is not a panic.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn dataset(name: &str, n: usize) -> Result<DatasetSpec> {
    Ok(match name {
        "arch" => DatasetSpec::Arch { n },
        "sphere" => DatasetSpec::Sphere { n },
        "gaussian_line" => DatasetSpec::GaussianLine { n },
        "arch_marginals" => DatasetSpec::ArchMarginals { n },
        _ => return Err(Error::InvalidArgument(format!("unknown dataset {name:?}"))),
    })
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Presets => {
            for p in PRESETS {
                say!("{p}");
            }
        }
        Command::ShowConfig(args) => say!("{}", args.load()?.to_toml()?.trim_end()),
        Command::Generate { dataset: name, n, seed, out } => {
            commands::generate(&dataset(&name, n)?, seed, &out)?;
            say!("{}", out.display());
        }
        Command::TrainMetric(args) => say!("{}", commands::train_metric(&args.load()?)?.dir.display()),
        Command::TrainInterpolant(args) => say!("{}", commands::train_interpolant(&args.load()?)?.dir.display()),
        Command::TrainVf(args) => say!("{}", commands::train_vector_field(&args.load()?)?.dir.display()),
        Command::Train { config, resume } => say!("{}", commands::train(&config.load()?, resume)?.dir.display()),
        Command::Eval(args) => {
            let (run, reports) = commands::evaluate(&args.load()?)?;
            for r in reports {
                say!("{}\t{:.6}", r.metric, r.value);
            }
            say!("{}", run.dir.display());
        }
        Command::Loo { config, left_out, seeds } => {
            let s = commands::leave_one_out(&config.load()?, &left_out, &seeds)?;
            for (k, m) in &s.per_timestep {
                say!("left_out {k}\t{:.6} ± {:.6}", m.mean, m.std);
            }
            say!("per_timestep_average\t{:.6} ± {:.6}", s.per_timestep_average.mean, s.per_timestep_average.std);
            say!("pooled\t{:.6} ± {:.6}", s.pooled.mean, s.pooled.std);
            say!("{}", s.dir.display());
        }
        Command::Oracle { config, pairs, segments, restarts, containment } => {
            let solver = GeodesicSolverConfig { segments, restarts, ..Default::default() };
            let spec = containment.map(|c| ContainmentSpec { rho: c[0], delta: c[1], gamma: c[2], kappa: c[3] });
            if let Some(s) = &spec {
                s.validate()?;
            }
            let rows = commands::oracle(&config.load()?, pairs, &solver, spec)?;
            for r in rows {
                let interp = r.interpolant_energy.map(|e| format!("\tinterpolant {e:.6}")).unwrap_or_default();
                say!("pair {}\tchord {:.6}\tgeodesic {:.6}{interp}", r.pair, r.chord_energy, r.geodesic_energy);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
