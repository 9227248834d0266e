use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metric_flow::harness::{preset, DatasetSpec, ExperimentConfig, MetricSpec, RunManifest};

fn mfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfm")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// A preset shrunk to run in seconds.
fn tiny(name: &str, dataset: DatasetSpec, out: &Path) -> PathBuf {
    let mut cfg: ExperimentConfig = preset(name).unwrap();
    cfg.dataset = dataset;
    cfg.output_dir = out.to_path_buf();
    cfg.batch_size = 32;
    cfg.interpolant.width = 8;
    cfg.interpolant.depth = 1;
    cfg.interpolant.epochs = 2;
    cfg.vector_field.width = 8;
    cfg.vector_field.depth = 1;
    cfg.vector_field.epochs = 2;
    cfg.euler_steps = 10;
    let path = out.join(format!("{name}.toml"));
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn stdout_last_line(out: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8_lossy(&out.stdout).lines().last().expect("prints the run directory"))
}

#[test]
fn generate_writes_hashed_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("arch");
    let o = mfm(&["generate", "--dataset", "arch", "--n", "64", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::load(&out.join("manifest.json")).unwrap();
    let names: Vec<_> = m.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(names, ["source.csv", "target.csv", "truth.csv"]);
    let source = std::fs::read_to_string(out.join("source.csv")).unwrap();
    assert_eq!(source.lines().count(), 65);

    let again = dir.path().join("again");
    mfm(&["generate", "--dataset", "arch", "--n", "64", "--seed", "3", "--out", again.to_str().unwrap()]);
    assert_eq!(source, std::fs::read_to_string(again.join("source.csv")).unwrap());
}

#[test]
fn train_then_eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("arch-ot-mfm", DatasetSpec::Arch { n: 160 }, dir.path());
    let cfg = cfg.to_str().unwrap();

    let o = mfm(&["train", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = stdout_last_line(&o);
    for f in ["config.toml", "metric.ckpt", "interpolant.ckpt", "vector_field.ckpt", "interpolant_trace.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let o = mfm(&["eval", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read_to_string(run.join("results.csv")).unwrap();
    assert!(first.starts_with("metric,value,sample_size,seed\nemd_t0.5,"), "{first}");

    // A second identical pipeline in a fresh directory gives the same bytes.
    let other = tempfile::tempdir().unwrap();
    let o = mfm(&["train", "--config", cfg, "--out", other.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let o = mfm(&["eval", "--config", cfg, "--out", other.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let second = std::fs::read_to_string(stdout_last_line(&o).join("results.csv")).unwrap();
    assert_eq!(first, second);

    let m = RunManifest::load(&run.join("manifest.json")).unwrap();
    assert!(m.files.iter().any(|f| f.path == "vector_field.ckpt"));
    assert_eq!(m.metrics[0].metric, "emd_t0.5");
}

#[test]
fn stages_run_separately() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("arch-ot-mfm", DatasetSpec::Arch { n: 120 }, dir.path());
    let cfg = cfg.to_str().unwrap();
    // Stage 2 needs a learned interpolant first.
    assert_eq!(code(&mfm(&["train-vf", "--config", cfg])), 1);
    assert_eq!(code(&mfm(&["train-metric", "--config", cfg])), 0);
    assert_eq!(code(&mfm(&["train-interpolant", "--config", cfg])), 0);
    let o = mfm(&["train-vf", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout_last_line(&o).join("vector_field.ckpt").exists());
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mfm(&["no-such-command"])), 1);
    assert_eq!(code(&mfm(&["train", "--preset", "no-such-preset"])), 1);
    assert_eq!(code(&mfm(&["train"])), 1);

    let mut cfg = preset("arch-ot-cfm").unwrap();
    cfg.train_fraction = 1.5;
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, cfg.to_toml().unwrap()).unwrap();
    let o = mfm(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train_fraction"));

    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "version = 1\nbogus = 3\n").unwrap();
    assert_eq!(code(&mfm(&["train", "--config", unknown.to_str().unwrap()])), 1);
}

#[test]
fn leave_one_out_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny("line-loo-ot-cfm", DatasetSpec::GaussianLine { n: 90 }, dir.path());
    let o = mfm(&["loo", "--config", cfg.to_str().unwrap(), "--left-out", "1", "--seeds", "0,1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let loo = stdout_last_line(&o);
    let rows = std::fs::read_to_string(loo.join("loo_results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    let summary = std::fs::read_to_string(loo.join("loo_summary.csv")).unwrap();
    for key in ["per_timestep,1,", "per_timestep_average,", "pooled,"] {
        assert!(summary.contains(key), "{summary}");
    }
}

#[test]
fn oracle_writes_paths() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: ExperimentConfig = preset("arch-ot-mfm").unwrap();
    cfg.dataset = DatasetSpec::Arch { n: 100 };
    cfg.output_dir = dir.path().to_path_buf();
    assert!(matches!(cfg.metric, MetricSpec::Land { .. }));
    let path = dir.path().join("o.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let o = mfm(&["oracle", "--config", path.to_str().unwrap(), "--pairs", "2", "--segments", "8", "--restarts", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("pair")).count(), 2);
    let run = cfg.run_dir();
    assert!(run.join("oracle/summary.csv").exists());
    assert_eq!(std::fs::read_to_string(run.join("oracle/paths.csv")).unwrap().lines().count(), 1 + 2 * 9);
}
