use std::path::Path;
use std::process::{Command, Output};

use sparkle_cli::output::read_metrics;

const SHORT_RUN: &str = "[hyperparams]\niterations = 200\n[run]\nreplicates = 3\nmetrics_stride = 20\n";

fn sparkle(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparkle"))
        .current_dir(dir)
        .env_remove("SPARKLE_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn run_writes_one_csv_per_replicate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT_RUN);
    let out = sparkle(dir.path(), &["run", "--config", &cfg, "--out", "res"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for r in 0..3 {
        let rows = read_metrics(&dir.path().join(format!("res/metrics_r{r}.csv"))).unwrap();
        let ks: Vec<usize> = rows.iter().map(|row| row.k).collect();
        assert_eq!(ks, (0..=200).step_by(20).collect::<Vec<_>>());
        assert!(rows.iter().all(|row| row.wall_ns == 0 && row.grad_phi_sq.is_finite()));
    }
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT_RUN);
    for threads in ["1", "4"] {
        let out = sparkle(dir.path(), &["run", "--config", &cfg, "--seed", "42", "--threads", threads, "--out", threads]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let env = Command::new(env!("CARGO_BIN_EXE_sparkle"))
        .current_dir(dir.path())
        .env("SPARKLE_THREADS", "2")
        .args(["run", "--config", &cfg, "--seed", "42", "--out", "env"])
        .output()
        .unwrap();
    assert!(env.status.success(), "{}", stderr(&env));
    for r in 0..3 {
        let name = format!("metrics_r{r}.csv");
        let one = std::fs::read(dir.path().join("1").join(&name)).unwrap();
        assert_eq!(one, std::fs::read(dir.path().join("4").join(&name)).unwrap(), "{name}");
        assert_eq!(one, std::fs::read(dir.path().join("env").join(&name)).unwrap(), "{name}");
    }
    let other = sparkle(dir.path(), &["run", "--config", &cfg, "--seed", "43", "--out", "43"]);
    assert!(other.status.success());
    assert_ne!(
        std::fs::read(dir.path().join("1/metrics_r0.csv")).unwrap(),
        std::fs::read(dir.path().join("43/metrics_r0.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[strategy]\nlower = \"gossip\"\n");
    let out = sparkle(dir.path(), &["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("strategy.lower"), "{}", stderr(&out));
    assert!(!dir.path().join("results").exists());

    let cfg = write_config(dir.path(), "[hyperparams]\nthetta = 0.5\n");
    let out = sparkle(dir.path(), &["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("thetta"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), "[hyperparams]\ntheta = 1.5\nbatch_size = 0\n");
    let out = sparkle(dir.path(), &["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("hyperparams.theta") && err.contains("hyperparams.batch_size"), "{err}");
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[hyperparams]\nalpha = 50.0\nbeta = 5.0\ngamma = 5.0\niterations = 500\n");
    let out = sparkle(dir.path(), &["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn rho_sweep_reports_the_unreachable_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[hyperparams]\niterations = 100\n");
    let out = sparkle(
        dir.path(),
        &["sweep", "--config", &cfg, "--axis", "rho", "--values", "0.647,0.828,0.924,0.990", "--out", "sweep"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let mut summary = csv::Reader::from_path(dir.path().join("sweep/summary.csv")).unwrap();
    let records: Vec<csv::StringRecord> = summary.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 4);
    assert!(records[0][3].starts_with("config_error"), "{:?}", records[0]);
    for rec in &records[1..] {
        assert_eq!(&rec[3], "ok", "{rec:?}");
        assert_eq!(&rec[4], "100");
        assert!(dir.path().join("sweep").join(&rec[8]).exists());
    }
}

#[test]
fn strategy_sweep_runs_every_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[hyperparams]\niterations = 100\n");
    let out = sparkle(
        dir.path(),
        &["sweep", "--config", &cfg, "--axis", "strategy", "--values", "ed,extra,atc-gt,dgd", "--out", "s"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).matches(": ok").count(), 4);
    assert!(dir.path().join("s/strategy-atc-gt_r0.csv").exists());

    let out = sparkle(dir.path(), &["sweep", "--config", &cfg, "--axis", "colour", "--values", "red"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_on_defaults_and_skips_for_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let out = sparkle(dir.path(), &["verify"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert_eq!(stdout(&out).matches("PASS").count(), 4, "{}", stdout(&out));

    let cfg = write_config(dir.path(), "[strategy]\nupper = \"dgd\"\nlower = \"dgd\"\n");
    let out = sparkle(dir.path(), &["verify", "--config", &cfg]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("SKIP engine_equivalence"), "{}", stdout(&out));
}

#[test]
fn verify_names_a_bad_custom_matrix() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("w.txt"), "3\n0.5 0.5 0.0\n0.5 0.5 0.0\n0.0 0.2 0.7\n").unwrap();
    let cfg = write_config(dir.path(), "[problem]\nfamily = \"synthetic\"\nn = 3\n[topology]\nkind = \"custom\"\npath = \"w.txt\"\n");
    let out = sparkle(dir.path(), &["verify", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("FAIL matrix_validation"), "{text}");
    assert!(stderr(&out).contains("matrix_validation"));

    let out = sparkle(dir.path(), &["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn custom_weights_are_read_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("graphs")).unwrap();
    std::fs::write(
        dir.path().join("graphs/path3.txt"),
        "# three agents on a path\n3\n0.5 0.5 0\n0.5 0 0.5\n0 0.5 0.5\n",
    )
    .unwrap();
    let cfg = write_config(
        dir.path(),
        "[problem]\nfamily = \"synthetic\"\nn = 3\n[topology]\nkind = \"custom\"\npath = \"graphs/path3.txt\"\n[hyperparams]\niterations = 50\n",
    );
    let out = sparkle(dir.path(), &["run", "--config", &cfg, "--out", "c"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("c/metrics_r0.csv").exists());
}
