//! End-to-end checks of the `parn` binary: every subcommand writes the
//! files it promises, exit codes distinguish failed checks from usage
//! errors, and repeated runs produce identical artifacts.

use std::path::Path;
use std::process::{Command, Output};

use parn::harness::parse_results;
use parn::scenario::Scenario;
use parn::trace::file_digest;

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_parn"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary should spawn")
}

fn assert_csv_rows(path: &Path, at_least: usize) {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("missing {}: {e}", path.display()));
    let rows = text.lines().count().saturating_sub(1);
    assert!(rows >= at_least, "{} has {rows} rows, wanted >= {at_least}", path.display());
}

#[test]
fn pipeline_subcommands_write_their_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_str = out.to_str().unwrap();

    let sim = run(&["simulate", "--epochs", "20", "--out", out_str], &[]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    assert_csv_rows(&out.join("measurements.csv"), 20);
    assert_csv_rows(&out.join("truth.csv"), 20);

    let sync = run(&["sync", "--epochs", "60", "--out", out_str], &[]);
    assert!(sync.status.success(), "{}", String::from_utf8_lossy(&sync.stderr));
    assert_csv_rows(&out.join("sync_estimates.csv"), 60);

    let solve = run(
        &["solve", "--trials", "10", "--warmup", "20", "--mode", "both", "--out", out_str],
        &[],
    );
    assert!(solve.status.success(), "{}", String::from_utf8_lossy(&solve.stderr));
    assert_csv_rows(&out.join("solve_estimates.csv"), 20);

    let crlb = run(
        &["crlb", "--trials", "5", "--warmup", "20", "--mode", "mode1", "--out", out_str],
        &[],
    );
    assert!(crlb.status.success(), "{}", String::from_utf8_lossy(&crlb.stderr));
    assert_csv_rows(&out.join("crlb.csv"), 5);
}

#[test]
fn deviation_sweep_is_deterministic_and_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = run(
            &[
                "deviate", "--variable", "velocity", "--values", "0,10", "--trials", "30",
                "--warmup", "10", "--out", out.to_str().unwrap(),
            ],
            &[],
        );
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let da = file_digest(a.join("results.csv")).unwrap();
    let db = file_digest(b.join("results.csv")).unwrap();
    assert_eq!(da, db);

    let rows = parse_results(&a.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.variable == "velocity_deviation" && r.solved > 0));
}

#[test]
fn scenario_files_feed_the_simulator() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.toml");
    let mut scn = Scenario::square_scene();
    scn.devices[0].response_delay_s = 0.002;
    scn.save(&path).unwrap();

    let out = dir.path().join("out");
    let res = run(
        &[
            "simulate", "--epochs", "5", "--scenario", path.to_str().unwrap(), "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_csv_rows(&out.join("measurements.csv"), 5);
}

#[test]
fn preset_runs_report_checks_and_honor_the_output_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let preset = dir.path().join("tiny.toml");
    std::fs::write(
        &preset,
        r#"
name = "tiny"
kind = "sweep"
variable = "measurement_noise"
values = [0.05]
delays_s = [0.005]
trials = 8
warmup_epochs = 8
modes = ["mode1"]
checks = ["rmse_matches_crlb"]
seed = 3
"#,
    )
    .unwrap();

    let env_out = dir.path().join("env_out");
    let ignored = dir.path().join("ignored");
    let res = run(
        &[
            "montecarlo", "--preset", preset.to_str().unwrap(), "--out",
            ignored.to_str().unwrap(),
        ],
        &[("PARN_OUT_DIR", env_out.to_str().unwrap())],
    );
    let stdout = String::from_utf8_lossy(&res.stdout);
    // 8 trials sit well off the bound, so the check itself may fail; the
    // command still runs and the artifacts land in the env-selected dir.
    assert!(res.status.code() == Some(0) || res.status.code() == Some(2), "{stdout}");
    assert!(stdout.contains("rmse_matches_crlb"), "{stdout}");
    assert!(env_out.join("results.csv").exists());
    assert!(env_out.join("summary.json").exists());
    assert!(!ignored.exists());
}

#[test]
fn impossible_runtime_limit_exits_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let preset = dir.path().join("slow.toml");
    std::fs::write(
        &preset,
        r#"
name = "slow"
kind = "sweep"
variable = "measurement_noise"
values = [0.05]
trials = 8
warmup_epochs = 8
modes = ["mode1"]
checks = []
runtime_limit_s = 0.0
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let res = run(
        &["montecarlo", "--preset", preset.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stdout));
    assert!(String::from_utf8_lossy(&res.stdout).contains("[FAIL] runtime"));
}

#[test]
fn bad_inputs_exit_with_status_one() {
    let missing = run(&["montecarlo", "--preset", "no_such_preset"], &[]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(!missing.stderr.is_empty());

    let bad_variable = run(&["deviate", "--variable", "temperature"], &[]);
    assert_eq!(bad_variable.status.code(), Some(1));
}

#[test]
fn presets_subcommand_lists_every_bundled_preset() {
    let res = run(&["presets"], &[]);
    assert!(res.status.success());
    let stdout = String::from_utf8_lossy(&res.stdout);
    for name in ["fig_kalman", "fig4_noise_sweep", "fig5_carn", "fig6_7_velocity", "fig8_9_drift"]
    {
        assert!(stdout.contains(name), "missing {name} in {stdout}");
    }
}
