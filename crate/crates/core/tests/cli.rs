//! End-to-end coverage of the `vortex` command line: exit codes, the
//! output-directory environment override, and the full
//! sweep/linearize/diagnose/report pipeline on a small configuration.
//!
//! Tests in this file share a mutex because `VORTEX_OUTPUT_DIR` is process
//! state read whenever a configuration loads.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use vortex_lab::evolution::Envelope;
use vortex_lab::harness::{cli_main, ExperimentConfig, ReferenceMode};
use vortex_lab::initial_data::{ForcingFamily, InitialDataSpec, PerturbationFamily};
use vortex_lab::mollifier::MollifierProfile;

static ENV_LOCK: Mutex<()> = Mutex::new(());

fn small_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        grid_sizes: vec![32],
        nu_ladder: vec![0.2, 0.1],
        ell_ladder: vec![2.0],
        p: 2.0,
        p_tilde: 2.0,
        initial_family: PerturbationFamily {
            base: InitialDataSpec::MultiMode {
                seed: 17,
                slope: 2.0,
                k_min: 1,
                k_max: 4,
                amplitude: 0.7,
            },
            mode: None,
        },
        forcing_family: None,
        t_end: 0.25,
        dt_max: 5e-3,
        cfl: 0.45,
        snapshot_stride: 5,
        mollifier_profile: MollifierProfile::Gaussian,
        reference: ReferenceMode::Euler,
        output_dir: out.to_path_buf(),
        parallelism: 1,
        dealias_fraction: 2.0 / 3.0,
        store_velocity: false,
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str]) -> i32 {
    cli_main(args.iter().map(|s| s.to_string()).collect())
}

#[test]
fn help_exits_zero_and_bad_usage_exits_two() {
    let _guard = ENV_LOCK.lock().unwrap();
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["sweep"]), 2); // missing config path
}

#[test]
fn malformed_configs_exit_two() {
    let _guard = ENV_LOCK.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();

    let missing = dir.path().join("nope.json");
    assert_eq!(run(&["sweep", missing.to_str().unwrap()]), 2);

    let garbled = dir.path().join("garbled.json");
    std::fs::write(&garbled, "{ not json").unwrap();
    assert_eq!(run(&["sweep", garbled.to_str().unwrap()]), 2);

    let unknown_key = dir.path().join("unknown.json");
    let mut text = serde_json::to_value(small_config(dir.path())).unwrap();
    text.as_object_mut().unwrap().insert("mystery_knob".into(), 7.into());
    std::fs::write(&unknown_key, serde_json::to_string(&text).unwrap()).unwrap();
    assert_eq!(run(&["sweep", unknown_key.to_str().unwrap()]), 2);

    let bad_ladder = dir.path().join("ladder.json");
    let mut cfg = small_config(dir.path());
    cfg.nu_ladder = vec![0.1, 0.2];
    std::fs::write(&bad_ladder, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(run(&["sweep", bad_ladder.to_str().unwrap()]), 2);
}

/// A forcing envelope that grows exponentially drives the nodal maximum
/// past the blow-up guard almost immediately.
#[test]
fn solver_abort_exits_three_and_persists_partial_run() {
    let _guard = ENV_LOCK.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.grid_sizes = vec![16];
    cfg.nu_ladder = vec![];
    cfg.ell_ladder = vec![];
    cfg.t_end = 1.0;
    cfg.initial_family = PerturbationFamily {
        base: InitialDataSpec::SingleMode { k: (1, 0), amplitude: 1e-6, phase: 0.0 },
        mode: None,
    };
    cfg.forcing_family = Some(ForcingFamily {
        shape: InitialDataSpec::SingleMode { k: (1, 0), amplitude: 1.0, phase: 0.0 },
        envelope: Envelope::ExpDecay { scale: 1.0, rate: -30.0 },
        mode: None,
    });
    let cfg_path = write_config(dir.path(), &cfg);
    assert_eq!(run(&["simulate", cfg_path.to_str().unwrap()]), 3);

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("runs/single/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["status"], "aborted");
    assert!(manifest["error"].as_str().unwrap().contains("blow-up"));
}

#[test]
fn env_var_overrides_output_dir() {
    let _guard = ENV_LOCK.lock().unwrap();
    let ignored = tempfile::tempdir().unwrap();
    let actual = tempfile::tempdir().unwrap();
    let cfg = small_config(ignored.path());
    let cfg_path = write_config(ignored.path(), &cfg);
    std::env::set_var("VORTEX_OUTPUT_DIR", actual.path());
    let code = run(&["sweep", cfg_path.to_str().unwrap()]);
    std::env::remove_var("VORTEX_OUTPUT_DIR");
    assert_eq!(code, 0);
    assert!(actual.path().join("convergence.csv").exists());
    assert!(!ignored.path().join("convergence.csv").exists());
}

#[test]
fn pipeline_linearize_diagnose_report() {
    let _guard = ENV_LOCK.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg_path = write_config(dir.path(), &cfg);

    // linearize builds the missing nonlinear runs itself, then the linear
    // problems, then both reports.
    assert_eq!(run(&["linearize", cfg_path.to_str().unwrap(), "--ell", "2.0"]), 0);
    assert!(dir.path().join("runs/nl_ref/manifest.json").exists());
    assert!(dir.path().join("runs/lin_2e0_ref/manifest.json").exists());
    let lemma = std::fs::read_to_string(dir.path().join("lemma1.csv")).unwrap();
    assert!(lemma.starts_with("ell,role,nu,lhs,rhs,gap"));
    assert_eq!(lemma.lines().count(), 5); // header + 2 rungs + reference + max
    let triangle = std::fs::read_to_string(dir.path().join("triangle.csv")).unwrap();
    assert_eq!(triangle.lines().count(), 3); // header + 2 rungs

    // The sweep reuses the persisted runs and writes the convergence table.
    assert_eq!(run(&["sweep", cfg_path.to_str().unwrap()]), 0);
    let convergence = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert_eq!(convergence.lines().count(), 3);

    let rung_dir = dir.path().join("runs/nl_00");
    assert_eq!(run(&["diagnose", rung_dir.to_str().unwrap()]), 0);
    let diagnostics = std::fs::read_to_string(rung_dir.join("diagnostics.csv")).unwrap();
    assert!(diagnostics.starts_with("run,time,metric,value"));
    assert!(diagnostics.lines().count() > 1);
    assert!(rung_dir.join("estimates.csv").exists());

    assert_eq!(run(&["report", dir.path().to_str().unwrap()]), 0);
    let svg = std::fs::read_to_string(dir.path().join("distance_vs_nu.svg")).unwrap();
    let points = svg.matches("data-x=").count();
    assert_eq!(points, 2, "one marker per successful rung");
    assert!(dir.path().join("distance_vs_ell.svg").exists());

    // Diagnosing a directory that holds no trajectory is an operational
    // error, not a configuration or solver failure.
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(run(&["diagnose", empty.path().to_str().unwrap()]), 1);
}

#[test]
fn override_flags_reshape_the_run() {
    let _guard = ENV_LOCK.lock().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.nu_ladder = vec![0.2];
    cfg.t_end = 0.1;
    let cfg_path = write_config(dir.path(), &cfg);
    assert_eq!(
        run(&[
            "simulate",
            cfg_path.to_str().unwrap(),
            "--grid",
            "16",
            "--seed",
            "99",
            "--profile",
            "bump",
        ]),
        0
    );
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("runs/single/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config"]["grid"]["n"], 16);
    assert_eq!(manifest["forcing"]["initial_family"]["base"]["seed"], 99);
}
