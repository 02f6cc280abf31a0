use std::fs;
use std::path::Path;
use std::process::Command;

use flash_sim::accounting::CommMode;
use flash_sim::{Algorithm, FederationConfig};
use flash_sim_cli::{parse_config, parse_config_file, CliError, DatasetKind, ROUNDS_HEADER};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_flash-sim"));
    c.env("RUST_LOG", "warn");
    c
}

fn synth_run(out: &Path, extra: &[&str]) -> std::process::Output {
    let mut args = vec![
        "--dataset", "synth", "--synth-classes", "4", "--synth-per-class", "40", "--synth-dim", "8",
        "--clients", "8", "--clients-per-round", "4", "--warmup-clients", "2", "--warmup-epochs", "1",
        "--batch-size", "16",
    ];
    args.extend_from_slice(extra);
    bin().args(&args).arg("--out").arg(out).output().unwrap()
}

#[test]
fn no_arguments_gives_table_defaults() {
    let rc = parse_config(["flash-sim"]).unwrap();
    let f = &rc.federation;
    assert_eq!(f, &FederationConfig::default());
    assert_eq!(f.algorithm, Algorithm::Spdst);
    assert_eq!((f.density, f.rounds, f.clients, f.clients_per_round), (0.1, 400, 100, 10));
    assert_eq!((f.local_epochs, f.batch_size, f.alpha, f.prune_rate), (1, 32, 1000.0, 0.25));
    assert_eq!((f.eta_init, f.eta_end), (0.1, 0.001));
    assert_eq!(rc.dataset, DatasetKind::Mnist);
}

#[test]
fn flags_override() {
    let rc = parse_config(["flash-sim", "--algo", "jmwst", "--rint", "5", "--comm-mode", "value-only"]).unwrap();
    assert_eq!(rc.federation.algorithm, Algorithm::Jmwst);
    assert_eq!(rc.federation.rint, 5);
    assert_eq!(rc.federation.comm.mode, CommMode::ValueOnly);
}

#[test]
fn out_of_range_density_names_the_key() {
    match parse_config(["flash-sim", "--density", "1.5"]) {
        Err(CliError::Usage(m)) => assert!(m.contains("density"), "{m}"),
        other => panic!("expected a usage error, got {other:?}"),
    }
    let out = bin().args(["--density", "1.5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("density"));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, "# sweep\nalgo = nst\ndensity=0.05\n\nrounds = 7 # short\n").unwrap();
    let p = path.to_str().unwrap();
    let rc = parse_config(["flash-sim", "--config", p, "--density", "0.2"]).unwrap();
    assert_eq!(rc.federation.algorithm, Algorithm::Nst);
    assert_eq!(rc.federation.density, 0.2);
    assert_eq!(rc.federation.rounds, 7);

    assert!(matches!(parse_config_file("bogus = 1"), Err(CliError::Usage(_))));
    assert!(matches!(parse_config_file("no equals sign"), Err(CliError::Usage(_))));
}

#[test]
fn short_run_writes_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_run(dir.path(), &["--rounds", "3", "--algo", "jmwst"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ROUNDS_HEADER);
    assert_eq!(lines.len(), 4);
    let layers = fs::read_to_string(dir.path().join("sm_layers.csv")).unwrap();
    assert_eq!(layers.lines().next(), Some("round,sm_layer0,sm_layer1"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rounds_completed"], 3);
    assert!(manifest["final_test_acc"].as_f64().is_some());
    assert_eq!(manifest["dataset_checksum"].as_str().unwrap().len(), 64);
    assert!(manifest["partition_scheme"].as_str().unwrap().contains("Dirichlet"));
}

#[test]
fn spdst_mask_mismatch_stays_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_run(dir.path(), &["--rounds", "4"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    for row in csv.lines().skip(1) {
        assert_eq!(row.split(',').nth(3), Some("0"), "{row}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(synth_run(d.path(), &["--rounds", "4", "--algo", "hetero-jmwst", "--seed", "9"]).status.success());
    }
    for f in ["rounds.csv", "sm_layers.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_data_fails_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--rounds", "1", "--data-dir"])
        .arg(dir.path().join("absent"))
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("--density-set"));
}
