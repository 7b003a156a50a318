use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use energycomp::config::Method;
use energycomp::harness::{read_report_json, ExperimentRecord, MethodDetails};

fn energycomp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_energycomp"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("ENERGYCOMP_SEED")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn failure(out: &Output) -> String {
    assert!(!out.status.success(), "unexpected success: {}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", "data", "--train", "300", "--test", "60", "--side", "8", "--classes", "3"];
    args.extend_from_slice(extra);
    ok(&energycomp(&args, dir));
}

fn write_config(dir: &Path, body: &str) {
    fs::write(dir.join("exp.json"), body).unwrap();
}

const SMALL_CONFIG: &str = r#"{
    "dataset": {"path": "data", "format": "idx"},
    "class_count": 3,
    "train": {"max_epochs": 3, "batch_size": 32},
    "sampler": {"kind": "constant", "cpu_w": 30, "gpu_w": 0, "ram_w": 6},
    "cadence_s": 0.02,
    "seed": 4,
    "out": "runs"
}"#;

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    failure(&energycomp(&[], dir.path()));
    assert!(failure(&energycomp(&["train"], dir.path())).contains("--config or --data"));
    assert!(failure(&energycomp(&["report", "--out", "."], dir.path())).contains("no *.record.json"));
    let err = failure(&energycomp(&["compress", "--method", "svd", "--data", "."], dir.path()));
    assert!(err.contains("svd"), "{err}");
}

#[test]
fn compressing_without_a_baseline_fails_early() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let err = failure(&energycomp(&["compress", "--method", "prune", "--data", "data", "--out", "runs"], dir.path()));
    assert!(err.contains("baseline model"), "{err}");
}

#[test]
fn config_errors_name_the_file_and_key() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), r#"{"dataset": {"path": "data", "format": "idx"}, "treshold": 0.02}"#);
    let err = failure(&energycomp(&["train", "--config", "exp.json"], dir.path()));
    assert!(err.contains("exp.json") && err.contains("treshold"), "{err}");

    write_config(dir.path(), r#"{"dataset": {"path": "data", "format": "idx"}, "pue": 0.5}"#);
    assert!(failure(&energycomp(&["train", "--config", "exp.json"], dir.path())).contains("pue"));

    write_config(dir.path(), r#"{"dataset": {"path": "data", "format": "idx"}, "sampler": {"kind": "trace", "path": "none.txt"}}"#);
    assert!(failure(&energycomp(&["train", "--config", "exp.json"], dir.path())).contains("none.txt"));
}

#[test]
fn small_pipeline_through_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    write_config(dir.path(), SMALL_CONFIG);
    // Run from elsewhere so the dataset path has to be taken relative to the config.
    let cfg = dir.path().join("exp.json");
    let cfg = cfg.to_str().unwrap();
    let other = tempfile::tempdir().unwrap();
    ok(&energycomp(&["train", "--config", cfg], other.path()));
    for method in ["stego", "prune", "lowrank"] {
        ok(&energycomp(&["compress", "--method", method, "--config", cfg, "--out", "runs"], dir.path()));
    }
    let runs = dir.path().join("runs");
    let listed = ok(&energycomp(&["report", "--out", "runs"], dir.path()));
    assert!(listed.contains("report.csv") && listed.contains("report.json"));

    for name in ["baseline.nncm", "stego.nncm", "stego.nncq", "prune.nncm", "lowrank.nncm", "lowrank.plan.txt"] {
        assert!(runs.join(name).is_file(), "{name} missing");
    }
    let report = read_report_json(&runs.join("report.json")).unwrap();
    let methods: Vec<Method> = report.records.iter().map(|r| r.method).collect();
    assert_eq!(methods, Method::ALL);
    for r in &report.records {
        assert_eq!(r.seed, 4);
        assert!(r.epochs >= 1 && r.epochs <= 3);
        assert_eq!(r.kwh_dc, r.pue * r.kwh_it);
        // 36 W constant draw over the metered training time.
        let implied_seconds = r.kwh_it * 3.6e6 / 36.0;
        assert!((implied_seconds - r.train_seconds).abs() < 0.25, "{} vs {}", implied_seconds, r.train_seconds);
        assert_eq!(r.kwh_per_epoch.len(), r.epochs);
    }
    let stego = ExperimentRecord::load(&runs.join("stego.record.json")).unwrap();
    let MethodDetails::Stego { capacity_bits, bit_curve, .. } = stego.details else { panic!("stego details") };
    assert_eq!(stego.compression_rate, f64::from(capacity_bits) / 32.0);
    assert_eq!(bit_curve.len(), 33);
}

#[test]
fn seed_precedence_is_flag_then_config_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--format", "csv"]);
    let base = ["train", "--data", "data", "--out", "runs"];
    let run = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_energycomp"));
        cmd.args(base).args(extra).current_dir(dir.path()).env("RUST_LOG", "warn");
        // Keep the run short; the seed is all that matters here.
        fs::write(
            dir.path().join("exp.json"),
            r#"{"dataset": {"path": "data", "format": "csv"}, "class_count": 3, "train": {"max_epochs": 1}, "sampler": {"kind": "constant", "cpu_w": 1, "gpu_w": 0, "ram_w": 0}}"#,
        )
        .unwrap();
        cmd.args(["--config", "exp.json"]);
        match env {
            Some(v) => cmd.env("ENERGYCOMP_SEED", v),
            None => cmd.env_remove("ENERGYCOMP_SEED"),
        };
        ok(&cmd.output().unwrap());
        ExperimentRecord::load(&dir.path().join("runs/baseline.record.json")).unwrap().seed
    };
    assert_eq!(run(&[], None), 0);
    assert_eq!(run(&[], Some("17")), 17);
    assert_eq!(run(&["--seed", "5"], Some("17")), 5);
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_energycomp"));
    let out = cmd.args(base).args(["--config", "exp.json"]).current_dir(dir.path()).env("ENERGYCOMP_SEED", "x").output().unwrap();
    assert!(failure(&out).contains("ENERGYCOMP_SEED"));
}

#[test]
fn cnn_trains_on_idx_images() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    write_config(dir.path(), &SMALL_CONFIG.replace("\"class_count\"", "\"architecture\": \"cnn\", \"class_count\"").replace("\"max_epochs\": 3", "\"max_epochs\": 1"));
    let out = ok(&energycomp(&["train", "--config", "exp.json"], dir.path()));
    assert!(out.starts_with("cnn baseline"), "{out}");
}

#[test]
fn trace_sampler_replays_a_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let trace: String = (0..2000).map(|i| format!("{} 50 0 10\n", f64::from(i) * 0.02)).collect();
    fs::write(dir.path().join("power.txt"), format!("# t cpu gpu ram\n{trace}")).unwrap();
    write_config(
        dir.path(),
        &SMALL_CONFIG.replace(r#""kind": "constant", "cpu_w": 30, "gpu_w": 0, "ram_w": 6"#, r#""kind": "trace", "path": "power.txt""#),
    );
    ok(&energycomp(&["train", "--config", "exp.json"], dir.path()));
    let r = ExperimentRecord::load(&dir.path().join("runs/baseline.record.json")).unwrap();
    assert!(r.kwh_it > 0.0);
    let implied_seconds = r.kwh_it * 3.6e6 / 60.0;
    assert!((implied_seconds - r.train_seconds).abs() < 0.25, "{implied_seconds} vs {}", r.train_seconds);
}
