use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn opq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opq")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    let out = opq(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--layers",
        "3",
        "--count",
        "4096",
        "--channels",
        "8",
        "--tau",
        "0.02,0.05,0.1",
        "--seed",
        seed,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn allocate(model: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "allocate",
        "--model",
        model.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    opq(&args)
}

#[test]
fn allocate_writes_outputs() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("m");
    synth(&model, "1");
    let run = tmp.path().join("run1");
    let out = allocate(&model, &run, &["--prune", "0.9", "--bits", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "fits.csv",
        "pruning.art",
        "quant.art",
        "pruning.csv",
        "quant.csv",
        "summary.json",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let fits = fs::read_to_string(run.join("fits.csv")).unwrap();
    assert!(fits.starts_with("layer,tau,rmse,sample_points\n"));
    assert_eq!(fits.lines().count(), 4);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert!((summary["p_model"].as_f64().unwrap() - 0.9).abs() < 1e-10);
    assert_eq!(summary["layers"], 3);
}

#[test]
fn invalid_rate_is_rejected_before_work() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    // model path does not even exist: validation must come first
    let out = allocate(&tmp.path().join("missing"), &run, &["--prune", "1.0"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("pruning rate"));
    assert!(!run.exists());
    assert_eq!(code(&opq(&["allocate", "--model", "x", "--bits", "0"])), 1);
    assert_eq!(code(&opq(&["allocate", "--bogus"])), 1);
}

#[test]
fn missing_model_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let out = allocate(&tmp.path().join("nope"), &tmp.path().join("run"), &[]);
    assert_eq!(code(&out), 1);
}

#[test]
fn degenerate_layer_is_a_computation_error() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("m");
    synth(&model, "2");
    fs::write(model.join("layer1.bin"), vec![0u8; 4096 * 4]).unwrap();
    let run = tmp.path().join("run");
    let out = allocate(&model, &run, &[]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer1"));
    assert!(!run.join("pruning.art").exists());
}

#[test]
fn full_pipeline_is_deterministic_and_verifies() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("m");
    synth(&model, "3");
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let run = tmp.path().join(name);
        assert_eq!(code(&allocate(&model, &run, &["--prune", "0.7", "--bits", "4"])), 0);
        let m = model.to_str().unwrap();
        let r = run.to_str().unwrap();
        let out = opq(&["compress", "--model", m, "--out", r]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("ideal rate"));
        let out = opq(&["verify", "--model", m, "--out", r]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("ok  dense reconstruction"));
        files.push(run);
    }
    for f in [
        "fits.csv",
        "pruning.art",
        "quant.art",
        "pruning.csv",
        "quant.csv",
        "summary.json",
        "model.opq",
        "rate.json",
    ] {
        assert_eq!(
            fs::read(files[0].join(f)).unwrap(),
            fs::read(files[1].join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn verify_fails_on_flipped_byte() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("m");
    synth(&model, "4");
    let run = tmp.path().join("run");
    let (m, r) = (model.to_str().unwrap(), run.to_str().unwrap());
    assert_eq!(code(&allocate(&model, &run, &[])), 0);
    assert_eq!(code(&opq(&["compress", "--model", m, "--out", r])), 0);
    let path = run.join("model.opq");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&path, &bytes).unwrap();
    let out = opq(&["verify", "--model", m, "--out", r]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("artifact integrity"));
}

#[test]
fn stale_allocation_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "5");
    synth(&b, "6");
    let run = tmp.path().join("run");
    assert_eq!(code(&allocate(&a, &run, &[])), 0);
    let out = opq(&[
        "compress",
        "--model",
        b.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
    assert!(!run.join("model.opq").exists());
}

#[test]
fn config_file_with_flag_override() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("m");
    synth(&model, "7");
    let run = tmp.path().join("run");
    let config = tmp.path().join("cfg.json");
    let text = serde_json::json!({
        "model_path": model, "output_dir": run, "p_target": 0.4, "b_target": 5.0, "exclude": ["layer2"]
    });
    fs::write(&config, text.to_string()).unwrap();
    let out = opq(&["allocate", "--config", config.to_str().unwrap(), "--prune", "0.6"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["p_target"], 0.6);
    assert_eq!(summary["b_target"], 5.0);
    assert_eq!(summary["layers"], 2);

    fs::write(&config, r#"{"p_target": 0.4, "colour": 1}"#).unwrap();
    assert_eq!(code(&opq(&["allocate", "--config", config.to_str().unwrap()])), 1);
}

#[test]
fn report_writes_sweeps() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("m");
    synth(&model, "8");
    let run = tmp.path().join("rep");
    let out = opq(&[
        "report",
        "--model",
        model.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--prune-sweep",
        "0.2,0.5,0.8",
        "--bit-sweep",
        "3,4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(run.join("prune_rate_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    let bits = fs::read_to_string(run.join("bitwidth_sweep.csv")).unwrap();
    assert_eq!(bits.lines().count(), 3);
    assert!(run.join("report.json").is_file());
    assert!(run.join("prune_rate_layers.csv").is_file());
}
