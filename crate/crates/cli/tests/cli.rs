use std::path::Path;
use std::process::{Command, Output};

fn diffnea(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffnea"))
        .current_dir(dir)
        .env_remove("DIFFNEA_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [&["--help"][..], &["generate", "--help"], &["train", "--help"], &["rollout", "--help"], &["eval", "--help"], &["gradcheck", "--help"]] {
        assert_eq!(code(&diffnea(dir.path(), sub)), 0, "{sub:?}");
    }
    assert_eq!(code(&diffnea(dir.path(), &["train", "--no-such-flag"])), 2);
    assert_eq!(code(&diffnea(dir.path(), &["generate", "--system", "acrobot"])), 2);
    assert_eq!(code(&diffnea(dir.path(), &["generate"])), 2, "system is required");
    assert_eq!(code(&diffnea(dir.path(), &["train", "--data", "x.jsonl", "--model", "lstm"])), 2);
    assert_eq!(code(&diffnea(dir.path(), &["train", "--data", "x.jsonl", "--batch-size", "0"])), 2);
}

#[test]
fn generate_is_reproducible_and_records_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate", "--system", "furuta", "--n", "200", "--seed", "3"];
    assert_eq!(code(&diffnea(dir.path(), &args)), 0);
    let path = dir.path().join("out/furuta-uniform-seed3.jsonl");
    let first = std::fs::read(&path).unwrap();
    assert_eq!(code(&diffnea(dir.path(), &args)), 0);
    assert_eq!(first, std::fs::read(&path).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/furuta-uniform-seed3.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["effective_config"]["n"], 200);
    assert_eq!(manifest["artifacts"][0]["id"].as_str().unwrap().len(), 64);

    // config file, overridden by a flag
    std::fs::write(dir.path().join("gen.json"), r#"{"system": "furuta", "n": 50, "seed": 3}"#).unwrap();
    let out = diffnea(dir.path(), &["generate", "--config", "gen.json", "--n", "200", "-o", "b.jsonl"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(first, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    std::fs::write(dir.path().join("bad.json"), r#"{"sytem": "furuta"}"#).unwrap();
    assert_eq!(code(&diffnea(dir.path(), &["generate", "--config", "bad.json"])), 2);
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = diffnea(dir.path(), &["train", "--data", "missing.jsonl"]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("missing.jsonl"));
    std::fs::write(dir.path().join("junk.jsonl"), "not json\n").unwrap();
    assert_eq!(code(&diffnea(dir.path(), &["train", "--data", "junk.jsonl"])), 4);
    assert_eq!(code(&diffnea(dir.path(), &["rollout", "--fit", "missing.json"])), 4);
}

#[test]
fn empty_results_give_an_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("res")).unwrap();
    let out = diffnea(dir.path(), &["eval", "--results", "res"]);
    assert_eq!(code(&out), 0);
    assert!(stderr(&out).contains("warning"));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(dir.path().join("res/report.json").exists());
}

#[test]
fn overflowing_labels_abort_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&diffnea(dir.path(), &["generate", "--system", "cartpole", "--n", "64", "-o", "d.jsonl"])), 0);
    let text = std::fs::read_to_string(dir.path().join("d.jsonl")).unwrap();
    let mut lines = text.lines();
    let mut poisoned = vec![lines.next().unwrap().to_string()];
    for l in lines {
        let mut row: Vec<f64> = serde_json::from_str(l).unwrap();
        let n = row.len();
        row[n - 1] = 1e300;
        poisoned.push(serde_json::to_string(&row).unwrap());
    }
    std::fs::write(dir.path().join("d.jsonl"), poisoned.join("\n") + "\n").unwrap();
    let out = diffnea(dir.path(), &["train", "--data", "d.jsonl", "--epochs", "2", "-o", "fit.json"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch"));
    let abort: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("fit.json.abort.json")).unwrap()).unwrap();
    assert!(abort["params"].as_array().is_some_and(|p| !p.is_empty()));
    assert!(!dir.path().join("fit.json").exists());
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let out = diffnea(d, args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        out
    };
    ok(&["generate", "--system", "cartpole", "--n", "300", "--seed", "1"]);
    let data = "out/cartpole-uniform-seed1.jsonl";
    ok(&["train", "--data", data, "--model", "diffnea", "--actuator", "viscous", "--epochs", "3", "--batch-size", "64"]);
    ok(&["train", "--data", data, "--model", "nea"]);
    ok(&["train", "--data", data, "--model", "ffnn", "--epochs", "2", "--hidden", "8,8", "--sequential"]);
    let fit = "out/fit-diffnea-viscous-with_prior-cartpole-uniform-seed1.json";
    let parsed: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join(fit)).unwrap()).unwrap();
    assert_eq!(parsed["format"], "diffnea-fit");
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join(format!("{fit}.manifest.json"))).unwrap()).unwrap();
    assert!(manifest["fit_wall_clock_s"].as_f64().is_some());

    ok(&["rollout", "--fit", fit, "--protocol", "swing", "--duration", "1"]);
    for suffix in ["model.csv", "reference.csv", "model.svg", "metrics.json"] {
        assert!(d.join(format!("out/rollout-diffnea-viscous-with_prior-swing-{suffix}")).exists(), "{suffix}");
    }
    ok(&["rollout", "--fit", fit, "--q0", "0,0.3", "--policy", "swingup", "--duration", "1"]);
    assert!(d.join("out/rollout-diffnea-viscous-with_prior-custom-metrics.json").exists());
    assert_eq!(code(&diffnea(d, &["rollout", "--fit", fit, "--protocol", "upright"])), 2);

    let out = ok(&["eval", "--duration", "1"]);
    let table = String::from_utf8(out.stdout).unwrap();
    // 3 fits x 2 protocols
    assert_eq!(table.lines().count(), 2 + 6, "{table}");
    assert!(table.contains("| nea |") && table.contains("| ffnn |"), "{table}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
    assert_eq!(std::fs::read_to_string(d.join("out/report.md")).unwrap(), table);
}

#[test]
fn gradcheck_subset() {
    let dir = tempfile::tempdir().unwrap();
    let out = diffnea(dir.path(), &["gradcheck", "--states", "2", "--system", "furuta", "--actuator", "viscous"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8(out.stdout).unwrap().contains("PASS"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 1);
}
