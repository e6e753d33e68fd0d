use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ockl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ockl")).args(args).output().expect("ockl runs")
}

fn ok(args: &[&str]) -> String {
    let out = ockl(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not json: {stderr}"))
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &str = r#"{"stream":{"generate":{"n_entities":8,"n_relations":4,"n_steps":5,"horizon":100}},"kg_probes":16}"#;

#[test]
fn help_lists_subcommands_and_flags() {
    let top = ok(&["--help"]);
    for cmd in ["gen", "run", "sweep", "stats", "report"] {
        assert!(top.contains(cmd), "missing {cmd} in help");
    }
    let run = ok(&["run", "--help"]);
    assert!(run.contains("--config") && run.contains("--out"));
    let gen = ok(&["gen", "--help"]);
    for flag in ["--seed", "--entities", "--variant-fraction", "--steps", "--mode", "--out"] {
        assert!(gen.contains(flag), "gen help lacks {flag}");
    }
}

#[test]
fn unknown_flag_is_rejected() {
    let out = ockl(&["run", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

#[test]
fn gen_then_stats_then_run_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    ok(&["gen", "--seed", "3", "--entities", "10", "--relations", "4", "--steps", "6", "--horizon", "120", "--out", d]);
    for f in ["knowledge.jsonl", "qa.jsonl", "stats.json", "manifest.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let stats: Value = serde_json::from_str(&ok(&["stats", "--stream", d])).unwrap();
    let n_lines = fs::read_to_string(data.join("knowledge.jsonl")).unwrap().lines().count();
    assert_eq!(stats["n_items"].as_u64().unwrap() as usize, n_lines);
    assert_eq!(stats, read_json(&data.join("stats.json")));

    let cfg = format!(
        r#"{{"stream":{{"files":{{"knowledge":"{d}/knowledge.jsonl","qa":"{d}/qa.jsonl","relations":4}}}},"learner":{{"kind":"fact_memory"}}}}"#
    );
    let cfg_path = write(&dir.path().join("cfg.json"), &cfg);
    let out = dir.path().join("run");
    ok(&["run", "--config", &cfg_path, "--out", out.to_str().unwrap()]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6 + 1);
    let summary = read_json(&out.join("summary.json"));
    // Perfect memory on a redundancy-free stream.
    assert_eq!(summary["em"].as_f64(), Some(1.0));
    assert_eq!(summary["bwt"].as_f64(), Some(0.0));
}

#[test]
fn run_is_byte_identical_and_manifest_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("cfg.json"), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let printed = ok(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]);
    ok(&["run", "--config", &cfg, "--out", b.to_str().unwrap()]);
    let manifest = a.join("manifest.json");
    ok(&["run", "--config", manifest.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    for f in ["metrics.csv", "summary.json", "matrix.csv", "steps.csv", "manifest.json"] {
        let first = fs::read(a.join(f)).unwrap();
        assert_eq!(first, fs::read(b.join(f)).unwrap(), "{f} differs between runs");
        assert_eq!(first, fs::read(c.join(f)).unwrap(), "{f} differs after manifest rerun");
    }
    assert_eq!(printed, fs::read_to_string(a.join("summary.json")).unwrap());

    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5 + 1);
    assert!(metrics.starts_with("t,em,bwt,fwt,kar,"));
    for m in ["em", "bwt", "fwt", "kar"] {
        let plot = fs::read_to_string(a.join("plotdata").join(format!("{m}.csv"))).unwrap();
        assert!(plot.starts_with(&format!("t,{m}\n")));
        assert_eq!(plot.lines().count(), 6);
    }
}

#[test]
fn summary_kar_matches_its_operands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("cfg.json"), SMALL);
    let out = dir.path().join("run");
    ok(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let s = read_json(&out.join("summary.json"));
    let f = |k: &str| s[k].as_f64().unwrap();
    let tokens = s["kar_tokens"].as_f64().unwrap();
    let time = s["totals"]["train_time_s"].as_f64().unwrap();
    assert!(time > 0.0);
    let want = (f("fwt") + f("bwt")) * tokens / time;
    assert!((f("kar") - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {want}", f("kar"));
}

#[test]
fn sweep_writes_comparison_and_report_rebuilds_plots() {
    let dir = tempfile::tempdir().unwrap();
    let base = SMALL.replacen('{', r#"{"coreset":{"method":"random"},"#, 1);
    let cfg = write(&dir.path().join("cfg.json"), &base);
    let out = dir.path().join("sweep");
    let table = ok(&["sweep", "--preset", "ratio", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(table, csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("coreset.ratio,em,"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",ok")));

    let cell = out.join("ratio-0.5");
    fs::remove_dir_all(cell.join("plotdata")).unwrap();
    let shown = ok(&["report", "--run", cell.to_str().unwrap()]);
    assert!(shown.contains("kg_al"));
    assert!(cell.join("plotdata").join("kar.csv").exists());
}

#[test]
fn ratio_preset_needs_a_coreset_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("cfg.json"), SMALL);
    let out = ockl(&["sweep", "--preset", "ratio", "--config", &cfg, "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(err_json(&out)["error"]["code"], "config");
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("cfg.json"), r#"{"coreset":{"method":"kcenter","ratio":1.5}}"#);
    let out = ockl(&["run", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    let e = err_json(&out);
    assert_eq!(e["error"]["code"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("coreset.ratio"));

    let cfg = write(&dir.path().join("cfg2.json"), r#"{"budget":{"mode":"per_step","secs":1}}"#);
    let out = ockl(&["run", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert!(err_json(&out)["error"]["message"].as_str().unwrap().contains("budget"));
}
