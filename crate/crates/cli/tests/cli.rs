use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_graphfuzz"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fuzz(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["fuzz", "--rounds", "60", "--seed", "5", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn bug_dirs(out: &Path) -> Vec<PathBuf> {
    let mut dirs = Vec::new();
    let Ok(kinds) = fs::read_dir(out.join("bugs")) else { return dirs };
    for kind in kinds {
        for entry in fs::read_dir(kind.unwrap().path()).unwrap() {
            dirs.push(entry.unwrap().path());
        }
    }
    dirs.sort();
    dirs
}

#[test]
fn fuzz_writes_a_reproducible_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = fuzz(&a, &["--fault", "shape-cache"]);
    assert!(ra.status.success(), "{}", stderr(&ra));
    let rb = fuzz(&b, &["--fault", "shape-cache"]);
    assert!(rb.status.success(), "{}", stderr(&rb));
    let ta = fs::read_to_string(a.join("report.json")).unwrap();
    assert_eq!(ta, fs::read_to_string(b.join("report.json")).unwrap());
    let report: Value = serde_json::from_str(&ta).unwrap();
    assert_eq!(report["rounds"], 60);
    assert!(stderr(&ra).contains("unique bugs"));
}

#[test]
fn config_file_and_flags_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"rounds": 10, "seed": 3, "optimizer": {"faults": ["fused-param"]}}"#).unwrap();
    let out = tmp.path().join("out");
    let o = run(&["fuzz", "--config", cfg.to_str().unwrap(), "--rounds", "20", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rounds"], 20);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let write = |name: &str, text: &str| {
        let p = tmp.path().join(name);
        fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_owned()
    };
    let both = write("both.json", r#"{"rounds": 5, "duration_secs": 1.0}"#);
    let unknown = write("unknown.json", r#"{"rounds": 5, "colour": "red"}"#);
    let bad_eps = write("eps.json", r#"{"rounds": 5, "diff": {"epsilon": -1.0}}"#);
    let missing = tmp.path().join("missing.json");
    let cases: Vec<Vec<&str>> = vec![
        vec!["fuzz", "--config", &both, "--out", out],
        vec!["fuzz", "--config", &unknown, "--out", out],
        vec!["fuzz", "--config", &bad_eps, "--out", out],
        vec!["fuzz", "--config", missing.to_str().unwrap(), "--out", out],
        vec!["fuzz", "--out", out],
        vec!["fuzz", "--rounds", "5", "--duration", "1", "--out", out],
        vec!["fuzz", "--rounds", "5", "--fault", "nope", "--out", out],
    ];
    for args in cases {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn stored_bugs_replay_to_their_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = fuzz(&out, &["--fault", "shape-cache", "--fault", "fused-param", "--fault", "softmax-reorder"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dirs = bug_dirs(&out);
    assert!(!dirs.is_empty());
    for d in dirs {
        let model = d.join("model.json");
        let tensor = d.join("input.dljt");
        let r = run(&[
            "replay",
            model.to_str().unwrap(),
            tensor.to_str().unwrap(),
            "--fault",
            "shape-cache",
            "--fault",
            "fused-param",
            "--fault",
            "softmax-reorder",
        ]);
        assert!(r.status.success(), "{}", stderr(&r));
        let again: Value = serde_json::from_str(&stdout(&r)).unwrap();
        let stored: Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
        for field in ["kind", "dedup_key", "inconsistency_values", "root_label"] {
            assert_eq!(again[field], stored[field], "{} {field}", d.display());
        }
    }
}

#[test]
fn replay_without_the_fault_is_clean_and_bad_input_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert!(fuzz(&out, &["--fault", "shape-cache"]).status.success());
    let d = bug_dirs(&out).into_iter().next().expect("at least one bug");
    let model = d.join("model.json");
    let tensor = d.join("input.dljt");
    let clean = run(&["replay", model.to_str().unwrap(), tensor.to_str().unwrap()]);
    assert!(clean.status.success(), "{}", stderr(&clean));
    assert_eq!(stdout(&clean).trim(), "no bug");

    let broken = tmp.path().join("broken.json");
    fs::write(&broken, "{\"vertices\": [").unwrap();
    let r = run(&["replay", broken.to_str().unwrap(), tensor.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains("broken.json"), "{}", stderr(&r));
}

#[test]
fn diversity_reports_mean_edit_distance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert!(fuzz(&out, &[]).status.success());
    let o = run(&["diversity", out.join("models").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(d["med"], report["med"]);

    let same = tmp.path().join("same");
    fs::create_dir(&same).unwrap();
    let first = fs::read_dir(out.join("models")).unwrap().next().unwrap().unwrap().path();
    fs::copy(&first, same.join("a.json")).unwrap();
    let one = run(&["diversity", same.to_str().unwrap()]);
    assert!(!one.status.success());
    fs::copy(&first, same.join("b.json")).unwrap();
    let two = run(&["diversity", same.to_str().unwrap()]);
    let d: Value = serde_json::from_str(&stdout(&two)).unwrap();
    assert_eq!(d["med"], 0.0);
}

#[test]
fn extern_backend_drives_a_serving_process() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let backend = format!("extern:{} serve --fault shape-cache", env!("CARGO_BIN_EXE_graphfuzz"));
    let o = fuzz(&out, &["--backend", &backend]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ext: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();

    let builtin = tmp.path().join("builtin");
    assert!(fuzz(&builtin, &["--fault", "shape-cache"]).status.success());
    let own: Value = serde_json::from_str(&fs::read_to_string(builtin.join("report.json")).unwrap()).unwrap();
    assert_eq!(ext["unique_bugs"], own["unique_bugs"]);
    let found: u64 = ext["unique_bugs"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert!(found > 0);
}
