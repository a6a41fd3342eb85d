use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tandem_kd::bench::{parse_report, ExperimentConfig, REPORT_HEADER};

fn tandem_kd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tandem-kd")).args(args).output().unwrap()
}

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn shipped_config_is_the_reference() {
    assert_eq!(ExperimentConfig::load(&shipped_config()).unwrap(), ExperimentConfig::reference());
}

#[test]
fn oracle_check_on_shipped_config_exits_zero() {
    let out = tandem_kd(&["oracle-check", "--config", s(&shipped_config())]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(!table.contains("FAIL"));
}

#[test]
fn gen_task_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.json"), dir.path().join("b.json"), dir.path().join("c.json"));
    for (p, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        assert!(tandem_kd(&["gen-task", "--seed", seed, "--out", s(p)]).status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn sweep_without_checkpoints_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out_csv = dir.path().join("sweep.csv");
    let missing = dir.path().join("nothing-here");

    let out = tandem_kd(&["sweep", "--out", s(&out_csv)]);
    assert!(!out.status.success());
    let out = tandem_kd(&["sweep", "--checkpoints", s(&missing), "--out", s(&out_csv)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains(s(&missing.join("manifest.json"))), "{stderr}");
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0, "no partial output");
}

#[test]
fn malformed_config_is_a_usage_error_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"format\": \"tandem-kd/config\",\n  \"version\": 1,\n  \"suite\": oops\n}\n").unwrap();
    let out = tandem_kd(&["train", "--config", s(&bad), "--out", s(&dir.path().join("ck"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("line 4"), "{stderr}");
    assert!(!dir.path().join("ck").exists());
}

#[test]
fn wrong_schema_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::reference();
    cfg.version = 99;
    let path = dir.path().join("v99.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    assert_eq!(tandem_kd(&["gen-task", "--config", s(&path), "--out", s(&dir.path().join("x"))]).status.code(), Some(2));
}

#[test]
fn train_eval_sweep_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    assert!(tandem_kd(&["train", "--seed", "2", "--out", s(&ck)]).status.success());
    for f in ["manifest.json", "train_log.csv", "suite.json", "ckpt-005000.json"] {
        assert!(ck.join(f).is_file(), "{f}");
    }

    let eval = dir.path().join("eval.csv");
    let out = tandem_kd(&["eval", "--seed", "2", "--checkpoints", s(&ck), "--index", "3", "--out", s(&eval), "--verbose-traces"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = parse_report(&std::fs::read_to_string(&eval).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.method == "tandem" && r.n_prompts == 512));
    let trace = std::fs::read_to_string(dir.path().join("eval.trace-b0.5.csv")).unwrap();
    assert!(trace.starts_with("prompt,step,origin,token,teacher_logprob\n"));

    let out = tandem_kd(&["eval", "--seed", "2", "--checkpoints", s(&ck), "--index", "999", "--out", s(&eval)]);
    assert_eq!(out.status.code(), Some(2));

    let sweep = dir.path().join("sweep.csv");
    assert!(tandem_kd(&["sweep", "--seed", "2", "--checkpoints", s(&ck), "--out", s(&sweep)]).status.success());
    let text = std::fs::read_to_string(&sweep).unwrap();
    assert_eq!(text.lines().next(), Some(REPORT_HEADER));
    assert_eq!(parse_report(&text).unwrap().len(), 6 + 33);
}
