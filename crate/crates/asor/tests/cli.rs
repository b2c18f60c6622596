//! Command-line surface: help, argument errors and a small data generation.

use std::process::Command;

fn asor() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_asor"));
    c.env_remove("ASOR_DATA_DIR");
    c
}

#[test]
fn help_lists_every_verb() {
    let o = asor().arg("--help").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for verb in ["gen-data", "train", "eval", "report", "inspect"] {
        assert!(text.contains(verb), "{verb} missing from help");
    }
}

#[test]
fn unknown_verb_and_bad_arch_are_rejected() {
    assert!(!asor().arg("fly").output().unwrap().status.success());
    let dir = tempfile::tempdir().unwrap();
    let o = asor().args(["--out"]).arg(dir.path()).args(["train", "--arch", "cnn"]).output().unwrap();
    assert!(!o.status.success());
}

#[test]
fn gen_data_writes_the_requested_demonstrations() {
    let dir = tempfile::tempdir().unwrap();
    let o = asor().arg("--out").arg(dir.path()).args(["--tasks", "pick:red:bowl", "gen-data", "--demos", "5", "--synthetic", "2", "--real-clutter", "1"]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let counts: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("data/counts.json")).unwrap()).unwrap();
    let demos = std::fs::read_dir(dir.path().join("data/trajectories")).unwrap().count();
    assert_eq!(demos, 5);
    assert_eq!(counts["O_E"], 2, "{counts}");
    assert_eq!(counts["O_RC"], 1, "{counts}");
    assert!(dir.path().join("logs/resolved_gen-data.toml").exists());
}

#[test]
fn eval_without_checkpoint_reports_a_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = asor().arg("--out").arg(dir.path()).args(["eval", "--arch", "ea"]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
