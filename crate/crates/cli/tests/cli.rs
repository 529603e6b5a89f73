use std::path::Path;
use std::process::{Command, Output};

fn bcva(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcva"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn bcva")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 8] = [
    "--set",
    "data.demos=6",
    "--set",
    "data.rollouts=12",
    "--set",
    "train.epochs=1",
    "--set",
    "train.steps_per_epoch=5",
];

fn small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = SMALL.to_vec();
    v.extend_from_slice(args);
    v
}

#[test]
fn help_succeeds_and_bad_usage_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bcva(dir.path(), &["--help"]).status.success());
    let o = bcva(dir.path(), &["label", "--metric", "colour"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]"), "{}", stderr(&o));
    assert_eq!(bcva(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcva(dir.path(), &["--set", "train.nope=1", "gen-demos"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("train.nope"), "{}", stderr(&o));
    std::fs::write(dir.path().join("bad.cfg"), "returns.gamma = 1.5\n").unwrap();
    let o = bcva(dir.path(), &["--config", "bad.cfg", "gen-demos"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bcva(dir.path(), &small(&["gen-demos"])).status.success());
    let o = bcva(dir.path(), &small(&["gen-demos"]));
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("error[exists]"));
    assert!(bcva(dir.path(), &small(&["gen-demos", "--force"])).status.success());
}

#[test]
fn missing_and_malformed_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = bcva(dir.path(), &["label", "--input", "absent.jsonl", "--metric", "time"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    std::fs::write(dir.path().join("junk.jsonl"), "{\"format\":\"other\"}\n").unwrap();
    let o = bcva(dir.path(), &["label", "--input", "junk.jsonl", "--metric", "time"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = bcva(dir.path(), &["eval", "--checkpoint", "junk.ckpt"]);
    assert!(matches!(o.status.code(), Some(5) | Some(6)), "{}", stderr(&o));
}

#[test]
fn small_pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    for step in [
        vec!["gen-demos"],
        vec!["gen-rollouts"],
        vec!["label", "--metric", "movement"],
        vec!["train"],
        vec!["eval"],
        vec!["report"],
    ] {
        let o = bcva(dir.path(), &small(&step));
        assert!(o.status.success(), "{step:?}: {}", stderr(&o));
    }
    for f in [
        "demos.jsonl",
        "rollouts.jsonl",
        "labeled.jsonl",
        "model.ckpt",
        "model.ckpt.loss.csv",
        "eval/bcva-movement.heatmap.csv",
        "eval/bcva-movement.eval.csv",
        "eval/report.csv",
        "eval/report.txt",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let report = std::fs::read_to_string(dir.path().join("eval/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    assert!(report.lines().any(|l| l.starts_with("BCVA-Movement,")));
}

#[test]
fn loop_resumes_and_refuses_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bcva(dir.path(), &small(&["gen-demos"])).status.success());
    let args = |g: &'static str| {
        small(&[
            "--set",
            "loop.bootstrap_rollouts=6",
            "--set",
            "loop.validation_rollouts=6",
            "--set",
            "loop.rollouts_per_generation=4",
            "loop",
            "--demos",
            "demos.jsonl",
            "--generations",
            g,
            "--out",
            "run",
        ])
    };
    let o = bcva(dir.path(), &args("1"));
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("run/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4);
    let o = bcva(dir.path(), &args("1"));
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("already complete"));
    let o = bcva(dir.path(), &args("2"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
