use std::path::Path;
use std::process::{Command, Output};

fn negotiate(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_negotiate"))
        .args(args)
        .env("NEGOTIATE_OUT", out_root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &["--batch", "4", "--hidden-dim", "6", "--eval-interval", "2"];

fn tiny(extra: &[&str]) -> Vec<String> {
    TINY.iter().chain(extra).map(|s| s.to_string()).collect()
}

#[test]
fn smoke_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let args = tiny(&["--episodes", "0", "--seeds", "3", "--channel", "both"]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = negotiate(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));

    let run = dir.path().join("paired_selfish_selfish_both");
    for f in ["config.json", "summary.json", "table.csv", "seed_3/metrics.csv", "seed_3/transcripts.jsonl", "seed_3/summary.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(run.join("seed_3/checkpoints/episode_0.json").is_file());

    let metrics = std::fs::read_to_string(run.join("seed_3/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "episode,eval_flag,mean_score_a,mean_score_b,joint_optimality,mean_turns,agreement_rate,entropy_term,entropy_utt,entropy_prop"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..2], &["0", "1"]);
    assert!(lines.next().is_none());

    let transcripts = std::fs::read_to_string(run.join("seed_3/transcripts.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(transcripts.lines().next().unwrap()).unwrap();
    let keys: Vec<&String> = first.as_object().unwrap().keys().collect();
    for k in ["seed", "pool", "util_a", "util_b", "n_limit", "channel", "turns", "raw_rewards", "scaled_scores"] {
        assert!(keys.iter().any(|x| *x == k), "no {k} in {keys:?}");
    }
    let turn = &first["turns"][0];
    for k in ["agent", "terminate", "message", "proposal"] {
        assert!(turn.get(k).is_some(), "turn lacks {k}");
    }

    let config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["channel"], "both");
    assert_eq!(config["batch_size"], 4);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        let args = tiny(&["--episodes", "6", "--seeds", "2", "--deterministic", "--channel", "linguistic", "--out", out.to_str().unwrap()]);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = negotiate(&args, dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(std::fs::read(out.join("seed_2/metrics.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0].len() > 200);
}

#[test]
fn config_file_flags_and_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.json");
    std::fs::write(&file, r#"{"channel": "none", "episodes": 3, "seeds": [1]}"#).unwrap();
    let o = negotiate(&["--config", file.to_str().unwrap(), "--episodes", "5", "--dry-run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let merged: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(merged["episodes"], 5);
    assert_eq!(merged["channel"], "none");
    assert_eq!(merged["batch_size"], 128);
    assert!(stderr(&o).contains("--episodes overrides episodes"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.json");
    std::fs::write(&file, r#"{"chanel": "none"}"#).unwrap();
    let o = negotiate(&["--config", file.to_str().unwrap(), "--dry-run"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("chanel"), "{}", stderr(&o));
}

#[test]
fn analyze_refuses_an_empty_transcript_file() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = negotiate(&["--experiment", "analyze", "--input", empty.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("not enough data"), "{err}");
    assert!(!err.contains("panicked"), "{err}");
}

#[test]
fn analyze_a_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let args = tiny(&["--episodes", "2", "--seeds", "1", "--channel", "linguistic", "--out", run.to_str().unwrap()]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(negotiate(&args, dir.path()).status.success());

    let out = dir.path().join("analysis");
    let o = negotiate(
        &["--experiment", "analyze", "--input", run.to_str().unwrap(), "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let unigram = std::fs::read_to_string(out.join("unigram.csv")).unwrap();
    assert!(unigram.lines().count() > 1);
    assert!(out.join("bigram.csv").is_file());
    assert!(out.join("summary.json").is_file());
}

#[test]
fn bad_flag_values_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = negotiate(&["--channel", "semaphore"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("semaphore"));
}
