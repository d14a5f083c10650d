use std::path::Path;
use std::process::Command;

use poformer::cli;
use poformer::synth::heldout_trials;
use poformer::trials::format_trial_list;
use poformer::RunConfig;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("poformer").chain(args.iter().copied());
    let code = cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::gradcheck();
    cfg.schedule.total_steps = 10;
    cfg.schedule.warmup_steps = 2;
    cfg.run.steps = 3;
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn score_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let trials = dir.path().join("trials.txt");
    let scores = dir.path().join("scores.txt");
    std::fs::write(&trials, "1 e t1\n1 e t2\n1 e t3\n0 e n1\n0 e n2\n0 e n3\n").unwrap();
    std::fs::write(&scores, "e t1 0.8\ne t2 0.6\ne t3 0.4\ne n1 0.7\ne n2 0.3\ne n3 0.2\n").unwrap();

    let (code, out, _) = run(&["score", "--scores", p(&scores), "--trials", p(&trials)]);
    assert_eq!(code, 0);
    assert_eq!(out.trim(), "EER=0.333333 minDCF=0.666667");

    let (_, out, _) = run(&["score", "--scores", p(&scores), "--trials", p(&trials), "--percent"]);
    assert_eq!(out.trim(), "EER=33.333333 minDCF=0.666667");
}

#[test]
fn usage_errors_exit_2() {
    let (code, _, err) = run(&["score", "--bogus"]);
    assert_eq!(code, 2);
    assert!(err.contains("Usage"), "{err}");

    let (code, _, _) = run(&[]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["train", "--config", "x.json"]);
    assert_eq!(code, 2);

    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["train", "eval", "score", "gradcheck", "inspect"] {
        assert!(out.contains(sub));
    }
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let (code, out, err) = run(&["inspect", "--ckpt", p(&missing)]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.starts_with("error:"), "{err}");

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
    let (code, _, err) = run(&["inspect", "--ckpt", p(&garbage)]);
    assert_eq!(code, 1);
    assert!(err.contains("magic"), "{err}");
}

#[test]
fn gradcheck_passes_on_desk_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gradcheck.json");
    std::fs::write(&cfg, RunConfig::gradcheck().to_json()).unwrap();
    let (code, out, err) = run(&["gradcheck", "--config", p(&cfg)]);
    assert_eq!(code, 0, "{out}{err}");
    let worst: f64 = out
        .split_whitespace()
        .find_map(|f| f.strip_prefix("worst_rel_err="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst < 1e-4);

    // an impossible tolerance turns the same report into a failure
    let (code, _, _) = run(&["gradcheck", "--config", p(&cfg), "--tol", "0"]);
    assert_eq!(code, 1);
}

#[test]
fn train_eval_score_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("train.log");

    let (code, _, err) = run(&["train", "--config", p(&cfg_path), "--out", p(&ckpt), "--log", p(&log)]);
    assert_eq!(code, 0, "{err}");
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 3);
    for (i, line) in log_text.lines().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0], (i + 1).to_string());
        assert!(f[2].parse::<f64>().unwrap().is_finite());
    }

    // same inputs, same bytes
    let again = dir.path().join("again.ckpt");
    let (code, out, _) = run(&["train", "--config", p(&cfg_path), "--out", p(&again)]);
    assert_eq!(code, 0);
    assert_eq!(out, log_text);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    let task = RunConfig::gradcheck().task;
    let (ids, keys) = heldout_trials(&task, 3, 11);
    let trials = dir.path().join("trials.txt");
    let utts = dir.path().join("utts.txt");
    let scores = dir.path().join("scores.txt");
    std::fs::write(&trials, format_trial_list(&keys)).unwrap();
    let id_list: String = ids.iter().map(|id| format!("{id}\n")).collect();
    std::fs::write(&utts, id_list).unwrap();

    let (code, eval_out, err) = run(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--trials",
        p(&trials),
        "--utterances",
        p(&utts),
        "--scores-out",
        p(&scores),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(eval_out.starts_with("EER="), "{eval_out}");
    assert_eq!(std::fs::read_to_string(&scores).unwrap().lines().count(), keys.len());

    let (code, score_out, _) = run(&["score", "--scores", p(&scores), "--trials", p(&trials)]);
    assert_eq!(code, 0);
    assert_eq!(score_out, eval_out);

    let (code, out, _) = run(&["inspect", "--ckpt", p(&ckpt)]);
    assert_eq!(code, 0);
    assert!(out.starts_with("step: 3\n"), "{out}");
    assert!(out.contains("classifier.weight"));
    assert!(out.contains("\"steps\": 3"));
}

#[test]
fn seed_override_changes_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    let (_, log_a, _) = run(&["train", "--config", p(&cfg_path), "--out", p(&a), "--seed", "1"]);
    let (_, log_b, _) = run(&["train", "--config", p(&cfg_path), "--out", p(&b), "--seed", "2"]);
    assert_ne!(log_a, log_b);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_poformer");
    let status = Command::new(bin).arg("--unknown-flag").output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("Usage"));

    let status = Command::new(bin).args(["inspect", "--ckpt", "/nonexistent/x"]).output().unwrap();
    assert_eq!(status.status.code(), Some(1));

    let status = Command::new(bin).arg("--version").output().unwrap();
    assert_eq!(status.status.code(), Some(0));
}
