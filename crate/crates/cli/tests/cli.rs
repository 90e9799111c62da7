use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/digits")
}

fn dfprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfprune")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dfprune(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn search(out: &Path, extra: &[&str]) -> String {
    let (model, eval) = (fixture().join("model"), fixture().join("eval"));
    let mut args = vec![
        "search",
        "--model",
        path(&model),
        "--evalset",
        path(&eval),
        "--out",
        path(out),
        "--reward-subset",
        "150",
        "--log-every",
        "0",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn analyze_reports_every_prunable_layer() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("a.json");
    let stdout = ok(&[
        "analyze",
        "--model",
        path(&fixture().join("model")),
        "--out",
        path(&report),
    ]);
    assert!(stdout.contains("conv1"));
    let v = read_json(&report);
    let layers = v["layers"].as_array().unwrap();
    assert!(layers.len() >= 3);
    for (i, l) in layers.iter().enumerate() {
        assert_eq!(l["state"]["layer"], i + 1);
        let norm = l["normalized"].as_array().unwrap();
        assert_eq!(norm.len(), 9);
        assert!(norm.iter().all(|x| (0.0..=1.0).contains(&x.as_f64().unwrap())));
    }
}

#[test]
fn seeded_search_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["--warmup", "4", "--episodes", "6", "--seed", "11"];
    search(&a, &args);
    search(&b, &args);
    for file in ["episodes.jsonl", "strategy.json"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let lines = fs::read_to_string(a.join("episodes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 10);
}

#[test]
fn keeping_everything_returns_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let stdout = search(&run, &["--p-r", "1", "--warmup", "2", "--episodes", "1"]);
    let s = read_json(&run.join("strategy.json"));
    assert_eq!(s["param_ratio"], 1.0);
    assert!(stdout.contains(&format!(
        "baseline acc {:.4}  best acc {:.4}",
        s["accuracy"].as_f64().unwrap(),
        s["accuracy"].as_f64().unwrap()
    )));
}

#[test]
fn applied_strategy_reproduces_recorded_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    search(
        &run,
        &[
            "--policy",
            "uniform-recon",
            "--warmup",
            "0",
            "--episodes",
            "1",
            "--lambda",
            "0.5",
        ],
    );
    let s = read_json(&run.join("strategy.json"));
    let full = s["full_accuracy"].as_f64().unwrap();
    let pruned = dir.path().join("pruned");
    let eval = fixture().join("eval");
    let stdout = ok(&[
        "apply",
        "--model",
        path(&fixture().join("model")),
        "--strategy",
        path(&run.join("strategy.json")),
        "--out",
        path(&pruned),
        "--evalset",
        path(&eval),
    ]);
    assert!(stdout.contains(&format!("accuracy {full:.4}")), "{stdout}");
    assert_eq!(
        fs::read(pruned.join("manifest.json")).unwrap(),
        fs::read(run.join("model/manifest.json")).unwrap()
    );
    let stdout = ok(&[
        "eval",
        "--model",
        path(&pruned),
        "--evalset",
        path(&eval),
        "--workers",
        "3",
    ]);
    assert!(stdout.starts_with(&format!("accuracy {full:.4}")), "{stdout}");

    let stdout = ok(&[
        "diff",
        "--original",
        path(&fixture().join("model")),
        "--pruned",
        path(&pruned),
    ]);
    assert!(
        stdout.contains(&format!("(ratio {:.4})", s["param_ratio"].as_f64().unwrap())),
        "{stdout}"
    );
}

#[test]
fn resumed_search_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let (straight, resumed) = (dir.path().join("straight"), dir.path().join("resumed"));
    search(&straight, &["--warmup", "2", "--episodes", "4", "--seed", "4"]);
    // the first three episodes of the same search, plus a log line written
    // after the last checkpoint
    search(&resumed, &["--warmup", "2", "--episodes", "1", "--seed", "4"]);
    let mut run = read_json(&resumed.join("run.json"));
    run["settings"]["episodes"] = 4.into();
    fs::write(resumed.join("run.json"), run.to_string()).unwrap();
    let log = fs::read_to_string(straight.join("episodes.jsonl")).unwrap();
    fs::write(
        resumed.join("episodes.jsonl"),
        log.lines().take(4).collect::<Vec<_>>().join("\n") + "\n",
    )
    .unwrap();

    search(
        &resumed,
        &["--warmup", "2", "--episodes", "4", "--seed", "4", "--resume"],
    );
    assert_eq!(log, fs::read_to_string(resumed.join("episodes.jsonl")).unwrap());
    assert_eq!(
        read_json(&straight.join("strategy.json")),
        read_json(&resumed.join("strategy.json"))
    );
}

#[test]
fn resume_rejects_changed_settings() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    search(&run, &["--warmup", "1", "--episodes", "1"]);
    let (model, eval) = (fixture().join("model"), fixture().join("eval"));
    let base = [
        "search",
        "--model",
        path(&model),
        "--evalset",
        path(&eval),
        "--out",
        path(&run),
    ];
    let out = dfprune(&[&base[..], &["--warmup", "1", "--episodes", "1"]].concat());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--resume"));
    let out = dfprune(
        &[
            &base[..],
            &["--warmup", "1", "--episodes", "3", "--p-r", "0.6", "--resume"],
        ]
        .concat(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("settings differ"));
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture().join("model");
    let eval = fixture().join("eval");
    let missing = dir.path().join("nope");
    let cases: Vec<Vec<&str>> = vec![
        vec!["eval", "--model", path(&missing), "--evalset", path(&missing)],
        vec![
            "search",
            "--model",
            path(&model),
            "--evalset",
            path(&missing),
            "--out",
            path(&missing),
        ],
        vec![
            "search",
            "--model",
            path(&model),
            "--evalset",
            path(&eval),
            "--out",
            path(&missing),
            "--p-r",
            "0.9",
            "--p-max",
            "0.5",
        ],
        vec![
            "search",
            "--model",
            path(&model),
            "--evalset",
            path(&eval),
            "--out",
            path(&missing),
            "--policy",
            "greedy",
        ],
    ];
    for args in cases {
        let out = dfprune(&args);
        assert!(!out.status.success(), "{args:?}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.starts_with("error: "), "{args:?}: {stderr}");
    }
    let out = dfprune(&[
        "search",
        "--model",
        path(&model),
        "--evalset",
        path(&eval),
        "--out",
        path(&missing),
        "--policy",
        "greedy",
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sac"));
}
