use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use coevo_core::StepRecord;

fn coevo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coevo"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = coevo(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&read(path)).unwrap()
}

fn key_set(line: &str) -> BTreeSet<String> {
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v.as_object().unwrap().keys().cloned().collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_default_writes_full_log_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    ok(&["simulate", "--out", s(&a)]);
    ok(&["simulate", "--out", s(&b)]);
    ok(&["simulate", "--out", s(&c), "--seed", "11"]);

    let log = read(&a.join("steps.jsonl"));
    assert_eq!(log.lines().count(), 6000);
    for line in log.lines() {
        let r: StepRecord = serde_json::from_str(line).unwrap();
        assert!(r.origin.is_none());
    }
    assert_eq!(
        std::fs::read(a.join("steps.jsonl")).unwrap(),
        std::fs::read(b.join("steps.jsonl")).unwrap()
    );
    assert_ne!(log, read(&c.join("steps.jsonl")));

    let manifest = json(&c.join("manifest.json"));
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["seed"], 11);
    assert_eq!(manifest["command"], "simulate");
    assert!(manifest["finished_at"].is_string());

    let summary = json(&a.join("summary.json"));
    assert_eq!(summary["steps"], 6000);
    assert_eq!(summary["first_decile_bins"].as_array().unwrap().len(), 8);
    let first: u64 = summary["first_decile_bins"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap())
        .sum();
    assert_eq!(first, 600);
    assert!(summary["mean_solver_reward"].is_f64());
    assert!(summary["mean_proposer_reward"].is_f64());
}

#[test]
fn config_file_and_overrides_last_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "steps = 50\nseed = 4\n[world]\nn_bins = 5\n").unwrap();
    let out = dir.path().join("o");
    ok(&[
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--override",
        "steps=30",
        "--override",
        "steps=40",
        "--override",
        "solver_reward=discrete",
    ]);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["steps"], 40);
    assert_eq!(manifest["config"]["world"]["n_bins"], 5);
    assert_eq!(manifest["config"]["solver_reward"], "discrete");
    assert_eq!(manifest["seed"], 4);
    assert_eq!(read(&out.join("steps.jsonl")).lines().count(), 40);
    // The snapshot is the config the run used: rerunning from it reproduces the log.
    let snapshot = dir.path().join("snap.toml");
    let cfg: coevo_core::TrainerConfig =
        serde_json::from_value(manifest["config"].clone()).unwrap();
    std::fs::write(&snapshot, toml::to_string(&cfg).unwrap()).unwrap();
    let again = dir.path().join("again");
    ok(&["simulate", "--config", s(&snapshot), "--out", s(&again)]);
    assert_eq!(
        read(&out.join("steps.jsonl")),
        read(&again.join("steps.jsonl"))
    );
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    for args in [
        vec!["simulate", "--out", s(&out), "--override", "no_such_key=1"],
        vec!["simulate", "--out", s(&out), "--override", "steps"],
        vec![
            "simulate",
            "--out",
            s(&out),
            "--config",
            "/does/not/exist.toml",
        ],
        vec!["simulate", "--out", s(&out), "--override", "n_answers=0"],
        vec![
            "reward-landscape",
            "--out",
            s(&out),
            "--n-answers",
            "40",
            "--categories",
            "40",
        ],
    ] {
        let o = coevo(&args);
        assert!(!o.status.success(), "{args:?} should fail");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn reward_landscape_two_categories() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["reward-landscape", "--out", s(dir.path())]);
    let csv = read(&dir.path().join("landscape.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "composition,entropy_nats,solver_continuous_mean,solver_discrete_mean,proposer_reward"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let comps: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(comps, ["5-0", "4-1", "3-2", "2-3", "1-4", "0-5"]);
    let f = |r: &[&str], i: usize| r[i].parse::<f64>().unwrap();
    assert_eq!(
        (f(&rows[0], 1), f(&rows[0], 2), f(&rows[0], 3)),
        (0.0, 1.0, 1.0)
    );
    let cont = (3.0 * 0.6f64.powf(0.7) + 2.0 * 0.4f64.powf(0.7)) / 5.0;
    assert!((f(&rows[2], 2) - cont).abs() < 1e-12);
    assert!((f(&rows[2], 2) - 0.630).abs() < 5e-4);
    assert_eq!(f(&rows[2], 3), 0.6);

    let three = dir.path().join("three");
    ok(&[
        "reward-landscape",
        "--out",
        s(&three),
        "--n-answers",
        "5",
        "--categories",
        "3",
    ]);
    assert_eq!(read(&three.join("landscape.csv")).lines().count(), 1 + 21);
}

#[test]
fn compare_pairs_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    ok(&[
        "compare",
        "--out",
        s(&out),
        "--seeds",
        "3,5",
        "--override",
        "steps=300",
    ]);
    let cmp = json(&out.join("comparison.json"));
    assert_eq!(cmp["runs"], 4);
    assert_eq!(cmp["per_seed"].as_array().unwrap().len(), 2);
    for key in [
        "zero_advantage_fraction",
        "proposer_reward_window_variance",
        "final_solver_skill",
    ] {
        assert!(!cmp["per_seed"][0]["continuous"][key].is_null(), "{key}");
        assert!(!cmp["per_seed"][0]["discrete"][key].is_null(), "{key}");
    }
    for seed in [3, 5] {
        let load = |arm: &str| -> Vec<StepRecord> {
            read(
                &out.join(arm)
                    .join(format!("seed-{seed}"))
                    .join("steps.jsonl"),
            )
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
        };
        let (c, d) = (load("continuous"), load("discrete"));
        assert_eq!(c.len(), 300);
        // Same seed, same untouched proposer: the arms propose identical bins
        // until the first proposer update.
        let bins = |rs: &[StepRecord]| rs[..5].iter().map(|r| r.difficulty_bin).collect::<Vec<_>>();
        assert_eq!(bins(&c), bins(&d));
    }
}

#[test]
fn reanalyze_recomputes_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&["simulate", "--out", s(&run), "--override", "steps=500"]);
    let out = ok(&["reanalyze", s(&run)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("matches"));

    let path = run.join("summary.json");
    let mut v = json(&path);
    v["mean_solver_reward"] = serde_json::json!(0.123);
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(!coevo(&["reanalyze", s(&run)]).status.success());
    ok(&["reanalyze", s(&run), "--write"]);
    ok(&["reanalyze", s(&run)]);
}

/// Loopback chat-completions stub; solver answers cycle through three
/// values in arrival order.
fn stub_endpoint() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let stream = stream.unwrap();
            let counter = counter.clone();
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 {
                        return;
                    }
                    if line.trim_end().is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                let body = String::from_utf8(body).unwrap();
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let text = if body.contains("Question:") {
                    format!("<answer>{}</answer>", n % 3)
                } else {
                    "How many points lie above the line?".to_owned()
                };
                let payload =
                    serde_json::json!({"choices": [{"message": {"content": text}}]}).to_string();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                )
                .unwrap();
            });
        }
    });
    (base, hits)
}

#[test]
fn score_backend_record_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (base, hits) = stub_endpoint();
    let images = [
        "https://img.test/1.png",
        "https://img.test/2.png",
        "https://img.test/3.png",
    ];
    let fixture = dir.path().join("fixture.json");
    let live = dir.path().join("live");
    let base_override = format!("backend.base_url=\"{base}\"");
    let mut args = vec![
        "score-backend",
        "--out",
        s(&live),
        "--record",
        s(&fixture),
        "--override",
        &base_override,
    ];
    args.extend(images);
    ok(&args);
    assert_eq!(hits.load(Ordering::SeqCst), 3 * 6);

    let replay = dir.path().join("replay");
    let mut args = vec![
        "score-backend",
        "--out",
        s(&replay),
        "--fixture",
        s(&fixture),
        "--override",
        &base_override,
    ];
    args.extend(images);
    ok(&args);
    assert_eq!(
        hits.load(Ordering::SeqCst),
        3 * 6,
        "replay must not touch the network"
    );

    let log = read(&replay.join("steps.jsonl"));
    assert_eq!(log, read(&live.join("steps.jsonl")));
    assert_eq!(log.lines().count(), 3);

    // Same fields as the simulator log, plus the origin tag.
    let sim = dir.path().join("sim");
    ok(&["simulate", "--out", s(&sim), "--override", "steps=1"]);
    let mut expected = key_set(read(&sim.join("steps.jsonl")).lines().next().unwrap());
    expected.insert("origin".into());
    for line in log.lines() {
        assert_eq!(key_set(line), expected);
        let r: StepRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.difficulty_bin, None);
        assert_eq!(r.solver_rewards.len(), 5);
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["origin"], "backend");
    }
    assert_eq!(read(&replay.join("rounds.jsonl")).lines().count(), 3);
    ok(&["reanalyze", s(&replay)]);
}

#[test]
fn score_backend_needs_key_for_remote_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = coevo(&[
        "score-backend",
        "--out",
        s(dir.path()),
        "--override",
        "backend.base_url=\"https://api.invalid/v1\"",
        "--override",
        "backend.api_key_env=\"COEVO_CLI_TEST_UNSET_KEY\"",
        "https://img.test/1.png",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("COEVO_CLI_TEST_UNSET_KEY"));
    assert!(!dir.path().join("steps.jsonl").exists());
}

#[test]
fn score_backend_rejects_unfilled_template() {
    let dir = tempfile::tempdir().unwrap();
    let out = coevo(&[
        "score-backend",
        "--out",
        s(dir.path()),
        "--override",
        "backend.proposer_prompt_template=\"Ask about {topic}\"",
        "https://img.test/1.png",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("{topic}"));
}
