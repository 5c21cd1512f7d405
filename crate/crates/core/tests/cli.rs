use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const FAST: &str = "seed = 5\n[drone]\nspeed_mps = 500.0\n[eval]\nepisodes = 3\n[train]\nepisodes = 2\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dronecell"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fast.toml");
    fs::write(&cfg, FAST).unwrap();
    (dir, cfg)
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[test]
fn train_eval_baseline_round_trip() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let policy = out.join("policy.txt");
    assert!(policy.exists());
    assert_eq!(data_rows(&out.join("train_log.csv")).len(), 3);
    ok(&["eval", "--config", s(&cfg), "--policy", s(&policy), "--out", s(&out)]);
    let eps = data_rows(&out.join("eval_episodes.csv"));
    assert_eq!(eps.len(), 4);
    ok(&["baseline", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(data_rows(&out.join("baseline_summary.csv")).len(), 2);

    // continuing training from the saved policy
    let more = dir.path().join("more");
    ok(&["train", "--config", s(&cfg), "--policy", s(&policy), "--episodes", "1", "--out", s(&more)]);
    assert_eq!(data_rows(&more.join("train_log.csv")).len(), 2);
}

#[test]
fn outputs_embed_config_and_seed() {
    let (dir, cfg) = setup();
    let out = dir.path().join("b");
    ok(&["baseline", "--config", s(&cfg), "--seed", "77", "--out", s(&out)]);
    let text = fs::read_to_string(out.join("baseline_episodes.csv")).unwrap();
    assert!(text.starts_with("# dronecell baseline"));
    assert!(text.contains("# seed = 77\n"));
    assert!(text.contains("# speed_mps = 500.0"));
}

#[test]
fn sweep_emits_one_row_per_point() {
    let (dir, cfg) = setup();
    let out = dir.path().join("sw");
    ok(&[
        "sweep",
        "--config",
        s(&cfg),
        "--sweep",
        "weights.alpha_h=0,0.25,0.5",
        "--episodes",
        "1",
        "--out",
        s(&out),
    ]);
    let rows = data_rows(&out.join("sweep_summary.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("weights.alpha_h=0,"));
    assert!(rows[3].starts_with("weights.alpha_h=0.5,"));
}

#[test]
fn heatmap_grid_shape() {
    let (dir, cfg) = setup();
    let out = dir.path().join("hm");
    ok(&["heatmap", "--config", s(&cfg), "--out", s(&out)]);
    let rows = data_rows(&out.join("heatmap.csv"));
    // header plus 500 / 25 rows of 1 + 20 columns
    assert_eq!(rows.len(), 21);
    assert!(rows.iter().all(|r| r.split(',').count() == 21));
}

#[test]
fn exit_codes() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[weights]\nalpha_q = 1\n").unwrap();
    let out = run(&["baseline", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["eval", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    let missing = dir.path().join("nope.txt");
    let out = run(&["eval", "--policy", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));

    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    let (_keep, cfg) = setup();
    let out = run(&["baseline", "--config", s(&cfg), "--out", s(&file.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn policy_from_another_scenario_is_rejected() {
    let (dir, cfg) = setup();
    let out = dir.path().join("p");
    ok(&["train", "--config", s(&cfg), "--episodes", "1", "--out", s(&out)]);
    let other = dir.path().join("other.toml");
    fs::write(&other, format!("{FAST}[quantizer]\npl_step_db = 10.0\n")).unwrap();
    let res = run(&["eval", "--config", s(&other), "--policy", s(&out.join("policy.txt")), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(1));
}
