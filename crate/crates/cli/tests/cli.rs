use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SUBCOMMANDS: [&str; 9] =
    ["ingest-subtitles", "build-index", "world-gen", "synthesize", "ground", "run", "eval", "sweep", "report"];

fn longview(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_longview"));
    for (k, _) in std::env::vars() {
        if k.starts_with("LONGVIEW_") {
            cmd.env_remove(k);
        }
    }
    cmd.current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = longview(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// A small world bundle plus a config pointing at it.
fn world_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["world-gen", "--seed", "5", "--videos", "6", "--events", "2", "--out", "world"]);
    fs::write(dir.path().join("cfg.json"), r#"{"world": "world", "workers": 3}"#).unwrap();
    dir
}

fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, format!("{:x}", Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn help_matches_goldens() {
    let dir = tempfile::tempdir().unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help");
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for sub in std::iter::once("longview").chain(SUBCOMMANDS) {
        let args: Vec<&str> = if sub == "longview" { vec!["--help"] } else { vec![sub, "--help"] };
        let text = ok(dir.path(), &args);
        for line in text.lines().map(str::trim_start).filter(|l| l.starts_with('-')) {
            let parts: Vec<&str> = line.split("  ").filter(|p| !p.trim().is_empty()).collect();
            assert!(parts.len() >= 2, "{sub}: undocumented flag line {line:?}");
        }
        let path = golden.join(format!("{sub}.txt"));
        if update {
            fs::create_dir_all(&golden).unwrap();
            fs::write(&path, &text).unwrap();
        } else {
            let want = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden {}", path.display()));
            assert_eq!(text, want, "help for {sub} changed; rerun with UPDATE_GOLDEN=1");
        }
    }
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["synthesize", "run", "eval", "sweep", "ground"] {
        let out = longview(dir.path(), &[sub, "--out", "x"]);
        assert_eq!(out.status.code(), Some(1), "{sub}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("--config") && err.contains(&format!("Usage: longview {sub}")), "{sub}: {err}");
    }
    let out = longview(dir.path(), &["eval", "--config", "absent.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero_and_unknown_commands_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(longview(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(longview(dir.path(), &["eval", "--help"]).status.code(), Some(0));
    assert_eq!(longview(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(longview(dir.path(), &[]).status.code(), Some(1));
}

#[test]
fn world_gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["world-gen", "--seed", "9", "--videos", "3", "--out", "a"]);
    ok(dir.path(), &["world-gen", "--seed", "9", "--videos", "3", "--out", "b"]);
    ok(dir.path(), &["world-gen", "--seed", "10", "--videos", "3", "--out", "c"]);
    let a = tree_hashes(&dir.path().join("a"));
    assert_eq!(a.len(), 1 + 3 + 3 + 3);
    assert_eq!(a, tree_hashes(&dir.path().join("b")));
    assert_ne!(a, tree_hashes(&dir.path().join("c")));
}

#[test]
fn synthesize_twice_gives_identical_trajectories() {
    let dir = world_dir();
    let d = dir.path();
    ok(d, &["synthesize", "--config", "cfg.json", "--out", "t1.jsonl", "--samples-out", "s1.jsonl"]);
    ok(d, &["synthesize", "--config", "cfg.json", "--out", "t2.jsonl", "--samples-out", "s2.jsonl", "--workers", "1"]);
    let t1 = fs::read(d.join("t1.jsonl")).unwrap();
    assert!(!t1.is_empty());
    assert_eq!(t1, fs::read(d.join("t2.jsonl")).unwrap());
    assert_eq!(fs::read(d.join("s1.jsonl")).unwrap(), fs::read(d.join("s2.jsonl")).unwrap());
    let status: serde_json::Value = serde_json::from_slice(&fs::read(d.join("t1.jsonl.status.json")).unwrap()).unwrap();
    assert_eq!(status["complete"], true);
    assert_eq!(status["tasks_done"], 12);

    ok(d, &["ground", "--config", "cfg.json", "--trajectories", "t1.jsonl", "--out", "r.jsonl", "--stats", "st.json"]);
    let kept = String::from_utf8(t1).unwrap().lines().count();
    assert_eq!(fs::read_to_string(d.join("r.jsonl")).unwrap().lines().count(), kept);
    let stats: serde_json::Value = serde_json::from_slice(&fs::read(d.join("st.json")).unwrap()).unwrap();
    assert_eq!(stats["records"], kept);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = world_dir();
    let d = dir.path();
    ok(d, &["sweep", "--config", "cfg.json", "--axis", "tau", "--values", "0,0.2,0.4,0.6,0.8,1.0", "--out", "s.csv"]);
    let csv = fs::read_to_string(d.join("s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("tau,count,accuracy"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",ok") && l.split(',').nth(1) == Some("12")));
    // tau = 1 escalates every task; tau = 0 never does.
    let rate = |l: &str| l.split(',').nth(7).unwrap().parse::<f64>().unwrap();
    assert_eq!(rate(lines[1]), 0.0);
    assert_eq!(rate(lines[6]), 1.0);
}

#[test]
fn eval_and_report_agree() {
    let dir = world_dir();
    let d = dir.path();
    let table = ok(d, &["eval", "--config", "cfg.json", "--tau", "0.5", "--out", "res.jsonl", "--report", "rep.json"]);
    assert!(table.contains("overall"));
    ok(d, &["report", "--results", "res.jsonl", "--bins", "4", "--out", "summary.json"]);
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(d.join("rep.json")).unwrap()).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(d.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["report"], rep);
    let bins = summary["calibration"].as_array().unwrap();
    assert_eq!(bins.len(), 4);
    assert_eq!(bins.iter().map(|b| b["count"].as_u64().unwrap()).sum::<u64>(), 12);
}

#[test]
fn run_answers_a_single_task() {
    let dir = world_dir();
    let d = dir.path();
    let text = ok(d, &["run", "--config", "cfg.json", "--task-id", "w0000-e1", "--tau", "1", "--out", "one.json"]);
    assert!(text.contains("mode        Tool"), "{text}");
    let res: serde_json::Value = serde_json::from_slice(&fs::read(d.join("one.json")).unwrap()).unwrap();
    assert_eq!(res["answer"], res["truth"]);
    assert_eq!(res["tool_calls"], 2);
    assert!(res["trace"].is_object());
    assert_eq!(longview(d, &["run", "--config", "cfg.json", "--task-id", "nope"]).status.code(), Some(1));
}

#[test]
fn invalid_policy_exits_one() {
    let dir = world_dir();
    let out = longview(dir.path(), &["eval", "--config", "cfg.json", "--tau", "1.5", "--out", "r.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("r.jsonl").exists());
    let out =
        longview(dir.path(), &["sweep", "--config", "cfg.json", "--axis", "gamma", "--values", "1", "--out", "s.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_formats_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (ext, out) in [("srt", "a"), ("vtt", "b"), ("json", "c")] {
        let input = fixtures().join(format!("case_study.{ext}"));
        ok(d, &["ingest-subtitles", "--input", input.to_str().unwrap(), "--video-id", "cs", "--out", out]);
    }
    let a = fs::read(d.join("a/cs.json")).unwrap();
    assert_eq!(a, fs::read(d.join("b/cs.json")).unwrap());
    assert_eq!(a, fs::read(d.join("c/cs.json")).unwrap());
    let bad = d.join("broken.srt");
    fs::write(&bad, "1\nnot a timestamp\nhello\n").unwrap();
    assert_eq!(
        longview(d, &["ingest-subtitles", "--input", bad.to_str().unwrap(), "--out", "x"]).status.code(),
        Some(1)
    );
}

#[test]
fn catalog_indexes_must_match_the_embedder() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("catalog.jsonl"), "{\"video_id\":\"cs\",\"duration_s\":400.0,\"kind\":\"virtual-manifest\"}\n")
        .unwrap();
    let srt = fixtures().join("case_study.srt");
    ok(d, &["ingest-subtitles", "--input", srt.to_str().unwrap(), "--video-id", "cs", "--out", "subs"]);
    let texts = "{\"video_id\":\"cs\",\"start_s\":0,\"end_s\":400,\"text\":\"a city street\"}\n\
                 {\"video_id\":\"cs\",\"start_s\":350,\"end_s\":360,\"text\":\"an old man\"}\n";
    fs::write(d.join("texts.jsonl"), texts).unwrap();
    let build = |dim: &str, out: &str| {
        ok(
            d,
            &[
                "build-index",
                "--catalog",
                "catalog.jsonl",
                "--subtitles",
                "subs",
                "--clip-texts",
                "texts.jsonl",
                "--dim",
                dim,
                "--out",
                out,
            ],
        )
    };
    build("256", "idx");
    build("64", "idx64");
    assert!(d.join("idx/cs.clip.jsonl").exists() && d.join("idx/cs.subtitle.jsonl").exists());

    fs::write(d.join("tasks.jsonl"), "").unwrap();
    let cfg = |idx: &str| {
        format!(r#"{{"catalog": "catalog.jsonl", "subtitles": "subs", "indexes": "{idx}", "tasks": "tasks.jsonl"}}"#)
    };
    fs::write(d.join("good.json"), cfg("idx")).unwrap();
    fs::write(d.join("bad.json"), cfg("idx64")).unwrap();
    let out = longview(d, &["eval", "--config", "bad.json", "--out", "r.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d = 64"));
    // The good config resolves the catalog but has no model endpoints.
    let out = longview(d, &["eval", "--config", "good.json", "--out", "r.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no direct endpoint"));
}
