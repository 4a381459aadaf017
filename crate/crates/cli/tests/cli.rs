use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bargainbench")).args(args).output().expect("spawn cli")
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sample(dir: &Path, n: &str) -> PathBuf {
    let path = dir.join("scenarios.jsonl");
    ok(&["sample", "--catalog", s(&data("sample_catalog.json")), "--n", n, "--seed", "11", "--out", s(&path)]);
    path
}

fn reports(out: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(out.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn sampling_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = fs::read(sample(dir.path(), "9")).unwrap();
    let b = fs::read(sample(dir.path(), "9")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 9);
}

#[test]
fn interrupted_tournament_resumes_to_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let scenarios = sample(dir.path(), "6");
    let roster = data("roster_scripted.toml");
    let full = dir.path().join("full");
    let split = dir.path().join("split");

    ok(&["tournament", "--roster", s(&roster), "--scenarios", s(&scenarios), "--out", s(&full)]);
    ok(&["tournament", "--roster", s(&roster), "--scenarios", s(&scenarios), "--out", s(&split), "--max-jobs", "20"]);
    let journal = fs::read_to_string(split.join("journal.jsonl")).unwrap();
    assert_eq!(journal.lines().count(), 20);
    ok(&["tournament", "--roster", s(&roster), "--scenarios", s(&scenarios), "--out", s(&split), "--resume"]);

    // 3 buyers x 3 sellers x 6 scenarios
    let journal = fs::read_to_string(split.join("journal.jsonl")).unwrap();
    assert_eq!(journal.lines().count(), 54);
    let (mut a, mut b) = (reports(&full), reports(&split));
    let summary = |files: &mut Vec<(String, Vec<u8>)>| {
        let i = files.iter().position(|(n, _)| n == "summary.json").unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(&files.remove(i).1).unwrap();
        v.as_object_mut().unwrap().remove("resumed").unwrap()
    };
    assert_eq!(summary(&mut a), 0);
    assert_eq!(summary(&mut b), 20);
    assert_eq!(a, b);
}

#[test]
fn trace_tools_agree_on_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let scenarios = sample(dir.path(), "3");
    let trace = dir.path().join("one.jsonl");
    let line = ok(&[
        "run",
        "--roster",
        s(&data("roster_scripted.toml")),
        "--buyer",
        "conceder",
        "--seller",
        "boulware",
        "--scenarios",
        s(&scenarios),
        "--index",
        "2",
        "--out",
        s(&trace),
    ]);
    assert!(line.contains("after"), "{line}");

    let metrics: serde_json::Value = serde_json::from_str(&ok(&["score", "--trace", s(&trace)])).unwrap();
    assert_eq!(metrics["buyer_agent"], "conceder");

    for role in ["buyer", "seller"] {
        let r: serde_json::Value = serde_json::from_str(&ok(&["reward", "--trace", s(&trace), "--role", role])).unwrap();
        let total = r["total"].as_f64().unwrap();
        let parts: f64 = ["r_parsing", "r_execution", "r_constraints"].iter().map(|k| 0.5 * r[k].as_f64().unwrap()).sum::<f64>()
            + r["r_utility"].as_f64().unwrap();
        assert!((total - parts).abs() < 1e-12, "{role}: {total} vs {parts}");
    }

    let traces = dir.path().join("traces");
    fs::create_dir(&traces).unwrap();
    fs::copy(&trace, traces.join("one.jsonl")).unwrap();
    let sft = dir.path().join("sft.jsonl");
    ok(&["export-sft", "--traces", s(&traces), "--out", s(&sft)]);
    let samples: Vec<serde_json::Value> = fs::read_to_string(&sft).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let text = fs::read_to_string(&trace).unwrap();
    let turns = text.lines().filter(|l| l.contains(r#""record":"turn""#)).count();
    assert_eq!(samples.len(), turns);
    assert!(samples.iter().all(|x| x["target"].as_str().is_some_and(|t| !t.is_empty())));
}

#[test]
fn advantages_match_group_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let rewards = [0.5, 2.5, 1.0, 1.0, 1.0, 1.0, 0.0, 1.5, 2.0];
    let path = dir.path().join("r.txt");
    fs::write(&path, rewards.iter().map(|r| format!("{r}\n")).collect::<String>()).unwrap();
    let out = ok(&["advantages", "--rewards", s(&path), "--group-size", "3"]);

    let groups: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(groups.len(), 3);
    for (g, chunk) in groups.iter().zip(rewards.chunks(3)) {
        let mean = chunk.iter().sum::<f64>() / 3.0;
        let std = (chunk.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        let got: Vec<f64> = g["advantages"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        for (a, r) in got.iter().zip(chunk) {
            assert!((a - (r - mean) / (std + 1e-4)).abs() < 1e-12);
        }
    }
    // the middle group is constant
    assert!(groups[1]["advantages"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.txt");
    fs::write(&path, "1\n2\n3\n").unwrap();
    let out = cli(&["advantages", "--rewards", s(&path), "--group-size", "2"]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).contains("panicked"));

    let out = cli(&["sample", "--catalog", s(&dir.path().join("missing.json")), "--n", "1", "--out", s(&path)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}
