use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamvq"))
}

fn write_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "seed": 11,
        "out": out,
        "snapshot_cadence": 1000,
        "corpus": {"items": 600, "users": 40, "groups": 6, "dim": 8},
        "stream": {"impressions": 3500},
        "train": {"dim": 8, "K": 16, "batch_size": 64},
        "serve": {"probe": 8, "target_size": 10, "chunk": 2},
        "eval": {"users": 10}
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed:\n{}{}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn snapshot_files(out: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(out.join("snapshots"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("snapshot-"))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_is_a_function_of_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("unused"));
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        run(bin().args(["gen", "--config"]).arg(&cfg).arg("--out").arg(out));
    }
    run(bin()
        .args(["gen", "--seed", "12", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&c));
    for f in ["items.csv", "users.csv", "events.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(
        fs::read(a.join("events.jsonl")).unwrap(),
        fs::read(c.join("events.jsonl")).unwrap()
    );
    // flags are echoed into the run directory
    let echoed: Value = serde_json::from_slice(&fs::read(c.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 12);
}

#[test]
fn train_snapshot_count_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let cfg = write_config(dir.path(), &full);
    run(bin().args(["gen", "--config"]).arg(&cfg));
    run(bin().args(["train", "--config"]).arg(&cfg));
    // 3500 impressions at cadence 1000: start, 3 boundaries, end
    let snaps = snapshot_files(&full);
    assert_eq!(snaps.len(), 5);

    // interrupted twice, then resumed to the end
    let cut = dir.path().join("cut");
    let events = full.join("events.jsonl");
    let base = || {
        let mut c = bin();
        c.args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&cut)
            .arg("--events")
            .arg(&events);
        c
    };
    run(base().args(["--max-events", "1234"]));
    run(base().args(["--resume", "--max-events", "1000"]));
    run(base().arg("--resume"));
    assert_eq!(snapshot_files(&cut), snaps);
    for s in &snaps {
        assert_eq!(
            fs::read(full.join("snapshots").join(s)).unwrap(),
            fs::read(cut.join("snapshots").join(s)).unwrap(),
            "{s}"
        );
    }
    assert_eq!(
        fs::read(full.join("metrics.csv")).unwrap(),
        fs::read(cut.join("metrics.csv")).unwrap()
    );

    let out = run(bin().args(["eval", "--config"]).arg(&cfg));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("recall_full_probe_vs_quantized"), "{text}");
    assert!(full.join("report.csv").exists());

    // a corrupted snapshot makes eval fail
    let victim = full.join("snapshots").join(&snaps[2]);
    let mut bytes = fs::read(&victim).unwrap();
    let n = bytes.len();
    bytes.truncate(n - 5);
    fs::write(&victim, bytes).unwrap();
    let out = bin().args(["eval", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL snapshot-000002"));
}

#[test]
fn serve_reports_missing_snapshots_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &out);
    run(bin().args(["gen", "--config"]).arg(&cfg));

    let mut child = bin()
        .args(["serve", "--config"])
        .arg(&cfg)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut stdout = std::io::BufReader::new(child.stdout.take().unwrap());
    let mut ask = |line: &str| -> Value {
        writeln!(stdin, "{line}").unwrap();
        let mut reply = String::new();
        std::io::BufRead::read_line(&mut stdout, &mut reply).unwrap();
        serde_json::from_str(&reply).unwrap()
    };
    assert_eq!(ask(r#"{"user": 1}"#)["error"]["code"], "no_snapshot");

    run(bin().args(["train", "--config"]).arg(&cfg));
    assert_eq!(ask(r#"{"cmd": "reload"}"#)["snapshot"], 4);
    let r = ask(r#"{"user": 1, "S": 3, "l": 1}"#);
    assert_eq!(r["snapshot"], 4);
    assert_eq!(r["items"].as_array().unwrap().len(), 3);
    assert_eq!(ask(r#"{"user": 1, "bogus": 2}"#)["error"]["code"], "bad_request");
    drop(stdin);
    assert!(child.wait().unwrap().success());
}

#[test]
fn bad_flags_and_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"train": {"KK": 3}}"#).unwrap();
    let out = bin().args(["gen", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    let out = bin().args(["train", "--disturbance", "maybe"]).output().unwrap();
    assert!(!out.status.success());
}
