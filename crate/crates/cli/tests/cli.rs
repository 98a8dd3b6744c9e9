use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn turnsight(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_turnsight"))
        .arg("--out-dir")
        .arg(dir)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: [&str; 5] = ["synth", "--dialogues", "5", "--duration", "30"];

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(turnsight(a.path(), &SMALL));
    ok(turnsight(b.path(), &SMALL));
    for f in ["stream.jsonl", "labels.jsonl", "split.json", "manifest.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let c = tempfile::tempdir().unwrap();
    ok(turnsight(c.path(), &[&SMALL[..], &["--seed", "7"]].concat()));
    assert_ne!(
        fs::read(a.path().join("stream.jsonl")).unwrap(),
        fs::read(c.path().join("stream.jsonl")).unwrap()
    );
    let stream = fs::read_to_string(a.path().join("stream.jsonl")).unwrap();
    assert_eq!(stream.lines().count(), 150);
}

#[test]
fn eval_of_gold_predictions_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    ok(turnsight(d.path(), &SMALL));
    let labels = fs::read_to_string(d.path().join("labels.jsonl")).unwrap();
    let mut preds = String::new();
    for line in labels.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let one_hot = |names: [&str; 4], key: &str| -> Vec<f64> {
            names.iter().map(|n| if v[key] == *n { 1.0 } else { 0.0 }).collect()
        };
        let p = serde_json::json!({
            "audio_id": v["audio_id"],
            "t": v["t"],
            "high": v["high"],
            "low": v["low"],
            "p_high": one_hot(["Constatives", "Directives", "Commissives", "Acknowledgments"], "high"),
            "p_low": one_hot(["Continuation", "TurnTaking", "Interruption", "Backchannel"], "low"),
        });
        preds.push_str(&p.to_string());
        preds.push('\n');
    }
    let pf = d.path().join("gold_predictions.jsonl");
    fs::write(&pf, preds).unwrap();
    ok(turnsight(d.path(), &["eval", "--predictions", pf.to_str().unwrap()]));
    let m = json(&d.path().join("metrics.json"));
    assert_eq!(m["high"]["macro_f1"], 1.0);
    assert_eq!(m["low"]["macro_f1"], 1.0);
    for level in ["high", "low"] {
        for (name, c) in m[level]["counts"].as_object().unwrap() {
            let present = c["tp"].as_u64().unwrap() + c["fn"].as_u64().unwrap() > 0;
            if present {
                assert_eq!(m[level]["f1"][name], 1.0, "{level} {name}");
            }
        }
    }
}

#[test]
fn stats_on_constructed_trace() {
    let d = tempfile::tempdir().unwrap();
    // Speaker A talks in [0,2) [3,5) [6,9) [11,13); B in [8,10).
    let a = [1, 1, 0, 1, 1, 0, 1, 1, 1, 0, 0, 1, 1];
    let b = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0];
    let mut csv = String::from("a,b\n");
    for (x, y) in a.iter().zip(b) {
        csv.push_str(&format!("{x},{y}\n"));
    }
    let vad = d.path().join("vad.csv");
    fs::write(&vad, csv).unwrap();
    let out = ok(turnsight(d.path(), &["stats", "--vad", vad.to_str().unwrap()]));
    let table = json(&d.path().join("events.json"));
    let rows = table["rows"].as_array().unwrap();
    let counts: Vec<u64> = rows.iter().map(|r| r["count"].as_u64().unwrap()).collect();
    let ticks: Vec<u64> = rows.iter().map(|r| r["duration_ticks"].as_u64().unwrap()).collect();
    assert_eq!(counts, vec![5, 2, 1, 1]);
    assert_eq!(ticks, vec![9, 2, 1, 1]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout, fs::read_to_string(d.path().join("events.csv")).unwrap());
    assert!(stdout.starts_with("event_type,events_per_min,cumulative_duration_pct\n"));
    // 5 IPUs over 13 seconds.
    assert!(stdout.contains(&format!("IPU,{:.4},{:.4}", 5.0 * 60.0 / 13.0, 900.0 / 13.0)));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| turnsight(d.path(), args).status.code();
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["run"]), Some(2), "missing stream is a usage error");
    assert_eq!(code(&["synth", "--set", "window=0"]), Some(2));
    assert_eq!(code(&["synth", "--set", "no_such_key=1"]), Some(2));
    let bad = d.path().join("bad.jsonl");
    fs::write(&bad, "{\"audio_id\": 3}\n").unwrap();
    assert_eq!(code(&["run", "--stream", bad.to_str().unwrap()]), Some(3));
    assert_eq!(code(&["run", "--stream", bad.to_str().unwrap(), "--lenient"]), Some(0));
    // Exploding learning rate drives the loss to non-finite values.
    ok(turnsight(d.path(), &SMALL));
    assert_eq!(
        code(&["train-perceiver", "--epochs", "3", "--lr", "1e300", "--set", "train.optim.clip_norm=1e300"]),
        Some(4)
    );
}

#[test]
fn full_pipeline_writes_manifest() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(turnsight(p, &SMALL));
    ok(turnsight(p, &["train-perceiver", "--epochs", "1"]));
    ok(turnsight(p, &["train-selector", "--epochs", "1"]));
    ok(turnsight(p, &["train-decoder", "--epochs", "1"]));
    let out = ok(turnsight(p, &["run", "--backend", "trainable"]));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let ticks = summary["ticks"].as_u64().unwrap();
    assert_eq!(ticks, 30, "one test dialogue of 30 seconds");
    ok(turnsight(p, &["eval"]));
    for f in ["outputs.jsonl", "predictions.jsonl", "selections.jsonl", "rationales.jsonl", "timings.jsonl"] {
        let body = fs::read_to_string(p.join(f)).unwrap();
        assert_eq!(body.lines().count() as u64, ticks, "{f}");
    }
    let r: serde_json::Value =
        serde_json::from_str(fs::read_to_string(p.join("rationales.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    for k in ["audio_id", "t", "rationale", "latency_ms", "backend"] {
        assert!(r.get(k).is_some(), "rationale line lacks {k}");
    }
    let m = json(&p.join("manifest.json"));
    for cmd in ["synth", "train-perceiver", "train-selector", "train-decoder", "run", "eval"] {
        assert!(m["commands"].get(cmd).is_some(), "{cmd} not recorded");
    }
    assert_eq!(m["seed"], 42);
    let files = m["files"].as_object().unwrap();
    for f in ["stream.jsonl", "perceiver.json", "selector.json", "decoder.json", "outputs.jsonl", "metrics.json"] {
        let sha = files[f]["sha256"].as_str().unwrap();
        assert_eq!(sha.len(), 64);
    }
    assert!(files.get("timings.jsonl").is_none());
    let vol: Vec<&str> = m["volatile"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(vol, vec!["latency.json", "rationales.jsonl", "timings.jsonl"]);
}
