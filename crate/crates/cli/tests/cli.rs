use std::io::Write;
use std::process::{Command, Stdio};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_topic-turn"));
    c.env("RUST_LOG", "warn");
    c
}

fn ok(c: &mut Command) -> String {
    let out = c.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_extract_split_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let table = dir.path().join("f.csv");
    ok(bin().args(["--seed", "1", "synth", "--out"]).arg(&data).args(["--utterances", "90", "--sessions", "3"]));
    let msg = ok(bin().arg("extract").arg("--data").arg(&data).arg("--out").arg(&table));
    assert!(msg.starts_with("90 examples"), "{msg}");
    let split: serde_json::Value = serde_json::from_str(&ok(bin().arg("split").arg("--features").arg(&table))).unwrap();
    assert!(split["holdout_session_id"].is_string());
    let table_text = ok(bin().args(["--model", "spb", "baseline", "--features"]).arg(&table));
    assert!(table_text.contains("spb"));
}

#[test]
fn stream_reads_frames_and_writes_decisions() {
    let sr = 16_000usize;
    let mut p1 = vec![0i16; 15 * sr];
    for i in 5 * sr..10 * sr {
        p1[i] = (0.3 * 32767.0 * (2.0 * std::f64::consts::PI * 150.0 * i as f64 / sr as f64).sin()) as i16;
    }
    let p2 = vec![0i16; 15 * sr];
    let mut input = Vec::new();
    for (k, (a, b)) in p1.chunks(1600).zip(p2.chunks(1600)).enumerate() {
        for (pid, c) in [("p1", a), ("p2", b)] {
            let body = serde_json::json!({
                "type": "audio",
                "participant": pid,
                "start_sample": k * 1600,
                "samples": c,
            })
            .to_string();
            input.extend((body.len() as u32).to_le_bytes());
            input.extend(body.as_bytes());
        }
    }
    let mut child = bin()
        .args(["stream", "--participants", "p1,p2"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&input).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["utterance_id"], "p1-0001");
    assert_eq!(lines[0]["policy_action"], "wait");
    assert!((lines[0]["t_decision"].as_f64().unwrap() - 12.0).abs() < 0.1);
}
