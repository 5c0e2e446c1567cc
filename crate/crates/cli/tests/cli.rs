use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use servoclone::dataset::DemoDataset;
use servoclone::neural::checkpoint;
use servoclone::teleop::{decode_frame, ClientMessage, ServerMessage};
use tungstenite::Message;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_servoclone"));
    c.env_remove("SERVOCLONE_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// The last stderr line of a failed run, parsed.
fn failure(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not one-line JSON: {line}"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const SMALL: &str = "\
[train]
epochs = 1
batch_size = 8

[control]
time_limit = 4.0

[ablation]
checkpoints = [0.1, 0.2]
near_poses = 1
far_poses = 1
trials_per_pose = 1
";

#[test]
fn zero_minutes_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["record", "--minutes", "0", "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(failure(&out)["error"], "usage");
}

#[test]
fn record_train_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    let out = run(&["--config", p(&cfg), "record", "--minutes", "0.2", "--out", p(&data), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ds = DemoDataset::load(&data).unwrap();
    assert!(ds.total_demo_time >= 12.0);
    assert!(data.join("config.json").exists());

    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    for ckpt in [&a, &b] {
        let out = run(&["--config", p(&cfg), "train", "--data", p(&data), "--out", p(ckpt), "--seed", "5"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (_, header) = checkpoint::load(&a).unwrap();
    assert_eq!(header.seed, 5);
    assert_eq!(header.data.unwrap().frames, ds.frame_count());

    // evaluating the trained model writes the report schema
    let eval_dir = dir.path().join("eval");
    let out = run(&["--config", p(&cfg), "eval", "--model", p(&a), "--out", p(&eval_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(eval_dir.join("results.csv")).unwrap();
    assert!(csv.starts_with("checkpoint_minutes,frames,successes,trials,success_rate\n"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn train_without_data_is_a_file_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", p(&dir.path().join("missing")), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(failure(&out)["error"], "io");
}

#[test]
fn oracle_eval_succeeds_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--oracle", "--out", p(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[2..4], ["18", "18"]);
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn invalid_model_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("bad.ckpt");
    std::fs::write(&model, b"not a checkpoint").unwrap();
    let out = run(&["eval", "--model", p(&model), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(failure(&out)["error"], "checkpoint");
}

#[test]
fn ablate_short_data_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let data = dir.path().join("data");
    assert!(run(&["--config", p(&cfg), "record", "--minutes", "0.2", "--out", p(&data)]).status.success());

    // default checkpoints need 20 minutes
    let out = run(&["ablate", "--data", p(&data), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(failure(&out)["message"].as_str().unwrap().contains("minutes of demonstration, checkpoints need 20"));

    let r1 = dir.path().join("r1");
    let r2 = dir.path().join("r2");
    for r in [&r1, &r2] {
        let out = run(&["--config", p(&cfg), "ablate", "--data", p(&data), "--out", p(r), "--seed", "9"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = std::fs::read(r1.join("results.csv")).unwrap();
    assert_eq!(csv, std::fs::read(r2.join("results.csv")).unwrap());
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nepoch = 3\n");
    let out = run(&["--config", p(&cfg), "eval", "--oracle", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(failure(&out)["error"], "config");
    // the environment variable is the default config path
    let out = bin()
        .env("SERVOCLONE_CONFIG", &cfg)
        .args(["eval", "--oracle", "--out", p(dir.path())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn busy_port_is_a_bind_error() {
    let dir = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = run(&["teleop-serve", "--port", &port, "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(7));
    assert_eq!(failure(&out)["error"], "bind");
}

fn send(ws: &mut tungstenite::WebSocket<impl std::io::Read + std::io::Write>, msg: &ClientMessage) {
    ws.send(Message::text(serde_json::to_string(msg).unwrap())).unwrap();
}

fn twist(seq: u64) -> ClientMessage {
    ClientMessage::Twist { v: [0.02, 0.0, 0.0, 0.0, 0.0, 0.05], seq }
}

#[test]
fn scripted_teleop_session() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("teleop");
    let mut child = bin()
        .args(["teleop-serve", "--port", "0", "--lockstep", "--out", p(&data)])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening ").expect("listening line").to_string();
    let (mut ws, _) = tungstenite::connect(url.as_str()).unwrap();

    let first = ws.read().unwrap();
    let frame = decode_frame(&first.into_data()).unwrap();
    assert_eq!((frame.width, frame.height), (64, 64));

    let mut saw_error = false;
    let mut last_status = None;
    let mut absorb = |msg: Message| -> bool {
        match msg {
            Message::Text(t) => match serde_json::from_str::<ServerMessage>(t.as_str()).unwrap() {
                ServerMessage::Error { .. } => saw_error = true,
                s @ ServerMessage::Status { .. } => last_status = Some(s),
            },
            Message::Binary(b) => {
                decode_frame(&b).unwrap();
                return true;
            }
            _ => {}
        }
        false
    };

    // 60 s session, recording during [10, 25) and [40, 55); every twist
    // advances one period and is answered with a frame
    let mut seq = 0;
    for second in 0..60 {
        if second == 10 || second == 40 {
            send(&mut ws, &ClientMessage::Record { on: true });
        }
        if second == 25 || second == 55 {
            send(&mut ws, &ClientMessage::Record { on: false });
        }
        for _ in 0..30 {
            seq += 1;
            send(&mut ws, &twist(seq));
            while !absorb(ws.read().unwrap()) {}
        }
    }
    ws.send(Message::text("{not json")).unwrap();
    send(&mut ws, &ClientMessage::EndSession);

    while let Ok(msg) = ws.read() {
        if matches!(msg, Message::Close(_)) {
            break;
        }
        absorb(msg);
    }
    assert!(saw_error, "malformed message must produce an error frame");
    let status = child.wait().unwrap();
    assert!(status.success());

    let ds = DemoDataset::load(&data).unwrap();
    assert!((ds.total_demo_time - 30.0).abs() < 1e-9, "{}", ds.total_demo_time);
    assert_eq!(ds.frame_count(), 90);
    match last_status.unwrap() {
        ServerMessage::Status { demo_time, frames, .. } => {
            assert!((demo_time - 30.0).abs() < 1e-9);
            assert_eq!(frames, 90);
        }
        other => panic!("{other:?}"),
    }

    // the teleop dataset trains
    let cfg = write_config(dir.path(), SMALL);
    let out = run(&["--config", p(&cfg), "train", "--data", p(&data), "--out", p(&dir.path().join("t.ckpt"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
