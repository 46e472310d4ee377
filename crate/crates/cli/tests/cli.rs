use std::path::Path;
use std::process::{Command, Output};

fn racon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_racon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_succeeds() {
    let o = racon(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for sub in ["gen-data", "build-db", "train", "eval", "serve", "inspect-db", "print-config"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    for sub in ["gen-data", "build-db", "train", "eval", "serve", "inspect-db", "print-config"] {
        assert_eq!(code(&racon(&[sub, "--help"])), 0, "{sub} --help");
    }
}

#[test]
fn missing_input_flag_names_it() {
    let o = racon(&["build-db", "--out", "x.db"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--in"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_and_subcommands_are_rejected() {
    assert_eq!(code(&racon(&["train", "--bogus"])), 1);
    assert_eq!(code(&racon(&["frobnicate"])), 1);
    assert_eq!(code(&racon(&[])), 1);
}

#[test]
fn validation_and_runtime_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.txt");
    let o = racon(&["gen-data", "--style", "ballet", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown style"));

    let missing = dir.path().join("missing.txt");
    let o = racon(&["build-db", "--in", p(&missing), "--out", p(&dir.path().join("x.db"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.txt"));

    let o = racon(&["print-config", "--lr", "-1"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn config_precedence_flag_over_file_over_default() {
    let dir = tempfile::tempdir().unwrap();
    let parse = |o: Output| -> toml::Table {
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        toml::from_str(&String::from_utf8(o.stdout).unwrap()).unwrap()
    };
    let defaults = parse(racon(&["print-config"]));
    assert_eq!(defaults["iterations"].as_integer(), Some(200));
    assert_eq!(defaults["horizon"].as_integer(), Some(150));
    assert_eq!(defaults["seed"].as_integer(), Some(0));

    let file = dir.path().join("cfg.toml");
    std::fs::write(&file, "iterations = 7\nhorizon = 90\n").unwrap();
    let from_file = parse(racon(&["print-config", "--config", p(&file)]));
    assert_eq!(from_file["iterations"].as_integer(), Some(7));
    assert_eq!(from_file["horizon"].as_integer(), Some(90));
    assert_eq!(from_file["seed"].as_integer(), Some(0));

    let flagged = parse(racon(&["print-config", "--config", p(&file), "--iterations", "3", "--seed", "5"]));
    assert_eq!(flagged["iterations"].as_integer(), Some(3));
    assert_eq!(flagged["horizon"].as_integer(), Some(90));
    assert_eq!(flagged["seed"].as_integer(), Some(5));

    let o = racon(&["print-config", "--eval", "--episodes", "12"]);
    let eval = parse(o);
    assert_eq!(eval["episodes"].as_integer(), Some(12));
    assert_eq!(eval["max_len"].as_integer(), Some(300));

    std::fs::write(&file, "iterations = \"many\"\n").unwrap();
    let o = racon(&["print-config", "--config", p(&file)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn smoke_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |o: Output, stage: &str| {
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
        o
    };
    for (style, seed) in [("walk", "1"), ("turn", "2")] {
        let clips = d.join(format!("{style}.txt"));
        ok(racon(&["gen-data", "--style", style, "--count", "120", "--seed", seed, "--out", p(&clips)]), "gen-data");
        assert!(clips.exists());
        let db = d.join(format!("{style}.db"));
        ok(racon(&["build-db", "--in", p(&clips), "--out", p(&db)]), "build-db");
        assert!(db.exists());
    }
    let o = ok(racon(&["inspect-db", "--db", p(&d.join("walk.db"))]), "inspect-db");
    let info: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(info["name"], "walk");
    assert_eq!(info["clips"], 120);
    assert_eq!(info["key_dim"], 30);

    let cfg = d.join("small.toml");
    std::fs::write(
        &cfg,
        "env_count = 2\nhorizon = 45\nminibatch = 30\ndisc_batch = 32\ndisc_steps = 1\n\
         retriever_hidden = [16, 16]\ncontroller_hidden = [16, 16]\nvalue_hidden = [16, 16]\ndisc_hidden = [16, 16]\n",
    )
    .unwrap();
    let run = d.join("run");
    let dbs = format!("{},{}", p(&d.join("walk.db")), p(&d.join("turn.db")));
    ok(
        racon(&["train", "--config", p(&cfg), "--db", &dbs, "--iterations", "3", "--seed", "9", "--out", p(&run)]),
        "train",
    );
    for f in ["metrics.jsonl", "checkpoint.bin", "checkpoint-00003.bin", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let lines = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);

    let report = d.join("report.json");
    let records = d.join("records.jsonl");
    ok(
        racon(&[
            "eval",
            "--checkpoint",
            p(&run.join("checkpoint-00003.bin")),
            "--db",
            &dbs,
            "--episodes",
            "4",
            "--max-len",
            "60",
            "--fid-samples",
            "300",
            "--mmodality-goals",
            "2",
            "--mmodality-runs",
            "2",
            "--out",
            p(&report),
            "--records",
            p(&records),
        ]),
        "eval",
    );
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for k in ["mve", "trate", "len", "fid", "mmodality", "mve_retrieved"] {
        assert!(r[k].as_f64().unwrap().is_finite(), "{k}");
    }
    assert_eq!(r["episodes"], 4);
    assert_eq!(std::fs::read_to_string(&records).unwrap().lines().count(), 4);

    // same seed, same report
    let again = d.join("again.json");
    ok(
        racon(&[
            "eval", "--checkpoint", p(&run.join("checkpoint-00003.bin")), "--db", &dbs, "--episodes", "4",
            "--max-len", "60", "--fid-samples", "300", "--mmodality-goals", "2", "--mmodality-runs", "2",
            "--out", p(&again),
        ]),
        "eval again",
    );
    assert_eq!(std::fs::read_to_string(&report).unwrap(), std::fs::read_to_string(&again).unwrap());

    // resume to 4 iterations
    ok(
        racon(&["train", "--resume", p(&run.join("checkpoint.bin")), "--db", &dbs, "--iterations", "4", "--out", p(&run)]),
        "resume",
    );
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 4);

    let o = racon(&["eval", "--checkpoint", p(&run.join("missing.bin")), "--db", &dbs]);
    assert_eq!(code(&o), 2);

    serve_honours_port_env(&run.join("checkpoint-00003.bin"), &dbs);
}

fn serve_honours_port_env(ckpt: &Path, dbs: &str) {
    use std::io::{Read, Write};
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_racon"))
        .args(["serve", "--checkpoint", p(ckpt), "--dbs", dbs, "--host", "127.0.0.1"])
        .env("RACON_PORT", port.to_string())
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    let deadline = std::time::Instant::now() + std::time::Duration::from_secs(10);
    let body = loop {
        if let Ok(mut s) = std::net::TcpStream::connect(("127.0.0.1", port)) {
            s.write_all(b"GET /v1/databases HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
            let mut text = String::new();
            s.read_to_string(&mut text).unwrap();
            break text;
        }
        assert!(std::time::Instant::now() < deadline, "server did not come up on RACON_PORT");
        std::thread::sleep(std::time::Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    assert!(body.contains("\"walk\"") && body.contains("\"turn\""), "{body}");
}

#[test]
fn serve_rejects_missing_checkpoint_and_bad_port() {
    let dir = tempfile::tempdir().unwrap();
    let o = racon(&["serve", "--checkpoint", p(&dir.path().join("nope.bin")), "--dbs", "a.db"]);
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_racon"))
        .args(["serve", "--checkpoint", "x", "--dbs", "y", "--port", "notaport"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}
