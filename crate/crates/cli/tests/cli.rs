use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capgraph"))
        .current_dir(data())
        .args(args)
        .output()
        .unwrap()
}

fn run_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_capgraph"))
        .current_dir(data())
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn scratch(name: &str, body: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn json(out: &[u8]) -> serde_json::Value {
    serde_json::from_slice(out).unwrap()
}

#[test]
fn stdin_and_file_agree() {
    let text = std::fs::read_to_string(data().join("caption.txt")).unwrap();
    let piped = run_stdin(&["parse"], &text);
    assert!(piped.status.success());
    assert_eq!(piped.stdout, run(&["parse", "caption.txt"]).stdout);
}

#[test]
fn parse_error_reports_kind_and_line() {
    let p = scratch("no_subtitle.txt", "%%Overall Description%%\nA street.\n");
    let out = run(&["--json-errors", "parse", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = json(&out.stderr);
    assert_eq!(err["error"]["kind"], "UnknownSubtitle");
    assert_eq!(err["error"]["line"], 2);
}

#[test]
fn validation_errors_exit_one() {
    let p = scratch(
        "dangling.txt",
        "%%Overall Description%%\n&&Theme&& A cat.\n%%Object List%%\n<cat>(category: cat; description: a cat; color: black)\n%%Relationships%%\n<cat> [near] <ghost>\n",
    );
    let out = run(&["validate", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out.stdout)["ok"], false);
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["consistency", "answers.json", "--rho", "1.5"][..],
        &["--provider", "http", "consistency", "answers.json"],
        &["prompt", "--slot", "no_such_slot=x"],
        &[
            "regionqa",
            "point",
            "graph.json",
            "--box",
            "0.5,0.5,0.1,0.9",
        ],
    ] {
        assert_eq!(run(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn unreachable_backend_exits_three() {
    let out = run(&[
        "ground",
        "caption.txt",
        "--image",
        "img01",
        "--endpoint",
        "http://127.0.0.1:9",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn stats_reports_bad_lines_and_exits_one() {
    let good = std::fs::read_to_string(data().join("dataset.jsonl")).unwrap();
    let first = good.lines().next().unwrap();
    let p = scratch("mixed.jsonl", &format!("{first}\n{{\"image_id\": 7}}\n"));
    let out = run(&["stats", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let v = json(&out.stdout);
    assert_eq!(v["errors"][0]["line"], 2);
    assert_eq!(v["images"], 1);
}

#[test]
fn flags_override_config_file() {
    let out = run(&[
        "--config",
        "config.json",
        "consistency",
        "answers.json",
        "--rho",
        "0.5",
    ]);
    assert!(out.status.success());
    let v = json(&out.stdout);
    assert_eq!(v["config"]["thresholds"]["rho"], 0.5);
    assert_eq!(v["config"]["thresholds"]["tau_name"], 0.8);
}

#[test]
fn ground_trace_lists_every_object() {
    let out = run(&[
        "--fixtures",
        "fixtures.json",
        "ground",
        "caption.txt",
        "--image",
        "img01",
        "--trace",
    ]);
    assert!(out.status.success());
    let v = json(&out.stdout);
    let outcomes = v["outcomes"].as_array().unwrap();
    assert_eq!(
        outcomes.len(),
        v["graph"]["objects"].as_array().unwrap().len()
    );
}
