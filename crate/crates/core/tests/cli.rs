use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ntm_arith::checkpoint::Checkpoint;
use ntm_arith::evaluation::REPORT_HEADER;
use ntm_arith::tasks::parse_line;
use ntm_arith::training::CURVE_HEADER;

fn ntm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntm")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 12] = [
    "--hidden",
    "12",
    "--mem-rows",
    "12",
    "--mem-cols",
    "6",
    "--max-bits",
    "3",
    "--examples",
    "120",
    "--seed",
    "3",
];

#[test]
fn no_arguments_prints_usage_and_fails() {
    let o = ntm(&[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_rejected() {
    let o = ntm(&["train", "--learning-speed", "3"]);
    assert!(!o.status.success());
}

#[test]
fn train_defaults_are_printed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    // examples=0 keeps the run instant while every other knob stays at its default
    fs::write(&cfg, "examples=0\n").unwrap();
    let o = ntm(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    for line in [
        "task=add",
        "controller=ff",
        "hidden=100",
        "lr=0.0001",
        "rmsprop-decay=0.95",
        "max-bits=8",
        "mem-rows=128",
        "mem-cols=20",
        "clip=10",
        "curve-window=1000",
    ] {
        assert!(out.lines().any(|l| l == line), "missing {line} in\n{out}");
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "# run\nexamples=0\nlr=0.5\nmax_bits=5\n").unwrap();
    let out = stdout(&ntm(&["train", "--config", p(&cfg), "--lr", "0.25"]));
    assert!(out.contains("lr=0.25\n"));
    assert!(out.contains("max-bits=5\n"));

    fs::write(&cfg, "speed=3\n").unwrap();
    let o = ntm(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
}

#[test]
fn invalid_values_fail_with_one_line() {
    let o = ntm(&["train", "--rmsprop-decay", "1.5", "--examples", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);

    let o = ntm(&["eval", "--checkpoint", "/nonexistent/model.ntma"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_trace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ntma");
    let curve = dir.path().join("curve.csv");
    let mut args = vec!["train", "--checkpoint", p(&ckpt), "--curve", p(&curve)];
    args.extend(SMALL);
    let o = ntm(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let text = fs::read_to_string(&curve).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CURVE_HEADER));
    assert_eq!(lines.count(), 120);
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.train.examples_seen, 120);
    assert_eq!(loaded.model.spec.mem_rows, 12);

    let report = dir.path().join("report.csv");
    let o = ntm(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--lengths",
        "4,6",
        "--trials",
        "5",
        "--out",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().next(), Some(REPORT_HEADER));
    assert!(text.lines().nth(1).unwrap().starts_with("4,5,"));
    assert!(text.lines().nth(2).unwrap().starts_with("6,5,"));

    let tdir = dir.path().join("trace");
    let o = ntm(&[
        "trace",
        "--checkpoint",
        p(&ckpt),
        "--a",
        "5",
        "--b",
        "3",
        "--bits",
        "3",
        "--out",
        p(&tdir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "read_weights.csv",
        "write_weights.csv",
        "read_weights.pgm",
        "write_weights.pgm",
    ] {
        assert!(tdir.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(tdir.join("marker.txt")).unwrap(), "7\n");

    let o = ntm(&[
        "trace",
        "--checkpoint",
        p(&ckpt),
        "--a",
        "9",
        "--b",
        "3",
        "--bits",
        "3",
        "--out",
        p(&tdir),
    ]);
    assert_eq!(o.status.code(), Some(1), "operand overflow must fail");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.ntma");
    let mut args = vec!["train", "--checkpoint", p(&full)];
    args.extend(SMALL);
    assert!(ntm(&args).status.success());

    let part = dir.path().join("part.ntma");
    let mut args = vec!["train", "--checkpoint", p(&part)];
    args.extend(SMALL);
    let at = args.iter().position(|a| *a == "120").unwrap();
    args[at] = "50";
    assert!(ntm(&args).status.success());
    args[at] = "120";
    args.extend(["--resume", p(&part)]);
    let o = ntm(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&full).unwrap(), fs::read(&part).unwrap());
}

#[test]
fn gen_is_seeded_and_parseable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for out in [&a, &b] {
        let o = ntm(&[
            "gen",
            "--task",
            "mul",
            "--count",
            "50",
            "--max-bits",
            "6",
            "--seed",
            "4",
            "--out",
            p(out),
        ]);
        assert!(o.status.success());
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 50);
    for line in text.lines() {
        let ex = parse_line(line).unwrap();
        assert!(ex.bits() <= 6);
        assert_eq!(ex.to_line(), line);
    }
}

#[test]
fn eval_defaults_use_the_standard_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ntma");
    let mut args = vec!["train", "--checkpoint", p(&ckpt)];
    args.extend(SMALL);
    let at = args.iter().position(|a| *a == "120").unwrap();
    args[at] = "0";
    assert!(ntm(&args).status.success());
    let o = ntm(&["eval", "--checkpoint", p(&ckpt), "--trials", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("lengths=8,10,12,16,20,24,28,32,36,42,48\n"));
    let rows: Vec<usize> = out
        .lines()
        .skip_while(|l| *l != REPORT_HEADER)
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(rows, vec![8, 10, 12, 16, 20, 24, 28, 32, 36, 42, 48]);
}

#[test]
fn params_lists_all_architectures() {
    let out = stdout(&ntm(&["params"]));
    for name in ["FF-NTM1: total 12271", "LSTM-NTM: total 59471", "3h-LSTM: total 331139"] {
        assert!(out.contains(name), "{out}");
    }
}
