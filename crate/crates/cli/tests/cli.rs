use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sftok(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sftok"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("SFTOK_DEVICE")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("JSON error record on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn theory_check_writes_one_record_per_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = sftok(
        &["theory-check", "--instances", "20", "--seed", "3", "--out", "th.jsonl"],
        dir.path(),
    );
    ok(&out);
    let text = std::fs::read_to_string(dir.path().join("th.jsonl")).unwrap();
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 60);
    for r in &rows {
        assert_eq!(r["loss_holds"], true);
        assert_eq!(r["identity_holds"], true);
        assert_eq!(r["accuracy_holds"], true);
        assert!(r["gap"].as_f64().unwrap() >= -1e-12);
    }
    // Same seed, sequential execution: identical report.
    let again = sftok(
        &["--sequential", "theory-check", "--instances", "20", "--seed", "3"],
        dir.path(),
    );
    ok(&again);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn unsupported_device_is_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sftok"))
        .args(["theory-check", "--instances", "1"])
        .current_dir(dir.path())
        .env("SFTOK_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let e = error_record(&out);
    assert_eq!(e["error"]["command"], "theory-check");
    assert_eq!(e["error"]["kind"], "InvalidArgument");
}

#[test]
fn bad_step_list_is_rejected_by_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let out = sftok(
        &["reconstruct", "--checkpoint", "x.ckpt", "--steps", "0..4", "--out", "r"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("positive"));
}

#[test]
fn plot_refuses_mixed_configs_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let csv =
        "step,stage,term,value,config_hash\n0,1,masked_ce,4.0,aaa\n1,1,masked_ce,3.5,aaa\n0,1,masked_ce,4.1,bbb\n";
    std::fs::write(dir.path().join("losses.csv"), csv).unwrap();
    let refused = sftok(&["plot", "--input", "losses.csv", "--out", "l.svg"], dir.path());
    assert_eq!(refused.status.code(), Some(1));
    assert!(error_record(&refused)["error"]["message"]
        .as_str()
        .unwrap()
        .contains("config"));
    assert!(!dir.path().join("l.svg").exists());
    ok(&sftok(
        &["plot", "--input", "losses.csv", "--out", "l.svg", "--force"],
        dir.path(),
    ));
    let svg = std::fs::read_to_string(dir.path().join("l.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

/// Tiny run through every artifact-producing command.
#[test]
fn train_encode_decode_generate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&sftok(
        &[
            "train",
            "--profile",
            "ci",
            "--stages",
            "1,2",
            "--max-steps",
            "4",
            "--out",
            "run",
        ],
        d,
    ));
    assert!(d.join("run/stage2/final.ckpt").exists());
    let ck = ["--checkpoint", "run/stage2/final.ckpt"];

    let args =
        |rest: &[&'static str]| -> Vec<&str> { rest[..1].iter().chain(&ck).chain(&rest[1..]).copied().collect() };
    ok(&sftok(&args(&["encode", "--count", "6", "--out", "tok/lat.json"]), d));
    let lat: Value = serde_json::from_slice(&std::fs::read(d.join("tok/lat.json")).unwrap()).unwrap();
    assert_eq!(lat["batch"], 6);
    assert_eq!(
        lat["ids"].as_array().unwrap().len(),
        6 * lat["len"].as_u64().unwrap() as usize
    );
    assert!(!lat["config_hash"].as_str().unwrap().is_empty());

    ok(&sftok(
        &args(&["decode", "--tokens", "tok/lat.json", "--steps", "2", "--out", "dec"]),
        d,
    ));
    assert_eq!(
        std::fs::read(d.join("tok/lat.json")).unwrap(),
        std::fs::read(d.join("dec/latents.json")).unwrap()
    );
    assert!(d.join("dec/decoded.png").exists());

    // A token file for another tokenizer shape is refused.
    std::fs::write(d.join("bad.json"), r#"{"batch":1,"len":3,"vocab":5,"ids":[0,1,2]}"#).unwrap();
    let bad = sftok(&args(&["decode", "--tokens", "bad.json", "--out", "dec2"]), d);
    assert_eq!(bad.status.code(), Some(1));

    ok(&sftok(
        &args(&[
            "reconstruct",
            "--steps",
            "1,2",
            "--images",
            "8",
            "--grid",
            "2",
            "--out",
            "rec",
        ]),
        d,
    ));
    let table = std::fs::read_to_string(d.join("rec/reconstruct.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);

    ok(&sftok(
        &args(&[
            "encode",
            "--corpus",
            "--split",
            "train",
            "--count",
            "16",
            "--out",
            "tok/corpus.bin",
        ]),
        d,
    ));
    ok(&sftok(
        &args(&[
            "train-generator",
            "--corpus",
            "tok/corpus.bin",
            "--steps",
            "6",
            "--out",
            "gen",
        ]),
        d,
    ));
    for out in ["s1", "s2"] {
        ok(&sftok(
            &args(&[
                "generate",
                "--generator",
                "gen/final.ckpt",
                "--labels",
                "0,1,2",
                "--seed",
                "4",
                "--out",
                out,
            ]),
            d,
        ));
    }
    let a = std::fs::read(d.join("s1/generated.bin")).unwrap();
    assert_eq!(a, std::fs::read(d.join("s2/generated.bin")).unwrap());
    assert_eq!(
        std::fs::read(d.join("s1/generated.png")).unwrap(),
        std::fs::read(d.join("s2/generated.png")).unwrap()
    );
}
