use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spine-cascade"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn synth(dir: &Path, count: usize, seed: u64) {
    ok(&["synth", "--count", &count.to_string(), "--seed", &seed.to_string(), "--test", "2", "--out", dir.to_str().unwrap()]);
}

const TINY_TRAIN: &[&str] = &["--stages", "1", "--epochs", "1", "--encoder", "tiny", "--seed", "5"];

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 6, 7);
    synth(&b, 6, 7);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 7);
    assert_eq!(ta, tb);
    let c = tmp.path().join("c");
    synth(&c, 6, 8);
    assert_ne!(tree(&c), ta);
}

#[test]
fn train_infer_eval_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 5, 3);
    let manifest = data.join("manifest.csv");
    let m = manifest.to_str().unwrap();
    let (m1, m2) = (tmp.path().join("m1.spcm"), tmp.path().join("m2.spcm"));
    for out in [&m1, &m2] {
        let mut args = vec!["train", "--manifest", m, "--out-model", out.to_str().unwrap()];
        args.extend_from_slice(TINY_TRAIN);
        ok(&args);
    }
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());

    let pred = tmp.path().join("pred.csv");
    ok(&["infer", "--model", m1.to_str().unwrap(), "--manifest", m, "--out", pred.to_str().unwrap()]);
    let text = fs::read_to_string(&pred).unwrap();
    assert_eq!(text.lines().count(), 5);
    for line in text.lines() {
        let numeric = line.split(',').skip(1).filter(|f| !f.contains('=')).count();
        assert_eq!(numeric, 136);
        assert!(line.contains(",mse="));
    }

    let single = tmp.path().join("one.csv");
    let img = data.join("spine_0000.pgm");
    ok(&["infer", "--model", m1.to_str().unwrap(), "--image", img.to_str().unwrap(), "--out", single.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(&single).unwrap().lines().count(), 1);

    let e1 = ok(&["eval", "--model", m1.to_str().unwrap(), "--manifest", m, "--split", "test"]);
    let e2 = ok(&["eval", "--model", m2.to_str().unwrap(), "--manifest", m, "--split", "test"]);
    assert_eq!(e1, e2);
    assert!(e1.lines().next().unwrap().starts_with("stage"));
    assert!(e1.lines().nth(1).unwrap().starts_with('0'));
    assert!(e1.lines().nth(2).unwrap().starts_with('1'));
    assert!(e1.contains("final MSE") && e1.contains("SMAPE"));

    let plots = tmp.path().join("plots");
    ok(&[
        "plot", "--model", m1.to_str().unwrap(), "--manifest", m, "--split", "test", "--compare", m2.to_str().unwrap(),
        "--overlays", "1", "--out", plots.to_str().unwrap(),
    ]);
    assert!(plots.join("stage_errors.pgm").exists() && plots.join("overlay_000.pgm").exists());

    let sens = ok(&[
        "experiment", "init-sensitivity", "--model", m1.to_str().unwrap(), "--manifest", m, "--split", "test",
        "--sigmas", "0,0.02", "--draws", "2",
    ]);
    assert_eq!(sens.lines().filter(|l| l.starts_with('0')).count(), 2);
}

#[test]
fn failures_exit_with_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| run(args).status.code().unwrap();

    let usage = run(&["train", "--no-such-flag"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("Usage"));

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "x.pgm,1,2,3\n").unwrap();
    let out = tmp.path().join("m.spcm");
    assert_eq!(code(&["train", "--manifest", bad.to_str().unwrap(), "--out-model", out.to_str().unwrap()]), 4);

    let missing = tmp.path().join("nope.spcm");
    assert_eq!(code(&["eval", "--model", missing.to_str().unwrap(), "--manifest", bad.to_str().unwrap()]), 6);

    let garbage = tmp.path().join("garbage.spcm");
    fs::write(&garbage, b"not a model at all, just bytes padding it out to length").unwrap();
    assert_eq!(code(&["eval", "--model", garbage.to_str().unwrap(), "--manifest", bad.to_str().unwrap()]), 5);

    assert_eq!(code(&["synth", "--count", "3", "--test", "5", "--out", tmp.path().to_str().unwrap()]), 3);
}
