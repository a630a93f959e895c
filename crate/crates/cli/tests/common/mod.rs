#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

pub const BIN: &str = env!("CARGO_BIN_EXE_craterlpm");

pub fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

pub fn run(dir: &Path, args: &[&str]) {
    let out = Command::new(BIN).args(args).current_dir(dir).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "craterlpm {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

pub fn fails(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(BIN).args(args).current_dir(dir).output().unwrap();
    assert!(!out.status.success(), "craterlpm {args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every step of the pipeline, from rendered fixtures to calibrated counts.
pub fn pipeline() -> Vec<Vec<String>> {
    let (tmpl, train, test, reference) = (
        fixture("template_scene.json"),
        fixture("train_scene.json"),
        fixture("test_scene.json"),
        fixture("reference.csv"),
    );
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--scene", &tmpl, "--seed", "1", "--out", "tmpl"],
        vec!["synth", "--scene", &train, "--seed", "2", "--out", "train"],
        vec!["synth", "--scene", &test, "--seed", "3", "--bit-depth", "16", "--out", "test"],
        vec!["template", "--image", "tmpl/scene.pgm", "--annotations", "tmpl/annotations.csv", "--out", "tpl"],
        vec![
            "match",
            "--image",
            "train/scene.pgm",
            "--annotations",
            "train/annotations.csv",
            "--template",
            "tpl/template_appearance.json",
            "--template",
            "tpl/template_derivative.json",
            "--out",
            "mtrain",
        ],
        vec![
            "match",
            "--image",
            "test/scene.pgm",
            "--annotations",
            "test/annotations.csv",
            "--template",
            "tpl/template_appearance.json",
            "--measure",
            "dp",
            "--out",
            "mtest",
        ],
        vec![
            "hist",
            "--matches",
            "mtrain/matches.csv",
            "--axes",
            "grey_dp",
            "--bins",
            "24",
            "--label",
            "true",
            "--groups",
            "4",
            "--out",
            "htrue",
        ],
        vec![
            "hist",
            "--matches",
            "mtrain/matches.csv",
            "--axes",
            "grey_dp",
            "--bins",
            "24",
            "--label",
            "false",
            "--groups",
            "4",
            "--out",
            "hfalse",
        ],
        vec!["hist", "--matches", "mtest/matches.csv", "--spec", "htrue/spec.json", "--out", "htest"],
        vec![
            "train",
            "--true-hist",
            "htrue/histograms.json",
            "--false-hist",
            "hfalse/histograms.json",
            "--seed",
            "9",
            "--out",
            "model",
        ],
        vec![
            "correct",
            "--model",
            "model/model.json",
            "--matches",
            "mtest/matches.csv",
            "--annotations",
            "test/annotations.csv",
            "--band-edges",
            "20,26,32,40",
            "--out",
            "corr",
        ],
        vec![
            "calibrate",
            "--band-edges",
            "20,26,32,40",
            "--measured",
            "corr/sfd.csv",
            "--reference",
            &reference,
            "--out",
            "cal",
        ],
        vec![
            "correct",
            "--model",
            "model/model.json",
            "--matches",
            "mtest/matches.csv",
            "--annotations",
            "test/annotations.csv",
            "--band-edges",
            "20,26,32,40",
            "--calibration",
            "cal/calibration.json",
            "--out",
            "corrcal",
        ],
        vec!["simulate", "--regions", "500", "--seed", "5", "--out", "sim"],
        vec![
            "validate",
            "--trials",
            "4",
            "--ratios",
            "0.1,1",
            "--pool-size",
            "900",
            "--pool-annotations",
            "250",
            "--template-examples",
            "40",
            "--representations",
            "grey_dp,grey_mse+grad_dp",
            "--seed",
            "6",
            "--out",
            "val",
        ],
    ];
    steps.into_iter().map(|s| s.into_iter().map(String::from).collect()).collect()
}

pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
