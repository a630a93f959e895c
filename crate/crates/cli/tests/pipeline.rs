mod common;

use std::path::Path;

use common::{fails, fixture, pipeline, run, snapshot};

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header = rd.headers().unwrap().iter().map(String::from).collect();
    (header, rd.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect())
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_is_schema_valid_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let steps = pipeline();
    for s in &steps {
        run(dir, &s.iter().map(String::as_str).collect::<Vec<_>>());
    }

    let (h, rows) = csv_rows(&dir.join("test/annotations.csv"));
    assert_eq!(h, ["id", "x", "y", "diameter_px", "label"]);
    let n_test = rows.len();
    let n_true = rows.iter().filter(|r| r[4] == "true").count();

    let (h, rows) = csv_rows(&dir.join("mtrain/matches.csv"));
    assert_eq!(h, ["id", "label", "measure", "template_kind", "best_score", "best_sigma"]);
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap().is_finite()));
    let (_, rows) = csv_rows(&dir.join("mtest/matches.csv"));
    assert!(rows.iter().all(|r| r[2] == "dp" && r[3] == "appearance"));
    assert_eq!(rows.len(), n_test);

    let hists = json(&dir.join("htrue/histograms.json"));
    assert_eq!(hists.as_array().unwrap().len(), 4);
    assert_eq!(hists[0]["counts"].as_array().unwrap().len(), 24);

    let model = json(&dir.join("model/model.json"));
    assert_eq!(model["classes"].as_array().unwrap().len(), 2);

    let corr = json(&dir.join("corr/correct.json"));
    let t = &corr["total"]["classes"][0];
    assert_eq!(t["label"], "true");
    let (count, sigma) = (t["count"].as_f64().unwrap(), t["sigma"].as_f64().unwrap());
    assert!((count - n_true as f64).abs() < 4.0 * sigma, "{count} +- {sigma} vs {n_true}");
    let (h, sfd) = csv_rows(&dir.join("corr/sfd.csv"));
    assert_eq!(h, ["band_lo", "band_hi", "count", "sigma"]);
    assert_eq!(sfd.len(), 3);

    let cal = json(&dir.join("cal/calibration.json"));
    assert!(cal["overall"]["s"].as_f64().unwrap() > 0.0);
    assert_eq!(cal["per_band"].as_array().unwrap().len(), 3);
    assert_eq!(csv_rows(&dir.join("cal/sfd_calibrated_0.csv")).1.len(), 3);
    // The calibration region corrected with its own factors gives its reference counts.
    assert_eq!(
        std::fs::read(dir.join("corrcal/sfd_calibrated.csv")).unwrap(),
        std::fs::read(dir.join("cal/sfd_calibrated_0.csv")).unwrap()
    );

    let (h, sim) = csv_rows(&dir.join("sim/simulate.csv"));
    assert_eq!(h, ["n_true", "n_false", "p_true", "p_false", "n_detected"]);
    assert_eq!(sim.len(), 500);

    let (h, rows) = csv_rows(&dir.join("val/validation_summary.csv"));
    assert_eq!(h[..3], ["representation", "dims", "data_ratio"]);
    assert_eq!(rows.len(), 4);
    assert_eq!(csv_rows(&dir.join("val/validation_trials.csv")).1.len(), 16);

    let first = snapshot(dir);
    for s in &steps {
        run(dir, &s.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let second = snapshot(dir);
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (k, v) in &first {
        assert!(second[k] == *v, "{} differs between identical runs", k.display());
    }
}

#[test]
fn config_file_matches_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run(dir, &["simulate", "--regions", "50", "--alpha-t", "3", "--seed", "2", "--out", "a"]);
    std::fs::write(dir.join("c.json"), r#"{"regions": 50, "alpha-t": 3, "seed": 2, "out": "b"}"#).unwrap();
    run(dir, &["simulate", "--config", "c.json"]);
    assert_eq!(std::fs::read(dir.join("a/simulate.csv")).unwrap(), std::fs::read(dir.join("b/simulate.csv")).unwrap());
    run(dir, &["simulate", "--config", "c.json", "--seed", "3", "--out", "c"]);
    assert_ne!(std::fs::read(dir.join("a/simulate.csv")).unwrap(), std::fs::read(dir.join("c/simulate.csv")).unwrap());
}

#[test]
fn bad_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(fails(dir, &["simulate", "--alpha-t", "0"]).contains("alpha"));
    assert!(fails(dir, &["match", "--image", "nope.pgm", "--annotations", "a.csv", "--template", "t.json"])
        .contains("nope.pgm"));
    assert!(fails(dir, &["calibrate", "--band-edges", "30,20", "--measured", "m.csv", "--reference", "r.csv"])
        .contains("error"));
    fails(dir, &["hist", "--matches", "m.csv"]);
}

#[test]
fn out_of_bounds_annotations_are_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run(dir, &["synth", "--scene", &fixture("template_scene.json"), "--out", "s"]);
    run(
        dir,
        &[
            "template",
            "--image",
            "s/scene.pgm",
            "--annotations",
            "s/annotations.csv",
            "--kind",
            "appearance",
            "--out",
            "t",
        ],
    );
    let mut anns = std::fs::read_to_string(dir.join("s/annotations.csv")).unwrap();
    anns.push_str("edge,1.0,1.0,30.0,true\n");
    std::fs::write(dir.join("a.csv"), anns).unwrap();
    run(
        dir,
        &[
            "match",
            "--image",
            "s/scene.pgm",
            "--annotations",
            "a.csv",
            "--template",
            "t/template_appearance.json",
            "--out",
            "m",
        ],
    );
    let (_, skipped) = csv_rows(&dir.join("m/skipped.csv"));
    assert_eq!(skipped.len(), 1);
    assert_eq!(skipped[0][0], "edge");
    let (_, rows) = csv_rows(&dir.join("m/matches.csv"));
    assert!(rows.iter().all(|r| r[0] != "edge"));
}
