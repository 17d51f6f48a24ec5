use std::fs;
use std::path::Path;

use diamond_cf::experiment::{self, ExperimentSpec, Manifest, BOUNDS_CSV, MANIFEST, RESULTS_CSV};
use diamond_cf::plot::{self, elements_with_class};
use diamond_cf::Error;

fn tiny_spec(name: &str) -> ExperimentSpec {
    serde_json::from_str(&format!(
        r#"{{
            "name": "{name}",
            "sweeps": [{{
                "template": {{"modulation": "4pam", "snr1_db": 10.0, "snr2_db": 10.0, "k1": 4, "k2": 4,
                             "hidden": [8, 8], "steps": 60, "batch_size": 64, "seed": 5,
                             "eval": {{"mc_samples": 2000, "extraction": {{"range_scale": 8.0, "resolution_1d": 2000, "resolution_2d": 50}}}}}},
                "lambdas": [2.0, 20.0],
                "schemes": ["distributed", "p2p"]
            }}],
            "plots": {{"curves": true, "regions": true, "regions_near_rate": 1.5}}
        }}"#
    ))
    .unwrap()
}

#[test]
fn empty_lambda_list_fails_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let mut spec = tiny_spec("empty");
    spec.sweeps[0].lambdas.clear();
    let err = experiment::run_experiment(&spec, Some(&out), 1, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(!out.exists());
}

#[test]
fn two_scheme_experiment_has_both_curves_and_references() {
    let dir = tempfile::tempdir().unwrap();
    let res = experiment::run_experiment(&tiny_spec("both"), Some(dir.path()), 1, None).unwrap();
    assert!(res.manifest.all_completed());
    let rows = experiment::read_results(&dir.path().join(RESULTS_CSV)).unwrap();
    assert!(rows.iter().any(|r| r.scheme == "distributed"));
    assert!(rows.iter().any(|r| r.scheme == "p2p"));
    let bounds = fs::read_to_string(dir.path().join(BOUNDS_CSV)).unwrap();
    let line = bounds.lines().nth(1).unwrap();
    assert!(line.starts_with("4pam,10.0,10.0,inf,inf,"), "{line}");
    for run in &res.manifest.runs {
        assert!(dir.path().join(&run.record).exists());
        assert!(dir.path().join(run.model.as_ref().unwrap()).exists());
    }
    let regions: Vec<_> = res.manifest.plots.iter().filter(|p| p.starts_with("regions")).collect();
    assert_eq!(regions.len(), 2);
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec("repeat");
    experiment::run_experiment(&spec, Some(&dir.path().join("a")), 1, None).unwrap();
    experiment::run_experiment(&spec, Some(&dir.path().join("b")), 3, None).unwrap();
    let read = |d: &str| fs::read(dir.path().join(d).join(RESULTS_CSV)).unwrap();
    assert_eq!(read("a"), read("b"));
    let ma = Manifest::load(&dir.path().join("a").join(MANIFEST)).unwrap();
    let mb = Manifest::load(&dir.path().join("b").join(MANIFEST)).unwrap();
    assert_eq!(ma.config_hash, mb.config_hash);
    let reseeded = experiment::config_hash(&spec.with_seed(6).expand().unwrap(), 1).unwrap();
    assert_ne!(reseeded, ma.config_hash);
}

#[test]
fn stored_runs_reload_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let res = experiment::run_experiment(&tiny_spec("reload"), Some(dir.path()), 1, None).unwrap();
    let run = &res.manifest.runs[0];
    let path = dir.path().join(&run.record);
    let rec = experiment::load_run(&path).unwrap();
    let docs = plot::export_regions(&rec, 20).unwrap();
    assert_eq!(docs.len(), 2);
    fs::remove_file(dir.path().join(run.model.as_ref().unwrap())).unwrap();
    let bare = experiment::load_run(&path).unwrap();
    assert!(matches!(plot::export_regions(&bare, 20), Err(Error::NotFound(_))));
    assert!(matches!(experiment::load_run(Path::new("/nonexistent/run.json")), Err(Error::NotFound(_))));
}

#[test]
fn curves_stay_below_two_relay_reference() {
    let dir = tempfile::tempdir().unwrap();
    let overlay = dir.path().join("overlay.csv");
    fs::write(&overlay, "label,rate,bits\nbaseline,0.5,0.9\nbaseline,1.0,1.3\n").unwrap();
    let res = experiment::run_experiment(&tiny_spec("curves"), Some(&dir.path().join("x")), 1, Some(&overlay)).unwrap();
    let svg = fs::read_to_string(dir.path().join("x/mi_vs_rate.svg")).unwrap();
    let two: f64 = elements_with_class(&svg, "ref-two")[0]["bits"].parse().unwrap();
    let points = elements_with_class(&svg, "point");
    assert_eq!(points.len(), res.manifest.runs.len());
    assert!(points.iter().all(|p| p["mi"].parse::<f64>().unwrap() <= two + 1e-9));
    assert_eq!(elements_with_class(&svg, "overlay").len(), 2);
    let ser = fs::read_to_string(dir.path().join("x/ser_vs_rate.svg")).unwrap();
    assert_eq!(elements_with_class(&ser, "point").len(), points.len());
    assert!(fs::read_to_string(dir.path().join("x/curves.csv")).unwrap().starts_with("curve,rate,mi_exact"));
}

#[test]
fn shipped_specs_expand() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "json") {
            let spec = ExperimentSpec::load(&p).unwrap();
            assert!(!spec.expand().unwrap().is_empty(), "{}", p.display());
            n += 1;
        }
    }
    assert!(n >= 4);
}
