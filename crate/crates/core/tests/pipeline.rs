use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use probekit::dataio::{read_parses, read_scores};
use probekit::pipeline::{
    self, report, run, validate, write_project, ProbeKind, ProjectSpec, RunConfig, RunError, RunOptions,
};
use probekit::structprobe::gold_vs_sequential;

fn project(dir: &Path, spec: &ProjectSpec) -> RunConfig {
    write_project(spec, dir).unwrap();
    RunConfig::load(&dir.join(pipeline::PROJECT_CONFIG)).unwrap()
}

fn opts(out: &Path) -> RunOptions {
    RunOptions { out_dir: Some(out.to_path_buf()), seed: None, n_folds: None, jobs: Some(2), resume: false }
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_owned).collect();
    rdr.records()
        .map(|r| header.iter().cloned().zip(r.unwrap().iter().map(str::to_owned)).collect())
        .collect()
}

#[test]
fn full_project_runs_fits_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = ProjectSpec { n_checkpoints: 6, ..ProjectSpec::default() };
    let cfg = project(tmp.path(), &spec);
    let out = tmp.path().join("out");
    let outcome = run(cfg.clone(), &opts(&out)).unwrap();

    assert_eq!(outcome.n_cells, 9 * 6 * 3);
    assert!(outcome.failed.is_empty(), "{:?}", outcome.failed);
    assert_eq!(outcome.summaries.len(), 9);
    let fitted = outcome.summaries.iter().filter(|s| s.fit.is_some()).count();
    assert!(fitted >= 8, "only {fitted} probes got a sigmoid fit");

    let scores = read_scores(out.join(pipeline::SCORES_FILE)).unwrap();
    assert_eq!(scores.len(), 9 * 6 * 3 * 5);

    let files = report(&out, None).unwrap();
    assert_eq!(files.len(), 5);
    let dir = out.join("report");

    let layerwise = csv_rows(&dir.join(pipeline::LAYERWISE_FILE));
    assert_eq!(layerwise.len(), 9 * 6 * 3);
    assert!(layerwise.iter().all(|r| r["n_folds"] == "5"));

    let trajectory = csv_rows(&out.join(pipeline::TRAJECTORY_FILE));
    let step95: BTreeMap<&str, &str> =
        trajectory.iter().map(|r| (r["probe_id"].as_str(), r["step_at_95"].as_str())).collect();
    let series = csv_rows(&dir.join(pipeline::TRAJECTORY_SERIES_FILE));
    assert_eq!(series.len(), 9 * 6);
    for r in &series {
        assert_eq!(r["step_at_95"], step95[r["probe_id"].as_str()]);
    }
    let normalized = csv_rows(&dir.join(pipeline::NORMALIZED_FILE));
    assert_eq!(normalized.len(), fitted * pipeline::CURVE_SAMPLES);
    for r in &normalized {
        let v: f64 = r["normalized"].parse().unwrap();
        assert!((-1e-9..=1.0 + 1e-9).contains(&v));
    }

    let parses_path = cfg
        .probes
        .iter()
        .find_map(|p| match &p.kind {
            ProbeKind::Structural { parses, .. } => Some(parses.clone()),
            _ => None,
        })
        .unwrap();
    let parses = read_parses(parses_path).unwrap();
    let expected = gold_vs_sequential(parses.iter().map(|p| (p.words.len(), p.edges.as_slice()))).unwrap();
    let control = csv_rows(&dir.join(pipeline::STRUCT_CONTROL_FILE));
    assert_eq!(control.len(), 6 * 3);
    for r in &control {
        assert_eq!(r["gold_vs_sequential"].parse::<f64>().unwrap(), expected);
        assert!(!r["uuas_sequential"].is_empty());
    }
}

#[test]
fn corrupt_embedding_fails_only_its_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = project(tmp.path(), &ProjectSpec::default());
    let victim = tmp.path().join("embeddings/synth/step1000/L0/phones_u0000.emb");
    fs::write(&victim, b"PKEMBv1\ngarbage").unwrap();

    let out = tmp.path().join("out");
    let outcome = run(cfg, &opts(&out)).unwrap();
    assert_eq!(outcome.failed.len(), 1);
    let (cell, err) = &outcome.failed[0];
    assert_eq!((cell.probe_id.as_str(), cell.step, cell.layer_id.as_str()), ("phones", 1000, "L0"));
    assert!(err.contains("phones_u0000.emb"), "{err}");

    let errors = csv_rows(&out.join(pipeline::ERRORS_FILE));
    assert_eq!(errors.len(), 1);
    let scores = read_scores(out.join(pipeline::SCORES_FILE)).unwrap();
    assert_eq!(scores.len(), (54 - 1) * 5);
}

#[test]
fn validation_reports_missing_embedding_dir_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = project(tmp.path(), &ProjectSpec::default());
    let (ok, manifest) = validate(&cfg);
    assert!(ok.is_ok(), "{ok}");
    assert!(manifest.is_some());

    let gone = tmp.path().join("embeddings/synth/step2000/L1");
    fs::remove_dir_all(&gone).unwrap();
    let (bad, _) = validate(&cfg);
    assert!(!bad.is_ok());
    let text = bad.to_string();
    assert!(text.contains("step2000"), "{text}");
    assert!(matches!(run(cfg, &opts(&tmp.path().join("out"))), Err(RunError::Invalid(_))));
}

#[test]
fn preset_mismatch_is_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = project(tmp.path(), &ProjectSpec::default());
    for p in &mut cfg.probes {
        if let ProbeKind::Cluster { preset, design, .. } = &mut p.kind {
            if p.probe_id == "phones" {
                *preset = Some(probekit::clusterprobe::ClusterPreset::Phones);
                *design = None;
            }
        }
    }
    let (report, _) = validate(&cfg);
    assert!(report.is_ok(), "{report}");
    assert!(report.warnings.iter().any(|w| w.path.contains("phones")), "{report}");
}

#[test]
fn resume_reuses_cells_only_when_fingerprint_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = project(tmp.path(), &ProjectSpec::default());
    let out = tmp.path().join("out");
    run(cfg.clone(), &opts(&out)).unwrap();
    let first = fs::read(out.join(pipeline::SCORES_FILE)).unwrap();

    let again = run(cfg.clone(), &RunOptions { resume: true, ..opts(&out) }).unwrap();
    assert_eq!(again.resumed, 54);
    assert_eq!(fs::read(out.join(pipeline::SCORES_FILE)).unwrap(), first);

    let reseeded = run(cfg, &RunOptions { resume: true, seed: Some(9), ..opts(&out) }).unwrap();
    assert_eq!(reseeded.resumed, 0);
    assert_ne!(fs::read(out.join(pipeline::SCORES_FILE)).unwrap(), first);
}

#[test]
fn report_names_probe_without_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = project(tmp.path(), &ProjectSpec::default());
    let out = tmp.path().join("out");
    run(cfg, &opts(&out)).unwrap();

    let copy = out.join(pipeline::CONFIG_COPY);
    let mut stored = RunConfig::load(&copy).unwrap();
    let mut extra = stored.probes[0].clone();
    extra.probe_id = "phones_extra".into();
    stored.probes.push(extra);
    fs::write(&copy, serde_json::to_string(&stored).unwrap()).unwrap();
    let err = report(&out, None).unwrap_err().to_string();
    assert!(err.contains("phones_extra"), "{err}");
}
