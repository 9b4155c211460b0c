use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{ProbeKind, RunConfig};
use super::run::{BASELINES_FILE, CONFIG_COPY, CONTROLS_FILE, SCORES_FILE, TRAJECTORY_FILE};
use crate::dataio::{csv_writer, read_scores, ProbeScore};
use crate::error::{Error, Result};
use crate::trajectory::{best_layer_scores, fold_means, normalize_curve, SigmoidFit};

pub const LAYERWISE_FILE: &str = "layerwise.csv";
pub const TRAJECTORY_SERIES_FILE: &str = "trajectory_series.csv";
pub const FITTED_CURVES_FILE: &str = "fitted_curves.csv";
pub const NORMALIZED_FILE: &str = "normalized_curves.csv";
pub const STRUCT_CONTROL_FILE: &str = "structural_control.csv";

/// Points per fitted curve, evenly spaced over the observed step range.
pub const CURVE_SAMPLES: usize = 101;

#[derive(Debug, Clone, PartialEq)]
struct TrajectoryRow {
    a: Option<f64>,
    b: Option<f64>,
    c: Option<f64>,
    k: Option<f64>,
    residual_rmse: Option<f64>,
    step_at_95: u64,
}

impl TrajectoryRow {
    fn fit(&self) -> Option<SigmoidFit> {
        Some(SigmoidFit { a: self.a?, b: self.b?, c: self.c?, k: self.k?, residual_rmse: self.residual_rmse? })
    }
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let bad = |e: csv::Error| Error::Corrupt { path: path.to_path_buf(), reason: e.to_string() };
    let header = rdr.headers().map_err(bad)?.iter().map(str::to_owned).collect();
    let rows = rdr.records().collect::<std::result::Result<_, _>>().map_err(bad)?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Corrupt { path: path.to_path_buf(), reason: format!("missing column {name}") })
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.parse().map_err(|_| Error::Corrupt { path: path.to_path_buf(), reason: format!("bad number {s:?}") })
}

fn read_trajectories(path: &Path) -> Result<BTreeMap<(String, String), TrajectoryRow>> {
    let (header, rows) = read_csv(path)?;
    let col = |n: &str| column(&header, n, path);
    let (pi, mi, si) = (col("probe_id")?, col("model_id")?, col("step_at_95")?);
    let params = [col("a")?, col("b")?, col("c")?, col("k")?, col("residual_rmse")?];
    let mut out = BTreeMap::new();
    for r in rows {
        let v: Vec<Option<f64>> = params
            .iter()
            .map(|&i| if r[i].is_empty() { Ok(None) } else { parse_f64(&r[i], path).map(Some) })
            .collect::<Result<_>>()?;
        let step_at_95 = r[si].parse().map_err(|_| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("bad step_at_95 {:?}", &r[si]),
        })?;
        out.insert(
            (r[pi].to_string(), r[mi].to_string()),
            TrajectoryRow { a: v[0], b: v[1], c: v[2], k: v[3], residual_rmse: v[4], step_at_95 },
        );
    }
    Ok(out)
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Writes plot-ready tables for a finished run into `dest` (default:
/// `<out_dir>/report`). Returns the files written.
pub fn report(out_dir: &Path, dest: Option<&Path>) -> Result<Vec<PathBuf>> {
    let cfg_path = out_dir.join(CONFIG_COPY);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = RunConfig::from_json(&text).map_err(|e| Error::Corrupt { path: cfg_path.clone(), reason: e.to_string() })?;
    let scores = read_scores(out_dir.join(SCORES_FILE))?;
    let trajectories = read_trajectories(&out_dir.join(TRAJECTORY_FILE))?;
    let dest = dest.map_or_else(|| out_dir.join("report"), Path::to_path_buf);
    fs::create_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;

    let mut by_probe: BTreeMap<&str, BTreeMap<&str, Vec<ProbeScore>>> = BTreeMap::new();
    for s in &scores {
        by_probe.entry(&s.probe_id).or_default().entry(&s.model_id).or_default().push(s.clone());
    }
    for p in &cfg.probes {
        if !by_probe.contains_key(p.probe_id.as_str()) {
            return Err(Error::Validation(format!(
                "no scores for probe {} in {}",
                p.probe_id,
                out_dir.join(SCORES_FILE).display()
            )));
        }
    }

    let mut layerwise = Vec::new();
    let mut series = Vec::new();
    let mut fitted = Vec::new();
    let mut normalized = Vec::new();
    for (probe, models) in &by_probe {
        for (model, group) in models {
            let mut cells: BTreeMap<(u64, &str), Vec<f64>> = BTreeMap::new();
            for s in group {
                cells.entry((s.step, s.layer_id.as_str())).or_default().push(s.score);
            }
            for (step, layer, _) in fold_means(group, None)? {
                let values = cells[&(step, layer.as_str())].clone();
                let (mean, std) = mean_std(&values);
                layerwise.push(vec![
                    probe.to_string(),
                    model.to_string(),
                    step.to_string(),
                    layer,
                    mean.to_string(),
                    std.to_string(),
                    values.len().to_string(),
                ]);
            }
            let traj = trajectories.get(&(probe.to_string(), model.to_string())).ok_or_else(|| {
                Error::Validation(format!("no trajectory for probe {probe} model {model}"))
            })?;
            let fit = traj.fit();
            let best = best_layer_scores(group, None)?;
            for b in &best {
                series.push(vec![
                    probe.to_string(),
                    model.to_string(),
                    b.step.to_string(),
                    b.layer_id.clone(),
                    b.score.to_string(),
                    fit.map(|f| f.eval(b.step as f64).to_string()).unwrap_or_default(),
                    traj.step_at_95.to_string(),
                ]);
            }
            let Some(fit) = fit else { continue };
            let lo = best.first().expect("non-empty").step as f64;
            let hi = best.last().expect("non-empty").step as f64;
            let xs: Vec<f64> =
                (0..CURVE_SAMPLES).map(|i| lo + (hi - lo) * i as f64 / (CURVE_SAMPLES - 1) as f64).collect();
            for &x in &xs {
                fitted.push(vec![probe.to_string(), model.to_string(), x.to_string(), fit.eval(x).to_string()]);
            }
            match normalize_curve(&fit, &xs) {
                Ok(ns) => {
                    for (x, n) in xs.iter().zip(ns) {
                        normalized.push(vec![
                            probe.to_string(),
                            model.to_string(),
                            x.to_string(),
                            n.to_string(),
                            traj.step_at_95.to_string(),
                        ]);
                    }
                }
                Err(e) => log::warn!("probe {probe} model {model}: curve skipped ({e})"),
            }
        }
    }

    let mut written = Vec::new();
    let mut put = |name: &str, header: &[&str], rows: &[Vec<String>]| -> Result<()> {
        let path = dest.join(name);
        write_rows(&path, header, rows)?;
        written.push(path);
        Ok(())
    };
    put(LAYERWISE_FILE, &["probe_id", "model_id", "step", "layer_id", "mean", "std", "n_folds"], &layerwise)?;
    put(
        TRAJECTORY_SERIES_FILE,
        &["probe_id", "model_id", "step", "best_layer", "score", "fitted", "step_at_95"],
        &series,
    )?;
    put(FITTED_CURVES_FILE, &["probe_id", "model_id", "step", "fitted"], &fitted)?;
    put(NORMALIZED_FILE, &["probe_id", "model_id", "step", "normalized", "step_at_95"], &normalized)?;

    let structural: Vec<&str> = cfg
        .probes
        .iter()
        .filter(|p| matches!(p.kind, ProbeKind::Structural { .. }))
        .map(|p| p.probe_id.as_str())
        .collect();
    let control_rows = structural_control(out_dir, &scores, &structural)?;
    put(
        STRUCT_CONTROL_FILE,
        &["probe_id", "model_id", "step", "layer_id", "uuas_gold", "uuas_sequential", "gold_vs_sequential"],
        &control_rows,
    )?;
    Ok(written)
}

fn structural_control(out_dir: &Path, scores: &[ProbeScore], probes: &[&str]) -> Result<Vec<Vec<String>>> {
    if probes.is_empty() {
        return Ok(Vec::new());
    }
    let path = out_dir.join(BASELINES_FILE);
    let (header, rows) = read_csv(&path)?;
    let (pi, vi) = (column(&header, "probe_id", &path)?, column(&header, "gold_vs_sequential", &path)?);
    let mut baseline = BTreeMap::new();
    for r in &rows {
        baseline.insert(r[pi].to_string(), r[vi].to_string());
    }
    let path = out_dir.join(CONTROLS_FILE);
    let (header, rows) = read_csv(&path)?;
    let cols = ["probe_id", "model_id", "step", "layer_id", "uuas_sequential"]
        .map(|c| column(&header, c, &path))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut seq: BTreeMap<(String, String, u64, String), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        let step = r[cols[2]].parse().map_err(|_| Error::Corrupt { path: path.clone(), reason: "bad step".into() })?;
        seq.entry((r[cols[0]].to_string(), r[cols[1]].to_string(), step, r[cols[3]].to_string()))
            .or_default()
            .push(parse_f64(&r[cols[4]], &path)?);
    }
    let mut gold: BTreeMap<(String, String, u64, String), Vec<f64>> = BTreeMap::new();
    for s in scores.iter().filter(|s| probes.contains(&s.probe_id.as_str())) {
        gold.entry((s.probe_id.clone(), s.model_id.clone(), s.step, s.layer_id.clone())).or_default().push(s.score);
    }
    let mut out = Vec::new();
    for (key, g) in &gold {
        let base = baseline
            .get(&key.0)
            .ok_or_else(|| Error::Validation(format!("no gold-vs-sequential baseline for probe {}", key.0)))?;
        let s = seq.get(key).map(|v| mean_std(v).0.to_string()).unwrap_or_default();
        out.push(vec![
            key.0.clone(),
            key.1.clone(),
            key.2.to_string(),
            key.3.clone(),
            mean_std(g).0.to_string(),
            s,
            base.clone(),
        ]);
    }
    Ok(out)
}
