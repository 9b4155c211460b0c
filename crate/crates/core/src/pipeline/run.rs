use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{unit_labels, validate, ProbeConfig, ProbeKind, RunConfig, ValidationReport};
use crate::abx::{abx_accuracy, read_triplets};
use crate::clusterprobe::{run_cluster_probe, ClusterDataset};
use crate::dataio::{
    csv_writer, embedding_path, read_annotations, read_embedding_file, read_parses, read_reference_table,
    write_scores, AnnotationRow, FrameEmbeddings, ProbeScore, RunManifest,
};
use crate::error::{Error, Result};
use crate::pooling::pool_unit;
use crate::rsa::{run_rsa_probe, UnitSpace};
use crate::seeding::derive_seed;
use crate::structprobe::{gold_vs_sequential, run_struct_probe, SentenceInstance};
use crate::trajectory::{summarize, TrajectorySummary};

pub const SCORES_FILE: &str = "scores.csv";
pub const ERRORS_FILE: &str = "errors.csv";
pub const CONTROLS_FILE: &str = "controls.csv";
pub const BASELINES_FILE: &str = "baselines.csv";
pub const BEST_LAYER_FILE: &str = "best_layer.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const CONFIG_COPY: &str = "run_config.json";

/// One unit of work: a probe on one layer of one checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub probe_id: String,
    pub model_id: String,
    pub step: u64,
    pub layer_id: String,
}

#[derive(Debug, Clone)]
struct Cell {
    key: CellKey,
    embedding_dir: PathBuf,
    seed: u64,
    fingerprint: String,
}

/// Decoded-vs-chain agreement for one structural-probe fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlScore {
    pub fold: usize,
    pub uuas_sequential: f64,
}

/// A journal line: the finished state of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: CellKey,
    pub fingerprint: String,
    #[serde(default)]
    pub scores: Vec<ProbeScore>,
    #[serde(default)]
    pub controls: Vec<ControlScore>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub n_folds: Option<usize>,
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
    pub resume: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub n_cells: usize,
    pub resumed: usize,
    pub failed: Vec<(CellKey, String)>,
    pub summaries: Vec<TrajectorySummary>,
}

#[derive(Debug)]
pub enum RunError {
    Invalid(ValidationReport),
    Fatal(Error),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Fatal(e)
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Invalid(r) => write!(f, "validation failed:\n{r}"),
            RunError::Fatal(e) => write!(f, "{e}"),
        }
    }
}

/// Applies command-line overrides to a loaded config.
pub fn apply_overrides(cfg: &mut RunConfig, opts: &RunOptions) {
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(n) = opts.n_folds {
        cfg.n_folds = n;
    }
    if let Some(o) = &opts.out_dir {
        cfg.out_dir = Some(o.clone());
    }
}

fn enumerate_cells(cfg: &RunConfig, manifest: &RunManifest) -> Vec<Cell> {
    let mut cells = Vec::new();
    for p in &cfg.probes {
        let probe_json = serde_json::to_string(p).expect("probe config serializes");
        for m in &manifest.models {
            for c in &m.checkpoints {
                for l in &c.layers {
                    let step = c.step.to_string();
                    let seed = derive_seed(cfg.seed, &[&p.probe_id, &m.model_id, &step, &l.layer_id]);
                    let fp = derive_seed(
                        seed,
                        &[&cfg.n_folds.to_string(), &probe_json, &l.embedding_dir.to_string_lossy()],
                    );
                    cells.push(Cell {
                        key: CellKey {
                            probe_id: p.probe_id.clone(),
                            model_id: m.model_id.clone(),
                            step: c.step,
                            layer_id: l.layer_id.clone(),
                        },
                        embedding_dir: l.embedding_dir.clone(),
                        seed,
                        fingerprint: format!("{fp:016x}"),
                    });
                }
            }
        }
    }
    cells
}

/// Loads each utterance once and pools the requested units.
fn pool_units<'a>(
    dir: &Path,
    rows: impl IntoIterator<Item = &'a AnnotationRow>,
) -> Result<Vec<(String, Vec<f64>)>> {
    let rows: Vec<&AnnotationRow> = rows.into_iter().collect();
    let utterances: BTreeSet<&str> = rows.iter().map(|r| r.utterance_id.as_str()).collect();
    let frames: HashMap<&str, FrameEmbeddings> = utterances
        .into_iter()
        .map(|u| read_embedding_file(embedding_path(dir, u)).map(|f| (u, f)))
        .collect::<Result<_>>()?;
    let mut dim = None;
    rows.iter()
        .map(|r| {
            let f = &frames[r.utterance_id.as_str()];
            if *dim.get_or_insert(f.dim()) != f.dim() {
                return Err(Error::Shape(format!("utterance {} has dim {}", r.utterance_id, f.dim())));
            }
            let u = pool_unit(f, r)?;
            Ok((u.unit_id, u.vector))
        })
        .collect()
}

fn to_matrix(rows: &[(String, Vec<f64>)]) -> DMatrix<f64> {
    let dim = rows.first().map_or(0, |r| r.1.len());
    DMatrix::from_fn(rows.len(), dim, |i, j| rows[i].1[j])
}

struct CellOutput {
    scores: Vec<(usize, f64)>,
    controls: Vec<ControlScore>,
}

fn run_cell_inner(probe: &ProbeConfig, cell: &Cell, n_folds: usize) -> Result<CellOutput> {
    let table = read_annotations(&probe.annotations)?;
    let dir = &cell.embedding_dir;
    let scores = match &probe.kind {
        ProbeKind::Cluster { label_key, .. } => {
            let design = probe.cluster_design().ok_or_else(|| Error::Config("no cluster design".into()))?;
            let pooled = pool_units(dir, &table.rows)?;
            let column = |key: &str| -> Result<Vec<String>> {
                table
                    .rows
                    .iter()
                    .map(|r| {
                        r.get(key)
                            .map(str::to_owned)
                            .ok_or_else(|| Error::Validation(format!("unit {} lacks {key:?}", r.unit_id)))
                    })
                    .collect()
            };
            let keys = design.disjoint_key.as_deref().map(column).transpose()?;
            let data = ClusterDataset { x: to_matrix(&pooled), labels: column(label_key)?, keys };
            run_cluster_probe(&data, &design, n_folds, cell.seed)?
        }
        ProbeKind::Rsa { reference, group_by, exclude_same } => {
            let reference = read_reference_table(reference)?;
            let wanted: BTreeSet<&str> = reference.ids.iter().map(String::as_str).collect();
            let pooled = pool_units(dir, table.rows.iter().filter(|r| wanted.contains(r.unit_id.as_str())))?;
            let model = UnitSpace::new(pooled.iter().map(|p| p.0.clone()).collect(), to_matrix(&pooled))?;
            let v = &reference.vectors;
            let ref_x = DMatrix::from_fn(v.n_frames(), v.dim(), |i, j| f64::from(v.row(i)[j]));
            let reference = UnitSpace::new(reference.ids.clone(), ref_x)?;
            let rsa_cfg = crate::rsa::RsaConfig { group_by: group_by.clone(), exclude_same: exclude_same.clone() };
            run_rsa_probe(&model, &reference, &rsa_cfg, &unit_labels(&table), n_folds, cell.seed)?
                .into_iter()
                .map(|f| {
                    if !f.dropped_groups.is_empty() {
                        log::warn!("{:?} fold {}: dropped RSA groups {:?}", cell.key, f.fold, f.dropped_groups);
                    }
                    (f.fold, f.score)
                })
                .collect()
        }
        ProbeKind::Abx { triplets, .. } => {
            let triplets = read_triplets(triplets)?;
            let wanted: BTreeSet<&str> =
                triplets.iter().flat_map(|t| [t.a_id.as_str(), t.b_id.as_str(), t.x_id.as_str()]).collect();
            let pooled = pool_units(dir, table.rows.iter().filter(|r| wanted.contains(r.unit_id.as_str())))?;
            let emb: HashMap<String, Vec<f64>> = pooled.into_iter().collect();
            abx_accuracy(&triplets, &emb, n_folds, cell.seed)?
        }
        ProbeKind::Structural { parses, hyperparams } => {
            let sentences = load_sentences(dir, &table, parses)?;
            let folds = run_struct_probe(&sentences, hyperparams, n_folds, cell.seed)?;
            let controls =
                folds.iter().map(|f| ControlScore { fold: f.fold, uuas_sequential: f.uuas_sequential }).collect();
            return Ok(CellOutput { scores: folds.iter().map(|f| (f.fold, f.uuas_gold)).collect(), controls });
        }
    };
    Ok(CellOutput { scores, controls: Vec::new() })
}

fn load_sentences(dir: &Path, table: &crate::dataio::AnnotationTable, parses: &Path) -> Result<Vec<SentenceInstance>> {
    let parses = read_parses(parses)?;
    let units = table.by_id();
    let rows: Vec<&AnnotationRow> = parses
        .iter()
        .flat_map(|s| s.words.iter())
        .map(|w| units.get(w.as_str()).copied().ok_or_else(|| Error::Validation(format!("word unit {w} not annotated"))))
        .collect::<Result<_>>()?;
    let pooled: HashMap<String, Vec<f64>> = pool_units(dir, rows)?.into_iter().collect();
    parses
        .iter()
        .map(|s| {
            let words: Vec<(String, Vec<f64>)> = s.words.iter().map(|w| (w.clone(), pooled[w].clone())).collect();
            SentenceInstance::new(s.sentence_id.clone(), to_matrix(&words), s.edges.clone())
        })
        .collect()
}

fn run_cell(probe: &ProbeConfig, cell: &Cell, n_folds: usize) -> CellRecord {
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| run_cell_inner(probe, cell, n_folds)))
        .unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            Err(Error::Numeric(format!("probe panicked: {msg}")))
        });
    let k = &cell.key;
    match outcome {
        Ok(out) => CellRecord {
            cell: k.clone(),
            fingerprint: cell.fingerprint.clone(),
            scores: out
                .scores
                .into_iter()
                .map(|(fold, score)| ProbeScore {
                    probe_id: k.probe_id.clone(),
                    model_id: k.model_id.clone(),
                    step: k.step,
                    layer_id: k.layer_id.clone(),
                    fold,
                    score,
                })
                .collect(),
            controls: out.controls,
            error: None,
        },
        Err(e) => CellRecord {
            cell: k.clone(),
            fingerprint: cell.fingerprint.clone(),
            scores: Vec::new(),
            controls: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

/// Reads completed records; a torn final line is cut off so appends resume
/// on a clean boundary.
pub fn read_journal(path: &Path) -> Result<Vec<CellRecord>> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut good_bytes = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        let complete = line.ends_with('\n');
        match serde_json::from_str::<CellRecord>(line.trim_end()) {
            Ok(r) if complete => {
                records.push(r);
                good_bytes += n as u64;
            }
            _ => {
                log::warn!("{}: discarding incomplete journal entry at byte {good_bytes}", path.display());
                break;
            }
        }
    }
    let len = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if len != good_bytes {
        let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
        f.set_len(good_bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(records)
}

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Executes every cell not already journaled, then writes the score,
/// error, control and trajectory tables under the output directory.
pub fn run(mut cfg: RunConfig, opts: &RunOptions) -> std::result::Result<RunOutcome, RunError> {
    apply_overrides(&mut cfg, opts);
    let (report, manifest) = validate(&cfg);
    if !report.is_ok() {
        return Err(RunError::Invalid(report));
    }
    let manifest = manifest.expect("valid config has a manifest");
    let out_dir = cfg.out_dir.clone().ok_or_else(|| {
        RunError::Invalid(ValidationReport {
            errors: vec![super::config::Issue { path: "out_dir".into(), rule: "no output directory given".into() }],
            warnings: Vec::new(),
        })
    })?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let journal_path = out_dir.join(JOURNAL_FILE);
    if !opts.resume {
        match fs::remove_file(&journal_path) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(&journal_path, e).into()),
        }
    }
    let cells = enumerate_cells(&cfg, &manifest);
    let wanted: HashMap<&CellKey, &str> = cells.iter().map(|c| (&c.key, c.fingerprint.as_str())).collect();
    let mut done: BTreeMap<CellKey, CellRecord> = BTreeMap::new();
    if opts.resume {
        for r in read_journal(&journal_path)? {
            if r.error.is_none() && wanted.get(&r.cell) == Some(&r.fingerprint.as_str()) {
                done.insert(r.cell.clone(), r);
            }
        }
    }
    let resumed = done.len();
    let todo: Vec<&Cell> = cells.iter().filter(|c| !done.contains_key(&c.key)).collect();
    log::info!("{} cells, {} already done, {} to run", cells.len(), resumed, todo.len());

    let probes: HashMap<&str, &ProbeConfig> = cfg.probes.iter().map(|p| (p.probe_id.as_str(), p)).collect();
    let journal = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&journal_path)
        .map_err(|e| Error::io(&journal_path, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let (tx, rx) = mpsc::channel::<CellRecord>();
    let n_folds = cfg.n_folds;
    let fresh: Vec<CellRecord> = std::thread::scope(|scope| -> Result<Vec<CellRecord>> {
        // single appender: one flushed line per finished cell
        let appender = scope.spawn(|| -> Result<Vec<CellRecord>> {
            let mut journal = journal;
            let mut got = Vec::new();
            for rec in rx {
                let line = serde_json::to_string(&rec).expect("record serializes");
                journal
                    .write_all(format!("{line}\n").as_bytes())
                    .and_then(|_| journal.flush())
                    .map_err(|e| Error::io(&journal_path, e))?;
                match &rec.error {
                    Some(e) => log::error!("cell {:?} failed: {e}", rec.cell),
                    None => log::info!("cell {:?} done", rec.cell),
                }
                got.push(rec);
            }
            Ok(got)
        });
        pool.install(|| {
            todo.par_iter().for_each_with(tx, |tx, cell| {
                let rec = run_cell(probes[cell.key.probe_id.as_str()], cell, n_folds);
                let _ = tx.send(rec);
            })
        });
        appender.join().expect("appender thread")
    })?;
    for r in fresh {
        done.insert(r.cell.clone(), r);
    }

    let mut scores = Vec::new();
    let mut failed = Vec::new();
    let mut controls = Vec::new();
    for r in done.values() {
        match &r.error {
            Some(e) => failed.push((r.cell.clone(), e.clone())),
            None => {
                scores.extend(r.scores.iter().cloned());
                controls.extend(r.controls.iter().map(|c| (r.cell.clone(), c.clone())));
            }
        }
    }
    write_atomic(&out_dir.join(SCORES_FILE), |p| write_scores(&scores, p))?;
    write_atomic(&out_dir.join(ERRORS_FILE), |p| {
        let mut w = csv_writer(p)?;
        w.write_record(["probe_id", "model_id", "step", "layer_id", "error"]).map_err(csv_err(p))?;
        for (k, e) in &failed {
            w.write_record([&k.probe_id, &k.model_id, &k.step.to_string(), &k.layer_id, e]).map_err(csv_err(p))?;
        }
        w.flush().map_err(|e| Error::io(p, e))
    })?;
    write_atomic(&out_dir.join(CONTROLS_FILE), |p| {
        let mut w = csv_writer(p)?;
        w.write_record(["probe_id", "model_id", "step", "layer_id", "fold", "uuas_sequential"]).map_err(csv_err(p))?;
        for (k, c) in &controls {
            w.write_record([
                &k.probe_id,
                &k.model_id,
                &k.step.to_string(),
                &k.layer_id,
                &c.fold.to_string(),
                &c.uuas_sequential.to_string(),
            ])
            .map_err(csv_err(p))?;
        }
        w.flush().map_err(|e| Error::io(p, e))
    })?;
    write_baselines(&cfg, &out_dir)?;
    let summaries = write_trajectories(&scores, &manifest, &out_dir)?;
    let copy = serde_json::to_string_pretty(&cfg).expect("config serializes");
    write_atomic(&out_dir.join(CONFIG_COPY), |p| fs::write(p, copy + "\n").map_err(|e| Error::io(p, e)))?;
    Ok(RunOutcome { out_dir, n_cells: cells.len(), resumed, failed, summaries })
}

/// Gold parses scored against chain parses, per structural probe.
fn write_baselines(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for p in &cfg.probes {
        if let ProbeKind::Structural { parses, .. } = &p.kind {
            let parses = read_parses(parses)?;
            let v = gold_vs_sequential(parses.iter().map(|s| (s.words.len(), s.edges.as_slice())))?;
            rows.push((p.probe_id.clone(), v));
        }
    }
    write_atomic(&out_dir.join(BASELINES_FILE), |path| {
        let mut w = csv_writer(path)?;
        w.write_record(["probe_id", "gold_vs_sequential"]).map_err(csv_err(path))?;
        for (id, v) in &rows {
            w.write_record([id.clone(), v.to_string()]).map_err(csv_err(path))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    })
}

fn layer_order(manifest: &RunManifest, model_id: &str) -> Vec<String> {
    let mut order = Vec::new();
    for m in manifest.models.iter().filter(|m| m.model_id == model_id) {
        for c in &m.checkpoints {
            for l in &c.layers {
                if !order.contains(&l.layer_id) {
                    order.push(l.layer_id.clone());
                }
            }
        }
    }
    order
}

fn write_trajectories(scores: &[ProbeScore], manifest: &RunManifest, out_dir: &Path) -> Result<Vec<TrajectorySummary>> {
    let mut groups: BTreeMap<(&str, &str), Vec<ProbeScore>> = BTreeMap::new();
    for s in scores {
        groups.entry((&s.probe_id, &s.model_id)).or_default().push(s.clone());
    }
    let summaries: Vec<TrajectorySummary> = groups
        .par_iter()
        .map(|((_, model), group)| summarize(group, Some(&layer_order(manifest, model))))
        .collect::<Result<_>>()?;
    write_atomic(&out_dir.join(BEST_LAYER_FILE), |p| {
        let mut w = csv_writer(p)?;
        w.write_record(["probe_id", "model_id", "step", "layer_id", "score"]).map_err(csv_err(p))?;
        for s in &summaries {
            for b in &s.best_layer_per_step {
                w.write_record([&s.probe_id, &s.model_id, &b.step.to_string(), &b.layer_id, &b.score.to_string()])
                    .map_err(csv_err(p))?;
            }
        }
        w.flush().map_err(|e| Error::io(p, e))
    })?;
    write_atomic(&out_dir.join(TRAJECTORY_FILE), |p| {
        let mut w = csv_writer(p)?;
        w.write_record(TRAJECTORY_COLUMNS).map_err(csv_err(p))?;
        for s in &summaries {
            let f = s.fit.as_ref();
            w.write_record([
                s.probe_id.clone(),
                s.model_id.clone(),
                fmt_opt(f.map(|f| f.a)),
                fmt_opt(f.map(|f| f.b)),
                fmt_opt(f.map(|f| f.c)),
                fmt_opt(f.map(|f| f.k)),
                fmt_opt(f.map(|f| f.residual_rmse)),
                s.step_at_95.to_string(),
                s.fit_note.clone().unwrap_or_default(),
            ])
            .map_err(csv_err(p))?;
        }
        w.flush().map_err(|e| Error::io(p, e))
    })?;
    Ok(summaries)
}

pub const TRAJECTORY_COLUMNS: [&str; 9] =
    ["probe_id", "model_id", "a", "b", "c", "k", "residual_rmse", "step_at_95", "fit_note"];
