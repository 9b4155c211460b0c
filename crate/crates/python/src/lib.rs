//! Python bindings. Matrices cross the boundary as lists of rows.

use std::collections::HashMap;
use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use probekit::pipeline::{self, RunConfig, RunError, RunOptions};
use probekit::structprobe::{self, Edge, ProbeHyperparams, SentenceInstance};
use probekit::{abx, clusterprobe, dataio, pooling, rsa, trajectory, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let Some(first) = rows.first() else {
        return Err(PyValueError::new_err("empty matrix"));
    };
    let cols = first.len();
    if let Some(i) = rows.iter().position(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("row {i} has {} values, expected {cols}", rows[i].len())));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[pyclass(module = "probekit", frozen, skip_from_py_object)]
#[derive(Clone)]
struct SigmoidFit {
    inner: trajectory::SigmoidFit,
}

#[pymethods]
impl SigmoidFit {
    #[getter]
    fn a(&self) -> f64 {
        self.inner.a
    }
    #[getter]
    fn b(&self) -> f64 {
        self.inner.b
    }
    #[getter]
    fn c(&self) -> f64 {
        self.inner.c
    }
    #[getter]
    fn k(&self) -> f64 {
        self.inner.k
    }
    #[getter]
    fn residual_rmse(&self) -> f64 {
        self.inner.residual_rmse
    }

    fn __call__(&self, x: f64) -> f64 {
        self.inner.eval(x)
    }

    fn __repr__(&self) -> String {
        let f = &self.inner;
        format!("SigmoidFit(a={}, b={}, c={}, k={}, residual_rmse={})", f.a, f.b, f.c, f.k, f.residual_rmse)
    }
}

#[pyclass(module = "probekit", frozen)]
struct LdaProjection {
    inner: clusterprobe::LdaProjection,
}

#[pymethods]
impl LdaProjection {
    #[getter]
    fn n_directions(&self) -> usize {
        self.inner.n_directions()
    }

    #[getter]
    fn class_labels(&self) -> Vec<String> {
        self.inner.class_labels.clone()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues.clone()
    }

    fn project(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.project(&matrix(&x)?).map_err(py_err)?))
    }
}

/// A trained distance probe `B`.
#[pyclass(module = "probekit", frozen)]
struct StructuralProbe {
    probe: structprobe::ProbeMatrix,
    #[pyo3(get)]
    train_loss: f64,
    #[pyo3(get)]
    dev_loss: f64,
    #[pyo3(get)]
    epochs_run: usize,
}

#[pymethods]
impl StructuralProbe {
    #[getter]
    fn matrix(&self) -> Vec<Vec<f64>> {
        rows(self.probe.matrix())
    }

    /// Squared probe distances between all word pairs.
    fn distances(&self, words: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let n = words.len();
        let s = SentenceInstance::new("s", matrix(&words)?, structprobe::sequential_control(n)).map_err(py_err)?;
        Ok(rows(&structprobe::predicted_distances(&self.probe, &s)))
    }

    /// Minimum spanning tree over the probe distances.
    fn decode(&self, words: Vec<Vec<f64>>) -> PyResult<Vec<Edge>> {
        let d = self.distances(words)?;
        structprobe::decode_tree(&matrix(&d)?).map_err(py_err)
    }
}

#[pyclass(module = "probekit", frozen, get_all, from_py_object)]
#[derive(Clone)]
struct AbxTriplet {
    a_id: String,
    b_id: String,
    x_id: String,
    phonetic_key: String,
    a_meaning_key: String,
    b_meaning_key: String,
}

#[pymethods]
impl AbxTriplet {
    #[new]
    fn new(
        a_id: String,
        b_id: String,
        x_id: String,
        phonetic_key: String,
        a_meaning_key: String,
        b_meaning_key: String,
    ) -> PyResult<Self> {
        let t = Self { a_id, b_id, x_id, phonetic_key, a_meaning_key, b_meaning_key };
        t.to_core().check().map_err(PyValueError::new_err)?;
        Ok(t)
    }
}

impl AbxTriplet {
    fn to_core(&self) -> abx::AbxTriplet {
        abx::AbxTriplet {
            a_id: self.a_id.clone(),
            b_id: self.b_id.clone(),
            x_id: self.x_id.clone(),
            phonetic_key: self.phonetic_key.clone(),
            a_meaning_key: self.a_meaning_key.clone(),
            b_meaning_key: self.b_meaning_key.clone(),
        }
    }
}

#[pyfunction]
fn silhouette(x: Vec<Vec<f64>>, labels: Vec<String>) -> PyResult<f64> {
    clusterprobe::silhouette(&matrix(&x)?, &labels).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (x, labels, shrinkage = clusterprobe::DEFAULT_SHRINKAGE))]
fn fit_lda(x: Vec<Vec<f64>>, labels: Vec<String>, shrinkage: f64) -> PyResult<LdaProjection> {
    let inner = clusterprobe::fit_lda_with_shrinkage(&matrix(&x)?, &labels, shrinkage).map_err(py_err)?;
    Ok(LdaProjection { inner })
}

#[pyfunction]
fn abx_score(triplets: Vec<AbxTriplet>, embeddings: HashMap<String, Vec<f64>>) -> PyResult<f64> {
    let core: Vec<abx::AbxTriplet> = triplets.iter().map(AbxTriplet::to_core).collect();
    abx::abx_score(&core, &embeddings).map_err(py_err)
}

/// Pearson correlation of the cosine dissimilarities of two row-aligned
/// spaces. With `keys`, pairs sharing a key are left out.
#[pyfunction]
#[pyo3(signature = (model, reference, keys = None))]
fn rsa_score(model: Vec<Vec<f64>>, reference: Vec<Vec<f64>>, keys: Option<Vec<String>>) -> PyResult<f64> {
    let ids: Vec<String> = (0..model.len()).map(|i| i.to_string()).collect();
    let m = rsa::cosine_dissim(&ids, &matrix(&model)?).map_err(py_err)?;
    let r = rsa::cosine_dissim(&ids, &matrix(&reference)?).map_err(py_err)?;
    let mask = keys.map(|k| rsa::PairMask::excluding_same(&k));
    rsa::rsa_score(&m, &r, mask.as_ref()).map_err(py_err)
}

#[pyfunction]
fn decode_tree(distances: Vec<Vec<f64>>) -> PyResult<Vec<Edge>> {
    structprobe::decode_tree(&matrix(&distances)?).map_err(py_err)
}

#[pyfunction]
fn uuas(n: usize, predicted: Vec<Edge>, gold: Vec<Edge>) -> PyResult<f64> {
    structprobe::uuas(n, &predicted, &gold).map_err(py_err)
}

/// Trains a structural probe on `(word_vectors, edges)` sentences. Keyword
/// arguments override the default hyperparameters.
#[pyfunction]
#[pyo3(signature = (sentences, seed = 0, **hyperparams))]
fn train_structural_probe(
    py: Python<'_>,
    sentences: Vec<(Vec<Vec<f64>>, Vec<Edge>)>,
    seed: u64,
    hyperparams: Option<&Bound<'_, PyDict>>,
) -> PyResult<StructuralProbe> {
    let mut hp = ProbeHyperparams::default();
    if let Some(kw) = hyperparams {
        for (key, value) in kw.iter() {
            let key: String = key.extract()?;
            match key.as_str() {
                "rank" => hp.rank = value.extract()?,
                "learning_rate" => hp.learning_rate = value.extract()?,
                "batch_size" => hp.batch_size = value.extract()?,
                "patience" => hp.patience = value.extract()?,
                "max_epochs" => hp.max_epochs = value.extract()?,
                "dev_fraction" => hp.dev_fraction = value.extract()?,
                "lr_decay" => hp.lr_decay = value.extract()?,
                "init_scale" => hp.init_scale = value.extract()?,
                other => return Err(PyValueError::new_err(format!("unknown hyperparameter {other:?}"))),
            }
        }
    }
    let corpus = sentences
        .into_iter()
        .enumerate()
        .map(|(i, (words, edges))| SentenceInstance::new(format!("s{i}"), matrix(&words)?, edges).map_err(py_err))
        .collect::<PyResult<Vec<_>>>()?;
    let trained = py.detach(|| structprobe::train_probe(&corpus, &hp, seed)).map_err(py_err)?;
    Ok(StructuralProbe {
        probe: trained.probe,
        train_loss: trained.train_loss,
        dev_loss: trained.dev_loss,
        epochs_run: trained.epochs_run,
    })
}

#[pyfunction]
fn fit_sigmoid(steps: Vec<f64>, scores: Vec<f64>) -> PyResult<SigmoidFit> {
    Ok(SigmoidFit { inner: trajectory::fit_sigmoid(&steps, &scores).map_err(py_err)? })
}

#[pyfunction]
#[pyo3(signature = (steps, scores, fraction = 0.95))]
fn step_at_fraction(steps: Vec<u64>, scores: Vec<f64>, fraction: f64) -> PyResult<u64> {
    trajectory::step_at_fraction(&steps, &scores, fraction).map_err(py_err)
}

/// Mean of the frames overlapping `[start_s, end_s)`.
#[pyfunction]
fn pool_unit(frames: Vec<Vec<f64>>, frame_period_s: f64, start_s: f64, end_s: f64) -> PyResult<Vec<f64>> {
    let m = matrix(&frames)?;
    let data: Vec<f32> = frames.iter().flatten().map(|&v| v as f32).collect();
    let emb = dataio::FrameEmbeddings::new("u", "L", frame_period_s, m.nrows(), m.ncols(), data).map_err(py_err)?;
    let unit = dataio::AnnotationRow {
        unit_id: "unit".into(),
        utterance_id: "u".into(),
        start_s,
        end_s,
        label: String::new(),
        aux_labels: Default::default(),
    };
    Ok(pooling::pool_unit(&emb, &unit).map_err(py_err)?.vector)
}

/// Frame matrix and frame period of an embedding file.
#[pyfunction]
fn read_embedding_file(path: PathBuf) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let emb = dataio::read_embedding_file(path).map_err(py_err)?;
    let frames = (0..emb.n_frames()).map(|i| emb.row(i).iter().map(|&v| f64::from(v)).collect()).collect();
    Ok((frames, emb.frame_period_s))
}

/// Returns `(errors, warnings)` as lists of messages.
#[pyfunction]
fn validate_config(path: PathBuf) -> PyResult<(Vec<String>, Vec<String>)> {
    let cfg = RunConfig::load(&path).map_err(py_err)?;
    let (report, _) = pipeline::validate(&cfg);
    let fmt = |v: &[pipeline::Issue]| v.iter().map(|i| format!("{}: {}", i.path, i.rule)).collect();
    Ok((fmt(&report.errors), fmt(&report.warnings)))
}

/// Runs a config; returns `{"out_dir", "n_cells", "resumed", "failed"}`.
#[pyfunction]
#[pyo3(signature = (config, out = None, seed = None, folds = None, jobs = None, resume = false))]
fn run<'py>(
    py: Python<'py>,
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    folds: Option<usize>,
    jobs: Option<usize>,
    resume: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::load(&config).map_err(py_err)?;
    let opts = RunOptions { out_dir: out, seed, n_folds: folds, jobs, resume };
    let outcome = py.detach(|| pipeline::run(cfg, &opts)).map_err(|e| match e {
        RunError::Invalid(report) => PyValueError::new_err(format!("validation failed\n{report}")),
        RunError::Fatal(e) => py_err(e),
    })?;
    let d = PyDict::new(py);
    d.set_item("out_dir", outcome.out_dir)?;
    d.set_item("n_cells", outcome.n_cells)?;
    d.set_item("resumed", outcome.resumed)?;
    let failed: Vec<(String, String, u64, String, String)> = outcome
        .failed
        .into_iter()
        .map(|(c, e)| (c.probe_id, c.model_id, c.step, c.layer_id, e))
        .collect();
    d.set_item("failed", failed)?;
    Ok(d)
}

#[pyfunction]
fn report(out_dir: PathBuf) -> PyResult<Vec<PathBuf>> {
    pipeline::report(&out_dir, None).map_err(py_err)
}

/// Writes a synthetic project; returns the path of its run config.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, n_checkpoints = 2, n_layers = 3))]
fn synth_project(out: PathBuf, seed: u64, n_checkpoints: usize, n_layers: usize) -> PyResult<PathBuf> {
    let spec = pipeline::ProjectSpec { seed, n_checkpoints, n_layers, ..Default::default() };
    pipeline::write_project(&spec, &out).map_err(py_err)?;
    Ok(out.join(pipeline::PROJECT_CONFIG))
}

#[pymodule]
#[pyo3(name = "probekit")]
fn probekit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SigmoidFit>()?;
    m.add_class::<LdaProjection>()?;
    m.add_class::<StructuralProbe>()?;
    m.add_class::<AbxTriplet>()?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add_function(wrap_pyfunction!(fit_lda, m)?)?;
    m.add_function(wrap_pyfunction!(abx_score, m)?)?;
    m.add_function(wrap_pyfunction!(rsa_score, m)?)?;
    m.add_function(wrap_pyfunction!(decode_tree, m)?)?;
    m.add_function(wrap_pyfunction!(uuas, m)?)?;
    m.add_function(wrap_pyfunction!(train_structural_probe, m)?)?;
    m.add_function(wrap_pyfunction!(fit_sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(step_at_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(pool_unit, m)?)?;
    m.add_function(wrap_pyfunction!(read_embedding_file, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(synth_project, m)?)?;
    Ok(())
}
