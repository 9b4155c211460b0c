use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{ProbeConfig, ProbeKind, RunConfig, DEFAULT_FOLDS};
use crate::abx::{write_triplets, AbxTriplet};
use crate::clusterprobe::ClusterProbeConfig;
use crate::dataio::{
    embedding_path, write_annotations, write_embedding_file, write_manifest, write_parses, write_reference_table,
    AnnotationRow, AnnotationTable, CheckpointEntry, FrameEmbeddings, LayerEntry, ModelEntry, ReferenceTable,
    RunManifest, SentenceParse, DEFAULT_FRAME_PERIOD_S,
};
use crate::error::{Error, Result};
use crate::seeding::{self, derive_seed, ProbeRng};
use crate::structprobe::ProbeHyperparams;
use crate::synthgen::{gen_tree_corpus, simplex_means};

pub const PROJECT_CONFIG: &str = "run_config.json";
pub const PROJECT_MANIFEST: &str = "manifest.json";

const FRAMES_PER_UNIT: usize = 3;
const UNITS_PER_UTTERANCE: usize = 10;

/// A complete synthetic probing project: every probe type over a fake
/// model whose linguistic signal grows with training step and peaks in the
/// middle layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectSpec {
    pub seed: u64,
    pub model_id: String,
    pub n_checkpoints: usize,
    pub first_step: u64,
    pub step_interval: u64,
    pub n_layers: usize,
    pub dim: usize,
    /// Sentences in the structural-probe corpus.
    pub n_sentences: usize,
}

impl Default for ProjectSpec {
    fn default() -> Self {
        Self { seed: 0, model_id: "synth".into(), n_checkpoints: 2, first_step: 1000, step_interval: 1000, n_layers: 3, dim: 24, n_sentences: 50 }
    }
}

/// Either a whole project (`"kind": "project"`) or a single generator.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthRequest {
    Project(ProjectSpec),
    Data(crate::synthgen::SynthSpec),
}

impl SynthRequest {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("synth config: {e}")))?;
        let bad = |e: serde_json::Error| Error::Config(format!("synth config: {e}"));
        if value.get("kind").and_then(|k| k.as_str()) == Some("project") {
            let mut obj = value;
            obj.as_object_mut().expect("object with kind").remove("kind");
            Ok(Self::Project(serde_json::from_value(obj).map_err(bad)?))
        } else {
            Ok(Self::Data(serde_json::from_value(value).map_err(bad)?))
        }
    }
}

/// Unit vectors of one dataset before the per-cell signal/noise mix.
struct Dataset {
    name: &'static str,
    rows: Vec<AnnotationRow>,
    signal: DMatrix<f64>,
    /// Per-unit offset independent of training (e.g. pronunciation).
    base: Option<DMatrix<f64>>,
    noise_sd: f64,
}

fn normal(rows: usize, cols: usize, rng: &mut ProbeRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn unit_rows(name: &str, labels: Vec<(String, BTreeMap<String, String>)>) -> Vec<AnnotationRow> {
    labels
        .into_iter()
        .enumerate()
        .map(|(i, (label, aux))| {
            let pos = i % UNITS_PER_UTTERANCE;
            AnnotationRow {
                unit_id: format!("{name}_{i:05}"),
                utterance_id: format!("{name}_u{:04}", i / UNITS_PER_UTTERANCE),
                start_s: (pos * FRAMES_PER_UNIT) as f64 * DEFAULT_FRAME_PERIOD_S,
                end_s: ((pos + 1) * FRAMES_PER_UNIT) as f64 * DEFAULT_FRAME_PERIOD_S,
                label,
                aux_labels: aux,
            }
        })
        .collect()
}

fn plain(label: String) -> (String, BTreeMap<String, String>) {
    (label, BTreeMap::new())
}

fn with_aux(label: String, key: &str, value: String) -> (String, BTreeMap<String, String>) {
    (label, BTreeMap::from([(key.to_string(), value)]))
}

/// Flat clusters: `n_classes` simplex means, `per_class` samples each.
fn flat_clusters(name: &'static str, prefix: &str, n_classes: usize, per_class: usize, dim: usize) -> Result<Dataset> {
    let means = simplex_means(n_classes, dim, 8.0)?;
    let mut labels = Vec::new();
    let mut signal = DMatrix::zeros(n_classes * per_class, dim);
    for c in 0..n_classes {
        for s in 0..per_class {
            signal.row_mut(c * per_class + s).copy_from(&means.row(c));
            labels.push(plain(format!("{prefix}{c:02}")));
        }
    }
    Ok(Dataset { name, rows: unit_rows(name, labels), signal, base: None, noise_sd: 1.0 })
}

/// Two-level clusters: categories made of several forms; the form goes into
/// the aux column `key` so splits can be made form-disjoint.
fn nested_clusters(
    name: &'static str,
    key: &str,
    n_categories: usize,
    forms_per_category: usize,
    per_form: usize,
    dim: usize,
    rng: &mut ProbeRng,
) -> Result<Dataset> {
    let means = simplex_means(n_categories, dim, 8.0)?;
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for c in 0..n_categories {
        for f in 0..forms_per_category {
            let offset = normal(1, dim, rng) * 0.5 + means.row(c);
            for _ in 0..per_form {
                rows.push(offset.clone());
                labels.push(with_aux(format!("cat{c}"), key, format!("{name}_form{c}_{f}")));
            }
        }
    }
    let signal = DMatrix::from_rows(&rows.iter().map(|r| r.row(0).into_owned()).collect::<Vec<_>>());
    Ok(Dataset { name, rows: unit_rows(name, labels), signal, base: None, noise_sd: 1.0 })
}

struct Extras {
    references: Vec<(&'static str, ReferenceTable)>,
    triplets: Vec<AbxTriplet>,
    parses: Vec<SentenceParse>,
}

fn build_datasets(spec: &ProjectSpec) -> Result<(Vec<Dataset>, Extras)> {
    let dim = spec.dim;
    let mut rng = seeding::rng(derive_seed(spec.seed, &["datasets"]));
    let mut sets = vec![
        flat_clusters("phones", "ph", 12, 20, dim)?,
        flat_clusters("syllable_forms", "syl", 15, 12, dim)?,
        nested_clusters("syllable_types", "syllable_form", 6, 5, 6, dim, &mut rng)?,
        flat_clusters("word_forms", "w", 20, 8, dim)?,
        nested_clusters("pos", "word_form", 4, 10, 3, dim, &mut rng)?,
    ];
    let mut references = Vec::new();

    // phonetic RSA: model signal is a linear image of an 8-d reference space
    let n = 100;
    let reference = normal(n, 8, &mut rng);
    let map = normal(8, dim, &mut rng) / 8f64.sqrt();
    let labels = (0..n).map(|_| plain("unit".into())).collect();
    let rows = unit_rows("rsa_phonetic", labels);
    references.push(("rsa_phonetic", reference_table(&rows, &reference)?));
    sets.push(Dataset { name: "rsa_phonetic", rows, signal: &reference * map * 2.0, base: None, noise_sd: 1.0 });

    // semantic RSA: forms share a meaning vector; grouped by POS, same-form
    // pairs excluded
    let mut labels = Vec::new();
    let mut sem_rows = Vec::new();
    for (pos, n_forms) in [("NOUN", 8), ("VERB", 8), ("ADJ", 8), ("ADV", 8)] {
        for f in 0..n_forms {
            let sem = normal(1, 12, &mut rng);
            for _ in 0..3 {
                let jitter = normal(1, 12, &mut rng) * 0.05;
                sem_rows.push((&sem + jitter).row(0).into_owned());
                labels.push(with_aux(format!("{pos}_{f}"), "pos", pos.to_string()));
            }
        }
    }
    let sem = DMatrix::from_rows(&sem_rows);
    let map = normal(12, dim, &mut rng) / 12f64.sqrt();
    let rows = unit_rows("rsa_semantic", labels);
    references.push(("rsa_semantic", reference_table(&rows, &sem)?));
    sets.push(Dataset { name: "rsa_semantic", rows, signal: &sem * map * 2.0, base: None, noise_sd: 1.0 });

    // homophone ABX: shared pronunciation, meaning added as the model learns
    let n_triplets = 120;
    let mut labels = Vec::new();
    let mut signal_rows = Vec::new();
    let mut base_rows = Vec::new();
    let mut triplets = Vec::new();
    for t in 0..n_triplets {
        let phon = normal(1, dim, &mut rng);
        let m_ax = normal(1, dim, &mut rng);
        let m_b = normal(1, dim, &mut rng);
        for (role, m) in [("a", &m_ax), ("b", &m_b), ("x", &m_ax)] {
            signal_rows.push(m.row(0).into_owned());
            base_rows.push(phon.row(0).into_owned());
            let meaning = format!("mean{t}{}", if role == "b" { "b" } else { "a" });
            labels.push(with_aux(format!("pron{t}"), "meaning", meaning));
        }
        let id = |k: usize| format!("abx_{:05}", 3 * t + k);
        triplets.push(AbxTriplet {
            a_id: id(0),
            b_id: id(1),
            x_id: id(2),
            phonetic_key: format!("pron{t}"),
            a_meaning_key: format!("mean{t}a"),
            b_meaning_key: format!("mean{t}b"),
        });
    }
    sets.push(Dataset {
        name: "abx",
        rows: unit_rows("abx", labels),
        signal: DMatrix::from_rows(&signal_rows),
        base: Some(DMatrix::from_rows(&base_rows)),
        noise_sd: 1.0,
    });

    // structural: one utterance per sentence, MDS tree geometry as signal
    let corpus = gen_tree_corpus(spec.n_sentences, (4, 9), dim, derive_seed(spec.seed, &["trees"]))?;
    let mut rows = Vec::new();
    let mut signal_rows = Vec::new();
    let mut parses = Vec::new();
    for s in &corpus {
        let mut words = Vec::new();
        for w in 0..s.len() {
            let unit_id = format!("tree_{}_w{w:02}", s.sentence_id);
            rows.push(AnnotationRow {
                unit_id: unit_id.clone(),
                utterance_id: format!("tree_{}", s.sentence_id),
                start_s: (w * FRAMES_PER_UNIT) as f64 * DEFAULT_FRAME_PERIOD_S,
                end_s: ((w + 1) * FRAMES_PER_UNIT) as f64 * DEFAULT_FRAME_PERIOD_S,
                label: "word".into(),
                aux_labels: BTreeMap::new(),
            });
            signal_rows.push(s.word_embeddings.row(w).into_owned());
            words.push(unit_id);
        }
        parses.push(SentenceParse { sentence_id: s.sentence_id.clone(), words, edges: s.gold_edges.clone() });
    }
    sets.push(Dataset { name: "structural", rows, signal: DMatrix::from_rows(&signal_rows), base: None, noise_sd: 0.25 });

    Ok((sets, Extras { references, triplets, parses }))
}

fn reference_table(rows: &[AnnotationRow], x: &DMatrix<f64>) -> Result<ReferenceTable> {
    let data: Vec<f32> = x.transpose().iter().map(|&v| v as f32).collect();
    Ok(ReferenceTable {
        ids: rows.iter().map(|r| r.unit_id.clone()).collect(),
        vectors: FrameEmbeddings::new("reference", "reference", DEFAULT_FRAME_PERIOD_S, x.nrows(), x.ncols(), data)?,
    })
}

/// Signal weight of a (checkpoint, layer) cell: logistic in training
/// progress, scaled by a layer profile peaking in the middle.
pub fn signal_strength(ckpt: usize, n_ckpt: usize, layer: usize, n_layers: usize) -> f64 {
    let t = (ckpt + 1) as f64 / n_ckpt as f64;
    let progress = 1.0 / (1.0 + (-10.0 * (t - 0.5)).exp());
    let mid = (n_layers as f64 - 1.0) / 2.0;
    let profile = if mid > 0.0 { 1.0 - 0.4 * ((layer as f64 - mid).abs() / mid) } else { 1.0 };
    progress * profile
}

fn write_layer(spec: &ProjectSpec, sets: &[Dataset], dir: &Path, strength: f64, cell_seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for set in sets {
        let mut by_utt: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in set.rows.iter().enumerate() {
            by_utt.entry(&r.utterance_id).or_default().push(i);
        }
        for (utt, units) in by_utt {
            let mut rng = seeding::rng(derive_seed(cell_seed, &[utt]));
            let n_frames = units.len() * FRAMES_PER_UNIT;
            let mut data = Vec::with_capacity(n_frames * spec.dim);
            for &i in &units {
                let noise = normal(1, spec.dim, &mut rng) * set.noise_sd;
                let mut v = set.signal.row(i) * strength + noise;
                if let Some(base) = &set.base {
                    v += base.row(i) * 0.5;
                }
                for _ in 0..FRAMES_PER_UNIT {
                    let jitter = normal(1, spec.dim, &mut rng) * 0.05;
                    data.extend((&v + jitter).iter().map(|&x| x as f32));
                }
            }
            let frames = FrameEmbeddings::new(utt, "synth", DEFAULT_FRAME_PERIOD_S, n_frames, spec.dim, data)?;
            write_embedding_file(&frames, embedding_path(dir, utt))?;
        }
    }
    Ok(())
}

fn probe(probe_id: &str, annotations: &str, kind: ProbeKind) -> ProbeConfig {
    ProbeConfig { probe_id: probe_id.into(), annotations: PathBuf::from(annotations), kind }
}

fn cluster(design: ClusterProbeConfig) -> ProbeKind {
    ProbeKind::Cluster { preset: None, design: Some(design), label_key: "label".into() }
}

/// Writes the project under `out`: annotations, references, triplets,
/// parses, per-layer embeddings, a manifest and a run config.
pub fn write_project(spec: &ProjectSpec, out: &Path) -> Result<RunConfig> {
    if spec.n_checkpoints == 0 || spec.n_layers == 0 || spec.dim < 20 || spec.n_sentences < DEFAULT_FOLDS {
        return Err(Error::Config("need >= 1 checkpoint, >= 1 layer, dim >= 20 and >= 5 sentences".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (sets, extras) = build_datasets(spec)?;
    let data_dir = out.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    for set in &sets {
        write_annotations(&AnnotationTable::from_rows(set.rows.clone())?, data_dir.join(format!("{}.csv", set.name)))?;
    }
    for (name, table) in &extras.references {
        write_reference_table(table, data_dir.join(format!("{name}_reference.emb")))?;
    }
    write_triplets(&extras.triplets, data_dir.join("abx_triplets.csv"))?;
    write_parses(&extras.parses, data_dir.join("structural_parses.jsonl"))?;

    let mut checkpoints = Vec::new();
    for c in 0..spec.n_checkpoints {
        let step = spec.first_step + c as u64 * spec.step_interval;
        let mut layers = Vec::new();
        for l in 0..spec.n_layers {
            let layer_id = format!("L{l}");
            let rel = PathBuf::from("embeddings").join(&spec.model_id).join(format!("step{step}")).join(&layer_id);
            let strength = signal_strength(c, spec.n_checkpoints, l, spec.n_layers);
            let cell_seed = derive_seed(spec.seed, &[&spec.model_id, &step.to_string(), &layer_id]);
            write_layer(spec, &sets, &out.join(&rel), strength, cell_seed)?;
            layers.push(LayerEntry { layer_id, embedding_dir: rel });
        }
        checkpoints.push(CheckpointEntry { step, layers });
    }
    let manifest = RunManifest { models: vec![ModelEntry { model_id: spec.model_id.clone(), checkpoints }] };
    write_manifest(&manifest, out.join(PROJECT_MANIFEST))?;

    let hp = ProbeHyperparams {
        rank: spec.dim,
        learning_rate: 0.01,
        batch_size: 10,
        max_epochs: 60,
        patience: 5,
        lr_decay: 0.5,
        ..Default::default()
    };
    let cfg = RunConfig {
        manifest: PathBuf::from(PROJECT_MANIFEST),
        n_folds: DEFAULT_FOLDS,
        seed: spec.seed,
        out_dir: Some(PathBuf::from("out")),
        probes: vec![
            probe("phones", "data/phones.csv", cluster(ClusterProbeConfig::new(12, 20, None))),
            probe("syllable_forms", "data/syllable_forms.csv", cluster(ClusterProbeConfig::new(15, 12, None))),
            probe(
                "syllable_types",
                "data/syllable_types.csv",
                cluster(ClusterProbeConfig::new(6, 30, Some("syllable_form"))),
            ),
            probe("word_forms", "data/word_forms.csv", cluster(ClusterProbeConfig::new(20, 8, None))),
            probe("pos", "data/pos.csv", cluster(ClusterProbeConfig::new(4, 30, Some("word_form")))),
            probe(
                "rsa_phonetic",
                "data/rsa_phonetic.csv",
                ProbeKind::Rsa { reference: "data/rsa_phonetic_reference.emb".into(), group_by: None, exclude_same: None },
            ),
            probe(
                "rsa_semantic",
                "data/rsa_semantic.csv",
                ProbeKind::Rsa {
                    reference: "data/rsa_semantic_reference.emb".into(),
                    group_by: Some("pos".into()),
                    exclude_same: Some("label".into()),
                },
            ),
            probe(
                "abx_homophones",
                "data/abx.csv",
                ProbeKind::Abx {
                    triplets: "data/abx_triplets.csv".into(),
                    meaning_key: Some("meaning".into()),
                    phonetic_key: Some("label".into()),
                },
            ),
            probe(
                "structural",
                "data/structural.csv",
                ProbeKind::Structural { parses: "data/structural_parses.jsonl".into(), hyperparams: hp },
            ),
        ],
    };
    let path = out.join(PROJECT_CONFIG);
    let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(cfg)
}
