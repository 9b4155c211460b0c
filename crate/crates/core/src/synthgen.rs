//! Synthetic data with known ground truth for every probe, plus writers that
//! store generated sets in the on-disk formats of [`crate::dataio`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::abx::{write_triplets, AbxTriplet};
use crate::dataio::{
    embedding_path, write_annotations, write_embedding_file, write_parses, write_reference_table, AnnotationRow,
    AnnotationTable, FrameEmbeddings, ReferenceTable, SentenceParse, DEFAULT_FRAME_PERIOD_S,
};
use crate::error::{Error, Result};
use crate::seeding::{self, ProbeRng};
use crate::structprobe::{tree_distances, Edge, SentenceInstance};
use crate::trajectory::sigmoid;

fn normal_matrix(rows: usize, cols: usize, rng: &mut ProbeRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `n` points in `dim` dimensions with all pairwise distances equal to
/// `separation` (Helmert simplex, centred on the origin).
pub fn simplex_means(n: usize, dim: usize, separation: f64) -> Result<DMatrix<f64>> {
    if n < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if dim < n - 1 {
        return Err(Error::Config(format!("{n} equidistant means need dim >= {}, got {dim}", n - 1)));
    }
    // rows of the Helmert basis span the sum-zero subspace of R^n
    let mut e = DMatrix::zeros(n, dim);
    for j in 0..n - 1 {
        let m = (j + 1) as f64;
        let scale = 1.0 / (m * (m + 1.0)).sqrt();
        for i in 0..=j {
            e[(i, j)] = scale;
        }
        e[(j + 1, j)] = -m * scale;
    }
    // identity-minus-mean rows have pairwise distance sqrt(2)
    Ok(e * (separation / 2f64.sqrt()))
}

/// Labelled Gaussian clusters: simplex means at pairwise distance
/// `separation`, unit isotropic noise. Labels are `c000`, `c001`, ...
pub fn gen_clusters(
    n_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let means = simplex_means(n_classes, dim, separation)?;
    let mut rng = seeding::rng(seed);
    let mut x = normal_matrix(n_classes * per_class, dim, &mut rng);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        for s in 0..per_class {
            let mut row = x.row_mut(c * per_class + s);
            row += means.row(c);
            labels.push(format!("c{c:03}"));
        }
    }
    Ok((x, labels))
}

/// Haar-random orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    let g = normal_matrix(n, n, &mut seeding::rng(seed));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Uniform random labelled tree on `n` nodes via a Prüfer sequence.
pub fn prufer_tree(n: usize, rng: &mut ProbeRng) -> Vec<Edge> {
    match n {
        0 | 1 => return Vec::new(),
        2 => return vec![(0, 1)],
        _ => {}
    }
    let seq: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &v in &seq {
        degree[v] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &v in &seq {
        let leaf = (0..n).find(|&u| degree[u] == 1).expect("a leaf exists");
        edges.push((leaf.min(v), leaf.max(v)));
        degree[leaf] -= 1;
        degree[v] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&u| degree[u] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges.sort_unstable();
    edges
}

/// Classical MDS: rows whose squared Euclidean distances reproduce `sq_dist`,
/// zero-padded to `dim` columns. Fails if the residual exceeds `1e-8`.
pub fn mds_embed(sq_dist: &DMatrix<f64>, dim: usize) -> Result<DMatrix<f64>> {
    let n = sq_dist.nrows();
    if dim < n {
        return Err(Error::Config(format!("dim {dim} below point count {n}")));
    }
    let j = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let gram = -0.5 * &j * sq_dist * &j;
    let eig = SymmetricEigen::new(gram);
    let mut x = DMatrix::zeros(n, dim);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        for i in 0..n {
            x[(i, k)] = eig.eigenvectors[(i, k)] * s;
        }
    }
    let mut worst = 0f64;
    for a in 0..n {
        for b in 0..n {
            let d = (x.row(a) - x.row(b)).norm_squared();
            worst = worst.max((d - sq_dist[(a, b)]).abs());
        }
    }
    if worst > 1e-8 {
        return Err(Error::Numeric(format!("MDS residual {worst:e} above 1e-8")));
    }
    Ok(x)
}

/// Random trees whose word vectors have squared distances equal to tree
/// distances. Lengths are uniform in `length_range` (inclusive).
pub fn gen_tree_corpus(
    n_sentences: usize,
    length_range: (usize, usize),
    dim: usize,
    seed: u64,
) -> Result<Vec<SentenceInstance>> {
    let (lo, hi) = length_range;
    if lo < 2 || hi < lo {
        return Err(Error::Config(format!("bad length range {lo}..={hi}")));
    }
    if dim < hi {
        return Err(Error::Config(format!("dim {dim} below max sentence length {hi}")));
    }
    let mut rng = seeding::rng(seed);
    (0..n_sentences)
        .map(|s| {
            let n = rng.random_range(lo..=hi);
            let edges = prufer_tree(n, &mut rng);
            let td = tree_distances(n, &edges)?;
            let sq = DMatrix::from_fn(n, n, |i, j| f64::from(td[i][j]));
            let x = mds_embed(&sq, dim)?;
            SentenceInstance::new(format!("s{s:04}"), x, edges)
        })
        .collect()
}

/// Random trees paired with isotropic Gaussian word vectors carrying no
/// information about the trees.
pub fn gen_random_tree_corpus(
    n_sentences: usize,
    length_range: (usize, usize),
    dim: usize,
    seed: u64,
) -> Result<Vec<SentenceInstance>> {
    let (lo, hi) = length_range;
    if lo < 2 || hi < lo {
        return Err(Error::Config(format!("bad length range {lo}..={hi}")));
    }
    let mut rng = seeding::rng(seed);
    (0..n_sentences)
        .map(|s| {
            let n = rng.random_range(lo..=hi);
            let edges = prufer_tree(n, &mut rng);
            SentenceInstance::new(format!("s{s:04}"), normal_matrix(n, dim, &mut rng), edges)
        })
        .collect()
}

/// `a / (1 + exp(-k (x - b))) + c` at each step plus Gaussian noise.
pub fn gen_sigmoid_series(a: f64, b: f64, c: f64, k: f64, steps: &[f64], noise_sd: f64, seed: u64) -> Vec<f64> {
    let mut rng = seeding::rng(seed);
    steps
        .iter()
        .map(|&x| {
            let y = sigmoid(x, a, b, c, k);
            if noise_sd > 0.0 {
                let e: f64 = StandardNormal.sample(&mut rng);
                y + noise_sd * e
            } else {
                y
            }
        })
        .collect()
}

/// Homophone triplets. Each triplet has its own pronunciation vector shared
/// by A, B and X, and two meaning vectors (one for A and X, one for B) added
/// with weight `signal`; per-unit noise is isotropic. `signal = 0` gives
/// embeddings independent of meaning.
pub fn gen_abx_set(
    n_triplets: usize,
    dim: usize,
    signal: f64,
    seed: u64,
) -> (Vec<AbxTriplet>, HashMap<String, Vec<f64>>) {
    let mut rng = seeding::rng(seed);
    let draw = |rng: &mut ProbeRng| -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(rng)).collect() };
    let mut triplets = Vec::with_capacity(n_triplets);
    let mut emb = HashMap::with_capacity(3 * n_triplets);
    for t in 0..n_triplets {
        let phon = draw(&mut rng);
        let meaning_ax = draw(&mut rng);
        let meaning_b = draw(&mut rng);
        for (role, meaning) in [("a", &meaning_ax), ("b", &meaning_b), ("x", &meaning_ax)] {
            let noise = draw(&mut rng);
            let v = (0..dim).map(|i| 0.5 * phon[i] + signal * meaning[i] + noise[i]).collect();
            emb.insert(format!("t{t:05}{role}"), v);
        }
        triplets.push(AbxTriplet {
            a_id: format!("t{t:05}a"),
            b_id: format!("t{t:05}b"),
            x_id: format!("t{t:05}x"),
            phonetic_key: format!("p{t:05}"),
            a_meaning_key: format!("m{t:05}a"),
            b_meaning_key: format!("m{t:05}b"),
        });
    }
    (triplets, emb)
}

/// Model and reference spaces over the same `n` units. The reference is
/// Gaussian; the model mixes a random linear map of it (weight `coupling`)
/// with independent noise (weight `1 - coupling`).
pub fn gen_rsa_pair(
    n: usize,
    model_dim: usize,
    reference_dim: usize,
    coupling: f64,
    seed: u64,
) -> (Vec<String>, DMatrix<f64>, DMatrix<f64>) {
    let mut rng = seeding::rng(seed);
    let reference = normal_matrix(n, reference_dim, &mut rng);
    let map = normal_matrix(reference_dim, model_dim, &mut rng) / (reference_dim as f64).sqrt();
    let noise = normal_matrix(n, model_dim, &mut rng);
    let model = &reference * map * coupling + noise * (1.0 - coupling);
    let ids = (0..n).map(|i| format!("u{i:05}")).collect();
    (ids, model, reference)
}

/// A generator request as stored in a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    #[serde(flatten)]
    pub params: SynthParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthParams {
    Clusters { n_classes: usize, per_class: usize, dim: usize, separation: f64 },
    RsaPair { n_units: usize, model_dim: usize, reference_dim: usize, coupling: f64 },
    AbxSet { n_triplets: usize, dim: usize, signal: f64 },
    TreeCorpus { n_sentences: usize, min_len: usize, max_len: usize, dim: usize },
    SigmoidSeries { a: f64, b: f64, c: f64, k: f64, steps: Vec<f64>, noise_sd: f64 },
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match &self.params {
            SynthParams::Clusters { n_classes, per_class, dim, .. } => {
                if *n_classes < 2 || *per_class < 2 || *dim < n_classes - 1 {
                    return bad("clusters need >= 2 classes, >= 2 per class and dim >= n_classes - 1");
                }
            }
            SynthParams::RsaPair { n_units, model_dim, reference_dim, .. } => {
                if *n_units < 3 || *model_dim == 0 || *reference_dim == 0 {
                    return bad("rsa_pair needs >= 3 units and positive dims");
                }
            }
            SynthParams::AbxSet { n_triplets, dim, .. } => {
                if *n_triplets == 0 || *dim == 0 {
                    return bad("abx_set needs triplets and a positive dim");
                }
            }
            SynthParams::TreeCorpus { n_sentences, min_len, max_len, dim } => {
                if *n_sentences == 0 || *min_len < 2 || max_len < min_len || dim < max_len {
                    return bad("tree_corpus needs 2 <= min_len <= max_len <= dim");
                }
            }
            SynthParams::SigmoidSeries { steps, .. } => {
                if steps.is_empty() {
                    return bad("sigmoid_series needs steps");
                }
            }
        }
        Ok(())
    }

    /// Generates the data set and writes it under `out`. Returns the files
    /// written, relative to `out`.
    pub fn write(&self, out: &Path) -> Result<Vec<String>> {
        self.validate()?;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let seed = self.seed;
        match &self.params {
            SynthParams::Clusters { n_classes, per_class, dim, separation } => {
                let (x, labels) = gen_clusters(*n_classes, *per_class, *dim, *separation, seed)?;
                let ids: Vec<String> = (0..x.nrows()).map(|i| format!("u{i:05}")).collect();
                let aux: Vec<BTreeMap<String, String>> = vec![BTreeMap::new(); ids.len()];
                write_unit_utterance(out, "synth", &ids, &labels, &aux, &x)?;
                Ok(vec!["annotations.csv".into(), "embeddings/synth.emb".into()])
            }
            SynthParams::RsaPair { n_units, model_dim, reference_dim, coupling } => {
                let (ids, model, reference) = gen_rsa_pair(*n_units, *model_dim, *reference_dim, *coupling, seed);
                let labels = vec!["unit".to_string(); ids.len()];
                let aux = vec![BTreeMap::new(); ids.len()];
                write_unit_utterance(out, "synth", &ids, &labels, &aux, &model)?;
                let table = ReferenceTable { ids, vectors: to_frames("reference", "ref", &reference)? };
                write_reference_table(&table, out.join("reference.emb"))?;
                Ok(vec![
                    "annotations.csv".into(),
                    "embeddings/synth.emb".into(),
                    "reference.emb".into(),
                    "reference.emb.ids".into(),
                ])
            }
            SynthParams::AbxSet { n_triplets, dim, signal } => {
                let (triplets, emb) = gen_abx_set(*n_triplets, *dim, *signal, seed);
                let mut ids = Vec::new();
                let mut labels = Vec::new();
                let mut aux = Vec::new();
                for t in &triplets {
                    for (id, meaning) in [(&t.a_id, &t.a_meaning_key), (&t.b_id, &t.b_meaning_key), (&t.x_id, &t.a_meaning_key)] {
                        ids.push(id.clone());
                        labels.push(t.phonetic_key.clone());
                        aux.push(BTreeMap::from([("meaning".to_string(), meaning.clone())]));
                    }
                }
                let rows: Vec<Vec<f64>> = ids.iter().map(|id| emb[id].clone()).collect();
                let x = DMatrix::from_fn(rows.len(), *dim, |i, j| rows[i][j]);
                write_unit_utterance(out, "synth", &ids, &labels, &aux, &x)?;
                write_triplets(&triplets, out.join("triplets.csv"))?;
                Ok(vec!["annotations.csv".into(), "embeddings/synth.emb".into(), "triplets.csv".into()])
            }
            SynthParams::TreeCorpus { n_sentences, min_len, max_len, dim } => {
                let corpus = gen_tree_corpus(*n_sentences, (*min_len, *max_len), *dim, seed)?;
                write_tree_corpus(out, &corpus)?;
                Ok(vec!["annotations.csv".into(), "embeddings/".into(), "parses.jsonl".into()])
            }
            SynthParams::SigmoidSeries { a, b, c, k, steps, noise_sd } => {
                let ys = gen_sigmoid_series(*a, *b, *c, *k, steps, *noise_sd, seed);
                let path = out.join("series.csv");
                let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
                let io = |e: csv::Error| Error::io(&path, e.into());
                w.write_record(["step", "score"]).map_err(io)?;
                for (x, y) in steps.iter().zip(&ys) {
                    w.write_record([x.to_string(), y.to_string()]).map_err(io)?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
                Ok(vec!["series.csv".into()])
            }
        }
    }
}

fn to_frames(utterance_id: &str, layer_id: &str, x: &DMatrix<f64>) -> Result<FrameEmbeddings> {
    let data: Vec<f32> = x.transpose().iter().map(|&v| v as f32).collect();
    FrameEmbeddings::new(utterance_id, layer_id, DEFAULT_FRAME_PERIOD_S, x.nrows(), x.ncols(), data)
}

/// Annotation rows for `ids` laid out one frame each, starting at frame 0.
pub fn one_frame_rows(
    utterance_id: &str,
    ids: &[String],
    labels: &[String],
    aux: &[BTreeMap<String, String>],
) -> Vec<AnnotationRow> {
    ids.iter()
        .zip(labels)
        .zip(aux)
        .enumerate()
        .map(|(i, ((id, label), aux))| AnnotationRow {
            unit_id: id.clone(),
            utterance_id: utterance_id.to_string(),
            start_s: i as f64 * DEFAULT_FRAME_PERIOD_S,
            end_s: (i + 1) as f64 * DEFAULT_FRAME_PERIOD_S,
            label: label.clone(),
            aux_labels: aux.clone(),
        })
        .collect()
}

/// Stores unit vectors as one utterance with one frame per unit, so that
/// pooling each annotated unit returns its vector.
fn write_unit_utterance(
    out: &Path,
    utterance_id: &str,
    ids: &[String],
    labels: &[String],
    aux: &[BTreeMap<String, String>],
    x: &DMatrix<f64>,
) -> Result<()> {
    let dir = out.join("embeddings");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_embedding_file(&to_frames(utterance_id, "synth", x)?, embedding_path(&dir, utterance_id))?;
    let table = AnnotationTable::from_rows(one_frame_rows(utterance_id, ids, labels, aux))?;
    write_annotations(&table, out.join("annotations.csv"))
}

/// One utterance per sentence, one frame per word; word units are named
/// `<sentence>_w<index>`.
pub fn write_tree_corpus(out: &Path, corpus: &[SentenceInstance]) -> Result<()> {
    let dir = out.join("embeddings");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut rows = Vec::new();
    let mut parses = Vec::new();
    for s in corpus {
        let words: Vec<String> = (0..s.len()).map(|i| format!("{}_w{i:02}", s.sentence_id)).collect();
        let labels = vec!["word".to_string(); words.len()];
        let aux = vec![BTreeMap::new(); words.len()];
        rows.extend(one_frame_rows(&s.sentence_id, &words, &labels, &aux));
        write_embedding_file(
            &to_frames(&s.sentence_id, "synth", &s.word_embeddings)?,
            embedding_path(&dir, &s.sentence_id),
        )?;
        parses.push(SentenceParse { sentence_id: s.sentence_id.clone(), words, edges: s.gold_edges.clone() });
    }
    write_annotations(&AnnotationTable::from_rows(rows)?, out.join("annotations.csv"))?;
    write_parses(&parses, out.join("parses.jsonl"))
}
