//! Structural probe: a linear map under which squared distances between word
//! vectors approximate dependency-tree distances, decoded into trees by
//! minimum spanning tree and scored by UUAS.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::validate_tree;
use crate::error::{Error, Result};
use crate::seeding;

pub type Edge = (usize, usize);

fn norm_edge((i, j): Edge) -> Edge {
    (i.min(j), i.max(j))
}

/// Projection `B` (rank x dim).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeMatrix {
    b: DMatrix<f64>,
}

impl ProbeMatrix {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        let (rank, dim) = b.shape();
        if rank == 0 || rank > dim {
            return Err(Error::Shape(format!("rank {rank} must be in [1, dim={dim}]")));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite probe entry".into()));
        }
        Ok(Self { b })
    }

    pub fn identity(dim: usize) -> Self {
        Self { b: DMatrix::identity(dim, dim) }
    }

    pub fn rank(&self) -> usize {
        self.b.nrows()
    }

    pub fn dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }
}

/// `||B (h_i - h_j)||^2`.
pub fn probe_distance(probe: &ProbeMatrix, h_i: &[f64], h_j: &[f64]) -> Result<f64> {
    if h_i.len() != probe.dim() || h_j.len() != probe.dim() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {} for probe dim {}",
            h_i.len(),
            h_j.len(),
            probe.dim()
        )));
    }
    let diff = DVector::from_iterator(h_i.len(), h_i.iter().zip(h_j).map(|(a, b)| a - b));
    Ok((&probe.b * diff).norm_squared())
}

/// All-pairs path lengths in a tree.
pub fn tree_distances(n: usize, edges: &[Edge]) -> Result<Vec<Vec<u32>>> {
    validate_tree(n, edges).map_err(Error::Validation)?;
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut dist = vec![vec![u32::MAX; n]; n];
    for (src, row) in dist.iter_mut().enumerate() {
        row[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if row[v] == u32::MAX {
                    row[v] = row[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    Ok(dist)
}

/// One sentence: pooled word vectors plus its gold tree.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceInstance {
    pub sentence_id: String,
    /// `n x dim`, one row per word.
    pub word_embeddings: DMatrix<f64>,
    pub gold_edges: Vec<Edge>,
    pub tree_dist: Vec<Vec<u32>>,
}

impl SentenceInstance {
    pub fn new(sentence_id: impl Into<String>, word_embeddings: DMatrix<f64>, gold_edges: Vec<Edge>) -> Result<Self> {
        let sentence_id = sentence_id.into();
        let n = word_embeddings.nrows();
        if n < 2 {
            return Err(Error::Validation(format!(
                "sentence {sentence_id} has {n} word(s); need >= 2"
            )));
        }
        if word_embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("sentence {sentence_id}: non-finite embedding")));
        }
        let gold_edges: Vec<Edge> = gold_edges.into_iter().map(norm_edge).collect();
        let tree_dist = tree_distances(n, &gold_edges)
            .map_err(|e| Error::Validation(format!("sentence {sentence_id}: {e}")))?;
        Ok(Self { sentence_id, word_embeddings, gold_edges, tree_dist })
    }

    pub fn len(&self) -> usize {
        self.word_embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.word_embeddings.ncols()
    }
}

/// Predicted squared distances for every word pair of a sentence.
pub fn predicted_distances(probe: &ProbeMatrix, sentence: &SentenceInstance) -> DMatrix<f64> {
    let projected = &sentence.word_embeddings * probe.b.transpose();
    pairwise_sq(&projected)
}

fn pairwise_sq(rows: &DMatrix<f64>) -> DMatrix<f64> {
    let n = rows.nrows();
    DMatrix::from_fn(n, n, |i, j| (rows.row(i) - rows.row(j)).norm_squared())
}

/// Sentence loss `(1/n^2) * sum_{i != j} |d_tree - d_pred|` and its gradient.
fn sentence_loss_grad(b: &DMatrix<f64>, s: &SentenceInstance) -> (f64, DMatrix<f64>) {
    let n = s.len();
    let norm = (n * n) as f64;
    let projected = &s.word_embeddings * b.transpose();
    let pred = pairwise_sq(&projected);
    let mut loss = 0.0;
    // Laplacian of the sign weights w_ij = -sign(t - p) / n^2
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let resid = s.tree_dist[i][j] as f64 - pred[(i, j)];
            loss += resid.abs();
            let w = -resid.signum() * (resid != 0.0) as u8 as f64 / norm;
            lap[(i, j)] -= w;
            lap[(i, i)] += w;
        }
    }
    let grad = (projected.transpose() * lap * &s.word_embeddings) * 4.0;
    (loss / norm, grad)
}

pub fn sentence_loss(probe: &ProbeMatrix, s: &SentenceInstance) -> f64 {
    sentence_loss_grad(&probe.b, s).0
}

/// Mean sentence loss over a set.
pub fn corpus_loss(probe: &ProbeMatrix, sentences: &[SentenceInstance]) -> f64 {
    if sentences.is_empty() {
        return 0.0;
    }
    sentences.iter().map(|s| sentence_loss(probe, s)).sum::<f64>() / sentences.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeHyperparams {
    /// Probe rank; capped at the embedding dimension.
    pub rank: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub dev_fraction: f64,
    /// Learning-rate multiplier applied after every non-improving epoch.
    pub lr_decay: f64,
    /// Half-width of the uniform initialization of B.
    pub init_scale: f64,
}

impl Default for ProbeHyperparams {
    fn default() -> Self {
        Self {
            rank: 128,
            learning_rate: 1e-3,
            batch_size: 20,
            patience: 5,
            max_epochs: 50,
            dev_fraction: 0.1,
            lr_decay: 0.1,
            init_scale: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub probe: ProbeMatrix,
    /// Mean loss over the training sentences at the returned probe.
    pub train_loss: f64,
    /// Dev loss at the returned probe (train loss when no dev split exists).
    pub dev_loss: f64,
    pub epochs_run: usize,
    /// Mean minibatch loss per epoch.
    pub loss_trace: Vec<f64>,
}

struct Adam {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shape: (usize, usize)) -> Self {
        Self { m: DMatrix::zeros(shape.0, shape.1), v: DMatrix::zeros(shape.0, shape.1), t: 0 }
    }

    fn step(&mut self, param: &mut DMatrix<f64>, grad: &DMatrix<f64>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
        }
    }
}

/// Trains B by Adam on minibatches of sentences, early-stopping on a seeded
/// dev split. Returns the best-dev-loss probe.
pub fn train_probe(train: &[SentenceInstance], hp: &ProbeHyperparams, seed: u64) -> Result<TrainedProbe> {
    let first = train.first().ok_or_else(|| Error::Config("empty training set".into()))?;
    let dim = first.dim();
    if let Some(bad) = train.iter().find(|s| s.dim() != dim) {
        return Err(Error::Shape(format!("sentence {} has dim {} != {dim}", bad.sentence_id, bad.dim())));
    }
    if hp.batch_size == 0 || hp.rank == 0 || hp.max_epochs == 0 {
        return Err(Error::Config("batch_size, rank and max_epochs must be >= 1".into()));
    }
    let rank = hp.rank.min(dim);
    let mut rng = seeding::rng(seed);

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let n_dev = ((train.len() as f64 * hp.dev_fraction).round() as usize).min(train.len() - 1);
    let dev: Vec<&SentenceInstance> = order[..n_dev].iter().map(|&i| &train[i]).collect();
    let mut fit_idx: Vec<usize> = order[n_dev..].to_vec();
    fit_idx.sort_unstable();
    let fit_set: Vec<&SentenceInstance> = fit_idx.iter().map(|&i| &train[i]).collect();
    let eval_set: &[&SentenceInstance] = if dev.is_empty() { &fit_set } else { &dev };

    let mut b = DMatrix::from_fn(rank, dim, |_, _| rng.random_range(-hp.init_scale..=hp.init_scale));
    let mut adam = Adam::new((rank, dim));
    let mut lr = hp.learning_rate;

    let eval = |b: &DMatrix<f64>| -> f64 {
        eval_set.iter().map(|s| sentence_loss_grad(b, s).0).sum::<f64>() / eval_set.len() as f64
    };

    let mut best = (eval(&b), b.clone());
    let mut stale = 0;
    let mut loss_trace = Vec::new();
    let mut iteration = 0;
    let mut epochs_run = 0;
    for _ in 0..hp.max_epochs {
        epochs_run += 1;
        fit_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for batch in fit_idx.chunks(hp.batch_size) {
            iteration += 1;
            // per-sentence terms in parallel, reduced in batch order
            let terms: Vec<(f64, DMatrix<f64>)> =
                batch.par_iter().map(|&i| sentence_loss_grad(&b, &train[i])).collect();
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut grad = DMatrix::zeros(rank, dim);
            for (l, g) in &terms {
                loss += l * scale;
                grad += g * scale;
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { iteration, loss });
            }
            adam.step(&mut b, &grad, lr);
            epoch_loss += loss;
            n_batches += 1;
        }
        loss_trace.push(epoch_loss / n_batches as f64);
        let dev_loss = eval(&b);
        if !dev_loss.is_finite() {
            return Err(Error::Diverged { iteration, loss: dev_loss });
        }
        if dev_loss < best.0 {
            best = (dev_loss, b.clone());
            stale = 0;
        } else {
            stale += 1;
            lr *= hp.lr_decay;
            if stale >= hp.patience {
                break;
            }
        }
    }
    let probe = ProbeMatrix::new(best.1)?;
    let train_loss = fit_set.iter().map(|s| sentence_loss(&probe, s)).sum::<f64>() / fit_set.len() as f64;
    Ok(TrainedProbe {
        train_loss,
        dev_loss: best.0,
        probe,
        epochs_run,
        loss_trace,
    })
}

/// Minimum spanning tree of the complete graph weighted by `dist` (Prim).
///
/// Among equal-weight candidates the lexicographically smallest edge wins.
/// Edges are returned as sorted `(low, high)` pairs.
pub fn decode_tree(dist: &DMatrix<f64>) -> Result<Vec<Edge>> {
    let n = dist.nrows();
    if dist.ncols() != n || n == 0 {
        return Err(Error::Shape(format!("distance matrix must be square and non-empty, got {:?}", dist.shape())));
    }
    if dist.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite distance".into()));
    }
    for i in 0..n {
        for j in i + 1..n {
            if (dist[(i, j)] - dist[(j, i)]).abs() > 1e-9 * dist[(i, j)].abs().max(1.0) {
                return Err(Error::Validation(format!("distance matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut in_tree = vec![false; n];
    // best[v] = (weight, edge) connecting v to the tree
    let mut best: Vec<Option<(f64, Edge)>> = vec![None; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    in_tree[0] = true;
    for v in 1..n {
        best[v] = Some((dist[(0, v)], (0, v)));
    }
    let better = |a: (f64, Edge), b: (f64, Edge)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
    for _ in 1..n {
        let (next, (_, edge)) = (0..n)
            .filter(|&v| !in_tree[v])
            .map(|v| (v, best[v].unwrap()))
            .reduce(|x, y| if better(y.1, x.1) { y } else { x })
            .expect("at least one node outside the tree");
        in_tree[next] = true;
        edges.push(edge);
        for v in 0..n {
            if !in_tree[v] {
                let cand = (dist[(next, v)], norm_edge((next, v)));
                if better(cand, best[v].unwrap()) {
                    best[v] = Some(cand);
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(edges)
}

fn edge_set(n: usize, edges: &[Edge]) -> Result<BTreeSet<Edge>> {
    validate_tree(n, edges).map_err(Error::Validation)?;
    Ok(edges.iter().copied().map(norm_edge).collect())
}

/// Number of shared undirected edges between two trees on `n` nodes.
pub fn shared_edges(n: usize, pred: &[Edge], gold: &[Edge]) -> Result<usize> {
    let p = edge_set(n, pred)?;
    let g = edge_set(n, gold)?;
    Ok(p.intersection(&g).count())
}

/// Undirected unlabeled attachment score of one sentence.
pub fn uuas(n: usize, pred: &[Edge], gold: &[Edge]) -> Result<f64> {
    if n < 2 {
        return Err(Error::Validation("UUAS needs >= 2 words".into()));
    }
    Ok(shared_edges(n, pred, gold)? as f64 / (n - 1) as f64)
}

/// Edge-count-weighted UUAS over `(n, pred, gold)` triples.
pub fn corpus_uuas<'a>(items: impl IntoIterator<Item = (usize, &'a [Edge], &'a [Edge])>) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (n, pred, gold) in items {
        if n < 2 {
            return Err(Error::Validation("UUAS needs >= 2 words".into()));
        }
        hits += shared_edges(n, pred, gold)?;
        total += n - 1;
    }
    if total == 0 {
        return Err(Error::Undefined("corpus UUAS over zero edges".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Chain parse linking each word to its successor.
pub fn sequential_control(n: usize) -> Vec<Edge> {
    (1..n).map(|i| (i - 1, i)).collect()
}

/// Corpus UUAS between each sentence's gold tree and its chain parse.
pub fn gold_vs_sequential<'a>(trees: impl IntoIterator<Item = (usize, &'a [Edge])>) -> Result<f64> {
    let pairs: Vec<(usize, Vec<Edge>, &[Edge])> =
        trees.into_iter().map(|(n, gold)| (n, sequential_control(n), gold)).collect();
    corpus_uuas(pairs.iter().map(|(n, seq, gold)| (*n, seq.as_slice(), *gold)))
}

/// Test-set scores of one structural-probe fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructFoldScore {
    pub fold: usize,
    /// Decoded trees vs gold parses.
    pub uuas_gold: f64,
    /// Decoded trees vs chain parses.
    pub uuas_sequential: f64,
    pub train_loss: f64,
}

pub fn decode_all(probe: &ProbeMatrix, sentences: &[&SentenceInstance]) -> Result<Vec<Vec<Edge>>> {
    sentences.iter().map(|s| decode_tree(&predicted_distances(probe, s))).collect()
}

/// Sentence-level k-fold: train on the other folds, decode and score the
/// held-out sentences.
pub fn run_struct_probe(
    sentences: &[SentenceInstance],
    hp: &ProbeHyperparams,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<StructFoldScore>> {
    if sentences.len() < n_folds || n_folds < 2 {
        return Err(Error::Config(format!(
            "{} sentences cannot fill {n_folds} folds",
            sentences.len()
        )));
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut seeding::rng(seed));
    let mut fold_of = vec![0; sentences.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = seeding::block_fold(pos, order.len(), n_folds);
    }
    (0..n_folds)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<SentenceInstance> =
                (0..sentences.len()).filter(|&i| fold_of[i] != fold).map(|i| sentences[i].clone()).collect();
            let test: Vec<&SentenceInstance> =
                (0..sentences.len()).filter(|&i| fold_of[i] == fold).map(|i| &sentences[i]).collect();
            let trained = train_probe(&train, hp, seeding::fold_seed(seed, fold))?;
            let decoded = decode_all(&trained.probe, &test)?;
            let chains: Vec<Vec<Edge>> = test.iter().map(|s| sequential_control(s.len())).collect();
            let uuas_gold = corpus_uuas(
                test.iter().zip(&decoded).map(|(s, p)| (s.len(), p.as_slice(), s.gold_edges.as_slice())),
            )?;
            let uuas_sequential = corpus_uuas(
                test.iter().zip(&decoded).zip(&chains).map(|((s, p), c)| (s.len(), p.as_slice(), c.as_slice())),
            )?;
            Ok(StructFoldScore { fold, uuas_gold, uuas_sequential, train_loss: trained.train_loss })
        })
        .collect()
}
