//! Categorical-structure probes: LDA projection fit on train units, silhouette
//! of the projected held-out units.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Shrinkage weight pulling the within-class scatter toward a scaled identity.
pub const DEFAULT_SHRINKAGE: f64 = 0.1;

/// Linear discriminant projection onto `N - 1` directions.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaProjection {
    pub mean: DVector<f64>,
    /// `dim x (N - 1)`; column `j` is the j-th discriminant direction.
    pub basis: DMatrix<f64>,
    pub class_labels: Vec<String>,
    /// Generalized eigenvalues of the kept directions, descending.
    pub eigenvalues: Vec<f64>,
}

impl LdaProjection {
    pub fn n_directions(&self) -> usize {
        self.basis.ncols()
    }

    /// Projects the rows of `x`; returns `m x (N - 1)`.
    pub fn project(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "input dim {} != projection dim {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * &self.basis)
    }
}

fn group_indices(labels: &[String]) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.as_str()).or_default().push(i);
    }
    groups
}

pub fn fit_lda(x: &DMatrix<f64>, y: &[String]) -> Result<LdaProjection> {
    fit_lda_with_shrinkage(x, y, DEFAULT_SHRINKAGE)
}

/// Solves `S_b v = lambda S_w v` with `S_w` shrunk toward
/// `trace(S_w) / dim * I`, via Cholesky whitening of the regularized `S_w`.
pub fn fit_lda_with_shrinkage(x: &DMatrix<f64>, y: &[String], shrinkage: f64) -> Result<LdaProjection> {
    let (n, dim) = x.shape();
    if y.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} labels", y.len())));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::Config(format!("shrinkage {shrinkage} outside [0, 1]")));
    }
    let groups = group_indices(y);
    let n_classes = groups.len();
    if n_classes < 2 {
        return Err(Error::Config(format!("LDA needs >= 2 classes, got {n_classes}")));
    }
    if let Some((label, idx)) = groups.iter().find(|(_, idx)| idx.len() < 2) {
        return Err(Error::Config(format!(
            "class {label:?} has {} training sample(s); need >= 2",
            idx.len()
        )));
    }
    if n <= n_classes {
        return Err(Error::Config(format!(
            "need more samples ({n}) than classes ({n_classes})"
        )));
    }
    if dim < n_classes - 1 {
        return Err(Error::Config(format!(
            "dim {dim} cannot hold {} discriminant directions",
            n_classes - 1
        )));
    }

    let mean = x.row_mean().transpose();
    let mut within = DMatrix::<f64>::zeros(dim, dim);
    let mut between = DMatrix::<f64>::zeros(dim, dim);
    for idx in groups.values() {
        let rows = x.select_rows(idx);
        let class_mean = rows.row_mean().transpose();
        let mut centered = rows;
        for mut r in centered.row_iter_mut() {
            r -= class_mean.transpose();
        }
        within.gemm_tr(1.0, &centered, &centered, 1.0);
        let diff = &class_mean - &mean;
        between.ger(idx.len() as f64, &diff, &diff, 1.0);
    }
    let trace = within.trace();
    if !trace.is_finite() || within.iter().chain(between.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite scatter matrix".into()));
    }
    let mut reg = within * (1.0 - shrinkage);
    let ridge = shrinkage * trace / dim as f64;
    for i in 0..dim {
        reg[(i, i)] += ridge;
    }
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::Numeric("regularized within-class scatter is not positive definite".into()))?;
    let l = chol.l();

    // whitened = L^-1 S_b L^-T
    let half = l
        .solve_lower_triangular(&between)
        .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
    let whitened = l
        .solve_lower_triangular(&half.transpose())
        .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
    let whitened = (&whitened + whitened.transpose()) * 0.5;
    let eig = SymmetricEigen::new(whitened);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let k = n_classes - 1;
    let lt = l.transpose();
    let mut basis = DMatrix::<f64>::zeros(dim, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (j, &col) in order.iter().take(k).enumerate() {
        let u = eig.eigenvectors.column(col).into_owned();
        let mut v = lt
            .solve_upper_triangular(&u)
            .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
        // sign convention: largest-magnitude component positive
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        basis.set_column(j, &v);
        eigenvalues.push(eig.eigenvalues[col]);
    }
    if basis.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite discriminant direction".into()));
    }
    Ok(LdaProjection {
        mean,
        basis,
        class_labels: groups.keys().map(|s| s.to_string()).collect(),
        eigenvalues,
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance.
///
/// Points in singleton clusters contribute 0.
pub fn silhouette(x: &DMatrix<f64>, labels: &[String]) -> Result<f64> {
    let m = x.nrows();
    if labels.len() != m {
        return Err(Error::Shape(format!("{m} rows but {} labels", labels.len())));
    }
    let groups = group_indices(labels);
    if groups.len() < 2 {
        return Err(Error::Undefined(format!(
            "silhouette needs >= 2 clusters, got {}",
            groups.len()
        )));
    }
    let mut cluster_of = vec![0usize; m];
    let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
    for (c, idx) in groups.values().enumerate() {
        for &i in idx {
            cluster_of[i] = c;
        }
    }
    // row-major copy so each point is a contiguous slice
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    let per_point: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let own = cluster_of[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0f64; sizes.len()];
            for j in 0..m {
                if j != i {
                    sums[cluster_of[j]] += euclidean(&rows[i], &rows[j]);
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = sums
                .iter()
                .zip(&sizes)
                .enumerate()
                .filter(|(c, _)| *c != own)
                .map(|(_, (s, &n))| s / n as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    Ok(per_point.iter().sum::<f64>() / m as f64)
}

/// Named dataset designs for the five clustering analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterPreset {
    Phones,
    SyllableForms,
    SyllableTypes,
    WordForms,
    Pos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProbeConfig {
    pub n_categories: usize,
    pub samples_per_category: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Label column whose values may not appear on both sides of a split.
    #[serde(default)]
    pub disjoint_key: Option<String>,
    #[serde(default = "default_shrinkage")]
    pub shrinkage: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_shrinkage() -> f64 {
    DEFAULT_SHRINKAGE
}

impl ClusterProbeConfig {
    pub fn new(n_categories: usize, samples_per_category: usize, disjoint_key: Option<&str>) -> Self {
        Self {
            n_categories,
            samples_per_category,
            train_fraction: 0.8,
            test_fraction: 0.2,
            disjoint_key: disjoint_key.map(str::to_owned),
            shrinkage: DEFAULT_SHRINKAGE,
        }
    }

    pub fn preset(preset: ClusterPreset) -> Self {
        match preset {
            ClusterPreset::Phones => Self::new(37, 50, None),
            ClusterPreset::SyllableForms => Self::new(100, 20, None),
            // 5 syllable forms per type, 20 samples each
            ClusterPreset::SyllableTypes => Self::new(20, 100, Some("syllable_form")),
            ClusterPreset::WordForms => Self::new(250, 10, None),
            // 50 word forms per category, 3 samples each
            ClusterPreset::Pos => Self::new(4, 150, Some("word_form")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 2 {
            return Err(Error::Config("n_categories must be >= 2".into()));
        }
        if self.samples_per_category < 2 {
            return Err(Error::Config("samples_per_category must be >= 2".into()));
        }
        if (self.train_fraction + self.test_fraction - 1.0).abs() > 1e-9
            || self.train_fraction <= 0.0
            || self.test_fraction <= 0.0
        {
            return Err(Error::Config(format!(
                "train/test fractions {} / {} must be positive and sum to 1",
                self.train_fraction, self.test_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(Error::Config(format!("shrinkage {} outside [0, 1]", self.shrinkage)));
        }
        Ok(())
    }

    /// Fold count implied by the test fraction (0.2 -> 5).
    pub fn implied_folds(&self) -> usize {
        (1.0 / self.test_fraction).round() as usize
    }

    /// Soft mismatches between the configured design and an actual dataset.
    pub fn design_warnings(&self, labels: &[String]) -> Vec<String> {
        let groups = group_indices(labels);
        let mut out = Vec::new();
        if groups.len() != self.n_categories {
            out.push(format!(
                "expected {} categories, dataset has {}",
                self.n_categories,
                groups.len()
            ));
        }
        let off: Vec<String> = groups
            .iter()
            .filter(|(_, idx)| idx.len() != self.samples_per_category)
            .map(|(l, idx)| format!("{l}={}", idx.len()))
            .collect();
        if !off.is_empty() {
            out.push(format!(
                "expected {} samples per category; {} categories differ ({})",
                self.samples_per_category,
                off.len(),
                off.iter().take(5).cloned().collect::<Vec<_>>().join(", ")
            ));
        }
        out
    }
}

/// Labeled unit vectors for one clustering probe.
#[derive(Debug, Clone)]
pub struct ClusterDataset {
    /// One row per unit.
    pub x: DMatrix<f64>,
    pub labels: Vec<String>,
    /// Disjointness key per unit (e.g. word form for the POS probe).
    pub keys: Option<Vec<String>>,
}

/// Test-fold index per sample, stratified by label.
///
/// Within each class the items (samples, or disjointness keys when given)
/// are shuffled and cut into `n_folds` contiguous blocks.
pub fn stratified_folds(
    labels: &[String],
    keys: Option<&[String]>,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need >= 2 folds, got {n_folds}")));
    }
    if let Some(k) = keys {
        if k.len() != labels.len() {
            return Err(Error::Shape("keys and labels differ in length".into()));
        }
    }
    let mut rng = seeding::rng(seed);
    let mut fold_of = vec![usize::MAX; labels.len()];
    for (label, idx) in group_indices(labels) {
        match keys {
            None => {
                let mut shuffled = idx.clone();
                shuffled.shuffle(&mut rng);
                for (pos, &i) in shuffled.iter().enumerate() {
                    fold_of[i] = seeding::block_fold(pos, shuffled.len(), n_folds);
                }
            }
            Some(keys) => {
                let mut by_key: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                for &i in &idx {
                    by_key.entry(keys[i].as_str()).or_default().push(i);
                }
                let max_share = (n_folds - 1) as f64 / n_folds as f64;
                if let Some((key, members)) = by_key
                    .iter()
                    .find(|(_, m)| m.len() as f64 > max_share * idx.len() as f64)
                {
                    return Err(Error::Config(format!(
                        "key {key:?} holds {} of {} samples of class {label:?}; cannot split disjointly",
                        members.len(),
                        idx.len()
                    )));
                }
                if by_key.len() < n_folds {
                    return Err(Error::Config(format!(
                        "class {label:?} has {} distinct keys; need >= {n_folds} for disjoint folds",
                        by_key.len()
                    )));
                }
                let mut key_list: Vec<&str> = by_key.keys().copied().collect();
                key_list.shuffle(&mut rng);
                for (pos, key) in key_list.iter().enumerate() {
                    let fold = seeding::block_fold(pos, key_list.len(), n_folds);
                    for &i in &by_key[key] {
                        fold_of[i] = fold;
                    }
                }
            }
        }
    }
    Ok(fold_of)
}

/// Fits LDA on each fold's training units and scores the projected test
/// units by silhouette. Returns `(fold, score)` in fold order.
pub fn run_cluster_probe(
    data: &ClusterDataset,
    config: &ClusterProbeConfig,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    config.validate()?;
    if data.labels.len() != data.x.nrows() {
        return Err(Error::Shape("labels and rows differ in length".into()));
    }
    if config.disjoint_key.is_some() && data.keys.is_none() {
        return Err(Error::Config(format!(
            "disjointness key {:?} configured but dataset carries no keys",
            config.disjoint_key
        )));
    }
    let keys = if config.disjoint_key.is_some() {
        data.keys.as_deref()
    } else {
        None
    };
    let fold_of = stratified_folds(&data.labels, keys, n_folds, seed)?;
    (0..n_folds)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..fold_of.len()).filter(|&i| fold_of[i] != fold).collect();
            let test: Vec<usize> = (0..fold_of.len()).filter(|&i| fold_of[i] == fold).collect();
            let pick = |idx: &[usize]| idx.iter().map(|&i| data.labels[i].clone()).collect::<Vec<_>>();
            let lda = fit_lda_with_shrinkage(&data.x.select_rows(&train), &pick(&train), config.shrinkage)?;
            let projected = lda.project(&data.x.select_rows(&test))?;
            Ok((fold, silhouette(&projected, &pick(&test))?))
        })
        .collect()
}

/// Keys that appear both in and out of each fold's test set; empty when the
/// split is disjoint.
pub fn disjointness_violations(fold_of: &[usize], keys: &[String], n_folds: usize) -> Vec<String> {
    let mut bad = BTreeSet::new();
    for fold in 0..n_folds {
        let test: BTreeSet<&str> = fold_of
            .iter()
            .zip(keys)
            .filter(|(f, _)| **f == fold)
            .map(|(_, k)| k.as_str())
            .collect();
        for (f, k) in fold_of.iter().zip(keys) {
            if *f != fold && test.contains(k.as_str()) {
                bad.insert(k.clone());
            }
        }
    }
    bad.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Direct per-point enumeration of the silhouette definition.
    fn silhouette_oracle(points: &[Vec<f64>], y: &[usize]) -> f64 {
        let d = |a: &Vec<f64>, b: &Vec<f64>| {
            a.iter().zip(b).map(|(x, z)| (x - z).powi(2)).sum::<f64>().sqrt()
        };
        let k = *y.iter().max().unwrap() + 1;
        let mut total = 0.0;
        for i in 0..points.len() {
            let own: Vec<usize> = (0..points.len()).filter(|&j| y[j] == y[i] && j != i).collect();
            if own.is_empty() {
                continue;
            }
            let a = own.iter().map(|&j| d(&points[i], &points[j])).sum::<f64>() / own.len() as f64;
            let mut b = f64::INFINITY;
            for c in 0..k {
                if c == y[i] {
                    continue;
                }
                let members: Vec<usize> = (0..points.len()).filter(|&j| y[j] == c).collect();
                if members.is_empty() {
                    continue;
                }
                let mean = members.iter().map(|&j| d(&points[i], &points[j])).sum::<f64>()
                    / members.len() as f64;
                b = b.min(mean);
            }
            total += (b - a) / a.max(b);
        }
        total / points.len() as f64
    }

    fn mat(rows: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows.len(), rows[0].len(), &rows.concat())
    }

    #[test]
    fn duplicated_points_score_one() {
        let x = mat(&[vec![0., 0.], vec![0., 0.], vec![10., 10.], vec![10., 10.]]);
        assert_eq!(silhouette(&x, &labels(&["a", "a", "b", "b"])).unwrap(), 1.0);
    }

    #[test]
    fn five_point_example_matches_oracle_and_reference() {
        let pts = vec![vec![0., 0.], vec![1., 0.], vec![0., 1.], vec![4., 4.], vec![5., 3.]];
        let s = silhouette(&mat(&pts), &labels(&["a", "a", "a", "b", "b"])).unwrap();
        assert_abs_diff_eq!(s, silhouette_oracle(&pts, &[0, 0, 0, 1, 1]), epsilon = 1e-12);
        // frozen from an independent reference implementation
        assert_abs_diff_eq!(s, 0.7638811573795442, epsilon = 1e-12);
    }

    #[test]
    fn singleton_cluster_scores_zero() {
        let pts = vec![vec![0.], vec![1.], vec![5.], vec![6.], vec![20.]];
        let s = silhouette(&mat(&pts), &labels(&["a", "a", "b", "b", "c"])).unwrap();
        assert_abs_diff_eq!(s, 0.6383838383838384, epsilon = 1e-12);
        assert_abs_diff_eq!(s, silhouette_oracle(&pts, &[0, 0, 1, 1, 2]), epsilon = 1e-12);
    }

    #[test]
    fn one_cluster_is_undefined() {
        let x = mat(&[vec![0.], vec![1.]]);
        assert!(matches!(silhouette(&x, &labels(&["a", "a"])), Err(Error::Undefined(_))));
    }

    #[test]
    fn shuffled_labels_on_isotropic_data_near_zero() {
        let mut rng = seeding::rng(3);
        let m = 400;
        let data: Vec<f64> = (0..m * 8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = DMatrix::from_row_slice(m, 8, &data);
        let y: Vec<String> = (0..m).map(|_| format!("c{}", rng.random_range(0..4))).collect();
        assert!(silhouette(&x, &y).unwrap().abs() < 0.05);
    }

    #[test]
    fn silhouette_invariances() {
        let (x, y) = synthgen::gen_clusters(3, 10, 4, 3.0, 9).unwrap();
        let base = silhouette(&x, &y).unwrap();
        let rot = synthgen::random_orthogonal(4, 1);
        let mut moved = &x * rot * 2.5;
        for mut r in moved.row_iter_mut() {
            r.add_scalar_mut(7.0);
        }
        assert_abs_diff_eq!(silhouette(&moved, &y).unwrap(), base, epsilon = 1e-10);
    }

    #[test]
    fn duplicated_tight_clusters_keep_score() {
        let pts = vec![vec![0., 0.], vec![0., 0.], vec![9., 9.], vec![9., 9.]];
        let base = silhouette(&mat(&pts), &labels(&["a", "a", "b", "b"])).unwrap();
        let doubled: Vec<Vec<f64>> = pts.iter().flat_map(|p| [p.clone(), p.clone()]).collect();
        let y2 = labels(&["a", "a", "a", "a", "b", "b", "b", "b"]);
        assert_eq!(silhouette(&mat(&doubled), &y2).unwrap(), base);
    }

    #[test]
    fn two_classes_give_one_direction() {
        let x = mat(&[
            vec![0., 0., 1.],
            vec![0.1, 0., 1.2],
            vec![0.2, 0.1, 0.9],
            vec![5., 5., 1.],
            vec![5.1, 4.9, 1.1],
            vec![4.8, 5.2, 0.8],
        ]);
        let lda = fit_lda(&x, &labels(&["a", "a", "a", "b", "b", "b"])).unwrap();
        assert_eq!(lda.n_directions(), 1);
        assert_eq!(lda.basis.nrows(), 3);
    }

    #[test]
    fn thirty_seven_classes_give_thirty_six_directions() {
        let (x, y) = synthgen::gen_clusters(37, 10, 64, 4.0, 2).unwrap();
        let lda = fit_lda(&x, &y).unwrap();
        assert_eq!(lda.n_directions(), 36);
        assert_eq!(lda.class_labels.len(), 37);
        assert!(lda.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn well_separated_1d_classes() {
        let mut rng = seeding::rng(5);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (c, centre) in [(0, 0.0), (1, 10.0)] {
            for _ in 0..30 {
                let noise: f64 = StandardNormal.sample(&mut rng);
                rows.push(vec![centre + 0.1 * noise]);
                y.push(format!("c{c}"));
            }
        }
        let x = mat(&rows);
        let lda = fit_lda(&x, &y).unwrap();
        let p = lda.project(&x).unwrap();
        // brute-force check against the oracle on the projected 1-D data
        let pts: Vec<Vec<f64>> = p.row_iter().map(|r| vec![r[0]]).collect();
        let ids: Vec<usize> = y.iter().map(|l| (l == "c1") as usize).collect();
        let s = silhouette_oracle(&pts, &ids);
        assert!(s > 0.9, "silhouette {s}");
        assert_abs_diff_eq!(silhouette(&p, &y).unwrap(), s, epsilon = 1e-12);
    }

    #[test]
    fn class_with_one_sample_is_config_error() {
        let x = mat(&[vec![0.], vec![1.], vec![2.], vec![3.]]);
        assert!(matches!(
            fit_lda(&x, &labels(&["a", "a", "a", "b"])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lda_beats_random_projection_on_separable_data() {
        let mut wins = 0;
        for seed in 0..20 {
            // separation lives in a few coordinates; the rest is noise
            let (base, y) = synthgen::gen_clusters(4, 25, 3, 6.0, seed).unwrap();
            let mut rng = seeding::rng(seed + 100);
            let x = DMatrix::from_fn(base.nrows(), 12, |i, j| {
                if j < 3 {
                    base[(i, j)]
                } else {
                    3.0 * { let z: f64 = StandardNormal.sample(&mut rng); z }
                }
            });
            let lda = fit_lda(&x, &y).unwrap();
            let s_lda = silhouette(&lda.project(&x).unwrap(), &y).unwrap();
            let q = synthgen::random_orthogonal(12, seed + 7);
            let random = &x * q.columns(0, 3);
            let s_rand = silhouette(&random, &y).unwrap();
            if s_lda >= s_rand {
                wins += 1;
            }
        }
        assert_eq!(wins, 20);
    }

    #[test]
    fn disjoint_folds_never_share_keys() {
        let mut y = Vec::new();
        let mut keys = Vec::new();
        for c in 0..4 {
            for form in 0..50 {
                for _ in 0..3 {
                    y.push(format!("pos{c}"));
                    keys.push(format!("w{c}_{form}"));
                }
            }
        }
        let folds = stratified_folds(&y, Some(&keys), 5, 11).unwrap();
        assert!(disjointness_violations(&folds, &keys, 5).is_empty());
        for f in 0..5 {
            let n = folds.iter().filter(|&&g| g == f).count();
            assert_eq!(n, 120);
        }
    }

    #[test]
    fn dominant_key_is_unsatisfiable() {
        let y = labels(&["a"; 10]);
        let mut keys = labels(&["k0"; 9]);
        keys.push("k1".into());
        assert!(matches!(
            stratified_folds(&y, Some(&keys), 5, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pos_design_gives_five_scores() {
        let mut rng = seeding::rng(21);
        let (centres, _) = synthgen::gen_clusters(4, 1, 16, 6.0, 4).unwrap();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut keys = Vec::new();
        for c in 0..4 {
            for form in 0..50 {
                let offset: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
                for _ in 0..3 {
                    let row: Vec<f64> = (0..16)
                        .map(|d| centres[(c, d)] + offset[d] + 0.3 * { let z: f64 = StandardNormal.sample(&mut rng); z })
                        .collect();
                    rows.push(row);
                    y.push(format!("pos{c}"));
                    keys.push(format!("w{c}_{form}"));
                }
            }
        }
        let data = ClusterDataset { x: mat(&rows), labels: y, keys: Some(keys) };
        let cfg = ClusterProbeConfig::preset(ClusterPreset::Pos);
        let scores = run_cluster_probe(&data, &cfg, 5, 1).unwrap();
        assert_eq!(scores.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(scores.iter().all(|s| s.1 > 0.0));
        assert_eq!(scores, run_cluster_probe(&data, &cfg, 5, 1).unwrap());
    }

    #[test]
    fn identical_class_distributions_show_no_structure() {
        let mut means = Vec::new();
        for seed in 0..5 {
            let (x, _) = synthgen::gen_clusters(4, 40, 8, 0.0, seed).unwrap();
            let mut rng = seeding::rng(seed);
            let y: Vec<String> = (0..x.nrows()).map(|_| format!("c{}", rng.random_range(0..4))).collect();
            let cfg = ClusterProbeConfig::new(4, 40, None);
            let scores = run_cluster_probe(&ClusterDataset { x, labels: y, keys: None }, &cfg, 5, seed).unwrap();
            means.push(scores.iter().map(|s| s.1).sum::<f64>() / 5.0);
        }
        // small held-out clusters bias the silhouette slightly below zero
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        assert!(mean < 0.05 && mean > -0.2, "mean {mean}");
    }

    #[test]
    fn presets_match_design_table() {
        let p = ClusterProbeConfig::preset(ClusterPreset::Phones);
        assert_eq!((p.n_categories, p.samples_per_category), (37, 50));
        assert_eq!(p.implied_folds(), 5);
        let p = ClusterProbeConfig::preset(ClusterPreset::SyllableTypes);
        assert_eq!((p.n_categories, p.samples_per_category), (20, 100));
        assert!(p.disjoint_key.is_some());
        let p = ClusterProbeConfig::preset(ClusterPreset::WordForms);
        assert_eq!((p.n_categories, p.samples_per_category), (250, 10));
        let bad = ClusterProbeConfig { train_fraction: 0.7, ..ClusterProbeConfig::new(2, 2, None) };
        assert!(bad.validate().is_err());
    }
}
