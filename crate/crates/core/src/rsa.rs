//! Representational similarity analysis: Pearson correlation between the
//! cosine-dissimilarity matrices of a model space and a reference space.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Symmetric, zero-diagonal matrix of pairwise cosine dissimilarities.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    pub ids: Vec<String>,
    values: DMatrix<f64>,
}

impl DissimilarityMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Builds from raw values; symmetry and zero diagonal are enforced.
    pub fn from_values(ids: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        let m = ids.len();
        if values.shape() != (m, m) {
            return Err(Error::Shape(format!("{m} ids for a {:?} matrix", values.shape())));
        }
        for i in 0..m {
            if values[(i, i)] != 0.0 {
                return Err(Error::Validation(format!("non-zero diagonal at {i}")));
            }
            for j in i + 1..m {
                if values[(i, j)] != values[(j, i)] || !values[(i, j)].is_finite() {
                    return Err(Error::Validation(format!("asymmetric or non-finite entry at ({i}, {j})")));
                }
            }
        }
        Ok(Self { ids, values })
    }

    /// Same matrix with every entry mapped by `scale * d + shift` (diagonal kept at 0).
    pub fn affine(&self, scale: f64, shift: f64) -> Self {
        let m = self.len();
        let values = DMatrix::from_fn(m, m, |i, j| if i == j { 0.0 } else { scale * self.values[(i, j)] + shift });
        Self { ids: self.ids.clone(), values }
    }
}

/// `1 - cos(x_i, x_j)` for every pair of rows.
pub fn cosine_dissim(ids: &[String], x: &DMatrix<f64>) -> Result<DissimilarityMatrix> {
    let m = x.nrows();
    if ids.len() != m {
        return Err(Error::Shape(format!("{} ids for {m} rows", ids.len())));
    }
    let mut unit = x.clone();
    for (i, mut row) in unit.row_iter_mut().enumerate() {
        let norm = row.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Validation(format!("unit {} has zero or non-finite norm", ids[i])));
        }
        row /= norm;
    }
    let gram = &unit * unit.transpose();
    let mut values = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let d = (1.0 - gram[(i, j)]).clamp(0.0, 2.0);
            values[(i, j)] = d;
            values[(j, i)] = d;
        }
    }
    Ok(DissimilarityMatrix { ids: ids.to_vec(), values })
}

/// Symmetric pair mask; `true` marks a pair that contributes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMask {
    m: usize,
    usable: Vec<bool>,
}

impl PairMask {
    pub fn all(m: usize) -> Self {
        Self { m, usable: vec![true; m * m] }
    }

    pub fn exclude(&mut self, i: usize, j: usize) {
        self.usable[i * self.m + j] = false;
        self.usable[j * self.m + i] = false;
    }

    pub fn is_usable(&self, i: usize, j: usize) -> bool {
        i != j && self.usable[i * self.m + j]
    }

    /// Masks every pair whose two units share a key value.
    pub fn excluding_same<S: AsRef<str>>(keys: &[S]) -> Self {
        let mut mask = Self::all(keys.len());
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                if keys[i].as_ref() == keys[j].as_ref() {
                    mask.exclude(i, j);
                }
            }
        }
        mask
    }

    pub fn usable_pairs(&self) -> usize {
        (0..self.m).map(|i| (i + 1..self.m).filter(|&j| self.is_usable(i, j)).count()).sum()
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape("pearson inputs differ in length".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson r over the unmasked strict upper triangle.
pub fn rsa_score(model: &DissimilarityMatrix, reference: &DissimilarityMatrix, mask: Option<&PairMask>) -> Result<f64> {
    if model.ids != reference.ids {
        return Err(Error::Validation("dissimilarity matrices have different ids or order".into()));
    }
    let m = model.len();
    if let Some(mask) = mask {
        if mask.m != m {
            return Err(Error::Shape(format!("mask for {} units, matrices have {m}", mask.m)));
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if mask.is_none_or(|mk| mk.is_usable(i, j)) {
                xs.push(model.values[(i, j)]);
                ys.push(reference.values[(i, j)]);
            }
        }
    }
    if xs.len() < 3 {
        return Err(Error::Undefined(format!("only {} usable pairs; need >= 3", xs.len())));
    }
    pearson(&xs, &ys)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RsaConfig {
    /// Label column splitting units into groups scored separately.
    pub group_by: Option<String>,
    /// Label column; pairs of units sharing its value are masked out.
    pub exclude_same: Option<String>,
}

/// Unit vectors keyed by unit id.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSpace {
    pub ids: Vec<String>,
    /// One row per id.
    pub x: DMatrix<f64>,
}

impl UnitSpace {
    pub fn new(ids: Vec<String>, x: DMatrix<f64>) -> Result<Self> {
        if ids.len() != x.nrows() {
            return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), x.nrows())));
        }
        Ok(Self { ids, x })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(ids, DMatrix::from_row_slice(rows.len(), dim, &rows.concat()))
    }
}

/// Unit id -> (label key -> value).
pub type UnitLabels = HashMap<String, BTreeMap<String, String>>;

fn label_of<'a>(labels: &'a UnitLabels, id: &str, key: &str) -> Result<&'a str> {
    labels
        .get(id)
        .and_then(|m| m.get(key))
        .map(String::as_str)
        .ok_or_else(|| Error::Validation(format!("unit {id} has no {key:?} label")))
}

/// Per-fold score of one RSA run plus the groups that had to be dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct RsaFold {
    pub fold: usize,
    pub score: f64,
    pub dropped_groups: Vec<String>,
}

/// Scores one subsample: within-group r, combined by usable-pair-weighted mean.
fn score_subset(
    ids: &[String],
    model: &DMatrix<f64>,
    reference: &DMatrix<f64>,
    subset: &[usize],
    config: &RsaConfig,
    labels: &UnitLabels,
) -> Result<(f64, Vec<String>)> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &i in subset {
        let g = match &config.group_by {
            Some(key) => label_of(labels, &ids[i], key)?.to_string(),
            None => String::new(),
        };
        groups.entry(g).or_default().push(i);
    }
    let mut weighted = 0.0;
    let mut total_pairs = 0usize;
    let mut dropped = Vec::new();
    for (group, idx) in &groups {
        let gids: Vec<String> = idx.iter().map(|&i| ids[i].clone()).collect();
        let mask = match &config.exclude_same {
            Some(key) => {
                let keys = gids.iter().map(|id| label_of(labels, id, key)).collect::<Result<Vec<_>>>()?;
                PairMask::excluding_same(&keys)
            }
            None => PairMask::all(idx.len()),
        };
        let pairs = mask.usable_pairs();
        if pairs < 3 {
            log::warn!("RSA group {group:?} has {pairs} usable pairs; dropped");
            dropped.push(group.clone());
            continue;
        }
        let dm = cosine_dissim(&gids, &model.select_rows(idx))?;
        let dr = cosine_dissim(&gids, &reference.select_rows(idx))?;
        match rsa_score(&dm, &dr, Some(&mask)) {
            Ok(r) => {
                weighted += r * pairs as f64;
                total_pairs += pairs;
            }
            Err(Error::Undefined(reason)) => {
                log::warn!("RSA group {group:?} dropped: {reason}");
                dropped.push(group.clone());
            }
            Err(e) => return Err(e),
        }
    }
    if total_pairs == 0 {
        return Err(Error::Undefined("every RSA group was dropped".into()));
    }
    Ok((weighted / total_pairs as f64, dropped))
}

/// Aligns the two spaces on their shared unit ids (model order).
pub fn align_spaces(model: &UnitSpace, reference: &UnitSpace) -> Result<(Vec<String>, DMatrix<f64>, DMatrix<f64>)> {
    let ref_row: HashMap<&str, usize> = reference.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let (model_rows, ref_rows): (Vec<usize>, Vec<usize>) = model
        .ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| ref_row.get(id.as_str()).map(|&j| (i, j)))
        .unzip();
    if model_rows.len() < 3 {
        return Err(Error::Validation(format!(
            "model and reference share {} unit ids; need >= 3",
            model_rows.len()
        )));
    }
    let ids = model_rows.iter().map(|&i| model.ids[i].clone()).collect();
    Ok((ids, model.x.select_rows(&model_rows), reference.x.select_rows(&ref_rows)))
}

/// Repeats RSA on `n_folds` seeded 80% subsamples of the shared units.
pub fn run_rsa_probe(
    model: &UnitSpace,
    reference: &UnitSpace,
    config: &RsaConfig,
    labels: &UnitLabels,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<RsaFold>> {
    let (ids, mx, rx) = align_spaces(model, reference)?;
    (0..n_folds)
        .into_par_iter()
        .map(|fold| {
            let mut rng = seeding::rng(seeding::fold_seed(seed, fold));
            let subset = seeding::subsample(ids.len(), 0.8, &mut rng);
            let (score, dropped_groups) = score_subset(&ids, &mx, &rx, &subset, config, labels)?;
            Ok(RsaFold { fold, score, dropped_groups })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i}")).collect()
    }

    fn from_upper(upper: &[f64], m: usize) -> DissimilarityMatrix {
        let mut v = DMatrix::zeros(m, m);
        let mut k = 0;
        for i in 0..m {
            for j in i + 1..m {
                v[(i, j)] = upper[k];
                v[(j, i)] = upper[k];
                k += 1;
            }
        }
        DissimilarityMatrix::from_values(ids(m), v).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 0., 2., 0., 0., 3., -1., 0.]);
        let d = cosine_dissim(&ids(4), &x).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
        assert_eq!(d.get(0, 2), 1.0);
        assert_eq!(d.get(0, 3), 2.0);
        assert_eq!(d.get(2, 2), 0.0);
    }

    #[test]
    fn zero_row_names_unit() {
        let x = DMatrix::from_row_slice(2, 2, &[1., 0., 0., 0.]);
        let err = cosine_dissim(&ids(2), &x).unwrap_err().to_string();
        assert!(err.contains("u1"), "{err}");
    }

    #[test]
    fn self_and_affine_correlation() {
        let (x, _) = synthgen::gen_clusters(3, 6, 5, 2.0, 1).unwrap();
        let d = cosine_dissim(&ids(18), &x).unwrap();
        assert_eq!(rsa_score(&d, &d, None).unwrap(), 1.0);
        assert_abs_diff_eq!(rsa_score(&d, &d.affine(3.0, 0.5), None).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn four_units_by_hand() {
        let model = from_upper(&[0.1, 0.4, 0.5, 0.3, 0.9, 0.2], 4);
        let reference = from_upper(&[0.2, 0.3, 0.7, 0.1, 0.8, 0.4], 4);
        // hand Pearson over the 6 upper-triangle pairs
        let xs = [0.1, 0.4, 0.5, 0.3, 0.9, 0.2];
        let ys = [0.2, 0.3, 0.7, 0.1, 0.8, 0.4];
        let (mx, my) = (xs.iter().sum::<f64>() / 6.0, ys.iter().sum::<f64>() / 6.0);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let r = rsa_score(&model, &reference, None).unwrap();
        assert_abs_diff_eq!(r, cov / (vx * vy).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.8119282405552593, epsilon = 1e-12);

        let mut mask = PairMask::all(4);
        mask.exclude(1, 0);
        assert_abs_diff_eq!(rsa_score(&model, &reference, Some(&mask)).unwrap(), 0.7772395620748255, epsilon = 1e-12);
    }

    #[test]
    fn zero_variance_is_undefined() {
        let model = from_upper(&[0.5; 6], 4);
        let reference = from_upper(&[0.2, 0.3, 0.7, 0.1, 0.8, 0.4], 4);
        assert!(matches!(rsa_score(&model, &reference, None), Err(Error::Undefined(_))));
    }

    #[test]
    fn too_few_pairs_is_undefined() {
        let m = from_upper(&[0.1, 0.4, 0.5], 3);
        let mut mask = PairMask::all(3);
        mask.exclude(0, 1);
        assert!(matches!(rsa_score(&m, &m, Some(&mask)), Err(Error::Undefined(_))));
    }

    #[test]
    fn copy_of_model_space_scores_one_every_fold() {
        let (x, _) = synthgen::gen_clusters(4, 10, 6, 3.0, 2).unwrap();
        let space = UnitSpace::new(ids(40), x).unwrap();
        let folds = run_rsa_probe(&space, &space, &RsaConfig::default(), &UnitLabels::new(), 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        assert!(folds.iter().all(|f| f.score == 1.0));
    }

    #[test]
    fn grouped_semantic_design() {
        // 60 nouns, 20 adverbs, 20 adjectives, 20 verbs; samples per form vary
        let mut labels = UnitLabels::new();
        let mut rows = Vec::new();
        let mut refs = Vec::new();
        let mut unit_ids = Vec::new();
        let mut rng = seeding::rng(4);
        use rand_distr::{Distribution, StandardNormal};
        let mut form = 0;
        for (pos, n_forms) in [("NOUN", 60), ("ADV", 20), ("ADJ", 20), ("VERB", 20)] {
            for _ in 0..n_forms {
                let sem: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
                let samples = 8 + form % 5;
                for s in 0..samples {
                    let id = format!("w{form}_{s}");
                    let mut l = BTreeMap::new();
                    l.insert("pos".into(), pos.to_string());
                    l.insert("label".into(), format!("form{form}"));
                    labels.insert(id.clone(), l);
                    rows.push(sem.iter().map(|v| v + 0.5 * { let z: f64 = StandardNormal.sample(&mut rng); z }).collect::<Vec<f64>>());
                    refs.push(sem.clone());
                    unit_ids.push(id);
                }
                form += 1;
            }
        }
        assert!(unit_ids.len() >= 1000);
        let model = UnitSpace::from_rows(unit_ids.clone(), &rows).unwrap();
        let reference = UnitSpace::from_rows(unit_ids, &refs).unwrap();
        let cfg = RsaConfig { group_by: Some("pos".into()), exclude_same: Some("label".into()) };
        let folds = run_rsa_probe(&model, &reference, &cfg, &labels, 5, 1).unwrap();
        assert!(folds.iter().all(|f| f.score > 0.3 && f.dropped_groups.is_empty()));
    }

    #[test]
    fn tiny_group_dropped_and_all_dropped_errors() {
        let (x, _) = synthgen::gen_clusters(2, 10, 4, 3.0, 2).unwrap();
        let space = UnitSpace::new(ids(20), x).unwrap();
        let mut labels = UnitLabels::new();
        for (i, id) in space.ids.iter().enumerate() {
            let mut l = BTreeMap::new();
            l.insert("g".into(), if i < 2 { "tiny" } else { "big" }.to_string());
            l.insert("same".into(), "x".to_string());
            labels.insert(id.clone(), l);
        }
        let cfg = RsaConfig { group_by: Some("g".into()), exclude_same: None };
        let folds = run_rsa_probe(&space, &space, &cfg, &labels, 5, 0).unwrap();
        assert!(folds.iter().all(|f| f.score == 1.0));
        let cfg = RsaConfig { group_by: None, exclude_same: Some("same".into()) };
        assert!(run_rsa_probe(&space, &space, &cfg, &labels, 5, 0).is_err());
    }

    #[test]
    fn independent_reference_is_uncorrelated() {
        let (_, model, reference) = synthgen::gen_rsa_pair(500, 16, 16, 0.0, 7);
        let model = UnitSpace::new(ids(500), model).unwrap();
        let reference = UnitSpace::new(ids(500), reference).unwrap();
        let folds = run_rsa_probe(&model, &reference, &RsaConfig::default(), &UnitLabels::new(), 5, 1).unwrap();
        let mean = folds.iter().map(|f| f.score).sum::<f64>() / 5.0;
        assert!(mean.abs() < 0.05, "mean r {mean}");
    }

    proptest! {
        #[test]
        fn rsa_invariances(seed in 0u64..200, scale in 0.1f64..5.0, shift in -1.0f64..1.0) {
            let (_, a, b) = synthgen::gen_rsa_pair(9, 4, 4, 0.6, seed);
            let da = cosine_dissim(&ids(9), &a).unwrap();
            let db = cosine_dissim(&ids(9), &b).unwrap();
            let r = rsa_score(&da, &db, None).unwrap();
            prop_assert!((rsa_score(&da.affine(scale, shift), &db, None).unwrap() - r).abs() < 1e-9);
            prop_assert!((rsa_score(&da, &db.affine(scale, shift), None).unwrap() - r).abs() < 1e-9);

            // consistent permutation of units on both sides
            let perm: Vec<usize> = (0..9).rev().collect();
            let pa = cosine_dissim(&ids(9), &a.select_rows(&perm)).unwrap();
            let pb = cosine_dissim(&ids(9), &b.select_rows(&perm)).unwrap();
            prop_assert!((rsa_score(&pa, &pb, None).unwrap() - r).abs() < 1e-9);

            // masking (i,j) or (j,i) is the same
            let mut m1 = PairMask::all(9);
            m1.exclude(2, 5);
            let mut m2 = PairMask::all(9);
            m2.exclude(5, 2);
            prop_assert_eq!(rsa_score(&da, &db, Some(&m1)).unwrap(), rsa_score(&da, &db, Some(&m2)).unwrap());
        }
    }
}
