//! Learning trajectories: best-layer scores per checkpoint, a four-parameter
//! sigmoid fit `f(x) = a / (1 + exp(-k (x - b))) + c`, normalized curves and
//! the first step reaching a fraction of the maximum observed score.

use std::collections::BTreeMap;

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::dataio::ProbeScore;
use crate::error::{Error, Result};

pub const MIN_FIT_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub k: f64,
    pub residual_rmse: f64,
}

pub fn sigmoid(x: f64, a: f64, b: f64, c: f64, k: f64) -> f64 {
    a / (1.0 + (-k * (x - b)).exp()) + c
}

impl SigmoidFit {
    pub fn eval(&self, x: f64) -> f64 {
        sigmoid(x, self.a, self.b, self.c, self.k)
    }
}

/// Best layer and its fold-mean score at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestLayerPoint {
    pub step: u64,
    pub layer_id: String,
    pub score: f64,
}

/// Fold-mean score per (step, layer), in step order then layer order.
pub fn fold_means(scores: &[ProbeScore], layer_order: Option<&[String]>) -> Result<Vec<(u64, String, f64)>> {
    if scores.is_empty() {
        return Err(Error::Validation("no scores".into()));
    }
    let head = &scores[0];
    if let Some(other) = scores.iter().find(|s| s.probe_id != head.probe_id || s.model_id != head.model_id) {
        return Err(Error::Validation(format!(
            "mixed trajectories: ({}, {}) and ({}, {})",
            head.probe_id, head.model_id, other.probe_id, other.model_id
        )));
    }
    let mut order: Vec<String> = layer_order.map(<[String]>::to_vec).unwrap_or_default();
    for s in scores {
        if !order.contains(&s.layer_id) {
            order.push(s.layer_id.clone());
        }
    }
    let rank: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut acc: BTreeMap<(u64, usize), (f64, usize)> = BTreeMap::new();
    for s in scores {
        let e = acc.entry((s.step, rank[s.layer_id.as_str()])).or_insert((0.0, 0));
        e.0 += s.score;
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|((step, li), (sum, n))| (step, order[li].clone(), sum / n as f64))
        .collect())
}

/// Per step: average over folds, then the maximum over layers. Ties go to
/// the layer listed first in `layer_order` (or first seen in `scores`).
pub fn best_layer_scores(scores: &[ProbeScore], layer_order: Option<&[String]>) -> Result<Vec<BestLayerPoint>> {
    let means = fold_means(scores, layer_order)?;
    let mut best: BTreeMap<u64, BestLayerPoint> = BTreeMap::new();
    for (step, layer_id, score) in means {
        match best.get(&step) {
            Some(p) if p.score >= score => {}
            _ => {
                best.insert(step, BestLayerPoint { step, layer_id, score });
            }
        }
    }
    Ok(best.into_values().collect())
}

/// First observed step whose score reaches `fraction` of the maximum.
///
/// For a negative maximum the threshold is `max - (1 - fraction) * |max|`,
/// which keeps the maximum itself qualifying.
pub fn step_at_fraction(steps: &[u64], scores: &[f64], fraction: f64) -> Result<u64> {
    if steps.is_empty() || steps.len() != scores.len() {
        return Err(Error::Validation(format!(
            "need matching non-empty steps ({}) and scores ({})",
            steps.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("non-finite score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = max - (1.0 - fraction) * max.abs();
    let mut pairs: Vec<(u64, f64)> = steps.iter().copied().zip(scores.iter().copied()).collect();
    pairs.sort_by_key(|p| p.0);
    Ok(pairs.iter().find(|(_, s)| *s >= threshold).expect("maximum qualifies").0)
}

/// `(f(x) - min) / (max - min)` over the given points.
pub fn normalize_curve(fit: &SigmoidFit, xs: &[f64]) -> Result<Vec<f64>> {
    let ys: Vec<f64> = xs.iter().map(|&x| fit.eval(x)).collect();
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if ys.is_empty() || !(span > f64::EPSILON * hi.abs().max(lo.abs())) {
        return Err(Error::Undefined("fitted curve is flat over the step range".into()));
    }
    Ok(ys.iter().map(|y| ((y - lo) / span).clamp(0.0, 1.0)).collect())
}

/// Least-squares problem in normalized coordinates `u = (x - x0) / xs`,
/// `v = (y - y0) / ys`.
struct Scaled {
    u: Vec<f64>,
    v: Vec<f64>,
}

impl Scaled {
    fn residuals(&self, p: &Vector4<f64>) -> Vec<f64> {
        self.u.iter().zip(&self.v).map(|(&u, &v)| v - sigmoid(u, p[0], p[1], p[2], p[3])).collect()
    }

    fn cost(&self, p: &Vector4<f64>) -> f64 {
        self.residuals(p).iter().map(|r| r * r).sum::<f64>()
    }

    /// Normal equations `J^T J` and `J^T r` for the current parameters.
    fn normal_equations(&self, p: &Vector4<f64>) -> (Matrix4<f64>, Vector4<f64>) {
        let (a, b, _, k) = (p[0], p[1], p[2], p[3]);
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for (&u, &v) in self.u.iter().zip(&self.v) {
            let s = 1.0 / (1.0 + (-k * (u - b)).exp());
            let ds = s * (1.0 - s);
            let j = Vector4::new(s, -a * k * ds, 1.0, a * (u - b) * ds);
            let r = v - (a * s + p[2]);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        (jtj, jtr)
    }

    /// Levenberg-Marquardt with Marquardt diagonal scaling.
    fn levenberg_marquardt(&self, start: Vector4<f64>) -> Option<(Vector4<f64>, f64)> {
        let mut p = start;
        let mut cost = self.cost(&p);
        if !cost.is_finite() {
            return None;
        }
        let mut lambda = 1e-3;
        for _ in 0..2000 {
            let (jtj, jtr) = self.normal_equations(&p);
            let max_diag = (0..4).map(|i| jtj[(i, i)]).fold(0.0, f64::max);
            let floor = (max_diag * 1e-12).max(1e-300);
            let mut accepted = false;
            while lambda < 1e16 {
                let mut lhs = jtj;
                for i in 0..4 {
                    lhs[(i, i)] += lambda * jtj[(i, i)].max(floor);
                }
                let Some(step) = lhs.cholesky().map(|c| c.solve(&jtr)) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial = p + step;
                let trial_cost = self.cost(&trial);
                if trial_cost.is_finite() && trial_cost < cost {
                    let small_step = step.norm() <= 1e-14 * (p.norm() + 1e-14);
                    let small_gain = cost - trial_cost <= 1e-16 * cost;
                    p = trial;
                    cost = trial_cost;
                    lambda = (lambda / 10.0).max(1e-15);
                    accepted = !(small_step || small_gain);
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        (p.iter().all(|v| v.is_finite()) && cost.is_finite()).then_some((p, cost))
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Multi-start Levenberg-Marquardt fit of the four-parameter sigmoid.
///
/// Starts: amplitude = +/- range of y with offset at min/max y, midpoint at
/// the 25/50/75% step quantiles, steepness 10, 1 or 0.1 over the step range.
/// The lowest-residual converged start wins.
pub fn fit_sigmoid(steps: &[f64], scores: &[f64]) -> Result<SigmoidFit> {
    if steps.len() != scores.len() {
        return Err(Error::Shape(format!("{} steps for {} scores", steps.len(), scores.len())));
    }
    if steps.len() < MIN_FIT_POINTS {
        return Err(Error::Validation(format!(
            "sigmoid fit needs >= {MIN_FIT_POINTS} points, got {}",
            steps.len()
        )));
    }
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("steps must be strictly increasing".into()));
    }
    if steps.iter().chain(scores).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite input".into()));
    }
    let x0 = steps[0];
    let xs = steps[steps.len() - 1] - x0;
    let y_min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ys = if y_max > y_min { y_max - y_min } else { y_min.abs().max(1.0) };
    let problem = Scaled {
        u: steps.iter().map(|x| (x - x0) / xs).collect(),
        v: scores.iter().map(|y| (y - y_min) / ys).collect(),
    };
    let range_v = (y_max - y_min) / ys;
    let mut starts = Vec::new();
    for (a0, c0) in [(range_v, 0.0), (-range_v, range_v)] {
        for q in [0.25, 0.5, 0.75] {
            let b0 = quantile(&problem.u, q);
            for k0 in [10.0, 1.0, 0.1] {
                starts.push(Vector4::new(a0, b0, c0, k0));
            }
        }
        if range_v == 0.0 {
            break;
        }
    }
    let best = starts
        .into_iter()
        .filter_map(|s| problem.levenberg_marquardt(s))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    let Some((p, _)) = best else {
        return Err(Error::FitFailure { best_rmse: f64::INFINITY });
    };
    let mut fit = SigmoidFit {
        a: p[0] * ys,
        b: x0 + p[1] * xs,
        c: y_min + p[2] * ys,
        k: p[3] / xs,
        residual_rmse: 0.0,
    };
    let sq: f64 = steps.iter().zip(scores).map(|(&x, &y)| (y - fit.eval(x)).powi(2)).sum();
    fit.residual_rmse = (sq / steps.len() as f64).sqrt();
    if !fit.residual_rmse.is_finite() {
        return Err(Error::FitFailure { best_rmse: fit.residual_rmse });
    }
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub probe_id: String,
    pub model_id: String,
    pub best_layer_per_step: Vec<BestLayerPoint>,
    pub step_at_95: u64,
    pub fit: Option<SigmoidFit>,
    /// Why no fit is present, when it is absent.
    pub fit_note: Option<String>,
}

/// Best-layer trajectory, step at 95% of the maximum and (when at least five
/// checkpoints exist) the sigmoid fit for one probe/model pair.
pub fn summarize(scores: &[ProbeScore], layer_order: Option<&[String]>) -> Result<TrajectorySummary> {
    let best = best_layer_scores(scores, layer_order)?;
    let steps: Vec<u64> = best.iter().map(|p| p.step).collect();
    let values: Vec<f64> = best.iter().map(|p| p.score).collect();
    let step_at_95 = step_at_fraction(&steps, &values, 0.95)?;
    let xs: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let (fit, fit_note) = if steps.len() < MIN_FIT_POINTS {
        (None, Some(format!("{} checkpoints; fit needs {MIN_FIT_POINTS}", steps.len())))
    } else {
        match fit_sigmoid(&xs, &values) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    Ok(TrajectorySummary {
        probe_id: scores[0].probe_id.clone(),
        model_id: scores[0].model_id.clone(),
        best_layer_per_step: best,
        step_at_95,
        fit,
        fit_note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use crate::synthgen;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn score(step: u64, layer: &str, fold: usize, v: f64) -> ProbeScore {
        ProbeScore { probe_id: "p".into(), model_id: "m".into(), step, layer_id: layer.into(), fold, score: v }
    }

    #[test]
    fn best_layer_single_step() {
        let best = best_layer_scores(&[score(1, "T1", 0, 0.2), score(1, "T2", 0, 0.5)], None).unwrap();
        assert_eq!(best, vec![BestLayerPoint { step: 1, layer_id: "T2".into(), score: 0.5 }]);
    }

    #[test]
    fn folds_are_averaged() {
        let best = best_layer_scores(&[score(1, "T1", 0, 0.4), score(1, "T1", 1, 0.6)], None).unwrap();
        assert_abs_diff_eq!(best[0].score, 0.5);
    }

    #[test]
    fn ties_go_to_earlier_layer() {
        let order = vec!["T2".to_string(), "T1".to_string()];
        let s = [score(1, "T1", 0, 0.5), score(1, "T2", 0, 0.5)];
        assert_eq!(best_layer_scores(&s, Some(&order)).unwrap()[0].layer_id, "T2");
        assert_eq!(best_layer_scores(&s, None).unwrap()[0].layer_id, "T1");
    }

    #[test]
    fn empty_and_mixed_inputs_rejected() {
        assert!(best_layer_scores(&[], None).is_err());
        let mut other = score(1, "T1", 0, 0.1);
        other.model_id = "m2".into();
        assert!(best_layer_scores(&[score(1, "T1", 0, 0.1), other], None).is_err());
    }

    #[test]
    fn best_layer_matches_exhaustive_scan() {
        let mut rng = seeding::rng(12);
        let layers = ["T1", "T2", "T3"];
        let mut scores = Vec::new();
        let mut table = [[[0.0f64; 2]; 3]; 3];
        for (si, step) in [1000u64, 2000, 3000].iter().enumerate() {
            for (li, layer) in layers.iter().enumerate() {
                for fold in 0..2 {
                    let v: f64 = rng.random_range(0.0..1.0);
                    table[si][li][fold] = v;
                    scores.push(score(*step, layer, fold, v));
                }
            }
        }
        let best = best_layer_scores(&scores, None).unwrap();
        for si in 0..3 {
            let mut arg = 0;
            let mut top = f64::NEG_INFINITY;
            for li in 0..3 {
                let m = (table[si][li][0] + table[si][li][1]) / 2.0;
                if m > top {
                    top = m;
                    arg = li;
                }
            }
            assert_eq!(best[si].layer_id, layers[arg]);
            assert_abs_diff_eq!(best[si].score, top, epsilon = 1e-15);
        }
    }

    #[test]
    fn step_at_fraction_examples() {
        let steps = [1000, 2000, 3000, 4000];
        assert_eq!(step_at_fraction(&steps, &[0.1, 0.5, 0.96, 1.0], 0.95).unwrap(), 3000);
        assert_eq!(step_at_fraction(&steps, &[0.1, 0.2, 0.3, 1.0], 0.95).unwrap(), 4000);
        assert_eq!(step_at_fraction(&steps, &[-0.5, -0.3, -0.2, -0.21], 0.95).unwrap(), 3000);
    }

    #[test]
    fn step_at_fraction_matches_scan_on_noisy_series() {
        let mut rng = seeding::rng(2);
        let steps: Vec<u64> = (1..=10).map(|i| i * 1000).collect();
        let values: Vec<f64> = (0..10).map(|i| i as f64 / 10.0 + rng.random_range(-0.2..0.2)).collect();
        let max = values.iter().copied().fold(f64::MIN, f64::max);
        let mut oracle = None;
        for i in 0..10 {
            if values[i] >= 0.95 * max {
                oracle = Some(steps[i]);
                break;
            }
        }
        assert_eq!(step_at_fraction(&steps, &values, 0.95).unwrap(), oracle.unwrap());
        let scaled: Vec<f64> = values.iter().map(|v| v * 3.7).collect();
        if max > 0.0 {
            assert_eq!(step_at_fraction(&steps, &scaled, 0.95).unwrap(), oracle.unwrap());
        }
    }

    fn grid() -> Vec<f64> {
        (1..=20).map(|i| i as f64 * 5000.0).collect()
    }

    #[test]
    fn recovers_noiseless_parameters() {
        let xs = grid();
        let ys = synthgen::gen_sigmoid_series(1.0, 5e4, 0.0, 1e-4, &xs, 0.0, 0);
        let fit = fit_sigmoid(&xs, &ys).unwrap();
        assert!((fit.a - 1.0).abs() < 0.01);
        assert!((fit.b - 5e4).abs() / 5e4 < 0.01);
        assert!(fit.c.abs() < 0.01);
        assert!((fit.k - 1e-4).abs() / 1e-4 < 0.01);
        assert!(fit.residual_rmse < 1e-8);
    }

    #[test]
    fn constant_data_fits_flat_curve() {
        let xs = grid();
        let fit = fit_sigmoid(&xs, &vec![0.3; 20]).unwrap();
        assert!(fit.a.abs() < 1e-9, "{fit:?}");
        assert!((fit.c - 0.3).abs() < 1e-9);
        assert!(fit.residual_rmse < 1e-12);
        assert!(normalize_curve(&fit, &xs).is_err());
    }

    #[test]
    fn midpoint_value_identity() {
        let fit = SigmoidFit { a: 0.73, b: 4.2e4, c: -0.11, k: 3e-4, residual_rmse: 0.0 };
        assert_eq!(fit.eval(fit.b), fit.a / 2.0 + fit.c);
    }

    #[test]
    fn decreasing_curve_is_fit() {
        let xs = grid();
        let ys = synthgen::gen_sigmoid_series(-0.8, 3e4, 0.9, 2e-4, &xs, 0.0, 0);
        let fit = fit_sigmoid(&xs, &ys).unwrap();
        assert!(fit.residual_rmse < 1e-6, "{fit:?}");
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(fit_sigmoid(&[1., 2., 3., 4.], &[0., 1., 2., 3.]).is_err());
        assert!(fit_sigmoid(&[1., 2., 2., 4., 5.], &[0.; 5]).is_err());
    }

    #[test]
    fn refit_does_not_increase_residual() {
        let xs = grid();
        let ys = synthgen::gen_sigmoid_series(1.0, 4e4, 0.1, 1.5e-4, &xs, 0.02, 9);
        let fit = fit_sigmoid(&xs, &ys).unwrap();
        let curve: Vec<f64> = xs.iter().map(|&x| fit.eval(x)).collect();
        let refit = fit_sigmoid(&xs, &curve).unwrap();
        let rmse_on_original = (xs.iter().zip(&ys).map(|(&x, &y)| (y - refit.eval(x)).powi(2)).sum::<f64>()
            / xs.len() as f64)
            .sqrt();
        assert!(rmse_on_original <= fit.residual_rmse + 1e-9);
    }

    #[test]
    fn normalization_examples() {
        let xs: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let fit = SigmoidFit { a: 2.0, b: 2.0, c: 1.0, k: 1.0, residual_rmse: 0.0 };
        let n = normalize_curve(&fit, &xs).unwrap();
        // hand values: f = 2 / (1 + e^{-(x-2)}) + 1
        let f: Vec<f64> = xs.iter().map(|x| 2.0 / (1.0 + (-(x - 2.0f64)).exp()) + 1.0).collect();
        for (i, v) in n.iter().enumerate() {
            assert_abs_diff_eq!(*v, (f[i] - f[0]) / (f[4] - f[0]), epsilon = 1e-12);
        }
        assert_eq!((n[0], n[4]), (0.0, 1.0));
        assert_abs_diff_eq!(n[2], 0.5, epsilon = 1e-12);

        let wide: Vec<f64> = (0..=100).map(|i| -1000.0 + 20.0 * i as f64).collect();
        let n = normalize_curve(&fit, &wide).unwrap();
        assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((n[0], n[100]), (0.0, 1.0));
    }

    #[test]
    fn steeper_curves_reach_95_percent_closer_to_midpoint() {
        let xs: Vec<f64> = (0..=200).map(|i| i as f64 * 500.0).collect();
        let steps: Vec<u64> = xs.iter().map(|&x| x as u64).collect();
        let mut prev = u64::MAX;
        for k in [1e-4, 2e-4, 4e-4, 8e-4] {
            let ys = synthgen::gen_sigmoid_series(1.0, 5e4, 0.0, k, &xs, 0.0, 0);
            let s = step_at_fraction(&steps, &ys, 0.95).unwrap();
            assert!(s as f64 >= 5e4);
            assert!(s <= prev);
            prev = s;
        }
    }

    #[test]
    fn summary_without_enough_checkpoints_skips_fit() {
        let s = [score(1000, "T1", 0, 0.2), score(2000, "T1", 0, 0.5)];
        let summary = summarize(&s, None).unwrap();
        assert_eq!(summary.step_at_95, 2000);
        assert!(summary.fit.is_none() && summary.fit_note.is_some());
    }
}
