//! Layer importance by Gaussian perturbation, and layer selection.
//!
//! The importance of layer `j` is the mean absolute change in accuracy when
//! zero-mean Gaussian noise with standard deviation
//! `epsilon · RMS(weights_j)` is added to that layer alone.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{evaluate, Model, Samples};
use crate::rng;

/// Default relative noise scale: 10 % of the layer's weight RMS.
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_TRIALS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: String,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub vehicle_id: usize,
    /// One entry per model layer, in model order.
    pub scores: Vec<LayerScore>,
    /// Relative noise scale.
    pub epsilon: f64,
    pub eval_set_size: usize,
    pub baseline_accuracy: f64,
}

impl ImportanceReport {
    pub fn lambda(&self, layer: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.layer == layer).map(|s| s.lambda)
    }

    fn check_covers(&self, model: &Model) -> Result<()> {
        let same = self.scores.len() == model.layers().len()
            && self.scores.iter().zip(model.layer_names()).all(|(s, n)| s.layer == n);
        if !same {
            return Err(Error::config(format!(
                "importance report for vehicle {} does not cover the model layers",
                self.vehicle_id
            )));
        }
        Ok(())
    }

    /// Layer names sorted by descending importance, model order on ties.
    pub fn ranking(&self) -> Vec<&str> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .lambda
                .partial_cmp(&self.scores[a].lambda)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.into_iter().map(|i| self.scores[i].layer.as_str()).collect()
    }

    /// Element-wise mean of several reports over the same layers.
    pub fn mean(reports: &[ImportanceReport]) -> Result<ImportanceReport> {
        let first = reports.first().ok_or(Error::Empty("importance reports"))?;
        let mut scores = first.scores.clone();
        for r in &reports[1..] {
            if r.scores.len() != scores.len() || r.scores.iter().zip(&scores).any(|(a, b)| a.layer != b.layer) {
                return Err(Error::ArchitectureMismatch(first.scores[0].layer.clone()));
            }
            for (acc, s) in scores.iter_mut().zip(&r.scores) {
                acc.lambda += s.lambda;
            }
        }
        let n = reports.len() as f64;
        scores.iter_mut().for_each(|s| s.lambda /= n);
        Ok(ImportanceReport {
            vehicle_id: first.vehicle_id,
            scores,
            epsilon: first.epsilon,
            eval_set_size: first.eval_set_size,
            baseline_accuracy: reports.iter().map(|r| r.baseline_accuracy).sum::<f64>() / n,
        })
    }
}

fn rms(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64)
}

/// Copy of `model` with `N(0, epsilon²)` noise added to every weight and bias
/// of `layer`.
pub fn perturb_layer(model: &Model, layer: &str, epsilon: f64, seed: u64) -> Result<Model> {
    let i = model.index_of(layer).ok_or_else(|| Error::UnknownLayer(layer.into()))?;
    let mut out = model.clone();
    if epsilon == 0.0 {
        return Ok(out);
    }
    let mut r = rng::from_seed(seed);
    let (w, b) = out.params_mut(i);
    for v in w.iter_mut().chain(b.iter_mut()) {
        let z: f64 = StandardNormal.sample(&mut r);
        *v += epsilon * z;
    }
    Ok(out)
}

/// Importance of every layer of `model` on `eval_data`.
pub fn importance_scores(
    model: &Model,
    eval_data: &Samples,
    vehicle_id: usize,
    epsilon: f64,
    n_trials: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    if n_trials == 0 {
        return Err(Error::config("n_trials must be at least 1"));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::config("epsilon must be positive"));
    }
    let baseline = evaluate(model, eval_data)?.accuracy;
    let mut scores = Vec::with_capacity(model.layers().len());
    for (j, l) in model.layers().iter().enumerate() {
        let sigma = epsilon * rms(l.weights.values());
        let mut total = 0.0;
        for t in 0..n_trials {
            let s = rng::mix(seed, &[j as u64, t as u64]);
            let noisy = perturb_layer(model, &l.name, sigma, s)?;
            total += libm::fabs(baseline - evaluate(&noisy, eval_data)?.accuracy);
        }
        scores.push(LayerScore {
            layer: l.name.clone(),
            lambda: total / n_trials as f64,
        });
    }
    Ok(ImportanceReport {
        vehicle_id,
        scores,
        epsilon,
        eval_set_size: eval_data.len(),
        baseline_accuracy: baseline,
    })
}

/// How the importance threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Every layer with `λ ≥ τ`.
    Fixed(f64),
    /// The `k` most important layers.
    TopK(usize),
    /// Most important first while the selected parameter fraction stays
    /// within the budget.
    BudgetFraction(f64),
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::BudgetFraction(0.5)
    }
}

/// Layers chosen for transmission. The output layer is always included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    /// Selected layer names in model order.
    pub selected: Vec<String>,
    pub threshold: f64,
    /// Selected parameter count over total parameter count.
    pub reduction_factor: f64,
}

impl LayerSelection {
    /// Every layer of `model`.
    pub fn all(model: &Model) -> Self {
        Self {
            selected: model.layer_names().map(String::from).collect(),
            threshold: 0.0,
            reduction_factor: 1.0,
        }
    }

    /// A selection of the named layers (kept in model order).
    pub fn from_layers<S: AsRef<str>>(model: &Model, names: &[S], threshold: f64) -> Result<Self> {
        for n in names {
            model.layer(n.as_ref())?;
        }
        let selected: Vec<String> = model
            .layer_names()
            .filter(|l| names.iter().any(|n| n.as_ref() == *l))
            .map(String::from)
            .collect();
        let reduction_factor = reduction_factor(model, &selected)?;
        Ok(Self {
            selected,
            threshold,
            reduction_factor,
        })
    }

    pub fn contains(&self, layer: &str) -> bool {
        self.selected.iter().any(|s| s == layer)
    }

    pub fn param_count(&self, model: &Model) -> Result<usize> {
        model.param_count(Some(&self.selected))
    }

    pub fn is_full(&self, model: &Model) -> bool {
        self.selected.len() == model.layers().len()
    }
}

/// `Σ_{j ∈ selected} |θ_j| / Σ_j |θ_j|`
pub fn reduction_factor<S: AsRef<str>>(model: &Model, selected: &[S]) -> Result<f64> {
    Ok(model.param_count(Some(selected))? as f64 / model.total_params() as f64)
}

pub fn select_layers(report: &ImportanceReport, model: &Model, policy: ThresholdPolicy) -> Result<LayerSelection> {
    report.check_covers(model)?;
    let output = model.output_layer().name.as_str();
    let lambda = |name: &str| report.lambda(name).unwrap_or(0.0);
    let ranking = report.ranking();
    let (chosen, threshold): (Vec<&str>, f64) = match policy {
        ThresholdPolicy::Fixed(tau) => {
            if !(tau >= 0.0) {
                return Err(Error::config("fixed threshold must be non-negative"));
            }
            let mut c: Vec<&str> = ranking.iter().copied().filter(|&n| lambda(n) >= tau).collect();
            c.push(output);
            (c, tau)
        }
        ThresholdPolicy::TopK(k) => {
            if k == 0 || k > model.layers().len() {
                return Err(Error::config(format!(
                    "top_k({k}) outside [1, {}]",
                    model.layers().len()
                )));
            }
            let mut c: Vec<&str> = ranking[..k].to_vec();
            let tau = lambda(c[k - 1]);
            c.push(output);
            (c, tau)
        }
        ThresholdPolicy::BudgetFraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!("budget fraction {f} outside (0, 1]")));
            }
            let total = model.total_params() as f64;
            let mut used = model.output_layer().param_count();
            let mut c = alloc::vec![output];
            let mut tau = lambda(output);
            for &n in ranking.iter().filter(|&&n| n != output) {
                let p = model.layer(n)?.param_count();
                if (used + p) as f64 / total > f {
                    break;
                }
                used += p;
                c.push(n);
                tau = lambda(n);
            }
            (c, tau)
        }
    };
    LayerSelection::from_layers(model, &chosen, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Architecture, DenseLayer, Submodel, Tensor};
    use alloc::vec;

    fn report_for(model: &Model, lambdas: &[f64]) -> ImportanceReport {
        ImportanceReport {
            vehicle_id: 0,
            scores: model
                .layer_names()
                .zip(lambdas)
                .map(|(n, &l)| LayerScore {
                    layer: n.into(),
                    lambda: l,
                })
                .collect(),
            epsilon: 0.1,
            eval_set_size: 1,
            baseline_accuracy: 1.0,
        }
    }

    /// 90 % / 9 % / 1 % parameter split across three fusion layers.
    fn skewed() -> Model {
        let big = DenseLayer::zeros("big", 29, 30, Activation::Relu).unwrap(); // 900
        let mid = DenseLayer::zeros("mid", 30, 3, Activation::Relu).unwrap(); // 93
        let out = DenseLayer::zeros("out", 3, 2, Activation::Softmax).unwrap(); // 8
        Model::new(
            vec![
                (big, Submodel::Fusion),
                (mid, Submodel::Fusion),
                (out, Submodel::Fusion),
            ],
            2,
        )
        .unwrap()
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let m = Model::init(&Architecture::default(), 1).unwrap();
        assert_eq!(perturb_layer(&m, "fusion_out", 0.0, 3).unwrap(), m);
        assert!(matches!(perturb_layer(&m, "nope", 0.1, 3), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn perturbation_is_isolated_to_one_layer() {
        let m = Model::init(&Architecture::default(), 1).unwrap();
        let p = perturb_layer(&m, "lidar_dense_1", 0.5, 3).unwrap();
        for (a, b) in m.layers().iter().zip(p.layers()) {
            if a.name == "lidar_dense_1" {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn perturbation_stddev_matches_epsilon() {
        let l = DenseLayer::zeros("w", 100, 100, Activation::Softmax).unwrap();
        let m = Model::new(vec![(l, Submodel::Fusion)], 100).unwrap();
        let p = perturb_layer(&m, "w", 0.3, 17).unwrap();
        let d = p.layers()[0].weights.values();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = libm::sqrt(d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0));
        assert!((sd - 0.3).abs() / 0.3 < 0.05, "sd {sd}");
    }

    #[test]
    fn fixed_zero_selects_everything() {
        let m = skewed();
        let s = select_layers(&report_for(&m, &[0.0, 0.0, 0.0]), &m, ThresholdPolicy::Fixed(0.0)).unwrap();
        assert_eq!(s.selected.len(), 3);
        assert_eq!(s.reduction_factor, 1.0);
    }

    #[test]
    fn top_one_on_dominant_layer() {
        let m = skewed();
        let s = select_layers(&report_for(&m, &[0.5, 0.1, 0.0]), &m, ThresholdPolicy::TopK(1)).unwrap();
        assert_eq!(s.selected, vec!["big", "out"]);
        assert!((s.reduction_factor - 0.9).abs() < 0.02, "{}", s.reduction_factor);
        assert!(select_layers(&report_for(&m, &[0.5, 0.1, 0.0]), &m, ThresholdPolicy::TopK(4)).is_err());
    }

    #[test]
    fn budget_is_greedy_and_tight() {
        let m = Model::init(&Architecture::default(), 0).unwrap();
        // Rank: fusion_dense_1 (3136) would blow the budget right after the
        // output layer, so the greedy prefix stops there.
        let lam = [0.01, 0.05, 0.04, 0.03, 0.02, 0.2, 0.3];
        let rep = report_for(&m, &lam);
        let s = select_layers(&rep, &m, ThresholdPolicy::BudgetFraction(0.5)).unwrap();
        assert!(s.reduction_factor <= 0.5);
        assert_eq!(s.selected, vec!["fusion_out"]);

        let lam = [0.01, 0.05, 0.04, 0.03, 0.02, 0.001, 0.3];
        let rep = report_for(&m, &lam);
        let s = select_layers(&rep, &m, ThresholdPolicy::BudgetFraction(0.5)).unwrap();
        assert!(s.reduction_factor <= 0.5);
        let next = rep.ranking().into_iter().find(|n| !s.contains(n)).unwrap();
        let with_next = s.param_count(&m).unwrap() + m.layer(next).unwrap().param_count();
        assert!(with_next as f64 / m.total_params() as f64 > 0.5);
        assert!(select_layers(&rep, &m, ThresholdPolicy::BudgetFraction(0.0)).is_err());
        assert!(select_layers(&rep, &m, ThresholdPolicy::BudgetFraction(1.5)).is_err());
    }

    #[test]
    fn raising_tau_never_grows_selection() {
        let m = Model::init(&Architecture::default(), 0).unwrap();
        let rep = report_for(&m, &[0.01, 0.05, 0.04, 0.03, 0.02, 0.2, 0.3]);
        let mut prev = usize::MAX;
        let mut prev_rf = f64::INFINITY;
        for tau in [0.0, 0.015, 0.025, 0.035, 0.045, 0.1, 0.25, 1.0] {
            let s = select_layers(&rep, &m, ThresholdPolicy::Fixed(tau)).unwrap();
            assert!(s.selected.len() <= prev);
            assert!(s.reduction_factor <= prev_rf);
            if s.selected.len() < prev && prev != usize::MAX {
                assert!(s.reduction_factor < prev_rf);
            }
            assert!(s.contains("fusion_out"));
            prev = s.selected.len();
            prev_rf = s.reduction_factor;
        }
    }

    /// Fusion head weights that ignore the lidar branch entirely.
    fn dead_lidar_model() -> Model {
        let mut m = Model::init(&Architecture::default(), 4).unwrap();
        let i = m.index_of("fusion_dense_1").unwrap();
        let (w, _) = m.params_mut(i);
        // Fusion input columns: gps 0..16, lidar 16..32, image 32..48.
        for row in w.chunks_mut(48) {
            row[16..32].iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    fn probe(n: usize, seed: u64) -> Samples {
        use rand::Rng as _;
        let mut r = rng::from_seed(seed);
        let x = (0..n * 34).map(|_| r.random_range(-2.0..2.0)).collect();
        let y = (0..n).map(|_| r.random_range(0..34)).collect();
        Samples::new(Tensor::matrix(n, 34, x).unwrap(), y).unwrap()
    }

    #[test]
    fn dead_branch_has_zero_importance() {
        let m = dead_lidar_model();
        let data = probe(300, 2);
        let rep = importance_scores(&m, &data, 0, 0.5, 3, 9).unwrap();
        assert_eq!(rep.lambda("lidar_dense_1"), Some(0.0));
        assert_eq!(rep.lambda("lidar_dense_2"), Some(0.0));
        assert_eq!(rep, importance_scores(&m, &data, 0, 0.5, 3, 9).unwrap());
    }

    #[test]
    fn lambda_is_invariant_to_sample_order() {
        let m = Model::init(&Architecture::default(), 5).unwrap();
        let data = probe(200, 3);
        let rev: Vec<usize> = (0..200).rev().collect();
        let a = importance_scores(&m, &data, 0, 0.5, 2, 1).unwrap();
        let b = importance_scores(&m, &data.subset(&rev).unwrap(), 0, 0.5, 2, 1).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn mean_report_averages() {
        let m = skewed();
        let a = report_for(&m, &[0.2, 0.4, 0.0]);
        let b = report_for(&m, &[0.4, 0.0, 0.2]);
        let mean = ImportanceReport::mean(&[a, b]).unwrap();
        let l: Vec<f64> = mean.scores.iter().map(|s| s.lambda).collect();
        assert!((l[0] - 0.3).abs() < 1e-15 && (l[1] - 0.2).abs() < 1e-15 && (l[2] - 0.1).abs() < 1e-15);
    }
}
