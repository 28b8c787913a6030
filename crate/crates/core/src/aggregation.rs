//! Cluster-weighted aggregation and the baseline schemes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::sensitivity::LayerSelection;
use crate::similarity::SimilarityMatrix;

/// How member weights are derived from the similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    MeanSimilarity,
    Uniform,
}

/// Reference set for super-cluster relevance weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterRelevance {
    /// Mean similarity to the members of the primary cluster.
    #[default]
    PrimaryCluster,
    /// Mean similarity to the other members of the super-cluster.
    SuperCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterWeights {
    pub cluster_id: usize,
    /// Vehicle ids, parallel to `weights`.
    pub members: Vec<usize>,
    pub weights: Vec<f64>,
    /// The computed weights summed to zero and were replaced by uniform ones.
    pub fallback: bool,
}

impl ClusterWeights {
    fn new(cluster_id: usize, members: Vec<usize>, mut weights: Vec<f64>) -> Self {
        let fallback = !(weights.iter().sum::<f64>() > 0.0);
        if fallback {
            weights.iter_mut().for_each(|w| *w = 1.0);
        }
        Self {
            cluster_id,
            members,
            weights,
            fallback,
        }
    }

    pub fn weight_of(&self, vehicle: usize) -> Option<f64> {
        self.members.iter().position(|&m| m == vehicle).map(|i| self.weights[i])
    }
}

/// Mean similarity of `v` to each of `refs` other than itself; 1 when there
/// are none.
fn mean_similarity(sim: &SimilarityMatrix, v: usize, refs: &[usize]) -> f64 {
    let others: Vec<usize> = refs.iter().copied().filter(|&r| r != v).collect();
    if others.is_empty() {
        return 1.0;
    }
    others.iter().map(|&r| sim.get(v, r)).sum::<f64>() / others.len() as f64
}

fn check_members(members: &[usize], n: usize) -> Result<()> {
    if members.is_empty() {
        return Err(Error::Empty("cluster"));
    }
    if let Some(&v) = members.iter().find(|&&v| v >= n) {
        return Err(Error::config(format!("vehicle {v} out of range for {n} models")));
    }
    Ok(())
}

pub fn intra_weights(
    cluster_id: usize,
    members: &[usize],
    sim: &SimilarityMatrix,
    weighting: Weighting,
) -> Result<ClusterWeights> {
    check_members(members, sim.n)?;
    let w = match weighting {
        Weighting::Uniform => vec![1.0; members.len()],
        Weighting::MeanSimilarity => members.iter().map(|&v| mean_similarity(sim, v, members)).collect(),
    };
    Ok(ClusterWeights::new(cluster_id, members.to_vec(), w))
}

pub fn inter_weights(
    cluster_id: usize,
    super_cluster: &[usize],
    primary: &[usize],
    sim: &SimilarityMatrix,
    weighting: Weighting,
    relevance: InterRelevance,
) -> Result<ClusterWeights> {
    check_members(super_cluster, sim.n)?;
    check_members(primary, sim.n)?;
    if let Some(v) = primary.iter().find(|v| !super_cluster.contains(v)) {
        return Err(Error::config(format!(
            "vehicle {v} is in the cluster but not its super-cluster"
        )));
    }
    let refs = match relevance {
        InterRelevance::PrimaryCluster => primary,
        InterRelevance::SuperCluster => super_cluster,
    };
    let w = match weighting {
        Weighting::Uniform => vec![1.0; super_cluster.len()],
        Weighting::MeanSimilarity => super_cluster.iter().map(|&v| mean_similarity(sim, v, refs)).collect(),
    };
    Ok(ClusterWeights::new(cluster_id, super_cluster.to_vec(), w))
}

/// Weighted mean of `models` on the selected layers; everything else comes
/// from `base`. The result is clamped into the element-wise hull of the
/// positively weighted inputs.
pub fn weighted_average(models: &[&Model], weights: &[f64], base: &Model, layers: &LayerSelection) -> Result<Model> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    if models.len() != weights.len() {
        return Err(Error::config("one weight per model is required"));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::config("aggregation weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::config("aggregation weights sum to zero"));
    }
    for m in models {
        base.check_compatible(m)?;
    }
    let p: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let live: Vec<usize> = (0..models.len()).filter(|&i| p[i] > 0.0).collect();
    let anchor = live[0];

    let mut out = base.clone();
    for name in &layers.selected {
        let j = base.index_of(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
        let (w_out, b_out) = out.params_mut(j);
        let ws: Vec<&[f64]> = models.iter().map(|m| m.layers()[j].weights.values()).collect();
        let bs: Vec<&[f64]> = models.iter().map(|m| m.layers()[j].bias.as_slice()).collect();
        mean_into(w_out, &ws, &p, &live, anchor);
        mean_into(b_out, &bs, &p, &live, anchor);
    }
    Ok(out)
}

/// `a + Σ p_i (x_i − a)` with `a` the anchor input, clamped to the hull.
fn mean_into(out: &mut [f64], srcs: &[&[f64]], p: &[f64], live: &[usize], anchor: usize) {
    let a = srcs[anchor];
    for (e, o) in out.iter_mut().enumerate() {
        let mut v = a[e];
        let (mut lo, mut hi) = (v, v);
        for &i in live {
            let x = srcs[i][e];
            v += p[i] * (x - a[e]);
            lo = lo.min(x);
            hi = hi.max(x);
        }
        *o = v.clamp(lo, hi);
    }
}

/// A cluster-level aggregate and the weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub model: Model,
    pub weights: ClusterWeights,
}

/// `θ_κ` over `cluster`, indexing `models` by vehicle id.
pub fn intra_cluster_aggregate(
    models: &[Model],
    cluster_id: usize,
    cluster: &[usize],
    sim: &SimilarityMatrix,
    layers: &LayerSelection,
    base: &Model,
    weighting: Weighting,
) -> Result<Aggregate> {
    let weights = intra_weights(cluster_id, cluster, sim, weighting)?;
    aggregate_with(models, weights, base, layers)
}

/// `θ_κ₊₁` over `super_cluster`, with relevance measured against `primary`.
#[allow(clippy::too_many_arguments)]
pub fn inter_cluster_aggregate(
    models: &[Model],
    cluster_id: usize,
    super_cluster: &[usize],
    primary: &[usize],
    sim: &SimilarityMatrix,
    layers: &LayerSelection,
    base: &Model,
    weighting: Weighting,
    relevance: InterRelevance,
) -> Result<Aggregate> {
    let weights = inter_weights(cluster_id, super_cluster, primary, sim, weighting, relevance)?;
    aggregate_with(models, weights, base, layers)
}

fn aggregate_with(
    models: &[Model],
    weights: ClusterWeights,
    base: &Model,
    layers: &LayerSelection,
) -> Result<Aggregate> {
    check_members(&weights.members, models.len())?;
    let picked: Vec<&Model> = weights.members.iter().map(|&v| &models[v]).collect();
    let model = weighted_average(&picked, &weights.weights, base, layers)?;
    Ok(Aggregate { model, weights })
}

/// Parameter-wise midpoint on the selected layers; other layers from `a`.
pub fn global_blend(a: &Model, b: &Model, layers: &LayerSelection) -> Result<Model> {
    a.check_compatible(b)?;
    let mut out = a.clone();
    for name in &layers.selected {
        let j = a.index_of(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
        let lb = &b.layers()[j];
        let (w, bias) = out.params_mut(j);
        for (x, y) in w.iter_mut().zip(lb.weights.values()) {
            *x = (*x + y) * 0.5;
        }
        for (x, y) in bias.iter_mut().zip(&lb.bias) {
            *x = (*x + y) * 0.5;
        }
    }
    Ok(out)
}

/// Sample-count-weighted mean of every layer.
pub fn fedavg(models: &[Model], sample_counts: &[usize]) -> Result<Model> {
    let first = models.first().ok_or(Error::Empty("model list"))?;
    fedavg_layers(models, sample_counts, first, &LayerSelection::all(first))
}

/// FedAvg restricted to `layers`, others from `base`.
pub fn fedavg_layers(
    models: &[Model],
    sample_counts: &[usize],
    base: &Model,
    layers: &LayerSelection,
) -> Result<Model> {
    if models.len() != sample_counts.len() {
        return Err(Error::config("one sample count per model is required"));
    }
    let refs: Vec<&Model> = models.iter().collect();
    let w: Vec<f64> = sample_counts.iter().map(|&c| c as f64).collect();
    weighted_average(&refs, &w, base, layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pruned {
    pub model: Model,
    /// Weights set to zero by this call.
    pub pruned: usize,
    /// Nonzero weights after pruning, biases excluded.
    pub nonzero_weights: usize,
}

impl Pruned {
    /// Parameters that must be transmitted: nonzero weights plus all biases.
    pub fn transmitted_params(&self) -> usize {
        self.nonzero_weights + self.model.layers().iter().map(|l| l.bias.len()).sum::<usize>()
    }
}

/// Zero the `round(f · W)` smallest-magnitude weights across the whole
/// model. Biases are kept. Equal magnitudes go to the earlier parameter.
pub fn mbp_prune(model: &Model, prune_fraction: f64) -> Result<Pruned> {
    if !(prune_fraction > 0.0 && prune_fraction < 1.0) {
        return Err(Error::config(format!("prune fraction {prune_fraction} outside (0, 1)")));
    }
    let mut keys: Vec<(f64, usize, usize)> = Vec::new();
    for (j, l) in model.layers().iter().enumerate() {
        keys.extend(
            l.weights
                .values()
                .iter()
                .enumerate()
                .map(|(e, w)| (libm::fabs(*w), j, e)),
        );
    }
    let total = keys.len();
    let n_prune = libm::round(prune_fraction * total as f64) as usize;
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut out = model.clone();
    for &(_, j, e) in &keys[..n_prune] {
        out.params_mut(j).0[e] = 0.0;
    }
    let nonzero_weights = out
        .layers()
        .iter()
        .map(|l| l.weights.values().iter().filter(|w| **w != 0.0).count())
        .sum();
    Ok(Pruned {
        model: out,
        pruned: n_prune,
        nonzero_weights,
    })
}

/// Per-layer aggregation periods in rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedLamaSchedule {
    /// Period for layers in the fusion head.
    pub fusion_period: u32,
    /// Period for modality-branch layers.
    pub branch_period: u32,
    /// Explicit per-layer overrides.
    pub overrides: BTreeMap<String, u32>,
}

impl Default for FedLamaSchedule {
    fn default() -> Self {
        Self {
            fusion_period: 1,
            branch_period: 2,
            overrides: BTreeMap::new(),
        }
    }
}

impl FedLamaSchedule {
    pub fn uniform(period: u32) -> Self {
        Self {
            fusion_period: period,
            branch_period: period,
            overrides: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fusion_period == 0 || self.branch_period == 0 || self.overrides.values().any(|p| *p == 0) {
            return Err(Error::config("aggregation periods must be positive"));
        }
        Ok(())
    }

    pub fn period(&self, model: &Model, layer: &str) -> Result<u32> {
        if let Some(p) = self.overrides.get(layer) {
            return Ok(*p);
        }
        let sub = model
            .submodel_of(layer)
            .ok_or_else(|| Error::UnknownLayer(layer.into()))?;
        Ok(if sub == crate::nn::Submodel::Fusion {
            self.fusion_period
        } else {
            self.branch_period
        })
    }
}

/// Layers due for aggregation in `round` (1-based), in model order.
pub fn fedlama_schedule(round: usize, schedule: &FedLamaSchedule, model: &Model) -> Result<Vec<String>> {
    if round == 0 {
        return Err(Error::config("rounds are numbered from 1"));
    }
    schedule.validate()?;
    if let Some(name) = schedule.overrides.keys().find(|k| model.index_of(k).is_none()) {
        return Err(Error::UnknownLayer(name.clone()));
    }
    let mut out = Vec::new();
    for name in model.layer_names() {
        if round.is_multiple_of(schedule.period(model, name)? as usize) {
            out.push(String::from(name));
        }
    }
    Ok(out)
}

/// Aggregation scheme of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregationStrategy {
    #[default]
    Sigla,
    #[serde(alias = "flash")]
    Fedavg,
    Mbp {
        prune_fraction: f64,
    },
    Fedlama {
        #[serde(default)]
        schedule: FedLamaSchedule,
    },
}

impl AggregationStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationStrategy::Sigla => "sigla",
            AggregationStrategy::Fedavg => "fedavg",
            AggregationStrategy::Mbp { .. } => "mbp",
            AggregationStrategy::Fedlama { .. } => "fedlama",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AggregationStrategy::Mbp { prune_fraction } if !(*prune_fraction > 0.0 && *prune_fraction < 1.0) => {
                Err(Error::config(format!("prune fraction {prune_fraction} outside (0, 1)")))
            }
            AggregationStrategy::Fedlama { schedule } => schedule.validate(),
            _ => Ok(()),
        }
    }
}
