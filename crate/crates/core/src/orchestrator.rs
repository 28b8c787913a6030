//! Round loop driving local training, transfers, clustering and aggregation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    fedavg_layers, fedlama_schedule, global_blend, inter_cluster_aggregate, intra_cluster_aggregate, mbp_prune,
    AggregationStrategy, InterRelevance, Weighting,
};
use crate::clustering::{groups, select_clustering, Clustering, KRange, Linkage};
use crate::comms::{
    round_comm_metrics, transfer, ChannelConfig, Direction, RoundCommReport, TransferOutcome, UplinkPayload,
};
use crate::dataset::{generate, global_validation_set, pooled_training_set, Category, GenConfig, VehicleDataset};
use crate::error::{Error, Result};
use crate::nn::{evaluate, train_local, Architecture, Model, Samples, TrainConfig};
use crate::rng::{self, Purpose};
use crate::sensitivity::{
    importance_scores, select_layers, ImportanceReport, LayerSelection, ThresholdPolicy, DEFAULT_EPSILON,
    DEFAULT_TRIALS,
};
use crate::similarity::{similarity_matrix, KernelConfig, SimilarityMatrix};

pub use crate::nn::predict_sector;

/// Hidden layer widths; input widths and the sector count come from the
/// data configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub gps_hidden: Vec<usize>,
    pub lidar_hidden: Vec<usize>,
    pub image_hidden: Vec<usize>,
    pub fusion_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = Architecture::default();
        Self {
            gps_hidden: a.gps_hidden,
            lidar_hidden: a.lidar_hidden,
            image_hidden: a.image_hidden,
            fusion_hidden: a.fusion_hidden,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, data: &GenConfig) -> Architecture {
        Architecture {
            gps_hidden: self.gps_hidden.clone(),
            lidar_width: data.lidar_width,
            lidar_hidden: self.lidar_hidden.clone(),
            image_width: data.image_width,
            image_hidden: self.image_hidden.clone(),
            fusion_hidden: self.fusion_hidden.clone(),
            n_sectors: data.n_sectors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelPreset {
    Perfect,
    /// Contact window scaled to the run's full-model size.
    Calibrated {
        mean_rate: f64,
    },
    Custom(ChannelConfig),
}

impl Default for ChannelPreset {
    fn default() -> Self {
        ChannelPreset::Calibrated { mean_rate: 1e6 }
    }
}

impl ChannelPreset {
    pub fn resolve(&self, full_model_params: usize) -> ChannelConfig {
        match self {
            ChannelPreset::Perfect => ChannelConfig::perfect(),
            ChannelPreset::Calibrated { mean_rate } => ChannelConfig::calibrated(full_model_params as u64, *mean_rate),
            ChannelPreset::Custom(c) => c.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityConfig {
    pub epsilon: f64,
    pub trials: usize,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            trials: DEFAULT_TRIALS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub strategy: AggregationStrategy,
    pub rounds: usize,
    pub data: GenConfig,
    /// `train.seed` is ignored; per-round seeds derive from `seed`.
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub kernel: KernelConfig,
    pub channel: ChannelPreset,
    pub threshold_policy: ThresholdPolicy,
    pub k_range: KRange,
    pub recluster_every: usize,
    pub seed: u64,
    pub weighting: Weighting,
    pub inter_relevance: InterRelevance,
    /// Repeat the sensitivity pass every round instead of only after round 1.
    pub reselect_every_round: bool,
    pub sensitivity: SensitivityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: AggregationStrategy::Sigla,
            rounds: 10,
            data: GenConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            kernel: KernelConfig::default(),
            channel: ChannelPreset::default(),
            threshold_policy: ThresholdPolicy::default(),
            k_range: KRange::new(2, 5),
            recluster_every: 1,
            seed: 0,
            weighting: Weighting::MeanSimilarity,
            inter_relevance: InterRelevance::PrimaryCluster,
            reselect_every_round: false,
            sensitivity: SensitivityConfig::default(),
        }
    }
}

impl RunConfig {
    /// Same configuration with both the run and data seeds set to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn with_strategy(mut self, strategy: AggregationStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        self.kernel.validate()?;
        self.model.architecture(&self.data).validate()?;
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.recluster_every == 0 {
            return Err(Error::config("recluster_every must be at least 1"));
        }
        let k = self.k_range;
        if k.min > k.max {
            return Err(Error::config("empty k_range"));
        }
        if !k.is_single() && k.min < 2 {
            return Err(Error::config(format!(
                "k_range {}..={} must start at 2 or more",
                k.min, k.max
            )));
        }
        if !(self.sensitivity.epsilon > 0.0) || self.sensitivity.trials == 0 {
            return Err(Error::config("sensitivity needs epsilon > 0 and at least one trial"));
        }
        let full = Model::init(&self.model.architecture(&self.data), 0)?.total_params();
        self.channel.resolve(full).validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_test_accuracy: f64,
    /// Keyed by category name; only categories present in the run.
    pub per_category_accuracy: BTreeMap<String, f64>,
    pub mean_train_loss: f64,
    pub params_transmitted: usize,
    /// Bytes of successful uplinks.
    pub bytes_up: u64,
    /// Bytes of successful downlinks.
    pub bytes_down: u64,
    pub bytes_up_attempted: u64,
    /// `None` when nothing was transmitted.
    pub transfer_success_rate: Option<f64>,
    pub models_received: usize,
    pub models_sent: usize,
    pub chosen_k: usize,
    pub chosen_linkage: Option<Linkage>,
    pub silhouette: Option<f64>,
    /// Uplink payload parameters over the full model size.
    pub reduction_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub strategy: String,
    pub metrics: Vec<RoundMetrics>,
    /// Each vehicle's model after the last round.
    pub final_models: Vec<Model>,
    pub transfers: Vec<TransferOutcome>,
    pub payloads: Vec<UplinkPayload>,
    pub comm: Vec<RoundCommReport>,
    /// Clustering in force at each round, SIGLA only.
    pub clusterings: Vec<Clustering>,
    pub importance: Option<ImportanceReport>,
    pub selection: Option<LayerSelection>,
    /// Similarity matrix of the last round, SIGLA only.
    pub similarity: Option<SimilarityMatrix>,
    pub channel: ChannelConfig,
}

impl RunOutput {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.global_test_accuracy)
    }

    pub fn total_params(&self) -> usize {
        self.metrics.iter().map(|m| m.params_transmitted).sum()
    }

    pub fn success_rate(&self) -> Option<f64> {
        let attempts: usize = self.comm.iter().map(RoundCommReport::attempts).sum();
        let ok: usize = self
            .comm
            .iter()
            .map(|c| c.uplink_successes + c.downlink_successes)
            .sum();
        (attempts > 0).then(|| ok as f64 / attempts as f64)
    }

    pub fn convergence_round(&self) -> Option<usize> {
        let acc: Vec<f64> = self.metrics.iter().map(|m| m.global_test_accuracy).collect();
        convergence_round(&acc)
    }
}

/// First round (1-based) reaching 99% of the sequence maximum.
pub fn convergence_round(accuracies: &[f64]) -> Option<usize> {
    let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    accuracies.iter().position(|&a| a >= 0.99 * max).map(|i| i + 1)
}

/// Seed of vehicle `v`'s local training in `round`.
pub fn train_seed(seed: u64, round: usize, vehicle: usize) -> u64 {
    rng::derive_seed(seed, round, vehicle, Purpose::Train)
}

/// Shared initial model of a run.
pub fn initial_model(cfg: &RunConfig) -> Result<Model> {
    Model::init(
        &cfg.model.architecture(&cfg.data),
        rng::derive_seed(cfg.seed, 0, 0, Purpose::Init),
    )
}

fn channel_seed(cfg: &RunConfig, channel: &ChannelConfig) -> u64 {
    rng::mix(cfg.seed, &[channel.seed])
}

struct Evaluator {
    tests: Vec<Samples>,
    categories: Vec<Category>,
}

impl Evaluator {
    fn new(datasets: &[VehicleDataset]) -> Result<Self> {
        Ok(Self {
            tests: datasets.iter().map(VehicleDataset::test).collect::<Result<_>>()?,
            categories: datasets.iter().map(|d| d.category).collect(),
        })
    }

    /// Each vehicle's test split goes through `model_of(v)`.
    fn score<'a>(&self, model_of: impl Fn(usize) -> &'a Model) -> Result<(f64, BTreeMap<String, f64>)> {
        let mut correct = 0;
        let mut total = 0;
        let mut per: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
        for (v, t) in self.tests.iter().enumerate() {
            if t.is_empty() {
                continue;
            }
            let hits = evaluate(model_of(v), t)?.correct.iter().filter(|&&c| c).count();
            correct += hits;
            total += t.len();
            let slot = per.entry(self.categories[v]).or_default();
            slot.0 += hits;
            slot.1 += t.len();
        }
        if total == 0 {
            return Err(Error::Empty("global test set"));
        }
        let cats = per
            .into_iter()
            .map(|(c, (k, n))| (String::from(c.as_str()), k as f64 / n as f64))
            .collect();
        Ok((correct as f64 / total as f64, cats))
    }
}

/// Replace the named layers of `dst` with those of `src`.
fn overwrite(dst: &mut Model, src: &Model, layers: &[String]) -> Result<()> {
    for name in layers {
        dst.set_layer(src.layer(name)?.clone())?;
    }
    Ok(())
}

/// Generate the data for `cfg` and run it.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = generate(&cfg.data)?;
    run_on(cfg, &data.datasets)
}

/// Run `cfg.strategy` on existing per-vehicle datasets.
pub fn run_on(cfg: &RunConfig, datasets: &[VehicleDataset]) -> Result<RunOutput> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Empty("vehicle list"));
    }
    let n = datasets.len();
    let init = initial_model(cfg)?;
    let channel = cfg.channel.resolve(init.total_params());
    channel.validate()?;
    let chan_seed = channel_seed(cfg, &channel);
    let trains: Vec<Samples> = datasets.iter().map(VehicleDataset::train).collect::<Result<_>>()?;
    let counts: Vec<usize> = trains.iter().map(Samples::len).collect();
    let eval = Evaluator::new(datasets)?;
    let is_sigla = cfg.strategy == AggregationStrategy::Sigla;
    let probe = if is_sigla {
        Some(global_validation_set(datasets)?.samples)
    } else {
        None
    };
    let all = LayerSelection::all(&init);

    let mut local = vec![init.clone(); n];
    let mut view = vec![init.clone(); n];
    let mut global = vec![init.clone(); n];
    let mut selection = all.clone();
    let mut clustering = Clustering::single(n);
    let mut importance = None;

    let mut out = RunOutput {
        strategy: String::from(cfg.strategy.name()),
        metrics: Vec::with_capacity(cfg.rounds),
        final_models: Vec::new(),
        transfers: Vec::new(),
        payloads: Vec::new(),
        comm: Vec::new(),
        clusterings: Vec::new(),
        importance: None,
        selection: None,
        similarity: None,
        channel: channel.clone(),
    };

    for r in 1..=cfg.rounds {
        let round = (|| -> Result<()> {
            // Local training.
            let mut trained = Vec::with_capacity(n);
            let mut loss = 0.0;
            for v in 0..n {
                let tc = TrainConfig {
                    seed: train_seed(cfg.seed, r, v),
                    ..cfg.train
                };
                let t = train_local(&local[v], &trains[v], &tc)?;
                loss += t.epoch_losses.last().copied().unwrap_or(0.0);
                trained.push(t.model);
            }

            // Uplink.
            let sent_layers: LayerSelection = match &cfg.strategy {
                AggregationStrategy::Sigla => selection.clone(),
                AggregationStrategy::Fedavg | AggregationStrategy::Mbp { .. } => all.clone(),
                AggregationStrategy::Fedlama { schedule } => {
                    let due = fedlama_schedule(r, schedule, &init)?;
                    LayerSelection::from_layers(&init, &due, 0.0)?
                }
            };
            let mut uploaded = Vec::with_capacity(n);
            let mut payloads = Vec::new();
            let mut outcomes = Vec::new();
            let mut received = vec![false; n];
            for (v, t) in trained.iter().enumerate() {
                let (model, params) = match &cfg.strategy {
                    AggregationStrategy::Mbp { prune_fraction } => {
                        let p = mbp_prune(t, *prune_fraction)?;
                        let params = p.transmitted_params();
                        (p.model, params)
                    }
                    _ => (t.clone(), sent_layers.param_count(&init)?),
                };
                if !sent_layers.selected.is_empty() {
                    let mut s = rng::stream(chan_seed, r, v, Purpose::Uplink);
                    let link = transfer(channel.bytes_for(params), &channel, &mut s);
                    received[v] = link.success;
                    outcomes.push(TransferOutcome::new(v, r, Direction::Uplink, params, link));
                    payloads.push(UplinkPayload {
                        vehicle_id: v,
                        round: r,
                        layers: sent_layers.selected.clone(),
                        params,
                    });
                }
                uploaded.push(model);
            }

            // Server side.
            let mut targets: Vec<usize> = Vec::new();
            if !sent_layers.selected.is_empty() && received.iter().any(|&x| x) {
                if is_sigla {
                    for v in (0..n).filter(|&v| received[v]) {
                        overwrite(&mut view[v], &uploaded[v], &sent_layers.selected)?;
                    }
                    let sim = similarity(&view, &sent_layers, &cfg.kernel)?;
                    if r >= 2 && (r - 2) % cfg.recluster_every == 0 && !cfg.k_range.is_single() && n >= 3 {
                        // Bounds past the fleet size are clipped to it.
                        let k = KRange::new(cfg.k_range.min.min(n), cfg.k_range.max.min(n));
                        clustering = select_clustering(sim.as_ref().expect("n >= 3"), k)?;
                    }
                    targets = sigla_aggregate(
                        cfg,
                        &view,
                        &received,
                        &clustering,
                        sim.as_ref(),
                        &sent_layers,
                        &mut global,
                    )?;
                    out.similarity = sim;
                    if r == 1 || cfg.reselect_every_round {
                        let probe = probe.as_ref().expect("sigla probe set");
                        let mut reports = Vec::new();
                        for v in (0..n).filter(|&v| received[v]) {
                            let seed = rng::derive_seed(cfg.seed, r, v, Purpose::Sensitivity);
                            let eps = cfg.sensitivity.epsilon;
                            reports.push(importance_scores(
                                &view[v],
                                probe,
                                v,
                                eps,
                                cfg.sensitivity.trials,
                                seed,
                            )?);
                        }
                        let mean = ImportanceReport::mean(&reports)?;
                        selection = select_layers(&mean, &init, cfg.threshold_policy)?;
                        importance = Some(mean);
                    }
                } else {
                    let part: Vec<usize> = (0..n).filter(|&v| received[v]).collect();
                    let models: Vec<Model> = part.iter().map(|&v| uploaded[v].clone()).collect();
                    let c: Vec<usize> = part.iter().map(|&v| counts[v]).collect();
                    let theta = fedavg_layers(&models, &c, &global[0], &sent_layers)?;
                    global.iter_mut().for_each(|g| *g = theta.clone());
                    targets = (0..n).collect();
                }
            }

            // Downlink.
            let down_params = sent_layers.param_count(&init)?;
            local.clone_from_slice(&trained);
            for &v in &targets {
                let mut s = rng::stream(chan_seed, r, v, Purpose::Downlink);
                let link = transfer(channel.bytes_for(down_params), &channel, &mut s);
                if link.success {
                    overwrite(&mut local[v], &global[v], &sent_layers.selected)?;
                }
                outcomes.push(TransferOutcome::new(v, r, Direction::Downlink, down_params, link));
            }

            let rep = round_comm_metrics(r, &outcomes, &payloads, &targets, &init, &channel)?;
            let (acc, per) = eval.score(|v| &local[v])?;
            let bytes_up = outcomes
                .iter()
                .filter(|o| o.direction == Direction::Uplink && o.success)
                .map(|o| o.bytes_attempted)
                .sum();
            let bytes_down = outcomes
                .iter()
                .filter(|o| o.direction == Direction::Downlink && o.success)
                .map(|o| o.bytes_attempted)
                .sum();
            let rf = payloads
                .first()
                .map_or(0.0, |p| p.params as f64 / init.total_params() as f64);
            out.metrics.push(RoundMetrics {
                round: r,
                global_test_accuracy: acc,
                per_category_accuracy: per,
                mean_train_loss: loss / n as f64,
                params_transmitted: rep.params_transmitted,
                bytes_up,
                bytes_down,
                bytes_up_attempted: rep.uplink_bytes_attempted,
                transfer_success_rate: (rep.attempts() > 0).then_some(rep.success_rate),
                models_received: rep.models_received(),
                models_sent: rep.models_sent(),
                chosen_k: clustering.k,
                chosen_linkage: clustering.linkage,
                silhouette: clustering.silhouette,
                reduction_factor: rf,
            });
            if is_sigla {
                out.clusterings.push(clustering.clone());
            }
            out.transfers.extend(outcomes);
            out.payloads.extend(payloads);
            out.comm.push(rep);
            Ok(())
        })();
        round.map_err(|e| e.in_round(r))?;
    }
    out.final_models = local;
    out.importance = importance;
    out.selection = is_sigla.then_some(selection);
    Ok(out)
}

fn similarity(view: &[Model], layers: &LayerSelection, kernel: &KernelConfig) -> Result<Option<SimilarityMatrix>> {
    if view.len() < 2 {
        return Ok(None);
    }
    similarity_matrix(view, &layers.selected, kernel).map(Some)
}

/// Per-cluster intra, super-cluster and blended models; returns the
/// vehicles that get a downlink.
fn sigla_aggregate(
    cfg: &RunConfig,
    view: &[Model],
    received: &[bool],
    clustering: &Clustering,
    sim: Option<&SimilarityMatrix>,
    layers: &LayerSelection,
    global: &mut [Model],
) -> Result<Vec<usize>> {
    let n = view.len();
    let unit;
    let sim = match sim {
        Some(s) => s,
        None => {
            unit = SimilarityMatrix::from_values(n, vec![1.0; n * n])?;
            &unit
        }
    };
    let coarse = groups(&clustering.coarser_labels);
    let mut targets = Vec::new();
    for (c, members) in clustering.members().iter().enumerate() {
        let part: Vec<usize> = members.iter().copied().filter(|&v| received[v]).collect();
        if part.is_empty() {
            continue;
        }
        let sup = &coarse[clustering.coarser_labels[members[0]]];
        let sup_part: Vec<usize> = sup.iter().copied().filter(|&v| received[v]).collect();
        let base = &global[members[0]];
        let k = intra_cluster_aggregate(view, c, &part, sim, layers, base, cfg.weighting)?;
        let kp = inter_cluster_aggregate(
            view,
            c,
            &sup_part,
            &part,
            sim,
            layers,
            base,
            cfg.weighting,
            cfg.inter_relevance,
        )?;
        let theta = global_blend(&k.model, &kp.model, layers)?;
        for &v in members {
            global[v] = theta.clone();
        }
        targets.extend_from_slice(members);
    }
    targets.sort_unstable();
    Ok(targets)
}

/// One model trained on the pooled training data for `rounds ×
/// local_epochs` epochs, evaluated after each round.
pub fn run_centralized(cfg: &RunConfig, datasets: &[VehicleDataset]) -> Result<RunOutput> {
    cfg.validate()?;
    let pooled = pooled_training_set(datasets)?.samples;
    let eval = Evaluator::new(datasets)?;
    let mut model = initial_model(cfg)?;
    let channel = cfg.channel.resolve(model.total_params());
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for r in 1..=cfg.rounds {
        let tc = TrainConfig {
            seed: rng::derive_seed(cfg.seed, r, usize::MAX, Purpose::Centralized),
            ..cfg.train
        };
        let t = train_local(&model, &pooled, &tc).map_err(|e| e.in_round(r))?;
        model = t.model;
        let (acc, per) = eval.score(|_| &model).map_err(|e| e.in_round(r))?;
        metrics.push(RoundMetrics {
            round: r,
            global_test_accuracy: acc,
            per_category_accuracy: per,
            mean_train_loss: t.epoch_losses.last().copied().unwrap_or(0.0),
            params_transmitted: 0,
            bytes_up: 0,
            bytes_down: 0,
            bytes_up_attempted: 0,
            transfer_success_rate: None,
            models_received: 0,
            models_sent: 0,
            chosen_k: 1,
            chosen_linkage: None,
            silhouette: None,
            reduction_factor: 0.0,
        });
    }
    Ok(RunOutput {
        strategy: String::from("centralized"),
        metrics,
        final_models: vec![model; datasets.len()],
        transfers: Vec::new(),
        payloads: Vec::new(),
        comm: Vec::new(),
        clusterings: Vec::new(),
        importance: None,
        selection: None,
        similarity: None,
        channel,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub final_accuracy: f64,
    pub convergence_round: Option<usize>,
    pub total_params: usize,
    pub success_rate: Option<f64>,
}

impl ComparisonRow {
    pub fn of(run: &RunOutput) -> Self {
        Self {
            strategy: run.strategy.clone(),
            final_accuracy: run.final_accuracy(),
            convergence_round: run.convergence_round(),
            total_params: run.total_params(),
            success_rate: run.success_rate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<RunOutput>,
}

/// Run every strategy on the same data and seed, plus a centralized run.
pub fn compare_strategies(base: &RunConfig, strategies: &[AggregationStrategy]) -> Result<Comparison> {
    if strategies.is_empty() {
        return Err(Error::Empty("strategy list"));
    }
    base.validate()?;
    let data = generate(&base.data)?;
    let mut runs = Vec::with_capacity(strategies.len() + 1);
    for s in strategies {
        runs.push(run_on(&base.clone().with_strategy(s.clone()), &data.datasets)?);
    }
    runs.push(run_centralized(base, &data.datasets)?);
    Ok(Comparison {
        rows: runs.iter().map(ComparisonRow::of).collect(),
        runs,
    })
}
