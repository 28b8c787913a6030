//! CSV and JSON outputs of runs.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use sigla_core::clustering::{ClusterHierarchy, Linkage};
use sigla_core::comms::{ChannelConfig, TransferOutcome};
use sigla_core::orchestrator::{ComparisonRow, RoundMetrics, RunConfig, RunOutput};
use sigla_core::sensitivity::{ImportanceReport, LayerSelection};
use sigla_core::similarity::SimilarityMatrix;

use crate::error::Result;

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(w: W, metrics: &[RoundMetrics]) -> Result<()> {
    let cats: BTreeSet<&String> = metrics.iter().flat_map(|m| m.per_category_accuracy.keys()).collect();
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["round".to_string(), "global_test_accuracy".into()];
    header.extend(cats.iter().map(|c| format!("acc_{c}")));
    header.extend(
        [
            "mean_train_loss",
            "params_transmitted",
            "bytes_up",
            "bytes_down",
            "bytes_up_attempted",
            "transfer_success_rate",
            "models_received",
            "models_sent",
            "chosen_k",
            "chosen_linkage",
            "silhouette",
            "reduction_factor",
        ]
        .map(String::from),
    );
    out.write_record(&header)?;
    for m in metrics {
        let mut rec = vec![m.round.to_string(), m.global_test_accuracy.to_string()];
        rec.extend(cats.iter().map(|c| opt(m.per_category_accuracy.get(*c))));
        rec.extend([
            m.mean_train_loss.to_string(),
            m.params_transmitted.to_string(),
            m.bytes_up.to_string(),
            m.bytes_down.to_string(),
            m.bytes_up_attempted.to_string(),
            opt(m.transfer_success_rate),
            m.models_received.to_string(),
            m.models_sent.to_string(),
            m.chosen_k.to_string(),
            opt(m.chosen_linkage.map(Linkage::as_str)),
            opt(m.silhouette),
            m.reduction_factor.to_string(),
        ]);
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_transfers_csv<W: Write>(w: W, outcomes: &[TransferOutcome]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "round",
        "vehicle",
        "direction",
        "bytes",
        "success",
        "elapsed",
        "params",
        "contact_time",
    ])?;
    for o in outcomes {
        out.write_record([
            o.round.to_string(),
            o.vehicle_id.to_string(),
            o.direction.as_str().to_string(),
            o.bytes_attempted.to_string(),
            o.success.to_string(),
            o.elapsed.to_string(),
            o.params.to_string(),
            o.contact_time.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_comparison_csv<W: Write>(w: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "strategy",
        "final_accuracy",
        "convergence_round",
        "total_params",
        "success_rate",
    ])?;
    for r in rows {
        out.write_record([
            r.strategy.clone(),
            r.final_accuracy.to_string(),
            opt(r.convergence_round),
            r.total_params.to_string(),
            opt(r.success_rate),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Square matrix with a leading `vehicle` column.
pub fn write_similarity_csv<W: Write>(w: W, sim: &SimilarityMatrix) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["vehicle".to_string()];
    header.extend((0..sim.n).map(|i| i.to_string()));
    out.write_record(&header)?;
    for i in 0..sim.n {
        let mut rec = vec![i.to_string()];
        rec.extend((0..sim.n).map(|k| sim.get(i, k).to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per merge in scipy linkage-matrix order.
pub fn write_merge_tree_csv<W: Write>(w: W, h: &ClusterHierarchy) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "cluster_a", "cluster_b", "height", "size"])?;
    for (s, m) in h.merges.iter().enumerate() {
        out.write_record([
            s.to_string(),
            m.a.to_string(),
            m.b.to_string(),
            m.height.to_string(),
            m.size.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalClustering {
    pub k: usize,
    pub linkage: Option<Linkage>,
    pub labels: Vec<usize>,
    pub coarser_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub convergence_round: Option<usize>,
    pub total_params: usize,
    pub success_rate: Option<f64>,
    pub selection: Option<LayerSelection>,
    pub clustering: Option<FinalClustering>,
    pub channel: ChannelConfig,
}

impl RunSummary {
    pub fn of(run: &RunOutput) -> Self {
        Self {
            strategy: run.strategy.clone(),
            rounds: run.metrics.len(),
            final_accuracy: run.final_accuracy(),
            convergence_round: run.convergence_round(),
            total_params: run.total_params(),
            success_rate: run.success_rate(),
            selection: run.selection.clone(),
            clustering: run.clusterings.last().map(|c| FinalClustering {
                k: c.k,
                linkage: c.linkage,
                labels: c.labels.clone(),
                coarser_labels: c.coarser_labels.clone(),
            }),
            channel: run.channel.clone(),
        }
    }
}

/// Everything `export-metrics` can re-serialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub summary: RunSummary,
    pub metrics: Vec<RoundMetrics>,
    pub transfers: Vec<TransferOutcome>,
    pub importance: Option<ImportanceReport>,
}

impl RunRecord {
    pub fn new(config: &RunConfig, run: &RunOutput) -> Self {
        Self {
            config: config.clone(),
            summary: RunSummary::of(run),
            metrics: run.metrics.clone(),
            transfers: run.transfers.clone(),
            importance: run.importance.clone(),
        }
    }
}
