//! Model-transfer channel and communication accounting.
//!
//! A transfer of `B` bytes draws a lognormal rate `R`, a uniform contact
//! window `T` and a corruption variate `u`, in that order. It succeeds when
//! `8B / R ≤ T` and `u < (1 − p)^⌈B / MiB⌉`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng::Rng;
use crate::sensitivity::{ImportanceReport, LayerSelection};

/// Parameter count of the reference full-size model.
pub const REFERENCE_MODEL_PARAMS: u64 = 29_833_376;
/// Reported size of the reference model in megabytes.
pub const REFERENCE_MODEL_MB: f64 = 113.81;

const MIB: u64 = 1 << 20;

/// Contact window bounds of the calibrated preset, as multiples of the mean
/// full-model transfer time.
pub const CALIBRATED_CONTACT: (f64, f64) = (0.34, 2.71);
pub const CALIBRATED_RATE_SIGMA: f64 = 0.05;
pub const CALIBRATED_PER_MB_LOSS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    /// Mean rate in bits per second.
    pub mean_rate: f64,
    /// Shape of the lognormal rate.
    pub rate_sigma: f64,
    /// Contact window bounds in seconds.
    pub contact_time_min: f64,
    pub contact_time_max: f64,
    pub per_mb_loss_prob: f64,
    pub bytes_per_param: u32,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::reference_scale()
    }
}

impl ChannelConfig {
    /// Every transfer succeeds.
    pub fn perfect() -> Self {
        Self {
            mean_rate: 1e12,
            rate_sigma: 0.0,
            contact_time_min: 1e9,
            contact_time_max: 1e9,
            per_mb_loss_prob: 0.0,
            bytes_per_param: 2,
            seed: 0,
        }
    }

    /// Contact window scaled to the full-model transfer time, so full-model
    /// transfers succeed about 72% of the time and half-size ones about 93%.
    pub fn calibrated(full_model_params: u64, mean_rate: f64) -> Self {
        let bytes_per_param = 2;
        let t_full = 8.0 * (full_model_params * bytes_per_param as u64) as f64 / mean_rate;
        Self {
            mean_rate,
            rate_sigma: CALIBRATED_RATE_SIGMA,
            contact_time_min: CALIBRATED_CONTACT.0 * t_full,
            contact_time_max: CALIBRATED_CONTACT.1 * t_full,
            per_mb_loss_prob: CALIBRATED_PER_MB_LOSS,
            bytes_per_param,
            seed: 0,
        }
    }

    /// Calibrated preset for the reference model over a 1 Gbit/s link.
    pub fn reference_scale() -> Self {
        Self::calibrated(REFERENCE_MODEL_PARAMS, 1e9)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("channel: {m}")));
        if !(self.mean_rate > 0.0 && self.mean_rate.is_finite()) {
            return bad("mean_rate must be positive");
        }
        if !(self.rate_sigma >= 0.0 && self.rate_sigma.is_finite()) {
            return bad("rate_sigma must be non-negative");
        }
        if !(self.contact_time_min > 0.0
            && self.contact_time_min <= self.contact_time_max
            && self.contact_time_max.is_finite())
        {
            return bad("need 0 < contact_time_min <= contact_time_max");
        }
        if !(0.0..1.0).contains(&self.per_mb_loss_prob) {
            return bad("per_mb_loss_prob must be in [0, 1)");
        }
        if self.bytes_per_param == 0 {
            return bad("bytes_per_param must be positive");
        }
        Ok(())
    }

    pub fn bytes_for(&self, params: usize) -> u64 {
        params as u64 * self.bytes_per_param as u64
    }

    fn survival(&self, bytes: u64) -> f64 {
        libm::pow(1.0 - self.per_mb_loss_prob, megabytes(bytes) as f64)
    }
}

/// MiB count used for corruption, at least 1 for a non-empty payload.
pub fn megabytes(bytes: u64) -> u64 {
    bytes.div_ceil(MIB)
}

fn airtime(bytes: u64, rate: f64) -> f64 {
    8.0 * bytes as f64 / rate
}

struct Draw {
    rate: f64,
    contact: f64,
    u: f64,
}

fn draw(cfg: &ChannelConfig, rng: &mut Rng) -> Draw {
    let z: f64 = rng.sample(StandardNormal);
    let s = cfg.rate_sigma;
    let rate = if s == 0.0 {
        cfg.mean_rate
    } else {
        libm::exp(libm::log(cfg.mean_rate) - 0.5 * s * s + s * z)
    };
    let t: f64 = rng.random();
    let contact = cfg.contact_time_min + (cfg.contact_time_max - cfg.contact_time_min) * t;
    let u: f64 = rng.random();
    Draw { rate, contact, u }
}

/// Result of one channel use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub bytes: u64,
    pub success: bool,
    /// Airtime used, capped at the contact window.
    pub elapsed: f64,
    pub contact_time: f64,
}

pub fn transfer(bytes: u64, cfg: &ChannelConfig, rng: &mut Rng) -> Link {
    let d = draw(cfg, rng);
    let t = airtime(bytes, d.rate);
    let fits = t <= d.contact;
    Link {
        bytes,
        success: fits && d.u < cfg.survival(bytes),
        elapsed: t.min(d.contact),
        contact_time: d.contact,
    }
}

/// `P(T ≥ t)` for the uniform contact window.
fn window_survival(cfg: &ChannelConfig, t: f64) -> f64 {
    let (a, b) = (cfg.contact_time_min, cfg.contact_time_max);
    if t <= a {
        1.0
    } else if t > b {
        0.0
    } else {
        (b - t) / (b - a)
    }
}

/// Probability that a `bytes` transfer succeeds. Exact when `rate_sigma` is
/// 0, otherwise integrated numerically over the rate distribution.
pub fn success_probability(bytes: u64, cfg: &ChannelConfig) -> f64 {
    let survive = cfg.survival(bytes);
    let s = cfg.rate_sigma;
    if s == 0.0 {
        return window_survival(cfg, airtime(bytes, cfg.mean_rate)) * survive;
    }
    let mu = libm::log(cfg.mean_rate) - 0.5 * s * s;
    let steps = 4000;
    let (lo, hi) = (-8.0, 8.0);
    let h = (hi - lo) / steps as f64;
    let mut acc = 0.0;
    for k in 0..=steps {
        let z = lo + h * k as f64;
        let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
        let pdf = libm::exp(-0.5 * z * z) / libm::sqrt(2.0 * core::f64::consts::PI);
        acc += w * pdf * window_survival(cfg, airtime(bytes, libm::exp(mu + s * z)));
    }
    acc * h * survive
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Uplink => "uplink",
            Direction::Downlink => "downlink",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub vehicle_id: usize,
    pub round: usize,
    pub direction: Direction,
    /// Parameters in the payload.
    pub params: usize,
    pub bytes_attempted: u64,
    pub success: bool,
    pub elapsed: f64,
    pub contact_time: f64,
}

impl TransferOutcome {
    pub fn new(vehicle_id: usize, round: usize, direction: Direction, params: usize, link: Link) -> Self {
        Self {
            vehicle_id,
            round,
            direction,
            params,
            bytes_attempted: link.bytes,
            success: link.success,
            elapsed: link.elapsed,
            contact_time: link.contact_time,
        }
    }
}

/// Send the selected layers in descending importance until the contact
/// window closes. A corruption loss discards the whole delivered prefix.
pub fn prioritized_transmit(
    selection: &LayerSelection,
    report: &ImportanceReport,
    model: &Model,
    cfg: &ChannelConfig,
    rng: &mut Rng,
) -> Result<(Vec<String>, Link)> {
    if selection.selected.is_empty() {
        return Err(Error::Empty("layer selection"));
    }
    let mut order: Vec<(f64, usize, &String)> = Vec::with_capacity(selection.selected.len());
    for name in &selection.selected {
        let j = model.index_of(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
        let lambda = report.lambda(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
        order.push((lambda, j, name));
    }
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let total: u64 = order
        .iter()
        .map(|o| cfg.bytes_for(model.layers()[o.1].param_count()))
        .sum();
    let d = draw(cfg, rng);
    let mut delivered = Vec::new();
    let mut sent = 0u64;
    for (_, j, name) in &order {
        let next = sent + cfg.bytes_for(model.layers()[*j].param_count());
        if airtime(next, d.rate) > d.contact {
            break;
        }
        sent = next;
        delivered.push((*name).clone());
    }
    if sent > 0 && d.u >= cfg.survival(sent) {
        delivered.clear();
    }
    let link = Link {
        bytes: total,
        success: delivered.len() == order.len(),
        elapsed: airtime(total, d.rate).min(d.contact),
        contact_time: d.contact,
    };
    Ok((delivered, link))
}

/// What a vehicle put on the uplink in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UplinkPayload {
    pub vehicle_id: usize,
    pub round: usize,
    pub layers: Vec<String>,
    /// At most the parameter count of `layers`; lower when pruned.
    pub params: usize,
}

impl UplinkPayload {
    pub fn from_selection(vehicle_id: usize, round: usize, selection: &LayerSelection, model: &Model) -> Result<Self> {
        Ok(Self {
            vehicle_id,
            round,
            layers: selection.selected.clone(),
            params: selection.param_count(model)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundCommReport {
    pub round: usize,
    pub uplink_attempts: usize,
    pub uplink_successes: usize,
    pub downlink_attempts: usize,
    pub downlink_successes: usize,
    /// Parameters in successful uplinks.
    pub params_transmitted: usize,
    pub uplink_bytes_attempted: u64,
    pub downlink_bytes_attempted: u64,
    pub success_rate: f64,
    pub uplink_success_rate: f64,
    pub downlink_success_rate: f64,
}

impl RoundCommReport {
    /// Models the server received.
    pub fn models_received(&self) -> usize {
        self.uplink_successes
    }

    /// Models the server delivered.
    pub fn models_sent(&self) -> usize {
        self.downlink_successes
    }

    pub fn attempts(&self) -> usize {
        self.uplink_attempts + self.downlink_attempts
    }
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Tally one round of the transfer log after checking it against the uplink
/// payloads and the set of vehicles that should have received a downlink.
pub fn round_comm_metrics(
    round: usize,
    outcomes: &[TransferOutcome],
    payloads: &[UplinkPayload],
    downlink_to: &[usize],
    model: &Model,
    cfg: &ChannelConfig,
) -> Result<RoundCommReport> {
    let mut bad = BTreeSet::new();
    let mut ups: BTreeMap<usize, Vec<&TransferOutcome>> = BTreeMap::new();
    let mut downs: BTreeMap<usize, usize> = BTreeMap::new();
    for o in outcomes {
        if o.round != round || (o.success && o.elapsed > o.contact_time) {
            bad.insert(o.vehicle_id);
        }
        match o.direction {
            Direction::Uplink => ups.entry(o.vehicle_id).or_default().push(o),
            Direction::Downlink => *downs.entry(o.vehicle_id).or_default() += 1,
        }
    }
    let mut seen = BTreeSet::new();
    for p in payloads {
        if !seen.insert(p.vehicle_id) || p.round != round {
            bad.insert(p.vehicle_id);
            continue;
        }
        let full = model.param_count(Some(&p.layers))?;
        match ups.get(&p.vehicle_id).map(Vec::as_slice) {
            Some([o]) if p.params <= full && o.params == p.params && o.bytes_attempted == cfg.bytes_for(p.params) => {}
            _ => {
                bad.insert(p.vehicle_id);
            }
        }
    }
    bad.extend(ups.keys().filter(|v| !seen.contains(v)));
    let expected: BTreeSet<usize> = downlink_to.iter().copied().collect();
    for v in &expected {
        if downs.get(v) != Some(&1) {
            bad.insert(*v);
        }
    }
    bad.extend(downs.keys().filter(|v| !expected.contains(v)));
    if !bad.is_empty() {
        return Err(Error::InconsistentOutcomes {
            vehicles: bad.into_iter().collect(),
        });
    }

    let mut r = RoundCommReport {
        round,
        ..Default::default()
    };
    for o in outcomes {
        match o.direction {
            Direction::Uplink => {
                r.uplink_attempts += 1;
                r.uplink_bytes_attempted += o.bytes_attempted;
                if o.success {
                    r.uplink_successes += 1;
                    r.params_transmitted += o.params;
                }
            }
            Direction::Downlink => {
                r.downlink_attempts += 1;
                r.downlink_bytes_attempted += o.bytes_attempted;
                r.downlink_successes += o.success as usize;
            }
        }
    }
    r.success_rate = rate(r.uplink_successes + r.downlink_successes, r.attempts());
    r.uplink_success_rate = rate(r.uplink_successes, r.uplink_attempts);
    r.downlink_success_rate = rate(r.downlink_successes, r.downlink_attempts);
    Ok(r)
}

#[cfg(test)]
mod tests;
