use super::*;
use crate::nn::{Activation, Architecture, DenseLayer, Submodel};
use crate::rng::from_seed;
use crate::sensitivity::LayerScore;
use std::vec;

fn fixed(rate: f64, min: f64, max: f64, p: f64) -> ChannelConfig {
    ChannelConfig {
        mean_rate: rate,
        rate_sigma: 0.0,
        contact_time_min: min,
        contact_time_max: max,
        per_mb_loss_prob: p,
        bytes_per_param: 2,
        seed: 0,
    }
}

fn empirical(bytes: u64, cfg: &ChannelConfig, n: usize, seed: u64) -> f64 {
    let mut r = from_seed(seed);
    (0..n).filter(|_| transfer(bytes, cfg, &mut r).success).count() as f64 / n as f64
}

#[test]
fn tiny_payload_always_fits() {
    let cfg = fixed(1e9, 0.1, 1.0, 0.0);
    assert!(empirical(1, &cfg, 10_000, 1) >= 0.999);
}

#[test]
fn oversized_payload_always_fails() {
    let cfg = fixed(1e6, 0.5, 1.0, 0.0);
    // 8 · 200 000 / 1e6 = 1.6 s > 1 s.
    assert_eq!(empirical(200_000, &cfg, 1000, 2), 0.0);
}

#[test]
fn closed_form_matches_monte_carlo() {
    let cfg = fixed(8e6, 0.2, 1.2, 0.0);
    // t0 = 8B / 8e6 = B / 1e6 seconds.
    for (bytes, want) in [(100_000, 1.0), (700_000, 0.5), (1_100_000, 0.1), (1_300_000, 0.0)] {
        let p = success_probability(bytes, &cfg);
        assert!((p - want).abs() < 1e-12, "{bytes}: {p}");
        let e = empirical(bytes, &cfg, 100_000, bytes);
        assert!((e - p).abs() < 0.01, "{bytes}: {e} vs {p}");
    }
    let lossy = fixed(8e7, 0.2, 1.2, 0.05);
    // Three MiB of payload: (1 − 0.05)^3 on top of the window term.
    let bytes = 3 * (1 << 20) - 10;
    let want = (1.2 - bytes as f64 / 1e7) / 1.0 * 0.95f64.powi(3);
    assert!((success_probability(bytes, &lossy) - want).abs() < 1e-12);
    let e = empirical(bytes, &lossy, 100_000, 7);
    assert!((e - want).abs() < 0.01, "{e} vs {want}");
}

#[test]
fn integrated_probability_tracks_lognormal_rate() {
    let mut cfg = fixed(8e6, 0.2, 1.2, 0.0);
    cfg.rate_sigma = 0.4;
    for bytes in [300_000, 800_000, 1_100_000] {
        let p = success_probability(bytes, &cfg);
        let e = empirical(bytes, &cfg, 100_000, bytes + 1);
        assert!((e - p).abs() < 0.01, "{bytes}: {e} vs {p}");
    }
}

#[test]
fn smaller_payload_never_loses() {
    let mut cfg = ChannelConfig::reference_scale();
    cfg.per_mb_loss_prob = 0.01;
    let full = cfg.bytes_for(REFERENCE_MODEL_PARAMS as usize);
    for seed in 0..2000 {
        let big = transfer(full, &cfg, &mut from_seed(seed));
        let small = transfer(full / 3, &cfg, &mut from_seed(seed));
        assert!(!big.success || small.success, "seed {seed}");
        assert_eq!(big.contact_time, small.contact_time);
        if big.success {
            assert!(big.elapsed <= big.contact_time);
        }
    }
}

#[test]
fn calibrated_preset_hits_targets() {
    let cfg = ChannelConfig::reference_scale();
    cfg.validate().unwrap();
    let full = cfg.bytes_for(REFERENCE_MODEL_PARAMS as usize);
    let f = empirical(full, &cfg, 100_000, 11);
    assert!((f - 0.72).abs() <= 0.03, "{f}");
    let s = empirical((full as f64 * 0.478) as u64, &cfg, 100_000, 12);
    assert!(s >= 0.90, "{s}");
    // 2 bytes per parameter; the reported size corresponds to 4.
    let mb = REFERENCE_MODEL_PARAMS as f64 * 4.0 / (1u64 << 20) as f64;
    assert!((mb - REFERENCE_MODEL_MB).abs() < 0.01);
}

#[test]
fn perfect_channel_never_fails() {
    let cfg = ChannelConfig::perfect();
    let m = Model::init(&Architecture::default(), 0).unwrap();
    assert_eq!(empirical(cfg.bytes_for(m.total_params()), &cfg, 1000, 0), 1.0);
}

fn staircase() -> (Model, ImportanceReport) {
    let mut r = from_seed(0);
    let l1 = DenseLayer::xavier("fusion_dense_1", 4, 10, Activation::Relu, &mut r).unwrap();
    let l2 = DenseLayer::xavier("fusion_dense_2", 10, 5, Activation::Relu, &mut r).unwrap();
    let l3 = DenseLayer::xavier("fusion_out", 5, 2, Activation::Identity, &mut r).unwrap();
    let m = Model::new(
        vec![(l1, Submodel::Fusion), (l2, Submodel::Fusion), (l3, Submodel::Fusion)],
        2,
    )
    .unwrap();
    let scores = [("fusion_dense_1", 0.1), ("fusion_dense_2", 0.5), ("fusion_out", 0.3)]
        .iter()
        .map(|(l, v)| LayerScore {
            layer: (*l).into(),
            lambda: *v,
        })
        .collect();
    let rep = ImportanceReport {
        vehicle_id: 0,
        scores,
        epsilon: 0.1,
        eval_set_size: 1,
        baseline_accuracy: 1.0,
    };
    (m, rep)
}

#[test]
fn prioritized_transmit_orders_by_importance() {
    let (m, rep) = staircase();
    let sel = LayerSelection::all(&m);
    let mut cfg = fixed(1e3, 1e12, 1e12, 0.0);
    let (all, link) = prioritized_transmit(&sel, &rep, &m, &cfg, &mut from_seed(0)).unwrap();
    assert_eq!(all, vec!["fusion_dense_2", "fusion_out", "fusion_dense_1"]);
    assert!(link.success);

    // Window exactly fits fusion_dense_2 (55 params, 110 bytes).
    let t = 8.0 * 110.0 / 1e3;
    cfg.contact_time_min = t;
    cfg.contact_time_max = t;
    let (one, link) = prioritized_transmit(&sel, &rep, &m, &cfg, &mut from_seed(0)).unwrap();
    assert_eq!(one, vec!["fusion_dense_2"]);
    assert!(!link.success);

    let order = ["fusion_dense_2", "fusion_out", "fusion_dense_1"];
    cfg = fixed(1e3, 0.1, 2.0, 0.0);
    cfg.rate_sigma = 0.3;
    let mut rng = from_seed(5);
    for _ in 0..500 {
        let (got, link) = prioritized_transmit(&sel, &rep, &m, &cfg, &mut rng).unwrap();
        assert_eq!(got.as_slice(), &order[..got.len()]);
        assert_eq!(link.success, got.len() == 3);
    }
}

fn log(round: usize, n: usize, params: usize, cfg: &ChannelConfig, seed: u64) -> Vec<TransferOutcome> {
    let mut rng = from_seed(seed);
    let mut out = Vec::new();
    for v in 0..n {
        let l = transfer(cfg.bytes_for(params), cfg, &mut rng);
        out.push(TransferOutcome::new(v, round, Direction::Uplink, params, l));
    }
    for v in 0..n {
        let l = transfer(cfg.bytes_for(params), cfg, &mut rng);
        out.push(TransferOutcome::new(v, round, Direction::Downlink, params, l));
    }
    out
}

#[test]
fn round_metrics_examples() {
    let m = Model::init(&Architecture::default(), 0).unwrap();
    let sel = LayerSelection::all(&m);
    let payloads: Vec<UplinkPayload> = (0..10)
        .map(|v| UplinkPayload::from_selection(v, 1, &sel, &m).unwrap())
        .collect();
    let all: Vec<usize> = (0..10).collect();

    let cfg = ChannelConfig::perfect();
    let r = round_comm_metrics(1, &log(1, 10, m.total_params(), &cfg, 0), &payloads, &all, &m, &cfg).unwrap();
    assert_eq!(r.params_transmitted, 10 * 7538);
    assert_eq!((r.models_received(), r.models_sent(), r.success_rate), (10, 10, 1.0));

    let dead = fixed(1.0, 0.1, 0.1, 0.0);
    let r = round_comm_metrics(1, &log(1, 10, m.total_params(), &dead, 0), &payloads, &all, &m, &dead).unwrap();
    assert_eq!((r.params_transmitted, r.success_rate), (0, 0.0));
}

#[test]
fn round_metrics_match_log_replay() {
    let m = Model::init(&Architecture::default(), 0).unwrap();
    let sel = LayerSelection::from_layers(&m, &["fusion_dense_1", "fusion_out"], 0.0).unwrap();
    let params = sel.param_count(&m).unwrap();
    let cfg = ChannelConfig::calibrated(m.total_params() as u64, 1e6);
    let payloads: Vec<UplinkPayload> = (0..8)
        .map(|v| UplinkPayload::from_selection(v, 3, &sel, &m).unwrap())
        .collect();
    let all: Vec<usize> = (0..8).collect();
    for seed in 0..20 {
        let outcomes = log(3, 8, params, &cfg, seed);
        let r = round_comm_metrics(3, &outcomes, &payloads, &all, &m, &cfg).unwrap();
        let mut params_ok = 0;
        let mut ok = 0;
        for o in &outcomes {
            if o.success {
                ok += 1;
                if o.direction == Direction::Uplink {
                    params_ok += o.params;
                }
            }
        }
        assert_eq!(r.params_transmitted, params_ok);
        assert_eq!(r.success_rate, ok as f64 / 16.0);
        assert_eq!(r.uplink_bytes_attempted, 8 * cfg.bytes_for(params));
    }
}

#[test]
fn inconsistent_logs_name_vehicles() {
    let m = Model::init(&Architecture::default(), 0).unwrap();
    let sel = LayerSelection::all(&m);
    let cfg = ChannelConfig::perfect();
    let payloads: Vec<UplinkPayload> = (0..4)
        .map(|v| UplinkPayload::from_selection(v, 1, &sel, &m).unwrap())
        .collect();
    let mut outcomes = log(1, 4, m.total_params(), &cfg, 0);
    outcomes.remove(2);
    outcomes[6].round = 9;
    match round_comm_metrics(1, &outcomes, &payloads, &[0, 1, 2, 3], &m, &cfg) {
        Err(Error::InconsistentOutcomes { vehicles }) => assert_eq!(vehicles, vec![2, 3]),
        other => panic!("{other:?}"),
    }
}
