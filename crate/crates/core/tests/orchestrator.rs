use sigla_core::aggregation::{AggregationStrategy, FedLamaSchedule, Weighting};
use sigla_core::clustering::KRange;
use sigla_core::comms::Direction;
use sigla_core::dataset::generate;
use sigla_core::nn::{evaluate, predict, train_local, Activation, DenseLayer, Model, Submodel, Tensor, TrainConfig};
use sigla_core::orchestrator::*;
use sigla_core::sensitivity::ThresholdPolicy;
use sigla_core::Error;

fn small(strategy: AggregationStrategy) -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(3).with_strategy(strategy);
    cfg.rounds = 3;
    cfg.data.n_vehicles = 5;
    cfg.data.samples_per_vehicle = 150;
    cfg.k_range = KRange::new(2, 4);
    cfg
}

#[test]
fn single_vehicle_fedavg_is_local_training() {
    let mut cfg = small(AggregationStrategy::Fedavg);
    cfg.data.n_vehicles = 1;
    cfg.data.n_planted_clusters = 1;
    cfg.k_range = KRange::single();
    cfg.channel = ChannelPreset::Perfect;
    let out = run(&cfg).unwrap();

    let data = generate(&cfg.data).unwrap();
    let train = data.datasets[0].train().unwrap();
    let mut m = initial_model(&cfg).unwrap();
    for r in 1..=cfg.rounds {
        let tc = TrainConfig {
            seed: train_seed(cfg.seed, r, 0),
            ..cfg.train
        };
        m = train_local(&m, &train, &tc).unwrap().model;
    }
    assert_eq!(out.final_models[0], m);
    let acc = evaluate(&m, &data.datasets[0].test().unwrap()).unwrap().accuracy;
    assert_eq!(out.final_accuracy(), acc);
}

#[test]
fn degenerate_sigla_equals_fedavg_bitwise() {
    let mut cfg = small(AggregationStrategy::Sigla);
    cfg.threshold_policy = ThresholdPolicy::Fixed(0.0);
    cfg.k_range = KRange::single();
    cfg.weighting = Weighting::Uniform;
    cfg.channel = ChannelPreset::Perfect;
    let s = run(&cfg).unwrap();
    let f = run(&cfg.clone().with_strategy(AggregationStrategy::Fedavg)).unwrap();
    assert_eq!(s.final_models, f.final_models);
    for (a, b) in s.metrics.iter().zip(&f.metrics) {
        assert_eq!(a.global_test_accuracy, b.global_test_accuracy);
        assert_eq!(a.params_transmitted, b.params_transmitted);
        assert_eq!(a.reduction_factor, 1.0);
    }
}

#[test]
fn runs_are_deterministic() {
    let cfg = small(AggregationStrategy::Sigla);
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.transfers, b.transfers);
    assert_eq!(a.final_models, b.final_models);
}

#[test]
fn accounting_matches_transfer_log() {
    for strategy in [
        AggregationStrategy::Sigla,
        AggregationStrategy::Fedavg,
        AggregationStrategy::Mbp { prune_fraction: 0.3 },
        AggregationStrategy::Fedlama {
            schedule: FedLamaSchedule::default(),
        },
    ] {
        let out = run(&small(strategy.clone())).unwrap();
        for m in &out.metrics {
            let log: Vec<_> = out.transfers.iter().filter(|t| t.round == m.round).collect();
            let up_ok = log.iter().filter(|t| t.direction == Direction::Uplink && t.success);
            assert_eq!(
                m.params_transmitted,
                up_ok.clone().map(|t| t.params).sum::<usize>(),
                "{strategy:?}"
            );
            assert_eq!(m.bytes_up, up_ok.map(|t| t.bytes_attempted).sum::<u64>());
            assert!(m.global_test_accuracy.is_finite());
            assert!((0.0..=1.0).contains(&m.global_test_accuracy));
        }
        for v in &out.final_models {
            for l in v.layers() {
                assert!(l.weights.values().iter().all(|w| w.is_finite()));
            }
        }
    }
}

#[test]
fn lossy_channel_keeps_weights_finite() {
    let mut cfg = small(AggregationStrategy::Sigla);
    cfg.rounds = 4;
    cfg.channel = ChannelPreset::Custom(sigla_core::comms::ChannelConfig {
        mean_rate: 3e5,
        rate_sigma: 0.5,
        contact_time_min: 0.05,
        contact_time_max: 0.6,
        per_mb_loss_prob: 0.2,
        bytes_per_param: 2,
        seed: 1,
    });
    let out = run(&cfg).unwrap();
    let failures = out.transfers.iter().filter(|t| !t.success).count();
    assert!(failures > 0 && failures < out.transfers.len());
    for m in &out.final_models {
        assert!(m
            .layers()
            .iter()
            .all(|l| l.weights.values().iter().all(|w| w.is_finite())));
    }
}

#[test]
fn fedlama_skips_layers_off_schedule() {
    let out = run(&small(AggregationStrategy::Fedlama {
        schedule: FedLamaSchedule::default(),
    }))
    .unwrap();
    let rf: Vec<f64> = out.metrics.iter().map(|m| m.reduction_factor).collect();
    assert!(rf[0] < 1.0 && rf[1] == 1.0 && rf[2] == rf[0]);
}

#[test]
fn comparison_orders_parameter_totals() {
    let mut cfg = small(AggregationStrategy::Sigla);
    cfg.channel = ChannelPreset::Perfect;
    let c = compare_strategies(
        &cfg,
        &[
            AggregationStrategy::Sigla,
            AggregationStrategy::Mbp { prune_fraction: 0.3 },
            AggregationStrategy::Fedavg,
        ],
    )
    .unwrap();
    let p: Vec<usize> = c.rows.iter().map(|r| r.total_params).collect();
    assert!(p[0] < p[1] && p[1] < p[2], "{p:?}");
    assert_eq!(c.rows[3].strategy, "centralized");
    assert_eq!(c.rows[3].total_params, 0);
    assert_eq!(c.rows[2].success_rate, Some(1.0));
    assert!(compare_strategies(&cfg, &[]).is_err());
}

#[test]
fn convergence_round_definition() {
    assert_eq!(convergence_round(&[0.5, 0.5, 0.5]), Some(1));
    assert_eq!(convergence_round(&[0.1, 0.6, 0.995, 1.0]), Some(3));
    assert_eq!(convergence_round(&[]), None);
}

#[test]
fn divergence_carries_round_context() {
    let mut cfg = small(AggregationStrategy::Fedavg);
    cfg.train.learning_rate = 1e200;
    let err = run(&cfg).unwrap_err();
    assert!(matches!(err, Error::Round { round: 1, .. }), "{err}");
    assert!(err.is_divergence());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = small(AggregationStrategy::Sigla);
    let mut c = base.clone();
    c.rounds = 0;
    assert!(matches!(run(&c), Err(Error::Config(_))));
    let mut c = base.clone();
    c.k_range = KRange::new(1, 4);
    assert!(matches!(run(&c), Err(Error::Config(_))));
    let mut c = base.clone();
    c.k_range = KRange::new(4, 2);
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.recluster_every = 0;
    assert!(c.validate().is_err());
    let c = base.with_strategy(AggregationStrategy::Mbp { prune_fraction: 0.0 });
    assert!(c.validate().is_err());
}

fn forcing(sector: usize) -> Model {
    let mut b = vec![0.0; 5];
    b[sector] = 10.0;
    let l = DenseLayer::new(
        "fusion_out",
        Tensor::matrix(5, 3, vec![0.0; 15]).unwrap(),
        b,
        Activation::Identity,
    )
    .unwrap();
    Model::new(vec![(l, Submodel::Fusion)], 5).unwrap()
}

#[test]
fn sector_prediction() {
    assert_eq!(predict_sector(&forcing(3), &[0.2, -1.0, 4.0]).unwrap(), 3);
    let uniform = Model::new(
        vec![(
            DenseLayer::zeros("fusion_out", 3, 5, Activation::Identity).unwrap(),
            Submodel::Fusion,
        )],
        5,
    )
    .unwrap();
    assert_eq!(predict_sector(&uniform, &[1.0, 2.0, 3.0]).unwrap(), 0);
    assert!(predict_sector(&uniform, &[1.0, 2.0]).is_err());

    let cfg = small(AggregationStrategy::Fedavg);
    let out = run(&cfg).unwrap();
    let data = generate(&cfg.data).unwrap();
    let m = &out.final_models[0];
    let s = &data.datasets[0].samples;
    let batch = predict(m, &s.features).unwrap();
    for i in 0..100 {
        assert_eq!(predict_sector(m, s.features.row(i)).unwrap(), batch[i]);
    }
}

#[test]
fn k_range_past_fleet_size_is_clipped() {
    let mut cfg = small(AggregationStrategy::Sigla);
    cfg.data.n_vehicles = 3;
    cfg.data.n_planted_clusters = 2;
    cfg.k_range = KRange::new(2, 40);
    let out = run(&cfg).unwrap();
    assert!(out.clusterings.iter().all(|c| c.k <= 3));
}
