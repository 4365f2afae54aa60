use super::*;
use crate::dataset::{generate_synthetic, split, SplitMode, SplitSpec, SyntheticSpec};
use crate::numerics::truncated_normal;
use crate::rng::{stream, Purpose};

fn tiny_data(seed: u64) -> (Vec<TrainExample>, Catalog) {
    let spec = SyntheticSpec {
        num_users: 120,
        num_items: 40,
        num_clusters: 4,
        min_len: 6,
        max_len: 12,
        seed,
        ..Default::default()
    };
    let (seqs, catalog, _) = generate_synthetic(&spec).unwrap();
    let views = split(
        &seqs,
        SplitSpec {
            mode: SplitMode::LeaveOneOut,
            max_len: 12,
        },
    )
    .unwrap();
    (views.train, catalog)
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 2,
        batch_size: 16,
        lr_srs: 5e-3,
        backbone: BackboneConfig {
            d: 8,
            layers: 1,
            heads: 2,
            hidden: 16,
            dropout: 0.1,
            max_len: 12,
        },
        sampler: SamplerConfig {
            heads: 2,
            hidden: 16,
            ..SamplerConfig::default()
        },
        reward: RewardConfig {
            scale: 0.5,
            tau: 1.0,
            ..RewardConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn tmall_preset_values() {
    let c = TrainConfig::preset("paper-tmall").unwrap();
    assert_eq!(
        (c.reward.tau, c.reward.relax, c.reward.scale, c.reward.lambda, c.reward.psi0),
        (5.0, 1.0, 2e-3, 0.5, 0.8)
    );
    assert_eq!(c.reward.gamma, 0.9);
    assert_eq!((c.batch_size, c.num_negatives), (128, Some(10_000)));
    assert_eq!((c.lr_srs, c.lr_sampler), (1e-3, 0.1));
    assert_eq!((c.backbone.d, c.backbone.hidden, c.backbone.heads, c.backbone.layers), (128, 256, 4, 2));
    let a = TrainConfig::preset("paper-amazon").unwrap();
    assert_eq!((a.reward.tau, a.reward.relax, a.reward.psi0), (3.0, 0.5, 0.5));
    assert_eq!(TrainConfig::preset("paper-yelp").unwrap().reward.scale, 2e-2);
    assert_eq!(TrainConfig::preset("paper-alipay").unwrap().reward.relax, 2.0);
    assert!(TrainConfig::preset("paper-netflix").is_err());
    TrainConfig::preset("synthetic").unwrap().validate().unwrap();
    for p in PRESETS {
        TrainConfig::preset(p).unwrap().validate().unwrap();
    }
}

#[test]
fn validation_names_each_bad_field() {
    let mut c = TrainConfig::default();
    c.lr_srs = 0.0;
    c.reward.lambda = 2.0;
    c.backbone.heads = 3;
    let msg = c.validate().unwrap_err().to_string();
    for field in ["lr_srs", "reward", "lambda", "backbone", "heads"] {
        assert!(msg.contains(field), "{msg}");
    }
}

#[test]
fn config_json_round_trip_and_unknown_fields() {
    let c = TrainConfig::preset("paper-yelp").unwrap();
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), c);
    let partial: TrainConfig = serde_json::from_str(r#"{"seed": 9, "reward": {"relax": -0.5}}"#).unwrap();
    assert_eq!(partial.seed, 9);
    assert_eq!(partial.reward.relax, -0.5);
    assert_eq!(partial.reward.gamma, 0.9);
    let err = serde_json::from_str::<TrainConfig>(r#"{"reward": {"relx": 1}}"#).unwrap_err();
    assert!(err.to_string().contains("relx"));
}

#[test]
fn full_strategy_leaves_the_sampler_untouched() {
    let (train, catalog) = tiny_data(1);
    let mut cfg = tiny_config(1);
    cfg.strategy = SamplingStrategy::Full;
    let mut state = TrainState::new(cfg, catalog.num_items).unwrap();
    let before = state.sampler.clone();
    let srs_before = state.srs.clone();
    let stats = state.train_epoch(&train, &catalog).unwrap();
    assert_eq!(state.sampler, before);
    assert_ne!(state.srs, srs_before);
    assert_eq!(stats.sample_rate, 1.0);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (train, catalog) = tiny_data(2);
    let run = || {
        let mut s = TrainState::new(tiny_config(5), catalog.num_items).unwrap();
        let stats = s.train(&train, &catalog, |_| {}).unwrap();
        (stats, s)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn one_epoch_lowers_the_training_loss() {
    for seed in 0..5 {
        let (train, catalog) = tiny_data(10 + seed);
        let mut state = TrainState::new(tiny_config(seed), catalog.num_items).unwrap();
        let initial = mean_autoregressive_loss(&state.srs, &train).unwrap();
        state.train_epoch(&train, &catalog).unwrap();
        let after = mean_autoregressive_loss(&state.srs, &train).unwrap();
        assert!(after < initial, "seed {seed}: {after} >= {initial}");
    }
}

#[test]
fn relax_offset_steers_the_sample_rate() {
    let (train, catalog) = tiny_data(3);
    let rate = |relax: f64| {
        let mut cfg = tiny_config(3);
        cfg.epochs = 4;
        cfg.reward.lambda = 0.0;
        cfg.reward.relax = relax;
        let mut state = TrainState::new(cfg, catalog.num_items).unwrap();
        state.train(&train, &catalog, |_| {}).unwrap().last().unwrap().sample_rate
    };
    let (high, low) = (rate(20.0), rate(-20.0));
    assert!(high > 0.9, "{high}");
    assert!(low < 0.3, "{low}");
}

fn policy_fixture() -> (SrsModel, SamplerModel) {
    let backbone = BackboneConfig {
        d: 4,
        layers: 1,
        heads: 1,
        hidden: 4,
        dropout: 0.0,
        max_len: 6,
    };
    let mut srs = SrsModel::new(backbone, 6, &mut stream(1, Purpose::Init, &[0])).unwrap();
    let mut sampler = SamplerModel::new(
        4,
        6,
        SamplerConfig {
            heads: 1,
            hidden: 4,
            ..SamplerConfig::default()
        },
        &mut stream(1, Purpose::Init, &[1]),
    )
    .unwrap();
    let mut rng = stream(1, Purpose::Init, &[2]);
    for store in [srs.params_mut(), sampler.params_mut()] {
        for t in store.tensors_mut() {
            let noise = truncated_normal(t.shape(), 0.5, &mut rng);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
        }
    }
    (srs, sampler)
}

#[test]
fn zero_reward_changes_nothing() {
    let (srs, mut sampler) = policy_fixture();
    let before = sampler.clone();
    let items = [1, 2, 3];
    let policy = sampler.policy_forward(srs.item_embedding(), &items, 1.0, None).unwrap();
    let sampled = policy.sample(&mut stream(0, Purpose::Actions, &[]), false);
    policy_gradient_update(&mut sampler, srs.item_embedding(), &items, &sampled, &[0.0; 3], 1.0, 0.1).unwrap();
    assert_eq!(sampler, before);
}

#[test]
fn positive_reward_on_keep_raises_keep_probability() {
    let (srs, mut sampler) = policy_fixture();
    let items = [4];
    let emb = srs.item_embedding();
    let before = sampler.policy_forward(emb, &items, 1.0, None).unwrap().keep[0];
    let sampled = SampledActions {
        actions: vec![1],
        log_probs: vec![before.ln()],
        sampled: vec![true],
    };
    policy_gradient_update(&mut sampler, emb, &items, &sampled, &[1.0], 1.0, 0.1).unwrap();
    let after = sampler.policy_forward(emb, &items, 1.0, None).unwrap().keep[0];
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn enumeration_oracle_agrees_with_the_estimator() {
    let (srs, sampler) = policy_fixture();
    let report = exact_gradient_oracle(&srs, &sampler, &[3, 1, 5, 2], 1.0, 7.5, 1e-5).unwrap();
    assert_eq!(report.action_vectors, 16);
    assert!(report.max_abs_gradient > 1e-3, "{report:?}");
    assert!(report.max_abs_deviation < 1e-6, "{report:?}");
    assert!(report.shift_deviation < 1e-8, "{report:?}");
}

#[test]
fn oracle_rejects_long_sequences() {
    let (srs, sampler) = policy_fixture();
    assert!(exact_gradient_oracle(&srs, &sampler, &[1; 7], 1.0, 0.0, 1e-5).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (train, catalog) = tiny_data(4);
    let mut state = TrainState::new(tiny_config(4), catalog.num_items).unwrap();
    state.train_epoch(&train, &catalog).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_checkpoint(&state, a.path()).unwrap();
    let loaded = load_checkpoint(a.path(), Some(&state.config)).unwrap();
    assert_eq!(loaded, state);
    save_checkpoint(&loaded, b.path()).unwrap();
    for f in ["manifest.json", "tensors.bin"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let (train, catalog) = tiny_data(6);
    let mut straight = TrainState::new(tiny_config(6), catalog.num_items).unwrap();
    let all = straight.train(&train, &catalog, |_| {}).unwrap();

    let mut first = TrainState::new(tiny_config(6), catalog.num_items).unwrap();
    first.train_epoch(&train, &catalog).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&first, dir.path()).unwrap();
    let mut resumed = load_checkpoint(dir.path(), None).unwrap();
    let second = resumed.train_epoch(&train, &catalog).unwrap();
    assert_eq!(second.psi, all[1].psi);
    assert_eq!(second, all[1]);
    assert_eq!(resumed, straight);
}

#[test]
fn mismatched_config_and_corruption_are_refused() {
    let state = TrainState::new(tiny_config(7), 40).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&state, dir.path()).unwrap();
    let mut other = tiny_config(7);
    other.reward.relax = 0.0;
    match load_checkpoint(dir.path(), Some(&other)) {
        Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "config_hash"),
        r => panic!("unexpected {r:?}"),
    }
    let blob = dir.path().join("tensors.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[8 * 41 * 8 + 3] ^= 0x10;
    std::fs::write(&blob, &bytes).unwrap();
    match load_checkpoint(dir.path(), None) {
        Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "srs.pos_emb"),
        r => panic!("unexpected {r:?}"),
    }
}
