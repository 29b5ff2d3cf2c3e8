use tcnl_core::data::{generate_dataset, Dataset, DatasetConfig};
use tcnl_core::net::{NetworkSpec, ParamGroup, TcnlNetwork};
use tcnl_core::train::{train, train_step, Batch, LossWeights, TrainConfig, TrainError, TrainState};

fn small_data(seed: u64) -> Dataset {
    let config = DatasetConfig {
        image_size: 32,
        n_train: 16,
        n_test: 8,
        ..DatasetConfig::default()
    };
    generate_dataset(seed, &config).unwrap()
}

fn small_spec() -> NetworkSpec {
    NetworkSpec {
        input_size: 32,
        instance_size: 32,
        ..NetworkSpec::default()
    }
}

fn one_step(weights: LossWeights, ablate: bool) -> (TcnlNetwork<f64>, TcnlNetwork<f64>) {
    let ds = small_data(1);
    let mut net = TcnlNetwork::<f64>::build_with(&small_spec(), 2).unwrap();
    let before = net.clone();
    let config = TrainConfig {
        weights,
        disable_concept_constraint: ablate,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&config, net.params.len());
    let batch = Batch::from_samples(&ds.train[..8].iter().collect::<Vec<_>>()).unwrap();
    train_step(&mut net, &batch, &config, &mut state).unwrap();
    (before, net)
}

fn moved(before: &TcnlNetwork<f64>, after: &TcnlNetwork<f64>, pick: impl Fn(ParamGroup) -> bool) -> bool {
    before
        .params
        .entries
        .iter()
        .zip(&after.params.entries)
        .any(|(b, a)| pick(b.group) && b.value != a.value)
}

#[test]
fn no_adversarial_or_similarity_weight_leaves_discriminator_unchanged() {
    let (before, after) = one_step(LossWeights { lambda: 0.0, mu: 0.0, eta: 1.0 }, false);
    assert!(!moved(&before, &after, |g| g == ParamGroup::Discriminator));
    assert!(!moved(&before, &after, |g| matches!(g, ParamGroup::Mapper(_))));
    assert!(moved(&before, &after, |g| g == ParamGroup::Classifier));
}

#[test]
fn no_classification_weight_leaves_classifier_and_shallow_unchanged() {
    let (before, after) = one_step(LossWeights { lambda: 0.01, mu: 1.0, eta: 0.0 }, false);
    assert!(!moved(&before, &after, |g| g == ParamGroup::Classifier));
    assert!(!moved(&before, &after, |g| g == ParamGroup::Shallow));
    assert!(moved(&before, &after, |g| matches!(g, ParamGroup::Extractor(_))));
    assert!(moved(&before, &after, |g| g == ParamGroup::Discriminator));
}

#[test]
fn ablation_keeps_concept_terms_away_from_extractors() {
    let (before, after) = one_step(LossWeights { lambda: 0.01, mu: 1.0, eta: 0.0 }, true);
    assert!(!moved(&before, &after, |g| matches!(g, ParamGroup::Extractor(_) | ParamGroup::Shallow)));
    assert!(moved(&before, &after, |g| matches!(g, ParamGroup::Mapper(_))));
    assert!(moved(&before, &after, |g| g == ParamGroup::Discriminator));
}

#[test]
fn hundred_steps_on_the_default_dataset_stay_finite() {
    let config = DatasetConfig {
        n_train: 800,
        n_test: 4,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(0, &config).unwrap();
    let mut net = TcnlNetwork::<f32>::build(&NetworkSpec::default(), 0).unwrap();
    let tc = TrainConfig::default();
    let mut state = TrainState::new(&tc, net.params.len());
    for (i, chunk) in ds.train.chunks(tc.batch_size).enumerate() {
        let batch = Batch::from_samples(&chunk.iter().collect::<Vec<_>>()).unwrap();
        let r = train_step(&mut net, &batch, &tc, &mut state).unwrap();
        for v in [r.d_loss, r.g_loss, r.similarity, r.classification, r.total] {
            assert!(v.is_finite(), "step {i}: {r:?}");
        }
    }
    assert_eq!(state.step, 100);
    assert!(net.params.entries.iter().all(|e| e.value.is_finite()));
}

#[test]
fn training_is_bitwise_reproducible() {
    let ds = small_data(3);
    let tc = TrainConfig {
        epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let net = TcnlNetwork::<f32>::build(&small_spec(), 5).unwrap();
        train(net, &ds, &tc, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.final_net, b.final_net);
    assert_eq!(a.best_net, b.best_net);
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 2);
}

#[test]
fn epoch_callback_sees_every_record() {
    let ds = small_data(4);
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let out = train(TcnlNetwork::build(&small_spec(), 0).unwrap(), &ds, &tc, |r| seen.push(*r)).unwrap();
    assert_eq!(seen, out.history);
    let best = out.history.iter().map(|r| r.test_accuracy).fold(0.0, f64::max);
    assert_eq!(out.best_accuracy, best);
}

#[test]
fn incompatible_network_is_rejected() {
    let ds = small_data(5);
    let net = TcnlNetwork::<f32>::build(&NetworkSpec::default(), 0).unwrap();
    let err = train(net, &ds, &TrainConfig::default(), |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::Mismatch(_)), "{err}");
}

#[test]
fn all_zero_weights_are_rejected() {
    let ds = small_data(6);
    let tc = TrainConfig {
        weights: LossWeights { lambda: 0.0, mu: 0.0, eta: 0.0 },
        ..TrainConfig::default()
    };
    let net = TcnlNetwork::<f32>::build(&small_spec(), 0).unwrap();
    assert!(matches!(train(net, &ds, &tc, |_| {}), Err(TrainError::Config(_))));
}
