use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusetrack::attention::AttentionParams;
use fusetrack::features::HogConfig;
use fusetrack::fusion::FusionParams;
use fusetrack::spectral::{CfConfig, Plane};
use fusetrack::tracker::{BranchSpec, Extractor, TrackerModels};
use fusetrack::training::{
    batch_loss_and_grad, logistic_loss, lr_schedule, make_label_map, synth_sequence, synthetic_pairs,
    train_fusion, train_prepared, FusionModel, MotionSpec, PreparedSample, TrainConfig,
};
use fusetrack::Error;

fn noise(seed: u64, side: usize) -> Plane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Plane::from_fn(side, side, |_, _| rng.random_range(-1.0..1.0))
}

fn separable(n: usize) -> Vec<PreparedSample> {
    let label = make_label_map(33, 2.0).unwrap();
    (0..n as u64)
        .map(|s| PreparedSample {
            channel_responses: vec![vec![label.plane().clone()], vec![noise(s, 33)]],
            pooled: vec![vec![1.0], vec![0.5]],
            label: label.clone(),
        })
        .collect()
}

fn two_branch_init() -> FusionModel {
    FusionModel {
        fusion: FusionParams::uniform(2),
        attention: vec![AttentionParams::init(1, 1), AttentionParams::init(1, 2)],
    }
}

#[test]
fn label_map_marks_a_disc() {
    let l = make_label_map(33, 2.0).unwrap();
    // Lattice points within distance 2 of the center: 13.
    assert_eq!(l.positives(), 13);
    assert_eq!(l.plane().get(16, 16), 1.0);
    assert_eq!(l.plane().get(16, 18), 1.0);
    assert_eq!(l.plane().get(18, 18), -1.0);
    assert_eq!(make_label_map(33, 0.0).unwrap().positives(), 1);
    assert!(matches!(make_label_map(32, 2.0), Err(Error::Argument(_))));
    assert!(matches!(make_label_map(33, -1.0), Err(Error::Argument(_))));
}

#[test]
fn zero_response_costs_ln2_either_way() {
    let l = make_label_map(33, 2.0).unwrap();
    for balance in [true, false] {
        let (loss, _) = logistic_loss(&Plane::zeros(33, 33), &l, balance).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
    }
    assert!(matches!(
        logistic_loss(&Plane::zeros(31, 33), &l, true),
        Err(Error::Shape(_))
    ));
}

#[test]
fn schedule_decays_then_holds() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(1, &cfg).unwrap(), 0.01);
    assert!((lr_schedule(2, &cfg).unwrap() - 0.009).abs() < 1e-15);
    assert_eq!(lr_schedule(50, &cfg).unwrap(), lr_schedule(100, &cfg).unwrap());
    assert!(matches!(lr_schedule(0, &cfg), Err(Error::Argument(_))));
    assert!(matches!(lr_schedule(101, &cfg), Err(Error::Argument(_))));
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let cfg = TrainConfig {
        epochs: 3,
        lr0: 0.0,
        ..TrainConfig::default()
    };
    let init = two_branch_init();
    let out = train_prepared(&separable(5), &cfg, init.clone()).unwrap();
    assert_eq!(out.model.flatten(), init.flatten());
    let first = out.trace[0].mean_loss;
    assert!(out.trace.iter().all(|r| r.mean_loss == first));
}

#[test]
fn loss_falls_on_a_separable_set() {
    let cfg = TrainConfig {
        epochs: 5,
        momentum: 0.0,
        ..TrainConfig::default()
    };
    let out = train_prepared(&separable(8), &cfg, two_branch_init()).unwrap();
    let losses: Vec<f64> = out.trace.iter().map(|r| r.mean_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    let csv = out.trace_csv();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("epoch,lr,mean_loss\n1,0.01,"));
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let a = train_prepared(&separable(7), &cfg, two_branch_init()).unwrap();
    let b = train_prepared(&separable(7), &cfg, two_branch_init()).unwrap();
    assert_eq!(a.model.flatten(), b.model.flatten());
}

#[test]
fn invalid_inputs_are_rejected() {
    let models = TrackerModels::new(
        vec![BranchSpec {
            attention: AttentionParams::init(31, 0),
            extractor: Arc::new(Extractor::Hog(HogConfig::default())),
        }],
        FusionParams::uniform(1),
    )
    .unwrap();
    let cfg = TrainConfig::default();
    assert!(matches!(
        train_fusion(&[], &cfg, &models, &CfConfig::default()),
        Err(Error::Argument(_))
    ));
    assert!(matches!(
        train_prepared(&[], &cfg, two_branch_init()),
        Err(Error::Argument(_))
    ));
    let bad = TrainConfig {
        batch_size: 0,
        ..cfg.clone()
    };
    assert!(matches!(
        train_prepared(&separable(1), &bad, two_branch_init()),
        Err(Error::Config(_))
    ));
    assert!(matches!(synthetic_pairs(0, 0, 2.0), Err(Error::Argument(_))));
    assert!(matches!(synth_sequence(0, 1, &MotionSpec::default()), Err(Error::Argument(_))));
}

#[test]
fn hog_only_fusion_training_runs_end_to_end() {
    let models = TrackerModels::new(
        vec![BranchSpec {
            attention: AttentionParams::init(31, 0),
            extractor: Arc::new(Extractor::Hog(HogConfig::default())),
        }],
        FusionParams::uniform(1),
    )
    .unwrap();
    let pairs = synthetic_pairs(2, 8, 2.0).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        ..TrainConfig::default()
    };
    let out = train_fusion(&pairs, &cfg, &models, &CfConfig::default()).unwrap();
    assert_eq!(out.trace.len(), 6);
    assert!(out.trace[5].mean_loss < out.trace[0].mean_loss);
    assert!(out.model.flatten().iter().all(|v| v.is_finite()));
}

#[test]
fn synthetic_data_is_reproducible() {
    let m = MotionSpec::default();
    let a = synth_sequence(11, 3, &m).unwrap();
    let b = synth_sequence(11, 3, &m).unwrap();
    assert_eq!(a.boxes, b.boxes);
    assert_eq!(a.frames[2].data(), b.frames[2].data());
    assert_eq!(a.boxes[2].cx - a.boxes[0].cx, 2.0 * m.velocity.0);
    let p = synthetic_pairs(3, 4, 2.0).unwrap();
    let q = synthetic_pairs(3, 4, 2.0).unwrap();
    assert_eq!(p.len(), 4);
    assert_eq!(p[3].search.data(), q[3].search.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_is_nonnegative_and_bounded_gradient(seed in 0u64..10_000, scale in 0.0f64..20.0, balance: bool) {
        let l = make_label_map(33, 2.0).unwrap();
        let r = noise(seed, 33).map(|v| v * scale);
        let (loss, grad) = logistic_loss(&r, &l, balance).unwrap();
        prop_assert!(loss >= 0.0);
        // Per-cell weights sum to one, so no gradient entry exceeds one.
        prop_assert!(grad.data().iter().all(|g| g.abs() <= 1.0));
    }

    #[test]
    fn batch_loss_is_mean_of_sample_losses(n in 1usize..5) {
        let samples = separable(n);
        let model = two_branch_init();
        let refs: Vec<&PreparedSample> = samples.iter().collect();
        let (mean, _) = batch_loss_and_grad(&refs, &model, true).unwrap();
        let each: f64 = samples
            .iter()
            .map(|s| batch_loss_and_grad(&[s], &model, true).unwrap().0)
            .sum::<f64>() / n as f64;
        prop_assert!((mean - each).abs() < 1e-12);
    }
}
