use ndarray::Array2;
use pda_core::data::{generate_scenario, ScenarioDataset, ScenarioSpec};
use pda_core::engine::{
    self, alpha_schedule, fit, lr_schedule, reestimate, sgd_step, steps_per_epoch, EngineError, Silent, TrainConfig,
    TrainState,
};
use pda_core::eval::median;

fn small_dataset() -> ScenarioDataset {
    generate_scenario(&ScenarioSpec {
        source_per_class: 30,
        target_per_class: 20,
        seed: 8,
        ..ScenarioSpec::default()
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 16,
        encoder_hidden: 16,
        bottleneck: 8,
        decoder_hidden: 16,
        classifier_hidden: 16,
        discriminator_hidden: 16,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_values() {
    assert_eq!(lr_schedule(0.0, 1e-3).unwrap(), 1e-3);
    let end = lr_schedule(1.0, 1e-3).unwrap();
    assert!((end - 1e-3 * 11f64.powf(-0.75)).abs() < 1e-18);
    assert!((end - 1.655_600_260_761_701_7e-4).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for i in 0..=100 {
        let v = lr_schedule(i as f64 / 100.0, 1e-2).unwrap();
        assert!(v < prev);
        prev = v;
    }
    assert!(matches!(lr_schedule(1.01, 1e-3), Err(EngineError::Progress(_))));
    assert!(lr_schedule(-0.01, 1e-3).is_err());
}

#[test]
fn alpha_schedule_values() {
    assert_eq!(alpha_schedule(0.0), 0.0);
    assert!((alpha_schedule(1.0) - (2.0 / (1.0 + (-10f64).exp()) - 1.0)).abs() < 1e-15);
    assert!((alpha_schedule(1.0) - 0.999_909_204_262_595_1).abs() < 1e-15);
    let mut prev = -1.0;
    for i in 0..=100 {
        let v = alpha_schedule(i as f64 / 100.0);
        assert!(v > prev && v <= 1.0);
        prev = v;
    }
}

#[test]
fn sgd_three_steps_match_unrolled_recurrence() {
    let m = 0.9;
    let lr = [0.1, 0.05];
    let g = [[0.5, -1.0, 2.0], [1.5, 0.25, -0.75], [-2.0, 1.0, 0.5]];
    let p0 = [1.0, 2.0, -3.0];
    let mut a = Array2::from_shape_vec((1, 3), p0.to_vec()).unwrap();
    let mut b = Array2::from_shape_vec((1, 3), p0.to_vec()).unwrap();
    let mut vel = vec![Array2::zeros((1, 3)), Array2::zeros((1, 3))];
    for grad in &g {
        let ga = Array2::from_shape_vec((1, 3), grad.to_vec()).unwrap();
        let gb = ga.mapv(|x| -x);
        sgd_step(&mut [&mut a, &mut b], &[ga, gb], &mut vel, &lr, m).unwrap();
    }
    for j in 0..3 {
        // v1 = g1, v2 = m g1 + g2, v3 = m^2 g1 + m g2 + g3
        let v1 = g[0][j];
        let v2 = m * v1 + g[1][j];
        let v3 = m * v2 + g[2][j];
        let expected_a = p0[j] - lr[0] * (v1 + v2 + v3);
        let expected_b = p0[j] + lr[1] * (v1 + v2 + v3);
        assert!((a[[0, j]] - expected_a).abs() < 1e-12);
        assert!((b[[0, j]] - expected_b).abs() < 1e-12);
        assert!((vel[0][[0, j]] - v3).abs() < 1e-12);
    }
}

#[test]
fn sgd_rejects_non_finite_without_touching_anything() {
    let mut p = Array2::ones((1, 2));
    let mut q = Array2::ones((1, 2));
    let mut vel = vec![Array2::zeros((1, 2)), Array2::zeros((1, 2))];
    let grads = [Array2::ones((1, 2)), Array2::from_elem((1, 2), f64::NAN)];
    assert_eq!(
        sgd_step(&mut [&mut p, &mut q], &grads, &mut vel, &[0.1, 0.1], 0.9),
        Err(1)
    );
    assert_eq!(p, Array2::ones((1, 2)));
    assert_eq!(vel[0], Array2::zeros((1, 2)));
}

#[test]
fn same_seed_gives_identical_history() {
    let ds = small_dataset();
    let a = fit(&small_config(), &ds.train).unwrap();
    let b = fit(&small_config(), &ds.train).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a, b);
    assert_eq!(a.history.len(), 4 * steps_per_epoch(&small_config(), &ds.train));
}

#[test]
fn resumed_run_is_bit_identical_to_straight_run() {
    let ds = small_dataset();
    let config = small_config();
    let straight = fit(&config, &ds.train).unwrap();

    let mut first = TrainState::init(&config, &ds.train).unwrap();
    engine::train(&mut first, &config, &ds.train, 2, &mut Silent).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.pda");
    first.save(&path).unwrap();
    let mut resumed = TrainState::load(&path).unwrap();
    assert_eq!(resumed, first);
    engine::train(&mut resumed, &config, &ds.train, config.epochs, &mut Silent).unwrap();
    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed, straight);
}

#[test]
fn adv_off_zeroes_the_term_and_leaves_the_discriminator_untouched() {
    let ds = small_dataset();
    let config = TrainConfig {
        adv: false,
        ..small_config()
    };
    let init = TrainState::init(&config, &ds.train).unwrap();
    let trained = fit(&config, &ds.train).unwrap();
    assert!(trained
        .history
        .iter()
        .all(|r| r.losses.adv_loss == 0.0 && r.alpha == 0.0));
    assert_eq!(trained.params.discriminator, init.params.discriminator);
    assert_ne!(trained.params.encoder, init.params.encoder);
}

#[test]
fn reestimate_is_deterministic_and_normalized() {
    let ds = small_dataset();
    let config = small_config();
    let state = fit(&config, &ds.train).unwrap();
    let view = state.scaler.apply_view(&ds.train);
    let a = reestimate(&state, &config, &view).unwrap();
    let b = reestimate(&state, &config, &view).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, state.labeling);
    let max = a.weights.iter().copied().fold(0.0, f64::max);
    assert!(max == 1.0 || a.weights.iter().all(|&w| w == 1.0));
}

#[test]
fn divergence_reports_the_last_finite_state() {
    let ds = small_dataset();
    let config = TrainConfig {
        lr: 50.0,
        ..small_config()
    };
    match fit(&config, &ds.train) {
        Err(EngineError::Diverged { step, last_good, .. }) => {
            assert_eq!(last_good.step, step);
            assert!(last_good.params.is_finite());
            assert_eq!(last_good.history.len(), step);
        }
        other => panic!("expected divergence, got {:?}", other.map(|s| s.step)),
    }
}

fn epoch_mean(state: &TrainState, per_epoch: usize, epoch: usize) -> f64 {
    let slice = &state.history[epoch * per_epoch..(epoch + 1) * per_epoch];
    slice.iter().map(|r| r.losses.total).sum::<f64>() / per_epoch as f64
}

#[test]
fn default_scenario_total_loss_decreases() {
    let ds = generate_scenario(&ScenarioSpec::default()).unwrap();
    let mut first = Vec::new();
    let mut last = Vec::new();
    for seed in 0..5 {
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let state = fit(&config, &ds.train).unwrap();
        let per = steps_per_epoch(&config, &ds.train);
        first.push(epoch_mean(&state, per, 0));
        last.push(epoch_mean(&state, per, config.epochs - 1));
    }
    assert!(median(&last) < median(&first), "first {first:?} last {last:?}");
}

#[test]
fn zero_shift_reestimate_ranks_every_outlier_below_every_shared_class() {
    let spec = ScenarioSpec {
        radius: 8.0,
        blob_std: 0.5,
        rotation: 0.0,
        translation: vec![0.0, 0.0],
        ..ScenarioSpec::default()
    };
    let ds = generate_scenario(&spec).unwrap();
    let state = fit(&TrainConfig::default(), &ds.train).unwrap();
    let w = &state.labeling.weights;
    let min_shared = w[..spec.target_classes].iter().copied().fold(f64::INFINITY, f64::min);
    let max_outlier = w[spec.target_classes..].iter().copied().fold(0.0, f64::max);
    assert!(max_outlier < min_shared, "weights {w:?}");
}
