use intent_forecast::classifier::{
    train_classifier, ClassifierArchitecture, ClassifierInput, ClassifierSample,
};
use intent_forecast::forecaster::{
    train_forecaster, ForecastModel, ForecastPair, ForecasterArchitecture, ModelTag,
    TrainedForecaster,
};
use intent_forecast::geometry::{forecast_offsets, input_offsets, Point2};
use intent_forecast::motion_states::{MotionState, SubMachine};
use intent_forecast::neural::{TrainConfig, Trainable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        validation_interval: 100,
        learning_rate: 1e-3,
        batch_size: 32,
        seed,
    }
}

/// Ego-frame history along +x at `speed`, with a little position noise.
fn ego_history(speed: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    input_offsets()
        .iter()
        .flat_map(|&t| {
            [
                speed * t + rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
            ]
        })
        .collect()
}

fn wm_sample(rng: &mut ChaCha8Rng) -> ClassifierSample {
    let waiting = rng.random_bool(0.5);
    let speed = if waiting {
        0.0
    } else {
        rng.random_range(1.0..5.0)
    };
    // motion history carries no signal here; the trajectory decides
    let mut mhi = || {
        (0..2 * 64)
            .map(|_| rng.random_range(0..4u32) as f64 / 3.0)
            .collect::<Vec<f64>>()
    };
    let (mhi1, mhi2) = (mhi(), mhi());
    ClassifierSample {
        input: ClassifierInput {
            mhi1,
            mhi2,
            traj: ego_history(speed, rng),
        },
        label: if waiting { 0 } else { 1 },
    }
}

#[test]
fn wait_motion_classifier_recognises_standstill() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train: Vec<ClassifierSample> = (0..400).map(|_| wm_sample(&mut rng)).collect();
    let validation: Vec<ClassifierSample> = (0..100).map(|_| wm_sample(&mut rng)).collect();
    let arch = ClassifierArchitecture {
        mhi_width: 8,
        mhi_height: 8,
        conv_channels: vec![2],
        mhi_features: 4,
        traj_hidden: 16,
        traj_features: 8,
        head_hidden: 8,
    };
    let trained =
        train_classifier(SubMachine::Wm, &train, &validation, &arch, &config(400, 2)).unwrap();
    let mut standstill = wm_sample(&mut rng);
    standstill.input.traj = vec![0.0; standstill.input.traj.len()];
    let p = trained.model.predict(&standstill.input).unwrap();
    assert!(p[0] > 0.9, "p(wait) = {}", p[0]);
}

fn move_pair(rng: &mut ChaCha8Rng) -> ForecastPair {
    let speed = rng.random_range(1.0..4.0);
    ForecastPair {
        input: ego_history(speed, rng),
        truth: forecast_offsets()
            .iter()
            .map(|&t| Point2::new(speed * t, 0.0))
            .collect(),
    }
}

fn forecaster_run(seed: u64) -> (TrainedForecaster, Vec<ForecastPair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train: Vec<ForecastPair> = (0..300).map(|_| move_pair(&mut rng)).collect();
    let validation: Vec<ForecastPair> = (0..60).map(|_| move_pair(&mut rng)).collect();
    let arch = ForecasterArchitecture {
        hidden: vec![32, 32],
    };
    let trained = train_forecaster(
        ModelTag::State(MotionState::Move),
        &train,
        &validation,
        &arch,
        &config(600, 4),
    )
    .unwrap();
    (trained, validation)
}

#[test]
fn move_forecaster_extrapolates_forward_and_is_deterministic() {
    let (a, validation) = forecaster_run(3);
    let f = a.model.forecast_flat(&validation[0].input).unwrap();
    let x: Vec<f64> = f.horizons.iter().map(|g| g.mu.x).collect();
    assert!(x[0] > 0.0);
    assert!(
        x.last().unwrap() > &(3.0 * x[0]),
        "mu.x does not grow: {x:?}"
    );

    let (b, _) = forecaster_run(3);
    let bits = |m: &ForecastModel| -> Vec<u64> {
        let mut m = m.clone();
        m.param_groups_mut()
            .iter()
            .flat_map(|g| g.iter().map(|p| p.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(a.best_step, b.best_step);
}
