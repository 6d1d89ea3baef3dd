//! Known-noise recovery on constant-velocity motion.

use intent_forecast::evaluation::positional_accuracy;
use intent_forecast::forecaster::{
    train_forecaster, ForecastPair, ForecasterArchitecture, ModelTag,
};
use intent_forecast::geometry::{
    estimate_heading, forecast_offsets, input_offsets, world_to_ego, Frame, Point2, Trajectory,
    FORECAST_LEN,
};
use intent_forecast::motion_states::MotionState;
use intent_forecast::neural::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::Outcome;

const NOISE: f64 = 0.1;

/// One straight constant-speed window; `noise` perturbs the future only.
fn pair(rng: &mut ChaCha8Rng, noise: f64) -> ForecastPair {
    let speed = rng.random_range(0.5..5.0);
    let phi: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let origin = Point2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
    let at = |t: f64| {
        Point2::new(
            origin.x + speed * t * phi.cos(),
            origin.y + speed * t * phi.sin(),
        )
    };
    let input_t = input_offsets();
    let future_t = forecast_offsets();
    let input: Vec<Point2> = input_t.iter().map(|&t| at(t)).collect();
    let truth: Vec<Point2> = future_t.iter().map(|&t| at(t)).collect();
    let input_world = Trajectory::from_positions(Frame::World, &input_t, &input).unwrap();
    let truth_world = Trajectory::from_positions(Frame::World, &future_t, &truth).unwrap();
    let heading = estimate_heading(&input_world).unwrap().heading;
    let input_ego = world_to_ego(&input_world, origin, heading).unwrap();
    let mut truth_ego: Vec<Point2> = world_to_ego(&truth_world, origin, heading)
        .unwrap()
        .positions()
        .collect();
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).unwrap();
        for p in &mut truth_ego {
            *p = Point2::new(p.x + n.sample(rng), p.y + n.sample(rng));
        }
    }
    let truth_ego = Trajectory::from_positions(Frame::Ego, &future_t, &truth_ego).unwrap();
    ForecastPair::from_trajectories(&input_ego, &truth_ego).unwrap()
}

pub fn known_noise_recovery() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train: Vec<ForecastPair> = (0..4000).map(|_| pair(&mut rng, NOISE)).collect();
    let validation: Vec<ForecastPair> = (0..1000).map(|_| pair(&mut rng, NOISE)).collect();
    let test: Vec<ForecastPair> = (0..500).map(|_| pair(&mut rng, 0.0)).collect();
    let config = TrainConfig {
        steps: 10_000,
        validation_interval: 500,
        learning_rate: 5e-4,
        batch_size: 64,
        seed: 3,
    };
    let trained = train_forecaster(
        ModelTag::State(MotionState::Move),
        &train,
        &validation,
        &ForecasterArchitecture::default(),
        &config,
    )
    .map_err(|e| e.to_string())?;

    let mut sigma = vec![(0.0, 0.0); FORECAST_LEN];
    let mut modes: Vec<Vec<_>> = (0..FORECAST_LEN)
        .map(|_| Vec::with_capacity(test.len()))
        .collect();
    for p in &test {
        let f = trained
            .model
            .forecast_flat(&p.input)
            .map_err(|e| e.to_string())?;
        for (h, g) in f.horizons.iter().enumerate() {
            sigma[h].0 += g.sigma_x / test.len() as f64;
            sigma[h].1 += g.sigma_y / test.len() as f64;
            modes[h].push((g.mu, p.truth[h]));
        }
    }
    let worst = sigma
        .iter()
        .map(|(sx, sy)| ((sx / NOISE - 1.0).abs()).max((sy / NOISE - 1.0).abs()))
        .fold(0.0, f64::max);
    if std::env::var("ACCEPTANCE_VERBOSE").is_ok() {
        let acc = positional_accuracy(&modes).map_err(|e| e.to_string())?;
        for (h, (s, a)) in sigma.iter().zip(&acc.aee).enumerate() {
            println!("  h{h}: sigma ({:.4}, {:.4}) aee {a:.4}", s.0, s.1);
        }
    }
    let asaee = positional_accuracy(&modes)
        .map_err(|e| e.to_string())?
        .asaee;
    let (lo, hi) = sigma
        .iter()
        .flat_map(|(a, b)| [*a, *b])
        .fold((f64::INFINITY, 0.0f64), |(l, h), s| (l.min(s), h.max(s)));
    Ok(Outcome::new(
        worst <= 0.2 && asaee < 0.1,
        format!(
            "sigma in [{lo:.3}, {hi:.3}] m vs {NOISE}, worst deviation {:.1}%, ASAEE {asaee:.4} m/s, best step {}",
            100.0 * worst,
            trained.best_step
        ),
    ))
}
