//! Criteria with closed-form or self-consistency oracles.

use intent_forecast::classifier::{
    ClassifierArchitecture, ClassifierInput, ClassifierModel, ClassifierSample,
};
use intent_forecast::evaluation::{
    aggregate_sharpness, alpha_grid, brier, confidence_level_with, f1_scores, hdr_regions,
    positional_accuracy, reliability_from_levels, stream_rng, ConfusionMatrix, Density2,
    QMC_POINTS,
};
use intent_forecast::forecaster::{
    BivariateNormal, ForecastModel, ForecastPair, ForecasterArchitecture, ModelTag, INPUT_WIDTH,
};
use intent_forecast::geometry::{forecast_offsets, Mat2, Point2, FORECAST_LEN};
use intent_forecast::gradcheck::{check_gradient, DEFAULT_STEP};
use intent_forecast::mhi::{generate_mhi, BoundingBox, MaskFrame, MaskSequence, CHANNELS};
use intent_forecast::mixture::{fit_gmm, sample_mixture, Component, Mixture};
use intent_forecast::motion_states::SubMachine;
use intent_forecast::neural::Trainable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

fn randomise<M: Trainable>(model: &mut M, scale: f64, rng: &mut ChaCha8Rng) {
    for g in model.param_groups_mut() {
        for p in g.iter_mut() {
            *p = rng.random_range(-scale..scale);
        }
    }
}

fn uniform(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn gradients() -> Result<Outcome, String> {
    let err = |e: intent_forecast::Error| e.to_string();
    let arch = ClassifierArchitecture {
        mhi_width: 8,
        mhi_height: 8,
        conv_channels: vec![2, 3],
        mhi_features: 6,
        traj_hidden: 8,
        traj_features: 4,
        head_hidden: 6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut classifier_worst, mut classifier_params, mut kinks) = (0.0f64, 0usize, 0usize);
    for i in 0..100 {
        let machine = SubMachine::ALL[i % 4];
        let mut model = ClassifierModel::zeros(machine, &arch).map_err(err)?;
        randomise(&mut model, 0.6, &mut rng);
        let mut mhi = || {
            (0..2 * 64)
                .map(|_| rng.random_range(0..6u32) as f64 / 5.0)
                .collect::<Vec<f64>>()
        };
        let (mhi1, mhi2) = (mhi(), mhi());
        let sample = ClassifierSample {
            input: ClassifierInput {
                mhi1,
                mhi2,
                traj: uniform(INPUT_WIDTH, 2.0, &mut rng),
            },
            label: rng.random_range(0..machine.n_classes()),
        };
        let r = check_gradient(&model, &sample, DEFAULT_STEP, 1).map_err(err)?;
        classifier_worst = classifier_worst.max(r.max_relative_error);
        classifier_params += r.parameters;
        kinks += r.kinks;
    }

    let arch = ForecasterArchitecture {
        hidden: vec![16, 12],
    };
    let (mut forecaster_worst, mut forecaster_params) = (0.0f64, 0usize);
    for _ in 0..100 {
        let mut model = ForecastModel::init(ModelTag::Baseline, &arch, &mut rng).map_err(err)?;
        randomise(&mut model, 0.3, &mut rng);
        let pair = ForecastPair {
            input: uniform(INPUT_WIDTH, 2.0, &mut rng),
            truth: (0..FORECAST_LEN)
                .map(|_| Point2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)))
                .collect(),
        };
        let r = check_gradient(&model, &pair, DEFAULT_STEP, 1).map_err(err)?;
        forecaster_worst = forecaster_worst.max(r.max_relative_error);
        forecaster_params += r.parameters;
        kinks += r.kinks;
    }
    Ok(Outcome::new(
        classifier_worst < 1e-4 && forecaster_worst < 1e-4,
        format!(
            "max rel. error classifier {classifier_worst:.2e} ({classifier_params} params), \
             forecaster {forecaster_worst:.2e} ({forecaster_params} params), {kinks} kink steps"
        ),
    ))
}

fn random_normal(rng: &mut ChaCha8Rng) -> BivariateNormal {
    let (sx, sy) = (rng.random_range(0.2..2.5), rng.random_range(0.2..2.5));
    let rho: f64 = rng.random_range(-0.85..0.85);
    let mean = Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    BivariateNormal::new(
        mean,
        Mat2::new(sx * sx, rho * sx * sy, rho * sx * sy, sy * sy),
    )
    .expect("valid")
}

fn random_mixture(rng: &mut ChaCha8Rng, k: usize) -> Mixture {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    Mixture::new(
        raw.iter()
            .map(|w| Component {
                weight: w / sum,
                normal: random_normal(rng),
            })
            .collect(),
    )
    .expect("weights sum to one")
}

/// Moment-matched Gaussian with doubled covariance, the importance proposal.
fn proposal(m: &Mixture) -> BivariateNormal {
    let (mut mx, mut my) = (0.0, 0.0);
    for c in m.components() {
        mx += c.weight * c.normal.mean.x;
        my += c.weight * c.normal.mean.y;
    }
    let mut s = [[0.0; 2]; 2];
    for c in m.components() {
        let d = [c.normal.mean.x - mx, c.normal.mean.y - my];
        for i in 0..2 {
            for j in 0..2 {
                s[i][j] += c.weight * (c.normal.cov.0[i][j] + d[i] * d[j]);
            }
        }
    }
    BivariateNormal::new(Point2::new(mx, my), Mat2(s).scale(2.0)).expect("SPD")
}

fn integral(d: &dyn Density2, q: &BivariateNormal, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n {
        let x = q.sample(&mut rng);
        acc += d.density(x) / q.density(x);
    }
    acc / n as f64
}

pub fn normalisation() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let total = if i < 10 {
            let g = random_normal(&mut rng);
            let q = proposal(&Mixture::single(g));
            integral(&g, &q, 1_000_000, i)
        } else {
            let m = random_mixture(&mut rng, 2 + (i as usize) % 4);
            let q = proposal(&m);
            integral(&m, &q, 1_000_000, i)
        };
        worst = worst.max((total - 1.0).abs());
    }
    Ok(Outcome::new(
        worst <= 0.01,
        format!("10 Gaussians + 10 mixtures, 10^6 importance samples each, max |integral - 1| = {worst:.5}"),
    ))
}

pub fn confidence_oracle() -> Result<Outcome, String> {
    let mut worst = 0.0f64;
    let mut stream = 0;
    for sigma in [0.5, 1.0, 2.0] {
        let d = BivariateNormal::new(
            Point2::new(1.0, -2.0),
            Mat2::diag(sigma * sigma, sigma * sigma),
        )
        .map_err(|e| e.to_string())?;
        for (k, ratio) in [0.5, 1.0, 1.1774, 2.0, 3.0].into_iter().enumerate() {
            let r = ratio * sigma;
            let angle = 0.7 + k as f64;
            let y = Point2::new(d.mean.x + r * angle.cos(), d.mean.y + r * angle.sin());
            let level = confidence_level_with(&d, y, 100_000, &mut stream_rng(303, stream));
            stream += 1;
            let exact = 1.0 - (-ratio * ratio / 2.0).exp();
            worst = worst.max((level - exact).abs());
        }
    }
    Ok(Outcome::new(
        worst <= 0.02,
        format!("15 points (r/sigma in 0.5, 1, 1.1774, 2, 3; three sigmas), N = 10^5, max deviation {worst:.4}"),
    ))
}

pub fn sharpness_oracle() -> Result<Outcome, String> {
    let d = BivariateNormal::new(Point2::new(0.0, 0.0), Mat2::diag(1.0, 1.0))
        .map_err(|e| e.to_string())?;
    let regions = hdr_regions(&d, &[0.68, 0.95, 0.99], QMC_POINTS).map_err(|e| e.to_string())?;
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &regions {
        let exact = std::f64::consts::PI * -2.0 * (1.0 - r.level).ln();
        let rel = r.area / exact - 1.0;
        pass &= rel.abs() <= 0.02;
        parts.push(format!(
            "{:.2}: {:.2} vs {:.2} m^2 ({:+.2}%)",
            r.level,
            r.area,
            exact,
            100.0 * rel
        ));
    }
    Ok(Outcome::new(pass, parts.join(", ")))
}

pub fn reliability_self_consistency() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let n = 10_000;
    let mut levels = Vec::with_capacity(n);
    for i in 0..n {
        let k = 1 + i % 4;
        let m = random_mixture(&mut rng, k);
        let y = m.sample(&mut rng);
        levels.push(confidence_level_with(
            &m,
            y,
            10_000,
            &mut stream_rng(506, i as u64),
        ));
    }
    let r = reliability_from_levels(&[levels], &alpha_grid()).map_err(|e| e.to_string())?;
    Ok(Outcome::new(
        r.gamma_mean < 0.03 && r.gamma_max < 0.08,
        format!(
            "10^4 mixtures (K = 1..4) with self-sampled truth: gamma_mean {:.4}, gamma_max {:.4}",
            r.gamma_mean, r.gamma_max
        ),
    ))
}

fn random_sequence(
    m: usize,
    w: usize,
    h: usize,
    density: f64,
    rng: &mut ChaCha8Rng,
) -> MaskSequence {
    let frames = (0..m)
        .map(|_| {
            let mut f = MaskFrame::zeros(w, h);
            for v in 0..h {
                for u in 0..w {
                    for c in 0..CHANNELS {
                        f.set(u, v, c, rng.random_bool(density));
                    }
                }
            }
            f
        })
        .collect();
    MaskSequence::new(frames).expect("equal frame sizes")
}

pub fn mhi_properties() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for m in [1usize, 2, 5, 50] {
        for trial in 0..50 {
            let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
            let density = rng.random_range(0.0..0.5);
            let seq = random_sequence(m, w, h, density, &mut rng);
            let roi = BoundingBox::new(0.0, 0.0, w as f64, h as f64).map_err(|e| e.to_string())?;
            let mhi = generate_mhi(&seq, &roi, w, h).map_err(|e| e.to_string())?;
            let again = generate_mhi(&seq, &roi, w, h).map_err(|e| e.to_string())?;
            let mut cleared = seq.clone();
            for f in &mut cleared.frames {
                for v in 0..h {
                    for u in 0..w {
                        f.set(u, v, 1, false);
                    }
                }
            }
            let only0 = generate_mhi(&cleared, &roi, w, h).map_err(|e| e.to_string())?;
            let mut bad = mhi != again;
            for c in 0..CHANNELS {
                for v in 0..h {
                    for u in 0..w {
                        let got = mhi.get(u, v, c);
                        // newest frame that sets the pixel decides its value
                        let newest = seq.frames.iter().rposition(|f| f.get(u, v, c) == 1);
                        let expected = newest.map_or(0.0, |k| ((k + 1) as f64 / m as f64) as f32);
                        let quantised =
                            got == 0.0 || (1..=m).any(|j| got == (j as f64 / m as f64) as f32);
                        bad |= got != expected || !quantised;
                        if m == 1 {
                            bad |= got != seq.frames[0].get(u, v, c) as f32;
                        }
                        let other = only0.get(u, v, c);
                        bad |= if c == 0 {
                            other.to_bits() != got.to_bits()
                        } else {
                            other != 0.0
                        };
                        checked += 1;
                    }
                }
            }
            if bad {
                failures.push(format!("M={m} trial {trial}"));
            }
        }
    }
    Ok(Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("M in 1, 2, 5, 50 x 50 random sequences, {checked} pixel values checked")
        } else {
            format!("violations in {}", failures.join(", "))
        },
    ))
}

pub fn metric_formulas() -> Result<Outcome, String> {
    let e = |e: intent_forecast::Error| e.to_string();
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    expect(
        "brier exact",
        brier(&[1.0, 0.0], &[true, false]).map_err(e)?,
        0.0,
        0.0,
    );
    expect(
        "brier 0.5",
        brier(&[0.5; 3], &[true, false, true]).map_err(e)?,
        0.25,
        1e-15,
    );
    expect(
        "brier mixed",
        brier(&[1.0, 0.0, 0.5], &[true, false, true]).map_err(e)?,
        0.25 / 3.0,
        1e-12,
    );
    let diag =
        ConfusionMatrix::from_rows(&[vec![4, 0, 0], vec![0, 7, 0], vec![0, 0, 2]]).map_err(e)?;
    let (mi, ma) = f1_scores(&diag).map_err(e)?;
    expect("f1 diagonal micro", mi, 1.0, 0.0);
    expect("f1 diagonal macro", ma, 1.0, 0.0);
    let binary = ConfusionMatrix::from_rows(&[vec![8, 2], vec![2, 8]]).map_err(e)?;
    expect(
        "f1 binary micro",
        f1_scores(&binary).map_err(e)?.0,
        0.8,
        1e-12,
    );
    let h = forecast_offsets();
    expect(
        "K-bar unit",
        aggregate_sharpness(&h).map_err(e)?,
        1.0,
        1e-12,
    );
    expect(
        "K-bar zero",
        aggregate_sharpness(&[0.0; FORECAST_LEN]).map_err(e)?,
        0.0,
        0.0,
    );
    expect(
        "K-bar harmonic",
        aggregate_sharpness(&[1.0; FORECAST_LEN]).map_err(e)?,
        1.5264,
        1e-4,
    );
    let offset: Vec<Vec<(Point2, Point2)>> = (0..FORECAST_LEN)
        .map(|_| vec![(Point2::new(0.1, 0.0), Point2::new(0.0, 0.0))])
        .collect();
    expect(
        "ASAEE offset",
        positional_accuracy(&offset).map_err(e)?.asaee,
        0.15264,
        1e-4,
    );
    let formula_failures = failures.len();

    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst_drop = 0.0f64;
    let mut iterations = 0;
    for fit in 0..50 {
        let k_true = rng.random_range(1..=3);
        let truth = random_mixture(&mut rng, k_true);
        let points = sample_mixture(&truth, 400, fit);
        let k = rng.random_range(1..=4);
        let f = fit_gmm(&points, k, fit).map_err(e)?;
        iterations += f.log_likelihood.len();
        for w in f.log_likelihood.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    let monotone = worst_drop <= 1e-10;
    Ok(Outcome::new(
        formula_failures == 0 && monotone,
        if formula_failures == 0 {
            format!(
                "11 formula examples exact; 50 EM fits, {iterations} iterations, largest log-likelihood drop {worst_drop:.1e}"
            )
        } else {
            failures.join("; ")
        },
    ))
}
