//! Per-state Gaussian trajectory forecaster.
//!
//! The network maps a flattened ego input window to 125 linear outputs laid
//! out as `[o_mu (2·25) | o_sigma (2·25) | o_rho (25)]`. Standard deviations
//! go through `softplus + eps_sigma`, correlations through
//! `eps_rho · tanh`. Training minimises the negative log-likelihood averaged
//! over horizons, evaluated through the Cholesky factor of each covariance:
//!
//! ```text
//! NLL = ½ d² + ½ ln det S,   d² = |L⁻¹ (y − μ)|²,   ln det S = 2 Σ ln L_kk
//! ```
//!
//! (the constant `ln 2π` is dropped from the loss; the density keeps it).

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    forecast_offsets, input_offsets, Cholesky2, Mat2, Point2, Trajectory, FORECAST_LEN, INPUT_LEN,
};
use crate::motion_states::MotionState;
use crate::neural::{train_step, Adam, LayerSpec, Network, TrainConfig, Trainable};

/// Floor added to every standard deviation, metres.
pub const EPS_SIGMA: f64 = 1e-3;
/// Bound on the correlation coefficient.
pub const EPS_RHO: f64 = 0.9;

pub const INPUT_WIDTH: usize = 2 * INPUT_LEN;
pub const OUTPUT_WIDTH: usize = 5 * FORECAST_LEN;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `sigma = softplus(o_sigma) + eps_sigma`, `rho = eps_rho · tanh(o_rho)`.
pub fn constrain_outputs(o_sigma: &[f64], o_rho: &[f64]) -> (Vec<f64>, Vec<f64>) {
    constrain_outputs_with(o_sigma, o_rho, EPS_SIGMA, EPS_RHO)
}

pub fn constrain_outputs_with(
    o_sigma: &[f64],
    o_rho: &[f64],
    eps_sigma: f64,
    eps_rho: f64,
) -> (Vec<f64>, Vec<f64>) {
    (
        o_sigma.iter().map(|&o| softplus(o) + eps_sigma).collect(),
        o_rho.iter().map(|&o| eps_rho * o.tanh()).collect(),
    )
}

/// `[[σx², ρσxσy], [ρσxσy, σy²]]`
pub fn build_covariance(sigma_x: f64, sigma_y: f64, rho: f64) -> Mat2 {
    let c = rho * sigma_x * sigma_y;
    Mat2::new(sigma_x * sigma_x, c, c, sigma_y * sigma_y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllBreakdown {
    /// `½ d²`
    pub error_term: f64,
    /// `½ ln det S`
    pub residual_term: f64,
    pub total: f64,
}

/// Bivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateNormal {
    pub mean: Point2,
    pub cov: Mat2,
    chol: Cholesky2,
}

impl BivariateNormal {
    pub fn new(mean: Point2, cov: Mat2) -> Result<Self> {
        let chol = cov.cholesky()?;
        Ok(Self { mean, cov, chol })
    }

    pub fn cholesky(&self) -> &Cholesky2 {
        &self.chol
    }

    pub fn mahalanobis_sq(&self, y: Point2) -> f64 {
        self.chol.mahalanobis_sq(y - self.mean)
    }

    /// `exp(−d²/2) / (2π √det S)`
    pub fn density(&self, y: Point2) -> f64 {
        (-0.5 * self.mahalanobis_sq(y) - 0.5 * self.chol.ln_det()).exp() / (2.0 * PI)
    }

    pub fn nll(&self, y: Point2) -> NllBreakdown {
        let error_term = 0.5 * self.mahalanobis_sq(y);
        let residual_term = 0.5 * self.chol.ln_det();
        NllBreakdown {
            error_term,
            residual_term,
            total: error_term + residual_term,
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Point2 {
        let z = Point2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        self.mean + self.chol.transform(z)
    }

    /// Largest marginal standard deviation.
    pub fn max_sigma(&self) -> f64 {
        self.cov.0[0][0].max(self.cov.0[1][1]).sqrt()
    }
}

/// Forecast at one horizon, in the `(μ, σx, σy, ρ)` parameterisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonGaussian {
    pub mu: Point2,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
}

/// Gradient of the NLL w.r.t. `(μx, μy, σx, σy, ρ)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NllGradient {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
}

impl HorizonGaussian {
    pub fn covariance(&self) -> Mat2 {
        build_covariance(self.sigma_x, self.sigma_y, self.rho)
    }

    pub fn to_normal(&self) -> Result<BivariateNormal> {
        BivariateNormal::new(self.mu, self.covariance())
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0 && self.rho.abs() < 1.0)
            || !self.mu.is_finite()
        {
            return Err(Error::InvalidCovariance(format!(
                "sigma_x={}, sigma_y={}, rho={}",
                self.sigma_x, self.sigma_y, self.rho
            )));
        }
        Ok(())
    }

    pub fn density(&self, y: Point2) -> Result<f64> {
        Ok(self.to_normal()?.density(y))
    }

    pub fn nll(&self, y: Point2) -> Result<NllBreakdown> {
        Ok(self.nll_with_gradient(y)?.0)
    }

    /// NLL and its gradient, both through the closed-form Cholesky factor
    /// `L = [[σx, 0], [ρσy, σy√(1−ρ²)]]`.
    pub fn nll_with_gradient(&self, y: Point2) -> Result<(NllBreakdown, NllGradient)> {
        self.validate()?;
        let (sx, sy, rho) = (self.sigma_x, self.sigma_y, self.rho);
        let s = (1.0 - rho * rho).sqrt();
        let a = sx;
        let b = rho * sy;
        let c = sy * s;
        let e1 = y.x - self.mu.x;
        let e2 = y.y - self.mu.y;
        let z1 = e1 / a;
        let z2 = (e2 - b * z1) / c;
        let error_term = 0.5 * (z1 * z1 + z2 * z2);
        let residual_term = a.ln() + c.ln();

        // reverse pass
        let gz2 = z2;
        let gz1 = z1 - z2 * b / c;
        let ge2 = gz2 / c;
        let gb = -gz2 * z1 / c;
        let gc = -gz2 * z2 / c + 1.0 / c;
        let ge1 = gz1 / a;
        let ga = -gz1 * z1 / a + 1.0 / a;
        let grad = NllGradient {
            mu_x: -ge1,
            mu_y: -ge2,
            sigma_x: ga,
            sigma_y: gb * rho + gc * s,
            rho: gb * sy - gc * sy * rho / s,
        };
        Ok((
            NllBreakdown {
                error_term,
                residual_term,
                total: error_term + residual_term,
            },
            grad,
        ))
    }
}

/// 25 per-horizon Gaussians in the ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianForecast {
    pub horizons: Vec<HorizonGaussian>,
}

/// Which data a forecaster was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelTag {
    State(MotionState),
    Baseline,
}

impl ModelTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelTag::State(s) => s.as_str(),
            ModelTag::Baseline => "baseline",
        }
    }
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "baseline" {
            Ok(ModelTag::Baseline)
        } else {
            Ok(ModelTag::State(s.parse()?))
        }
    }
}

impl Serialize for ModelTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ModelTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hidden dense widths of the forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterArchitecture {
    pub hidden: Vec<usize>,
}

impl Default for ForecasterArchitecture {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
        }
    }
}

impl ForecasterArchitecture {
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut width = INPUT_WIDTH;
        for &h in &self.hidden {
            layers.push(LayerSpec::Dense {
                fan_in: width,
                fan_out: h,
            });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Dense {
            fan_in: width,
            fan_out: OUTPUT_WIDTH,
        });
        layers.push(LayerSpec::LinearHead);
        layers
    }
}

/// JSON metadata stored next to a forecaster network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterMetadata {
    pub state: ModelTag,
    pub eps_sigma: f64,
    pub eps_rho: f64,
    pub grid: crate::geometry::TimeGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub tag: ModelTag,
    pub net: Network,
    pub eps_sigma: f64,
    pub eps_rho: f64,
}

impl Trainable for ForecastModel {
    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.param_groups_mut()
    }
}

/// One training example: ego input window and ego ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastPair {
    pub input: Vec<f64>,
    pub truth: Vec<Point2>,
}

impl ForecastPair {
    pub fn from_trajectories(input: &Trajectory, truth: &Trajectory) -> Result<Self> {
        input.check_grid(&input_offsets())?;
        truth.check_grid(&forecast_offsets())?;
        Ok(Self {
            input: input.flatten(),
            truth: truth.positions().collect(),
        })
    }
}

impl ForecastModel {
    /// He-initialised model whose mean outputs start at the ego origin.
    pub fn init(
        tag: ModelTag,
        arch: &ForecasterArchitecture,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut net = Network::init_he(arch.layers(), rng)?;
        let last = net
            .layers()
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
            .expect("architecture ends in a dense layer");
        let fan_in = match net.layers()[last] {
            LayerSpec::Dense { fan_in, .. } => fan_in,
            _ => unreachable!(),
        };
        let (w, b) = net.layer_params_mut(last);
        w[..2 * FORECAST_LEN * fan_in].fill(0.0);
        b[..2 * FORECAST_LEN].fill(0.0);
        Ok(Self {
            tag,
            net,
            eps_sigma: EPS_SIGMA,
            eps_rho: EPS_RHO,
        })
    }

    pub fn from_network(tag: ModelTag, net: Network, meta: &ForecasterMetadata) -> Result<Self> {
        if net.input_len() != INPUT_WIDTH || net.output_len() != OUTPUT_WIDTH {
            return Err(Error::MalformedInput(format!(
                "forecaster network must map {INPUT_WIDTH} -> {OUTPUT_WIDTH}"
            )));
        }
        Ok(Self {
            tag,
            net,
            eps_sigma: meta.eps_sigma,
            eps_rho: meta.eps_rho,
        })
    }

    pub fn metadata(&self) -> ForecasterMetadata {
        ForecasterMetadata {
            state: self.tag,
            eps_sigma: self.eps_sigma,
            eps_rho: self.eps_rho,
            grid: crate::geometry::TimeGrid::canonical(),
        }
    }

    fn decode(&self, o: &[f64]) -> GaussianForecast {
        let n = FORECAST_LEN;
        let (sig, rho) =
            constrain_outputs_with(&o[2 * n..4 * n], &o[4 * n..], self.eps_sigma, self.eps_rho);
        let horizons = (0..n)
            .map(|h| HorizonGaussian {
                mu: Point2::new(o[2 * h], o[2 * h + 1]),
                sigma_x: sig[2 * h],
                sigma_y: sig[2 * h + 1],
                rho: rho[h],
            })
            .collect();
        GaussianForecast { horizons }
    }

    pub fn forecast(&self, ego_input: &Trajectory) -> Result<GaussianForecast> {
        ego_input.check_grid(&input_offsets())?;
        self.forecast_flat(&ego_input.flatten())
    }

    pub fn forecast_flat(&self, input: &[f64]) -> Result<GaussianForecast> {
        Ok(self.decode(&self.net.forward(input)?))
    }

    /// Mean NLL over horizons for one pair; adds its parameter gradient into
    /// `grad` when given.
    pub fn loss(&self, pair: &ForecastPair, grad: Option<&mut [f64]>) -> Result<f64> {
        if pair.truth.len() != FORECAST_LEN {
            return Err(Error::MalformedInput(format!(
                "ground truth has {} horizons, expected {FORECAST_LEN}",
                pair.truth.len()
            )));
        }
        let n = FORECAST_LEN;
        let trace = self.net.forward_trace(&pair.input)?;
        let o = trace.output();
        let forecast = self.decode(o);
        let scale = 1.0 / n as f64;
        let mut total = 0.0;
        let mut upstream = vec![0.0; OUTPUT_WIDTH];
        for (h, (g, y)) in forecast.horizons.iter().zip(&pair.truth).enumerate() {
            let (nll, d) = g.nll_with_gradient(*y)?;
            total += nll.total;
            upstream[2 * h] = scale * d.mu_x;
            upstream[2 * h + 1] = scale * d.mu_y;
            upstream[2 * n + 2 * h] = scale * d.sigma_x * sigmoid(o[2 * n + 2 * h]);
            upstream[2 * n + 2 * h + 1] = scale * d.sigma_y * sigmoid(o[2 * n + 2 * h + 1]);
            let t = o[4 * n + h].tanh();
            upstream[4 * n + h] = scale * d.rho * self.eps_rho * (1.0 - t * t);
        }
        if let Some(grad) = grad {
            self.net.backward_trace(&trace, &upstream, grad)?;
        }
        Ok(total * scale)
    }

    pub fn mean_loss(&self, pairs: &[ForecastPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::InsufficientData("no pairs to evaluate".into()));
        }
        let mut sum = 0.0;
        for p in pairs {
            sum += self.loss(p, None)?;
        }
        Ok(sum / pairs.len() as f64)
    }
}

/// One row of a training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedForecaster {
    pub model: ForecastModel,
    pub log: Vec<LogEntry>,
    pub best_step: usize,
    pub best_validation_loss: f64,
}

fn run_schedule(
    tag: ModelTag,
    data: &[ForecastPair],
    validation: Option<&[ForecastPair]>,
    arch: &ForecasterArchitecture,
    config: &TrainConfig,
    steps: usize,
) -> Result<(ForecastModel, Vec<LogEntry>, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ForecastModel::init(tag, arch, &mut rng)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut log = Vec::new();
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut running = 0.0;
    let mut since = 0usize;
    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 1..=steps {
        batch.clear();
        for _ in 0..config.batch_size {
            batch.push(&data[rng.random_range(0..data.len())]);
        }
        let loss = train_step(&mut model, &batch, |m, p, g| m.loss(p, Some(g)), &mut adam)?;
        running += loss;
        since += 1;
        if let Some(val) = validation {
            if step % config.validation_interval == 0 {
                let v = model.mean_loss(val)?;
                if !v.is_finite() {
                    return Err(Error::TrainingDiverged { step });
                }
                log.push(LogEntry {
                    step,
                    train_loss: running / since as f64,
                    validation_loss: v,
                });
                running = 0.0;
                since = 0;
                if v < best.2 {
                    best = (model.clone(), step, v);
                }
            }
        }
    }
    if validation.is_none() {
        return Ok((model, log, steps, f64::NAN));
    }
    Ok((best.0, log, best.1, best.2))
}

/// Trains with periodic validation, picks the step with the lowest
/// validation NLL, then retrains from the same seed on train + validation up
/// to that step.
pub fn train_forecaster(
    tag: ModelTag,
    train: &[ForecastPair],
    validation: &[ForecastPair],
    arch: &ForecasterArchitecture,
    config: &TrainConfig,
) -> Result<TrainedForecaster> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::InsufficientData(format!(
            "forecaster '{tag}' needs training and validation pairs ({} / {})",
            train.len(),
            validation.len()
        )));
    }
    let (_, log, best_step, best_loss) =
        run_schedule(tag, train, Some(validation), arch, config, config.steps)?;
    let mut merged = train.to_vec();
    merged.extend_from_slice(validation);
    let (model, _, _, _) = run_schedule(tag, &merged, None, arch, config, best_step)?;
    Ok(TrainedForecaster {
        model,
        log,
        best_step,
        best_validation_loss: best_loss,
    })
}
