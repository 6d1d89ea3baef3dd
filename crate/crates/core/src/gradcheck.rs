//! Finite-difference checks of analytic parameter gradients.
//!
//! The numerical derivative uses the fourth-order five-point stencil, which
//! allows a step large enough that roundoff in the loss stays far below even
//! small gradient components. ReLU networks are only piecewise smooth: when a
//! perturbation flips the sign of a ReLU input the step is shrunk, and if the
//! kink is still crossed a second-order one-sided stencil on the smooth side
//! is used instead.

use crate::classifier::{ClassifierModel, ClassifierSample};
use crate::error::{Error, Result};
use crate::forecaster::{ForecastModel, ForecastPair};
use crate::neural::{Network, Trainable};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

const SHRINKS: usize = 3;

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// A model whose scalar loss on one example has an analytic gradient.
pub trait Checkable: Trainable + Clone {
    type Example;

    /// Loss, adding its gradient into `grad`.
    fn loss_with_gradient(&self, example: &Self::Example, grad: &mut [f64]) -> Result<f64>;

    fn loss_only(&self, example: &Self::Example) -> Result<f64>;

    /// ReLU sign pattern of every network on this example.
    fn relu_pattern(&self, example: &Self::Example) -> Result<Vec<bool>>;
}

/// Input plus fixed output weights: the loss is `w · f(x)`, which exercises
/// every output with a distinct upstream gradient.
#[derive(Debug, Clone)]
pub struct ProjectedInput {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Checkable for Network {
    type Example = ProjectedInput;

    fn loss_with_gradient(&self, ex: &ProjectedInput, grad: &mut [f64]) -> Result<f64> {
        let trace = self.forward_trace(&ex.input)?;
        let loss = dot(trace.output(), &ex.weights);
        self.backward_trace(&trace, &ex.weights, grad)?;
        Ok(loss)
    }

    fn loss_only(&self, ex: &ProjectedInput) -> Result<f64> {
        Ok(dot(&self.forward(&ex.input)?, &ex.weights))
    }

    fn relu_pattern(&self, ex: &ProjectedInput) -> Result<Vec<bool>> {
        Network::relu_pattern(self, &ex.input)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Checkable for ClassifierModel {
    type Example = ClassifierSample;

    fn loss_with_gradient(&self, ex: &ClassifierSample, grad: &mut [f64]) -> Result<f64> {
        self.loss(ex, Some(grad))
    }

    fn loss_only(&self, ex: &ClassifierSample) -> Result<f64> {
        self.loss(ex, None)
    }

    fn relu_pattern(&self, ex: &ClassifierSample) -> Result<Vec<bool>> {
        let mut p = self.mhi_encoder_1.relu_pattern(&ex.input.mhi1)?;
        p.extend(self.mhi_encoder_2.relu_pattern(&ex.input.mhi2)?);
        p.extend(self.traj_encoder.relu_pattern(&ex.input.traj)?);
        let mut h = self.mhi_encoder_1.forward(&ex.input.mhi1)?;
        h.extend(self.mhi_encoder_2.forward(&ex.input.mhi2)?);
        h.extend(self.traj_encoder.forward(&ex.input.traj)?);
        p.extend(self.head.relu_pattern(&h)?);
        Ok(p)
    }
}

impl Checkable for ForecastModel {
    type Example = ForecastPair;

    fn loss_with_gradient(&self, ex: &ForecastPair, grad: &mut [f64]) -> Result<f64> {
        self.loss(ex, Some(grad))
    }

    fn loss_only(&self, ex: &ForecastPair) -> Result<f64> {
        self.loss(ex, None)
    }

    fn relu_pattern(&self, ex: &ForecastPair) -> Result<Vec<bool>> {
        self.net.relu_pattern(&ex.input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub parameters: usize,
    pub max_relative_error: f64,
    pub worst_parameter: usize,
    /// Parameters whose step had to be shrunk or made one-sided.
    pub kinks: usize,
}

fn param_mut<M: Trainable>(model: &mut M, mut i: usize) -> &mut f64 {
    for g in model.param_groups_mut() {
        if i < g.len() {
            return &mut g[i];
        }
        i -= g.len();
    }
    panic!("parameter index out of range");
}

fn evaluate<M: Checkable>(
    model: &mut M,
    i: usize,
    value: f64,
    ex: &M::Example,
) -> Result<(f64, Vec<bool>)> {
    *param_mut(model, i) = value;
    Ok((model.loss_only(ex)?, model.relu_pattern(ex)?))
}

/// Compares the analytic gradient of every parameter (or every `stride`-th)
/// with a central difference.
pub fn check_gradient<M: Checkable>(
    model: &M,
    ex: &M::Example,
    step: f64,
    stride: usize,
) -> Result<GradientReport> {
    if !(step > 0.0) || stride == 0 {
        return Err(Error::InvalidParameter(
            "step and stride must be positive".into(),
        ));
    }
    let mut work = model.clone();
    let n = work.param_count();
    let mut analytic = vec![0.0; n];
    let f0 = model.loss_with_gradient(ex, &mut analytic)?;
    let base = model.relu_pattern(ex)?;
    let mut report = GradientReport {
        parameters: 0,
        max_relative_error: 0.0,
        worst_parameter: 0,
        kinks: 0,
    };
    for i in (0..n).step_by(stride) {
        let theta = *param_mut(&mut work, i);
        let mut h = step;
        let mut numeric = None;
        let mut sides = None;
        for _ in 0..=SHRINKS {
            let mut f = [0.0; 4];
            let mut smooth = [false; 4];
            for (k, offset) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
                let (v, pattern) = evaluate(&mut work, i, theta + offset * h, ex)?;
                f[k] = v;
                smooth[k] = pattern == base;
            }
            if smooth.iter().all(|&s| s) {
                numeric = Some((8.0 * (f[2] - f[1]) - (f[3] - f[0])) / (12.0 * h));
                break;
            }
            sides = Some((f, smooth, h));
            h /= 10.0;
        }
        *param_mut(&mut work, i) = theta;
        let numeric = match (numeric, sides) {
            (Some(d), None) => d,
            (Some(d), Some(_)) => {
                report.kinks += 1;
                d
            }
            (None, Some((f, smooth, h))) => {
                report.kinks += 1;
                match smooth {
                    [_, _, true, true] => (4.0 * f[2] - f[3] - 3.0 * f0) / (2.0 * h),
                    [true, true, _, _] => (3.0 * f0 - 4.0 * f[1] + f[0]) / (2.0 * h),
                    // Both neighbourhoods cross a kink: the base point sits on one.
                    _ => continue,
                }
            }
            (None, None) => unreachable!("the loop runs at least once"),
        };
        report.parameters += 1;
        let e = relative_error(analytic[i], numeric);
        if e > report.max_relative_error {
            report.max_relative_error = e;
            report.worst_parameter = i;
        }
    }
    Ok(report)
}
