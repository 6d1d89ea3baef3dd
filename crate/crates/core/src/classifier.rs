//! Basic movement detection.
//!
//! One classifier per sub-machine. Each has two convolutional MHI encoders
//! (one per camera), a dense encoder for the flattened ego input trajectory,
//! and a dense head over the concatenated features ending in a softmax.
//! Probabilities can be calibrated with one-vs-rest isotonic regression.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::qq_curve;
use crate::forecaster::{LogEntry, INPUT_WIDTH};
use crate::geometry::{input_offsets, Trajectory};
use crate::mhi::{MotionHistoryImage, CHANNELS};
use crate::motion_states::{LabelVector, SubMachine};
use crate::neural::{train_step, Adam, LayerSpec, Network, TrainConfig, Trainable};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArchitecture {
    pub mhi_width: usize,
    pub mhi_height: usize,
    /// Output channels of each stride-2 stage (at most three).
    pub conv_channels: Vec<usize>,
    /// |h1| = |h2|
    pub mhi_features: usize,
    pub traj_hidden: usize,
    /// |h3|
    pub traj_features: usize,
    pub head_hidden: usize,
}

impl Default for ClassifierArchitecture {
    fn default() -> Self {
        Self {
            mhi_width: 64,
            mhi_height: 64,
            conv_channels: vec![8, 16, 16],
            mhi_features: 64,
            traj_hidden: 64,
            traj_features: 32,
            head_hidden: 64,
        }
    }
}

impl ClassifierArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.len() > 3 {
            return Err(Error::InvalidParameter(
                "the MHI encoder needs one to three convolution stages".into(),
            ));
        }
        if self.mhi_width == 0 || self.mhi_height == 0 {
            return Err(Error::InvalidParameter("MHI size must be positive".into()));
        }
        Ok(())
    }

    fn mhi_encoder(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = (CHANNELS, self.mhi_height, self.mhi_width);
        for &out in &self.conv_channels {
            layers.push(LayerSpec::Conv2d {
                in_channels: c,
                out_channels: out,
                in_height: h,
                in_width: w,
            });
            layers.push(LayerSpec::Relu);
            c = out;
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense {
            fan_in: c * h * w,
            fan_out: self.mhi_features,
        });
        layers.push(LayerSpec::Relu);
        layers
    }

    fn traj_encoder(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense {
                fan_in: INPUT_WIDTH,
                fan_out: self.traj_hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                fan_in: self.traj_hidden,
                fan_out: self.traj_features,
            },
            LayerSpec::Relu,
        ]
    }

    fn head(&self, n_classes: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense {
                fan_in: 2 * self.mhi_features + self.traj_features,
                fan_out: self.head_hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                fan_in: self.head_hidden,
                fan_out: n_classes,
            },
            LayerSpec::SoftmaxHead,
        ]
    }
}

/// Flattened network inputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierInput {
    pub mhi1: Vec<f64>,
    pub mhi2: Vec<f64>,
    pub traj: Vec<f64>,
}

impl ClassifierInput {
    pub fn new(
        mhi1: &MotionHistoryImage,
        mhi2: &MotionHistoryImage,
        ego_traj: &Trajectory,
    ) -> Result<Self> {
        ego_traj.check_grid(&input_offsets())?;
        Ok(Self {
            mhi1: mhi1.data().iter().map(|&v| v as f64).collect(),
            mhi2: mhi2.data().iter().map(|&v| v as f64).collect(),
            traj: ego_traj.flatten(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSample {
    pub input: ClassifierInput,
    /// Class index within the sub-machine.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub machine: SubMachine,
    pub mhi_encoder_1: Network,
    pub mhi_encoder_2: Network,
    pub traj_encoder: Network,
    pub head: Network,
}

impl Trainable for ClassifierModel {
    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.mhi_encoder_1.params_mut(),
            self.mhi_encoder_2.params_mut(),
            self.traj_encoder.params_mut(),
            self.head.params_mut(),
        ]
    }
}

/// Names under which the four networks are stored in a bundle file.
pub const NETWORK_NAMES: [&str; 4] = ["mhi_encoder_1", "mhi_encoder_2", "traj_encoder", "head"];

impl ClassifierModel {
    pub fn zeros(machine: SubMachine, arch: &ClassifierArchitecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            machine,
            mhi_encoder_1: Network::new(arch.mhi_encoder())?,
            mhi_encoder_2: Network::new(arch.mhi_encoder())?,
            traj_encoder: Network::new(arch.traj_encoder())?,
            head: Network::new(arch.head(machine.n_classes()))?,
        })
    }

    pub fn init(
        machine: SubMachine,
        arch: &ClassifierArchitecture,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            machine,
            mhi_encoder_1: Network::init_he(arch.mhi_encoder(), rng)?,
            mhi_encoder_2: Network::init_he(arch.mhi_encoder(), rng)?,
            traj_encoder: Network::init_he(arch.traj_encoder(), rng)?,
            head: Network::init_he(arch.head(machine.n_classes()), rng)?,
        })
    }

    pub fn from_networks(machine: SubMachine, mut nets: Vec<(String, Network)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Network> {
            let i = nets
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::MalformedInput(format!("bundle lacks network '{name}'")))?;
            Ok(nets.swap_remove(i).1)
        };
        let model = Self {
            machine,
            mhi_encoder_1: take(NETWORK_NAMES[0])?,
            mhi_encoder_2: take(NETWORK_NAMES[1])?,
            traj_encoder: take(NETWORK_NAMES[2])?,
            head: take(NETWORK_NAMES[3])?,
        };
        let features = model.mhi_encoder_1.output_len()
            + model.mhi_encoder_2.output_len()
            + model.traj_encoder.output_len();
        if model.head.input_len() != features
            || model.head.output_len() != machine.n_classes()
            || model.traj_encoder.input_len() != INPUT_WIDTH
        {
            return Err(Error::MalformedInput(format!(
                "classifier networks do not fit together for '{machine}'"
            )));
        }
        Ok(model)
    }

    pub fn networks(&self) -> [(&'static str, &Network); 4] {
        [
            (NETWORK_NAMES[0], &self.mhi_encoder_1),
            (NETWORK_NAMES[1], &self.mhi_encoder_2),
            (NETWORK_NAMES[2], &self.traj_encoder),
            (NETWORK_NAMES[3], &self.head),
        ]
    }

    fn check(&self, input: &ClassifierInput) -> Result<()> {
        let ok = input.mhi1.len() == self.mhi_encoder_1.input_len()
            && input.mhi2.len() == self.mhi_encoder_2.input_len()
            && input.traj.len() == self.traj_encoder.input_len();
        if !ok {
            return Err(Error::MalformedInput(format!(
                "classifier expects inputs of {}/{}/{} values, got {}/{}/{}",
                self.mhi_encoder_1.input_len(),
                self.mhi_encoder_2.input_len(),
                self.traj_encoder.input_len(),
                input.mhi1.len(),
                input.mhi2.len(),
                input.traj.len()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, input: &ClassifierInput) -> Result<Vec<f64>> {
        self.check(input)?;
        let mut h = self.mhi_encoder_1.forward(&input.mhi1)?;
        h.extend(self.mhi_encoder_2.forward(&input.mhi2)?);
        h.extend(self.traj_encoder.forward(&input.traj)?);
        self.head.forward(&h)
    }

    /// Cross-entropy for one sample; adds the parameter gradient into `grad`
    /// (laid out encoder 1, encoder 2, trajectory encoder, head) when given.
    pub fn loss(&self, sample: &ClassifierSample, grad: Option<&mut [f64]>) -> Result<f64> {
        self.check(&sample.input)?;
        let n = self.machine.n_classes();
        if sample.label >= n {
            return Err(Error::MalformedInput(format!(
                "label {} out of range for '{}'",
                sample.label, self.machine
            )));
        }
        let t1 = self.mhi_encoder_1.forward_trace(&sample.input.mhi1)?;
        let t2 = self.mhi_encoder_2.forward_trace(&sample.input.mhi2)?;
        let t3 = self.traj_encoder.forward_trace(&sample.input.traj)?;
        let mut h = t1.output().to_vec();
        h.extend_from_slice(t2.output());
        h.extend_from_slice(t3.output());
        let th = self.head.forward_trace(&h)?;
        let p = th.output();
        let label = LabelVector::one_hot(self.machine, sample.label);
        let loss = cross_entropy(p, &label)?;
        if let Some(grad) = grad {
            let mut upstream = vec![0.0; n];
            let pk = p[sample.label];
            if pk >= PROB_FLOOR {
                upstream[sample.label] = -1.0 / pk;
            }
            let sizes = [
                self.mhi_encoder_1.param_count(),
                self.mhi_encoder_2.param_count(),
                self.traj_encoder.param_count(),
            ];
            let (g1, rest) = grad.split_at_mut(sizes[0]);
            let (g2, rest) = rest.split_at_mut(sizes[1]);
            let (g3, gh) = rest.split_at_mut(sizes[2]);
            let dh = self.head.backward_trace(&th, &upstream, gh)?;
            let (d1, rest) = dh.split_at(t1.output().len());
            let (d2, d3) = rest.split_at(t2.output().len());
            self.mhi_encoder_1.backward_trace(&t1, d1, g1)?;
            self.mhi_encoder_2.backward_trace(&t2, d2, g2)?;
            self.traj_encoder.backward_trace(&t3, d3, g3)?;
        }
        Ok(loss)
    }

    pub fn mean_loss(&self, samples: &[ClassifierSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("no samples to evaluate".into()));
        }
        let mut sum = 0.0;
        for s in samples {
            sum += self.loss(s, None)?;
        }
        Ok(sum / samples.len() as f64)
    }
}

/// Softmax probabilities over the sub-machine's classes.
pub fn classify(
    model: &ClassifierModel,
    mhi1: &MotionHistoryImage,
    mhi2: &MotionHistoryImage,
    ego_traj: &Trajectory,
) -> Result<Vec<f64>> {
    model.predict(&ClassifierInput::new(mhi1, mhi2, ego_traj)?)
}

/// `−Σ l_s ln max(p_s, 1e-12)`
pub fn cross_entropy(p: &[f64], l: &LabelVector) -> Result<f64> {
    if p.len() != l.values.len() {
        return Err(Error::MalformedInput(format!(
            "{} probabilities for {} labels",
            p.len(),
            l.values.len()
        )));
    }
    Ok(-p
        .iter()
        .zip(&l.values)
        .map(|(&p, &l)| {
            if l == 0.0 {
                0.0
            } else {
                l * p.max(PROB_FLOOR).ln()
            }
        })
        .sum::<f64>())
}

/// Training metadata stored next to a classifier bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetadata {
    pub machine: SubMachine,
    pub seed: u64,
    pub architecture: ClassifierArchitecture,
    pub train: TrainConfig,
    pub best_step: usize,
    pub use_calibration: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: ClassifierModel,
    pub log: Vec<LogEntry>,
    pub best_step: usize,
    pub best_validation_loss: f64,
}

/// Cross-entropy training with periodic validation; returns the checkpoint
/// with the lowest validation loss.
pub fn train_classifier(
    machine: SubMachine,
    train: &[ClassifierSample],
    validation: &[ClassifierSample],
    arch: &ClassifierArchitecture,
    config: &TrainConfig,
) -> Result<TrainedClassifier> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::InsufficientData(format!(
            "classifier '{machine}' needs training and validation samples ({} / {})",
            train.len(),
            validation.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ClassifierModel::init(machine, arch, &mut rng)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut log = Vec::new();
    let (mut running, mut since) = (0.0, 0usize);
    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 1..=config.steps {
        batch.clear();
        for _ in 0..config.batch_size {
            batch.push(&train[rng.random_range(0..train.len())]);
        }
        running += train_step(&mut model, &batch, |m, s, g| m.loss(s, Some(g)), &mut adam)?;
        since += 1;
        if step % config.validation_interval == 0 {
            let v = model.mean_loss(validation)?;
            if !v.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            log.push(LogEntry {
                step,
                train_loss: running / since as f64,
                validation_loss: v,
            });
            (running, since) = (0.0, 0);
            if v < best.2 {
                best = (model.clone(), step, v);
            }
        }
    }
    Ok(TrainedClassifier {
        model: best.0,
        log,
        best_step: best.1,
        best_validation_loss: best.2,
    })
}

/// Monotone piecewise-linear map fitted by isotonic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotonicFit {
    /// `(breakpoint, value)`, breakpoints strictly increasing, values
    /// non-decreasing.
    pub points: Vec<(f64, f64)>,
}

impl IsotonicFit {
    pub fn identity() -> Self {
        Self {
            points: vec![(0.0, 0.0), (1.0, 1.0)],
        }
    }

    pub fn from_points(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::MalformedInput(
                "isotonic fit without breakpoints".into(),
            ));
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0) || w[1].1 < w[0].1 {
                return Err(Error::MalformedInput(
                    "isotonic breakpoints must increase and values must not decrease".into(),
                ));
            }
        }
        if points.iter().any(|&(_, v)| !(0.0..=1.0).contains(&v)) {
            return Err(Error::MalformedInput(
                "isotonic values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { points })
    }

    /// Linear interpolation between breakpoints, constant beyond the ends.
    pub fn eval(&self, x: f64) -> f64 {
        let pts = &self.points;
        let first = pts[0];
        let last = pts[pts.len() - 1];
        if x <= first.0 {
            return first.1;
        }
        if x >= last.0 {
            return last.1;
        }
        let k = pts.partition_point(|&(b, _)| b <= x);
        let (x0, y0) = pts[k - 1];
        let (x1, y1) = pts[k];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    /// Fitted value of every block, one entry per input pair in sorted
    /// order.
    pub fn fitted_values(pairs: &[(f64, bool)]) -> Vec<f64> {
        pav(pairs)
            .iter()
            .flat_map(|b| std::iter::repeat_n(b.value(), b.count))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    x_min: f64,
    x_max: f64,
    sum: f64,
    count: usize,
}

impl Block {
    fn value(&self) -> f64 {
        self.sum / self.count as f64
    }
}

/// Pool-adjacent-violators on pairs sorted by score. Equal scores always
/// share a block.
fn pav(pairs: &[(f64, bool)]) -> Vec<Block> {
    let mut sorted: Vec<(f64, f64)> = pairs
        .iter()
        .map(|&(x, y)| (x, if y { 1.0 } else { 0.0 }))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut blocks: Vec<Block> = Vec::with_capacity(sorted.len());
    for (x, y) in sorted {
        match blocks.last_mut() {
            Some(b) if b.x_max == x => {
                b.sum += y;
                b.count += 1;
            }
            _ => blocks.push(Block {
                x_min: x,
                x_max: x,
                sum: y,
                count: 1,
            }),
        }
        while blocks.len() >= 2 {
            let n = blocks.len();
            if blocks[n - 2].value() <= blocks[n - 1].value() {
                break;
            }
            let b = blocks.pop().expect("two blocks");
            let a = blocks.last_mut().expect("two blocks");
            a.x_max = b.x_max;
            a.sum += b.sum;
            a.count += b.count;
        }
    }
    blocks
}

/// Least-squares monotone fit of binary outcomes against scores.
pub fn fit_isotonic(pairs: &[(f64, bool)]) -> Result<IsotonicFit> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "isotonic regression needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::MalformedInput("non-finite score".into()));
    }
    let mut points = Vec::new();
    for b in pav(pairs) {
        points.push((b.x_min, b.value()));
        if b.x_max > b.x_min {
            points.push((b.x_max, b.value()));
        }
    }
    Ok(IsotonicFit { points })
}

/// One isotonic map per class of a sub-machine.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrator {
    pub machine: SubMachine,
    /// Empty when unfitted.
    pub classes: Vec<IsotonicFit>,
}

impl Calibrator {
    pub fn unfitted(machine: SubMachine) -> Self {
        Self {
            machine,
            classes: Vec::new(),
        }
    }

    pub fn identity(machine: SubMachine) -> Self {
        Self {
            machine,
            classes: vec![IsotonicFit::identity(); machine.n_classes()],
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.classes.len() == self.machine.n_classes()
    }

    /// `{class: [[breakpoint, value], ...]}`
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, Vec<[f64; 2]>> = self
            .machine
            .classes()
            .iter()
            .zip(&self.classes)
            .map(|(name, fit)| (*name, fit.points.iter().map(|&(b, v)| [b, v]).collect()))
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(machine: SubMachine, json: &str) -> Result<Self> {
        let mut map: BTreeMap<String, Vec<[f64; 2]>> = serde_json::from_str(json)?;
        let mut classes = Vec::new();
        for name in machine.classes() {
            let pts = map
                .remove(*name)
                .ok_or_else(|| Error::MalformedInput(format!("calibrator lacks class '{name}'")))?;
            classes.push(IsotonicFit::from_points(
                pts.into_iter().map(|[b, v]| (b, v)).collect(),
            )?);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::MalformedInput(format!(
                "calibrator has unknown class '{extra}' for '{machine}'"
            )));
        }
        Ok(Self { machine, classes })
    }
}

/// One-vs-rest isotonic fit for every class.
pub fn fit_calibrator(
    machine: SubMachine,
    probs: &[Vec<f64>],
    labels: &[usize],
) -> Result<Calibrator> {
    if probs.len() != labels.len() {
        return Err(Error::MalformedInput(
            "probabilities and labels differ in length".into(),
        ));
    }
    let n = machine.n_classes();
    if probs.iter().any(|p| p.len() != n) {
        return Err(Error::MalformedInput(format!(
            "expected {n} probabilities per sample"
        )));
    }
    let classes = (0..n)
        .map(|k| {
            let pairs: Vec<(f64, bool)> = probs
                .iter()
                .zip(labels)
                .map(|(p, &l)| (p[k], l == k))
                .collect();
            fit_isotonic(&pairs)
        })
        .collect::<Result<_>>()?;
    Ok(Calibrator { machine, classes })
}

/// Maps every class through its isotonic fit and renormalises. When every
/// class maps to zero the input is returned unchanged.
pub fn apply_calibration(cal: &Calibrator, p: &[f64]) -> Result<Vec<f64>> {
    if !cal.is_fitted() {
        return Err(Error::InvalidState(format!(
            "calibrator for '{}' is not fitted",
            cal.machine
        )));
    }
    if p.len() != cal.classes.len() {
        return Err(Error::MalformedInput(format!(
            "{} probabilities for {} calibrated classes",
            p.len(),
            cal.classes.len()
        )));
    }
    let raw: Vec<f64> = p
        .iter()
        .zip(&cal.classes)
        .map(|(&x, f)| f.eval(x))
        .collect();
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Ok(p.to_vec());
    }
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Count-weighted mean |predicted − observed| over a 10-bin one-vs-rest
/// Q-Q curve.
pub fn qq_deviation(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let pairs: Vec<(f64, bool)> = probs
        .iter()
        .zip(labels)
        .flat_map(|(p, &l)| p.iter().enumerate().map(move |(k, &v)| (v, k == l)))
        .collect();
    let edges: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let curve = qq_curve(&pairs, &edges)?;
    let total: usize = curve.iter().map(|q| q.count).sum();
    if total == 0 {
        return Err(Error::InsufficientData("empty Q-Q curve".into()));
    }
    Ok(curve
        .iter()
        .map(|q| q.count as f64 * (q.predicted - q.observed).abs())
        .sum::<f64>()
        / total as f64)
}

/// Calibrator fitted on the whole validation split plus the decision
/// whether to use it.
#[derive(Debug, Clone)]
pub struct CalibrationChoice {
    pub calibrator: Calibrator,
    pub use_calibration: bool,
    pub deviation_uncalibrated: f64,
    pub deviation_calibrated: f64,
}

/// Fits on the even-indexed half of the validation predictions, compares Q-Q
/// deviation on the odd half, then refits on all of it.
pub fn choose_calibration(
    machine: SubMachine,
    probs: &[Vec<f64>],
    labels: &[usize],
) -> Result<CalibrationChoice> {
    if probs.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least 4 validation samples, got {}",
            probs.len()
        )));
    }
    let split = |parity: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
        probs
            .iter()
            .zip(labels)
            .enumerate()
            .filter(|(i, _)| i % 2 == parity)
            .map(|(_, (p, &l))| (p.clone(), l))
            .unzip()
    };
    let (fit_p, fit_l) = split(0);
    let (hold_p, hold_l) = split(1);
    let half = fit_calibrator(machine, &fit_p, &fit_l)?;
    let calibrated: Vec<Vec<f64>> = hold_p
        .iter()
        .map(|p| apply_calibration(&half, p))
        .collect::<Result<_>>()?;
    let deviation_uncalibrated = qq_deviation(&hold_p, &hold_l)?;
    let deviation_calibrated = qq_deviation(&calibrated, &hold_l)?;
    Ok(CalibrationChoice {
        calibrator: fit_calibrator(machine, probs, labels)?,
        use_calibration: deviation_calibrated < deviation_uncalibrated,
        deviation_uncalibrated,
        deviation_calibrated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Frame, Point2, INPUT_LEN};

    fn tiny_arch() -> ClassifierArchitecture {
        ClassifierArchitecture {
            mhi_width: 8,
            mhi_height: 8,
            conv_channels: vec![2, 3],
            mhi_features: 4,
            traj_hidden: 6,
            traj_features: 3,
            head_hidden: 5,
        }
    }

    fn ego_standstill() -> Trajectory {
        Trajectory::from_positions(Frame::Ego, &input_offsets(), &[Point2::ORIGIN; INPUT_LEN])
            .unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let l0 = LabelVector::one_hot(SubMachine::Wm, 0);
        let l1 = LabelVector::one_hot(SubMachine::Wm, 1);
        assert_eq!(cross_entropy(&[1.0, 0.0], &l0).unwrap(), 0.0);
        assert!((cross_entropy(&[0.5, 0.5], &l0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&[0.25, 0.75], &l1).unwrap() + 0.75f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&[0.0, 1.0], &l0).unwrap() - 1e12f64.ln()).abs() < 1e-9);
        assert!(cross_entropy(&[0.2, 0.3, 0.5], &l0).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let m = ClassifierModel::zeros(SubMachine::Ssm, &tiny_arch()).unwrap();
        let mhi = MotionHistoryImage::zeros(8, 8);
        let p = classify(&m, &mhi, &mhi, &ego_standstill()).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn classify_rejects_wrong_mhi_size() {
        let m = ClassifierModel::zeros(SubMachine::Wm, &tiny_arch()).unwrap();
        let small = MotionHistoryImage::zeros(4, 4);
        let ok = MotionHistoryImage::zeros(8, 8);
        assert!(matches!(
            classify(&m, &small, &ok, &ego_standstill()),
            Err(Error::MalformedInput(_))
        ));
    }

    #[test]
    fn isotonic_examples() {
        let mono = [(0.1, false), (0.3, false), (0.6, true), (0.9, true)];
        assert_eq!(IsotonicFit::fitted_values(&mono), vec![0.0, 0.0, 1.0, 1.0]);
        let viol = [(0.2, false), (0.5, true), (0.8, false)];
        assert_eq!(IsotonicFit::fitted_values(&viol), vec![0.0, 0.5, 0.5]);
        let fit = fit_isotonic(&viol).unwrap();
        assert_eq!(fit.eval(0.2), 0.0);
        assert_eq!(fit.eval(0.65), 0.5);
        assert!((fit.eval(0.35) - 0.25).abs() < 1e-12);
        let ones = fit_isotonic(&[(0.1, true), (0.7, true), (0.4, true)]).unwrap();
        for x in [0.0, 0.3, 1.0] {
            assert_eq!(ones.eval(x), 1.0);
        }
        assert!(fit_isotonic(&[(0.5, true)]).is_err());
    }

    #[test]
    fn calibration_examples() {
        let id = Calibrator::identity(SubMachine::Ssm);
        let p = [0.2, 0.5, 0.3];
        let out = apply_calibration(&id, &p).unwrap();
        for (a, b) in out.iter().zip(p) {
            assert!((a - b).abs() < 1e-15);
        }

        let halving = Calibrator {
            machine: SubMachine::Wm,
            classes: vec![
                IsotonicFit::from_points(vec![(0.0, 0.0), (1.0, 0.5)]).unwrap(),
                IsotonicFit::identity(),
            ],
        };
        let out = apply_calibration(&halving, &[0.8, 0.2]).unwrap();
        assert!((out[0] - 2.0 / 3.0).abs() < 1e-12 && (out[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            apply_calibration(&id, &[0.0, 1.0, 0.0]).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert!(matches!(
            apply_calibration(&Calibrator::unfitted(SubMachine::Wm), &[0.5, 0.5]),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn calibrator_json_round_trip() {
        let cal = Calibrator {
            machine: SubMachine::Lr,
            classes: vec![
                IsotonicFit::from_points(vec![(0.1, 0.0), (0.4, 0.25), (0.9, 1.0)]).unwrap(),
                IsotonicFit::identity(),
            ],
        };
        let json = cal.to_json().unwrap();
        assert!(json.contains("\"left\""));
        assert_eq!(Calibrator::from_json(SubMachine::Lr, &json).unwrap(), cal);
        assert!(Calibrator::from_json(SubMachine::Wm, &json).is_err());
    }

    use proptest::prelude::{any, prop, prop_assert, proptest};

    proptest! {
        #[test]
        fn isotonic_is_monotone_and_bounded(pairs in prop::collection::vec((0.0..1.0f64, any::<bool>()), 2..60)) {
            let fit = fit_isotonic(&pairs).unwrap();
            for w in fit.points.windows(2) {
                prop_assert!(w[0].0 < w[1].0);
                prop_assert!(w[0].1 <= w[1].1);
            }
            for &(_, v) in &fit.points {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn calibration_does_not_raise_brier_on_fit_set(pairs in prop::collection::vec((0.0..1.0f64, any::<bool>()), 2..80)) {
            let fit = fit_isotonic(&pairs).unwrap();
            let brier = |f: &dyn Fn(f64) -> f64| {
                pairs.iter().map(|&(x, y)| (f(x) - if y { 1.0 } else { 0.0 }).powi(2)).sum::<f64>()
            };
            prop_assert!(brier(&|x| fit.eval(x)) <= brier(&|x| x) + 1e-12);
        }

        #[test]
        fn cross_entropy_non_negative(a in 0.0..1.0f64, k in 0usize..2) {
            let l = LabelVector::one_hot(SubMachine::Wm, k);
            prop_assert!(cross_entropy(&[a, 1.0 - a], &l).unwrap() >= 0.0);
        }

        #[test]
        fn classify_output_is_distribution(seed in any::<u64>(), scale in 0.0..5.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = ClassifierModel::init(SubMachine::Ssm, &tiny_arch(), &mut rng).unwrap();
            let input = ClassifierInput {
                mhi1: (0..128).map(|_| rng.random::<f64>()).collect(),
                mhi2: (0..128).map(|_| rng.random::<f64>()).collect(),
                traj: (0..INPUT_WIDTH).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
            };
            let p = m.predict(&input).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }
    }
}
