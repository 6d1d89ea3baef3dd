//! Small feed-forward networks with hand-written backpropagation.
//!
//! A [`Network`] is a stack of [`LayerSpec`]s over flat `f64` vectors. Image
//! tensors are flattened channel-planar (`[c][row][col]`). All parameters of
//! a network live in one flat vector so the optimizer can treat them
//! uniformly; each weighted layer owns a `(weights, biases)` slice of it.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel size of the convolution stages.
pub const KERNEL: usize = 3;
/// Stride of the convolution stages.
pub const STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerSpec {
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
    /// 3x3 convolution, stride 2, zero padding 1.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        in_height: usize,
        in_width: usize,
    },
    Relu,
    Flatten,
    SoftmaxHead,
    LinearHead,
}

fn conv_out(n: usize) -> usize {
    (n + 2 - KERNEL) / STRIDE + 1
}

impl LayerSpec {
    /// Output width for a given input width, or `None` when the shapes do
    /// not compose.
    fn output_len(&self, input: usize) -> Option<usize> {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => (input == fan_in).then_some(fan_out),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                in_height,
                in_width,
            } => (input == in_channels * in_height * in_width)
                .then_some(out_channels * conv_out(in_height) * conv_out(in_width)),
            LayerSpec::Relu
            | LayerSpec::Flatten
            | LayerSpec::SoftmaxHead
            | LayerSpec::LinearHead => Some(input),
        }
    }

    fn input_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { fan_in, .. } => Some(fan_in),
            LayerSpec::Conv2d {
                in_channels,
                in_height,
                in_width,
                ..
            } => Some(in_channels * in_height * in_width),
            _ => None,
        }
    }

    /// `(weight count, bias count)`.
    fn param_shape(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => (fan_in * fan_out, fan_out),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                ..
            } => (out_channels * in_channels * KERNEL * KERNEL, out_channels),
            _ => (0, 0),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { fan_in, .. } => fan_in,
            LayerSpec::Conv2d { in_channels, .. } => in_channels * KERNEL * KERNEL,
            _ => 0,
        }
    }

    fn code(&self) -> (u8, [u32; 4]) {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => (0, [fan_in as u32, fan_out as u32, 0, 0]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                in_height,
                in_width,
            } => (
                1,
                [
                    in_channels as u32,
                    out_channels as u32,
                    in_height as u32,
                    in_width as u32,
                ],
            ),
            LayerSpec::Relu => (2, [0; 4]),
            LayerSpec::Flatten => (3, [0; 4]),
            LayerSpec::SoftmaxHead => (4, [0; 4]),
            LayerSpec::LinearHead => (5, [0; 4]),
        }
    }

    fn from_code(kind: u8, d: [u32; 4]) -> Result<Self> {
        let d = d.map(|v| v as usize);
        Ok(match kind {
            0 => LayerSpec::Dense {
                fan_in: d[0],
                fan_out: d[1],
            },
            1 => LayerSpec::Conv2d {
                in_channels: d[0],
                out_channels: d[1],
                in_height: d[2],
                in_width: d[3],
            },
            2 => LayerSpec::Relu,
            3 => LayerSpec::Flatten,
            4 => LayerSpec::SoftmaxHead,
            5 => LayerSpec::LinearHead,
            other => return Err(Error::Format(format!("unknown layer kind {other}"))),
        })
    }
}

/// Layer stack plus its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    /// Start of each layer's parameters in `params`.
    offsets: Vec<usize>,
    params: Vec<f64>,
    input_len: usize,
    output_len: usize,
}

/// Inputs to every layer from one forward pass; the last entry is the output.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace is never empty")
    }
}

impl Network {
    /// Zero-initialised network; fails when adjacent shapes do not compose.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let first = layers
            .iter()
            .find_map(|l| l.input_len())
            .ok_or_else(|| Error::MalformedInput("network needs a weighted layer".into()))?;
        let mut len = first;
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for (i, l) in layers.iter().enumerate() {
            len = l.output_len(len).ok_or_else(|| {
                Error::MalformedInput(format!("layer {i} ({l:?}) does not accept {len} inputs"))
            })?;
            offsets.push(total);
            let (w, b) = l.param_shape();
            total += w + b;
        }
        Ok(Self {
            layers,
            offsets,
            params: vec![0.0; total],
            input_len: first,
            output_len: len,
        })
    }

    /// He-style uniform initialisation `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn init_he(layers: Vec<LayerSpec>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::new(layers)?;
        for i in 0..net.layers.len() {
            let (w, _) = net.layers[i].param_shape();
            if w == 0 {
                continue;
            }
            let bound = (6.0 / net.layers[i].fan_in() as f64).sqrt();
            let off = net.offsets[i];
            for p in &mut net.params[off..off + w] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Weights and biases of layer `i` (empty for parameter-free layers).
    pub fn layer_params_mut(&mut self, i: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.layers[i].param_shape();
        let off = self.offsets[i];
        let (weights, rest) = self.params[off..off + w + b].split_at_mut(w);
        (weights, rest)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_len {
            return Err(Error::MalformedInput(format!(
                "network expects {} inputs, got {}",
                self.input_len,
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for i in 0..self.layers.len() {
            x = self.layer_forward(i, &x);
        }
        Ok(x)
    }

    /// Forward pass keeping every intermediate activation for backprop.
    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for i in 0..self.layers.len() {
            let next = self.layer_forward(i, activations.last().unwrap());
            activations.push(next);
        }
        Ok(Trace { activations })
    }

    /// Gradient of a scalar loss w.r.t. all parameters, given the loss
    /// gradient w.r.t. the network output.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(input)?;
        let mut grad = vec![0.0; self.params.len()];
        self.backward_trace(&trace, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Sign of every ReLU input in a forward pass. Two parameter settings
    /// with different patterns lie on opposite sides of a kink.
    pub fn relu_pattern(&self, input: &[f64]) -> Result<Vec<bool>> {
        let trace = self.forward_trace(input)?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu))
            .flat_map(|(i, _)| trace.activations[i].iter().map(|&v| v > 0.0))
            .collect())
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// w.r.t. the network input.
    pub fn backward_trace(
        &self,
        trace: &Trace,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.output_len {
            return Err(Error::MalformedInput(format!(
                "upstream gradient has {} entries, network outputs {}",
                upstream.len(),
                self.output_len
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::MalformedInput(
                "gradient buffer size mismatch".into(),
            ));
        }
        let mut g = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            g = self.layer_backward(
                i,
                &trace.activations[i],
                &trace.activations[i + 1],
                &g,
                grad,
            );
        }
        Ok(g)
    }

    fn layer_forward(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let off = self.offsets[i];
        match self.layers[i] {
            LayerSpec::Dense { fan_in, fan_out } => {
                let w = &self.params[off..off + fan_in * fan_out];
                let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
                w.chunks_exact(fan_in)
                    .zip(b)
                    .map(|(row, bias)| bias + dot(row, x))
                    .collect()
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                in_height,
                in_width,
            } => {
                let (wn, _) = self.layers[i].param_shape();
                let w = &self.params[off..off + wn];
                let b = &self.params[off + wn..off + wn + out_channels];
                conv_forward(x, w, b, in_channels, out_channels, in_height, in_width)
            }
            LayerSpec::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            LayerSpec::Flatten | LayerSpec::LinearHead => x.to_vec(),
            LayerSpec::SoftmaxHead => softmax(x),
        }
    }

    fn layer_backward(
        &self,
        i: usize,
        x: &[f64],
        y: &[f64],
        g: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let off = self.offsets[i];
        match self.layers[i] {
            LayerSpec::Dense { fan_in, fan_out } => {
                let w = &self.params[off..off + fan_in * fan_out];
                let (gw, gb) =
                    grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                let mut dx = vec![0.0; fan_in];
                for j in 0..fan_out {
                    let gj = g[j];
                    if gj == 0.0 {
                        continue;
                    }
                    gb[j] += gj;
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    let grow = &mut gw[j * fan_in..(j + 1) * fan_in];
                    for k in 0..fan_in {
                        grow[k] += gj * x[k];
                        dx[k] += gj * row[k];
                    }
                }
                dx
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                in_height,
                in_width,
            } => {
                let (wn, _) = self.layers[i].param_shape();
                let w = &self.params[off..off + wn];
                let (gw, gb) = grad[off..off + wn + out_channels].split_at_mut(wn);
                conv_backward(
                    x,
                    w,
                    g,
                    gw,
                    gb,
                    in_channels,
                    out_channels,
                    in_height,
                    in_width,
                )
            }
            LayerSpec::Relu => x
                .iter()
                .zip(g)
                .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                .collect(),
            LayerSpec::Flatten | LayerSpec::LinearHead => g.to_vec(),
            LayerSpec::SoftmaxHead => {
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - gy)).collect()
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn conv_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    ic: usize,
    oc: usize,
    ih: usize,
    iw: usize,
) -> Vec<f64> {
    let (oh, ow) = (conv_out(ih), conv_out(iw));
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(b[o]);
        for c in 0..ic {
            let kernel = &w[(o * ic + c) * 9..(o * ic + c + 1) * 9];
            let input = &x[c * ih * iw..(c + 1) * ih * iw];
            for oy in 0..oh {
                for ky in 0..KERNEL {
                    let iy = (oy * STRIDE + ky) as isize - 1;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let irow = &input[iy as usize * iw..(iy as usize + 1) * iw];
                    let orow = &mut plane[oy * ow..(oy + 1) * ow];
                    for kx in 0..KERNEL {
                        let k = kernel[ky * KERNEL + kx];
                        for (ox, o_v) in orow.iter_mut().enumerate() {
                            let ix = (ox * STRIDE + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < iw {
                                *o_v += k * irow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    ic: usize,
    oc: usize,
    ih: usize,
    iw: usize,
) -> Vec<f64> {
    let (oh, ow) = (conv_out(ih), conv_out(iw));
    let mut dx = vec![0.0; ic * ih * iw];
    for o in 0..oc {
        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
        gb[o] += gplane.iter().sum::<f64>();
        for c in 0..ic {
            let kbase = (o * ic + c) * 9;
            let input = &x[c * ih * iw..(c + 1) * ih * iw];
            let dinput = &mut dx[c * ih * iw..(c + 1) * ih * iw];
            for oy in 0..oh {
                for ky in 0..KERNEL {
                    let iy = (oy * STRIDE + ky) as isize - 1;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let grow = &gplane[oy * ow..(oy + 1) * ow];
                    for kx in 0..KERNEL {
                        let k = w[kbase + ky * KERNEL + kx];
                        let mut acc = 0.0;
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * STRIDE + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < iw {
                                let idx = iy * iw + ix as usize;
                                acc += gv * input[idx];
                                dinput[idx] += gv * k;
                            }
                        }
                        gw[kbase + ky * KERNEL + kx] += acc;
                    }
                }
            }
        }
    }
    dx
}

/// Anything with parameters the optimizer can update. Gradients are passed
/// as one flat vector laid out group after group.
pub trait Trainable {
    fn param_groups_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&mut self) -> usize {
        self.param_groups_mut().iter().map(|g| g.len()).sum()
    }
}

impl Trainable for Network {
    fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.params]
    }
}

/// Training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub validation_interval: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            validation_interval: 500,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be positive".into()));
        }
        if self.validation_interval == 0 || self.validation_interval > self.steps {
            return Err(Error::InvalidParameter(format!(
                "validation interval {} must be in 1..={}",
                self.validation_interval, self.steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(
                "learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<T: Trainable + ?Sized>(&mut self, model: &mut T, grad: &[f64]) -> Result<()> {
        let mut groups = model.param_groups_mut();
        let total: usize = groups.iter().map(|g| g.len()).sum();
        if grad.len() != total {
            return Err(Error::MalformedInput(format!(
                "gradient has {} entries for {} parameters",
                grad.len(),
                total
            )));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; total];
            self.v = vec![0.0; total];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut k = 0;
        for group in groups.iter_mut() {
            for p in group.iter_mut() {
                let g = grad[k];
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                k += 1;
            }
        }
        Ok(())
    }
}

/// One optimisation step on the mean loss of `batch`.
///
/// `loss` returns the per-example loss and adds its parameter gradient into
/// the provided buffer. Returns the mean batch loss.
pub fn train_step<T, B>(
    model: &mut T,
    batch: &[B],
    loss: impl Fn(&T, &B, &mut [f64]) -> Result<f64>,
    optimizer: &mut Adam,
) -> Result<f64>
where
    T: Trainable,
{
    let n = model.param_count();
    let mut grad = vec![0.0; n];
    let mut total = 0.0;
    for example in batch {
        total += loss(model, example, &mut grad)?;
    }
    let step = optimizer.steps_taken() as usize;
    let mean = total / batch.len().max(1) as f64;
    if !mean.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::TrainingDiverged { step });
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    for g in &mut grad {
        *g *= scale;
    }
    optimizer.step(model, &grad)?;
    Ok(mean)
}

const MAGIC: &[u8; 4] = b"IFNN";
const FORMAT_VERSION: u32 = 1;

/// Writes named networks: magic `IFNN`, version, network count, then per
/// network its name, layer table and little-endian f64 parameters.
pub fn write_networks<W: Write>(mut w: W, nets: &[(&str, &Network)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(nets.len() as u32).to_le_bytes())?;
    for (name, net) in nets {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
        for l in &net.layers {
            let (kind, dims) = l.code();
            w.write_all(&[kind])?;
            for d in dims {
                w.write_all(&d.to_le_bytes())?;
            }
        }
        w.write_all(&(net.params.len() as u64).to_le_bytes())?;
        for p in &net.params {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_networks<R: Read>(mut r: R) -> Result<Vec<(String, Network)>> {
    let mut magic = [0; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an IFNN file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported IFNN version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let n_layers = read_u32(&mut r)?;
        let mut layers = Vec::with_capacity(n_layers as usize);
        for _ in 0..n_layers {
            let mut kind = [0; 1];
            r.read_exact(&mut kind)?;
            let mut dims = [0u32; 4];
            for d in &mut dims {
                *d = read_u32(&mut r)?;
            }
            layers.push(LayerSpec::from_code(kind[0], dims)?);
        }
        let mut net = Network::new(layers)?;
        let mut b = [0; 8];
        r.read_exact(&mut b)?;
        let n = u64::from_le_bytes(b) as usize;
        if n != net.params.len() {
            return Err(Error::Format(format!(
                "network '{name}' stores {n} parameters, layers need {}",
                net.params.len()
            )));
        }
        for p in &mut net.params {
            r.read_exact(&mut b)?;
            *p = f64::from_le_bytes(b);
        }
        out.push((name, net));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn dense(i: usize, o: usize) -> LayerSpec {
        LayerSpec::Dense {
            fan_in: i,
            fan_out: o,
        }
    }

    #[test]
    fn forward_examples() {
        let net = Network::new(vec![dense(3, 2), LayerSpec::LinearHead]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let mut id = Network::new(vec![dense(2, 2)]).unwrap();
        id.layer_params_mut(0)
            .0
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(id.forward(&[4.5, -1.0]).unwrap(), vec![4.5, -1.0]);

        let mut n = Network::new(vec![dense(1, 1)]).unwrap();
        n.params_mut().copy_from_slice(&[2.0, 1.0]);
        assert_eq!(n.forward(&[3.0]).unwrap(), vec![7.0]);
        assert!(matches!(
            n.forward(&[1.0, 2.0]),
            Err(Error::MalformedInput(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(Network::new(vec![dense(3, 4), dense(5, 2)]).is_err());
        let conv = LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 4,
            in_height: 8,
            in_width: 8,
        };
        let n = Network::new(vec![
            conv,
            LayerSpec::Relu,
            LayerSpec::Flatten,
            dense(64, 3),
        ])
        .unwrap();
        assert_eq!(n.output_len(), 3);
        assert_eq!(n.input_len(), 128);
    }

    #[test]
    fn backward_examples() {
        let mut n = Network::new(vec![dense(1, 1)]).unwrap();
        n.params_mut().copy_from_slice(&[0.7, -0.2]);
        assert_eq!(n.backward(&[3.0], &[0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(n.backward(&[3.0], &[1.0]).unwrap(), vec![3.0, 1.0]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut n = Network::init_he(vec![dense(3, 3)], &mut rng).unwrap();
        let before = n.params().to_vec();
        let mut adam = Adam::new(1e-2);
        train_step(&mut n, &[(); 4], |_, _, _| Ok(0.5), &mut adam).unwrap();
        assert_eq!(n.params(), before.as_slice());
    }

    #[test]
    fn quadratic_loss_decreases() {
        // loss = (w*x + b - 5)^2 at x = 1
        let mut n = Network::new(vec![dense(1, 1)]).unwrap();
        let mut adam = Adam::new(1e-2);
        let loss_fn = |net: &Network, _: &(), grad: &mut [f64]| {
            let y = net.forward(&[1.0])?[0];
            let g = net.backward(&[1.0], &[2.0 * (y - 5.0)])?;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
            Ok((y - 5.0).powi(2))
        };
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let l = train_step(&mut n, &[()], loss_fn, &mut adam).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn nan_loss_reports_step() {
        let mut n = Network::new(vec![dense(1, 1)]).unwrap();
        let mut adam = Adam::new(1e-3);
        train_step(&mut n, &[()], |_, _, _| Ok(1.0), &mut adam).unwrap();
        let err = train_step(&mut n, &[()], |_, _, _| Ok(f64::NAN), &mut adam).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { step: 1 }));
    }

    #[test]
    fn identical_seeds_identical_training() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut n = Network::init_he(vec![dense(2, 4), LayerSpec::Relu, dense(4, 1)], &mut rng)
                .unwrap();
            let mut adam = Adam::new(1e-2);
            let data: Vec<(f64, f64)> = (0..8)
                .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            for _ in 0..20 {
                train_step(
                    &mut n,
                    &data,
                    |net, &(a, b), grad| {
                        let y = net.forward(&[a, b])?[0];
                        let g = net.backward(&[a, b], &[2.0 * (y - a * b)])?;
                        grad.iter_mut().zip(g).for_each(|(x, v)| *x += v);
                        Ok((y - a * b).powi(2))
                    },
                    &mut adam,
                )
                .unwrap();
            }
            n.params().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ifnn_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 2,
            in_height: 4,
            in_width: 4,
        };
        let a = Network::init_he(
            vec![
                conv,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                dense(8, 2),
                LayerSpec::SoftmaxHead,
            ],
            &mut rng,
        )
        .unwrap();
        let b = Network::init_he(vec![dense(3, 1), LayerSpec::LinearHead], &mut rng).unwrap();
        let mut buf = Vec::new();
        write_networks(&mut buf, &[("a", &a), ("b", &b)]).unwrap();
        assert_eq!(&buf[..4], b"IFNN");
        let back = read_networks(buf.as_slice()).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b".to_string(), b)]);
        assert!(read_networks(&b"NOPE"[..]).is_err());
    }
}
