//! Minimal dense-network engine: batched forward pass with an activation
//! tape, exact reverse-mode gradients and an Adam optimizer.
//!
//! Hidden layers use leaky-ReLU, the output layer is linear (logits).
//! Weights are stored `out x in`, so a batch `X` (rows = samples) maps to
//! `X W^T + b`.
//!
//! # Binary model format (version 1, little endian)
//!
//! ```text
//! magic    4 bytes  "DCFN"
//! version  u32      1
//! slope    f64      leaky-ReLU negative slope
//! layers   u32      number of layers L
//! L times:
//!   in     u32
//!   out    u32
//!   act    u8       0 = leaky-ReLU, 1 = identity
//!   weight out*in f64, row-major
//!   bias   out f64
//! ```

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
const MAGIC: &[u8; 4] = b"DCFN";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    slope: f64,
}

/// Activations recorded by [`DenseNet::forward_batch`].
#[derive(Debug, Clone)]
pub struct Tape {
    widths: Vec<usize>,
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    /// Active input coordinates per sample when the input was given sparsely
    /// (`inputs[0]` is then empty).
    sparse: Option<Vec<Vec<usize>>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.pre.first().map_or(0, |x| x.nrows())
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&g| g == 0.0))
    }
}

/// `a b` in standard (row-major) layout.
fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let c = a.dot(&b);
    if c.is_standard_layout() {
        c
    } else {
        c.as_standard_layout().into_owned()
    }
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

impl DenseNet {
    /// He-initialized weights, biases uniform on `+-1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, slope: f64, rng: &mut R) -> Self {
        let mut net = Self::build(input, hidden, output, slope, |fan_in| {
            let z: f64 = StandardNormal.sample(rng);
            (2.0 / fan_in.max(1) as f64).sqrt() * z
        });
        for l in &mut net.layers {
            let bound = 1.0 / (l.input_width().max(1) as f64).sqrt();
            l.bias.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        }
        net
    }

    /// Network with every parameter set to zero.
    pub fn zeros(input: usize, hidden: &[usize], output: usize, slope: f64) -> Self {
        Self::build(input, hidden, output, slope, |_| 0.0)
    }

    fn build(input: usize, hidden: &[usize], output: usize, slope: f64, mut init: impl FnMut(usize) -> f64) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| init(fan_in));
                let activation = if i == last { Activation::Identity } else { Activation::LeakyRelu };
                Layer { weight, bias: Array1::zeros(fan_out), activation }
            })
            .collect();
        Self { layers, slope }
    }

    pub fn from_layers(layers: Vec<Layer>, slope: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Argument("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::WidthMismatch {
                    expected: pair[0].output_width(),
                    got: pair[1].input_width(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_width() {
                return Err(Error::WidthMismatch { expected: l.output_width(), got: l.bias.len() });
            }
        }
        Ok(Self { layers, slope })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_width)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(Layer::output_width));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_width() {
            return Err(Error::WidthMismatch { expected: self.input_width(), got: width });
        }
        Ok(())
    }

    /// Logits for a batch without recording a tape.
    pub fn predict_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut h = input.to_owned();
        for l in &self.layers {
            let mut z = matmul(h.view(), l.weight.t());
            z += &l.bias;
            if l.activation == Activation::LeakyRelu {
                let s = self.slope;
                z.mapv_inplace(|v| leaky(v, s));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(input.ncols())?;
        self.forward_from(input.to_owned(), None)
    }

    /// Forward pass for 0/1 inputs given as the active coordinates of each sample.
    pub fn forward_batch_sparse(&self, active: &[Vec<usize>]) -> Result<(Array2<f64>, Tape)> {
        self.check_active(active)?;
        self.forward_from(Array2::zeros((active.len(), 0)), Some(active.to_vec()))
    }

    /// Like [`Self::predict_batch`] for sparse 0/1 inputs.
    pub fn predict_batch_sparse(&self, active: &[Vec<usize>]) -> Result<Array2<f64>> {
        Ok(self.forward_batch_sparse(active)?.0)
    }

    fn check_active(&self, active: &[Vec<usize>]) -> Result<()> {
        let width = self.input_width();
        if let Some(&bad) = active.iter().flatten().find(|&&j| j >= width) {
            return Err(Error::WidthMismatch { expected: width, got: bad + 1 });
        }
        Ok(())
    }

    fn sparse_first_layer(&self, active: &[Vec<usize>]) -> Array2<f64> {
        let l = &self.layers[0];
        let wt = l.weight.t().as_standard_layout().to_owned();
        let mut z = Array2::zeros((active.len(), l.output_width()));
        for (mut row, cols) in z.rows_mut().into_iter().zip(active) {
            row.assign(&l.bias);
            for &j in cols {
                row += &wt.row(j);
            }
        }
        z
    }

    fn forward_from(&self, input: Array2<f64>, sparse: Option<Vec<Vec<usize>>>) -> Result<(Array2<f64>, Tape)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = input;
        for (i, l) in self.layers.iter().enumerate() {
            let z = match (&sparse, i) {
                (Some(active), 0) => self.sparse_first_layer(active),
                _ => {
                    let mut z = matmul(h.view(), l.weight.t());
                    z += &l.bias;
                    z
                }
            };
            let next = match l.activation {
                Activation::LeakyRelu => {
                    let s = self.slope;
                    z.mapv(|v| leaky(v, s))
                }
                Activation::Identity => z.clone(),
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok((h, Tape { widths: self.widths(), inputs, pre, sparse }))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Internal(e.to_string()))?;
        let (out, tape) = self.forward_batch(view)?;
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    /// Reverse-mode pass. `upstream` holds dLoss/dLogits per sample (rows).
    /// Returns parameter gradients and dLoss/dInput.
    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let (grads, d_input) = self.backward_impl(tape, upstream, true)?;
        Ok((grads, d_input.expect("input gradient requested")))
    }

    /// Parameter gradients only; skips the input gradient.
    pub fn backward_params(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<Gradients> {
        Ok(self.backward_impl(tape, upstream, false)?.0)
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        upstream: ArrayView2<f64>,
        want_input: bool,
    ) -> Result<(Gradients, Option<Array2<f64>>)> {
        if tape.widths != self.widths() || tape.inputs.len() != self.layers.len() {
            return Err(Error::Internal("tape does not match network".into()));
        }
        if upstream.nrows() != tape.batch_size() || upstream.ncols() != self.output_width() {
            return Err(Error::Internal(format!(
                "upstream gradient shape {:?} does not match tape (batch {}, width {})",
                upstream.shape(),
                tape.batch_size(),
                self.output_width()
            )));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = upstream.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::LeakyRelu {
                let s = self.slope;
                delta.zip_mut_with(&tape.pre[i], |d, &z| {
                    if z <= 0.0 {
                        *d *= s;
                    }
                });
            }
            match (&tape.sparse, i) {
                (Some(active), 0) => {
                    let mut gt = Array2::<f64>::zeros((l.input_width(), l.output_width()));
                    for (d, cols) in delta.rows().into_iter().zip(active) {
                        for &j in cols {
                            let mut row = gt.row_mut(j);
                            row += &d;
                        }
                    }
                    weights.push(gt.t().as_standard_layout().to_owned());
                }
                _ => weights.push(matmul(delta.t(), tape.inputs[i].view())),
            }
            biases.push(delta.sum_axis(Axis(0)));
            if i > 0 || want_input {
                delta = matmul(delta.view(), l.weight.view());
            }
        }
        weights.reverse();
        biases.reverse();
        Ok((Gradients { weights, biases }, want_input.then_some(delta)))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.slope.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.input_width() as u32).to_le_bytes())?;
            w.write_all(&(l.output_width() as u32).to_le_bytes())?;
            w.write_all(&[match l.activation {
                Activation::LeakyRelu => 0u8,
                Activation::Identity => 1u8,
            }])?;
            for v in l.weight.iter().chain(l.bias.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad network magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported network format version {version}")));
        }
        let slope = read_f64(r)?;
        let n = read_u32(r)? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let input = read_u32(r)? as usize;
            let output = read_u32(r)? as usize;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let activation = match tag[0] {
                0 => Activation::LeakyRelu,
                1 => Activation::Identity,
                t => return Err(Error::Format(format!("unknown activation tag {t}"))),
            };
            let weight = read_f64s(r, output * input)?;
            let bias = read_f64s(r, output)?;
            layers.push(Layer {
                weight: Array2::from_shape_vec((output, input), weight)
                    .map_err(|e| Error::Format(e.to_string()))?,
                bias: Array1::from(bias),
                activation,
            });
        }
        Self::from_layers(layers, slope)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one update. Non-finite gradients abort before any parameter changes.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Internal(format!(
                "adam state has {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Internal(format!("tensor {i} shape mismatch")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step: self.step as usize,
                    detail: format!("non-finite gradient in tensor {i}"),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
