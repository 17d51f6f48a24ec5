//! Per-relay learned quantizers and their entropy models.
//!
//! An [`EncoderModel`] maps a (standardized) observation to logits over `K`
//! quantization indices; softmax gives the soft assignment used in training,
//! argmax the one-shot hard quantizer used at evaluation. The
//! [`EntropyModel`] is a free categorical distribution `q = softmax(params)`
//! against which the operational rate (a cross-entropy, in bits) is charged.
//!
//! A [`RelayCodec`] bundles one encoder/entropy pair per component: a single
//! component for real constellations and joint-IQ, two 1-D components
//! (in-phase, quadrature) for split-IQ. The relay's composite index is the
//! mixed-radix number `u = u_0 * K_1 + u_1`, and its rate is the sum of the
//! component rates.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info::{argmax, cross_entropy_bits, neg_log2_softmax, softmax, softmax_into};
use crate::nn::{DenseNet, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IqMode {
    Joint,
    Split,
}

impl std::fmt::Display for IqMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IqMode::Joint => "joint",
            IqMode::Split => "split",
        })
    }
}

/// Learned quantizer producing a categorical distribution over `k` indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub net: DenseNet,
    /// Observations are divided by this before entering the network.
    pub scale: f64,
}

impl EncoderModel {
    pub fn new<R: Rng + ?Sized>(dim: usize, k: usize, hidden: &[usize], scale: f64, slope: f64, rng: &mut R) -> Result<Self> {
        Self::check(dim, k, scale)?;
        Ok(Self { net: DenseNet::new(dim, hidden, k, slope, rng), scale })
    }

    pub fn zeros(dim: usize, k: usize, hidden: &[usize], scale: f64, slope: f64) -> Result<Self> {
        Self::check(dim, k, scale)?;
        Ok(Self { net: DenseNet::zeros(dim, hidden, k, slope), scale })
    }

    fn check(dim: usize, k: usize, scale: f64) -> Result<()> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Argument(format!("encoder input dimension must be 1 or 2, got {dim}")));
        }
        if k == 0 {
            return Err(Error::Argument("latent alphabet size must be at least 1".into()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Argument(format!("input scale must be positive, got {scale}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.net.input_width()
    }

    pub fn k(&self) -> usize {
        self.net.output_width()
    }

    fn standardize(&self, ys: ArrayView2<f64>) -> Array2<f64> {
        ys.mapv(|v| v / self.scale)
    }

    pub fn logits(&self, y: &[f64]) -> Result<Vec<f64>> {
        let x: Vec<f64> = y.iter().map(|v| v / self.scale).collect();
        Ok(self.net.forward(&x)?.0)
    }

    /// Logits for a batch of raw observations (rows).
    pub fn logits_batch(&self, ys: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.predict_batch(self.standardize(ys).view())
    }

    /// Logits plus tape for gradient computation.
    pub fn forward_batch(&self, ys: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.net.forward_batch(self.standardize(ys).view())
    }

    pub fn encode_soft(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(y)?))
    }

    /// Argmax index, ties toward the lowest index.
    pub fn encode_hard(&self, y: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(y)?))
    }

    pub fn encode_hard_batch(&self, ys: ArrayView2<f64>) -> Result<Vec<usize>> {
        let logits = self.logits_batch(ys)?;
        Ok(logits.rows().into_iter().map(|r| argmax(r.as_slice().expect("row-major"))).collect())
    }

    /// Soft assignments `softmax(logits / temperature)`; `temperature == 0`
    /// yields one-hot argmax rows.
    pub fn soft_batch(&self, ys: ArrayView2<f64>, temperature: f64) -> Result<Array2<f64>> {
        Ok(probs_from_logits(&self.logits_batch(ys)?, temperature))
    }
}

pub fn probs_from_logits(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (row, mut o) in logits.rows().into_iter().zip(out.rows_mut()) {
        let z = row.as_slice().expect("row-major");
        let o = o.as_slice_mut().expect("row-major");
        if temperature > 0.0 {
            softmax_into(z, temperature, o);
        } else {
            o[argmax(z)] = 1.0;
        }
    }
    out
}

/// Learned categorical index distribution `q = softmax(params)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyModel {
    pub params: Vec<f64>,
}

impl EntropyModel {
    pub fn uniform(k: usize) -> Self {
        Self { params: vec![0.0; k] }
    }

    /// Model whose distribution matches `p` (entries floored to stay positive).
    pub fn from_probs(p: &[f64]) -> Self {
        Self { params: p.iter().map(|v| v.max(1e-300).ln()).collect() }
    }

    pub fn k(&self) -> usize {
        self.params.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.params)
    }

    /// Code length `-log2 q(u)` for every index, in bits.
    pub fn code_lengths(&self) -> Vec<f64> {
        neg_log2_softmax(&self.params)
    }
}

/// Operational rate in bits: `mean_y sum_u P(u|y) * -log2 q(u)` with the
/// soft encoder at unit temperature.
pub fn rate_term(enc: &EncoderModel, ent: &EntropyModel, batch: ArrayView2<f64>) -> Result<f64> {
    if batch.nrows() == 0 {
        return Err(Error::Argument("rate needs a nonempty batch".into()));
    }
    if ent.k() != enc.k() {
        return Err(Error::WidthMismatch { expected: enc.k(), got: ent.k() });
    }
    let probs = enc.soft_batch(batch, 1.0)?;
    Ok(soft_rate(&probs, ent))
}

/// Rate of already-computed soft (or one-hot) assignments.
pub fn soft_rate(probs: &Array2<f64>, ent: &EntropyModel) -> f64 {
    let lengths = ent.code_lengths();
    let n = probs.nrows() as f64;
    probs
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&lengths).map(|(p, l)| p * l).sum::<f64>())
        .sum::<f64>()
        / n
}

/// Rate with the hard encoder: mean code length of the emitted indices.
pub fn hard_rate(indices: &[usize], ent: &EntropyModel) -> f64 {
    let lengths = ent.code_lengths();
    indices.iter().map(|&u| lengths[u]).sum::<f64>() / indices.len() as f64
}

/// Empirical index histogram normalized to a pmf.
pub fn empirical_pmf(indices: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0.0; k];
    for &u in indices {
        counts[u] += 1.0;
    }
    let n = indices.len() as f64;
    counts.iter().map(|c| c / n).collect()
}

/// Cross-entropy of the empirical pmf against `ent`.
pub fn empirical_rate(indices: &[usize], ent: &EntropyModel) -> f64 {
    cross_entropy_bits(&empirical_pmf(indices, ent.k()), &ent.probs())
}

/// One encoder/entropy pair together with the observation coordinates it sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub encoder: EncoderModel,
    pub entropy: EntropyModel,
    /// Coordinates of the observation vector fed to this encoder.
    pub coords: Vec<usize>,
}

impl Component {
    pub fn k(&self) -> usize {
        self.encoder.k()
    }

    pub fn select(&self, ys: ArrayView2<f64>) -> Array2<f64> {
        ys.select(ndarray::Axis(1), &self.coords)
    }
}

/// All quantizers of one relay.
#[derive(Debug, Clone, PartialEq)]
pub struct RelayCodec {
    pub components: Vec<Component>,
}

impl RelayCodec {
    /// Builds the components for an observation of dimension `dim`.
    ///
    /// `dim == 1` or joint-IQ: one encoder over all coordinates with `k`
    /// indices. Split-IQ: one 1-D encoder per coordinate, `k` indices each.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        iq: Option<IqMode>,
        k: usize,
        hidden: &[usize],
        scale: f64,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let groups = Self::groups(dim, iq)?;
        let components = groups
            .into_iter()
            .map(|coords| {
                Ok(Component {
                    encoder: EncoderModel::new(coords.len(), k, hidden, scale, slope, rng)?,
                    entropy: EntropyModel::uniform(k),
                    coords,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components })
    }

    pub fn groups(dim: usize, iq: Option<IqMode>) -> Result<Vec<Vec<usize>>> {
        match (dim, iq) {
            (1, None) => Ok(vec![vec![0]]),
            (2, Some(IqMode::Joint)) => Ok(vec![vec![0, 1]]),
            (2, Some(IqMode::Split)) => Ok(vec![vec![0], vec![1]]),
            (d, m) => Err(Error::Config(format!(
                "IQ mode must be given exactly for 2-D constellations (dim {d}, mode {m:?})"
            ))),
        }
    }

    pub fn component_sizes(&self) -> Vec<usize> {
        self.components.iter().map(Component::k).collect()
    }

    /// Size of the composite index alphabet.
    pub fn composite_size(&self) -> usize {
        self.components.iter().map(Component::k).product()
    }

    /// Splits a composite index into component indices.
    pub fn split_index(&self, mut u: usize) -> Vec<usize> {
        let mut out = vec![0; self.components.len()];
        for (i, c) in self.components.iter().enumerate().rev() {
            out[i] = u % c.k();
            u /= c.k();
        }
        out
    }

    pub fn join_index(&self, parts: &[usize]) -> usize {
        self.components.iter().zip(parts).fold(0, |acc, (c, &p)| acc * c.k() + p)
    }

    /// Hard composite indices for a batch of observations (rows).
    pub fn encode_hard_batch(&self, ys: ArrayView2<f64>) -> Result<Vec<usize>> {
        let parts = self
            .components
            .iter()
            .map(|c| c.encoder.encode_hard_batch(c.select(ys).view()))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..ys.nrows())
            .map(|b| self.components.iter().zip(&parts).fold(0, |acc, (c, p)| acc * c.k() + p[b]))
            .collect())
    }

    /// Composite soft distribution: outer product of the component distributions.
    pub fn composite_probs(&self, parts: &[Array2<f64>]) -> Array2<f64> {
        combine_component_probs(parts)
    }

    /// Per-component code lengths, summed into the composite alphabet.
    pub fn composite_code_lengths(&self) -> Vec<f64> {
        let lengths: Vec<Vec<f64>> = self.components.iter().map(|c| c.entropy.code_lengths()).collect();
        (0..self.composite_size())
            .map(|u| self.split_index(u).iter().zip(&lengths).map(|(&p, l)| l[p]).sum())
            .collect()
    }

    /// Total relay rate (bits) for a batch with unit-temperature soft encoders.
    pub fn rate_term(&self, ys: ArrayView2<f64>) -> Result<f64> {
        self.components
            .iter()
            .map(|c| rate_term(&c.encoder, &c.entropy, c.select(ys).view()))
            .sum()
    }
}

/// Row-wise outer product of component distributions in mixed-radix order.
pub fn combine_component_probs(parts: &[Array2<f64>]) -> Array2<f64> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        let (b, ka) = acc.dim();
        let kb = p.ncols();
        let mut next = Array2::zeros((b, ka * kb));
        for r in 0..b {
            for i in 0..ka {
                let a = acc[[r, i]];
                for j in 0..kb {
                    next[[r, i * kb + j]] = a * p[[r, j]];
                }
            }
        }
        acc = next;
    }
    acc
}
