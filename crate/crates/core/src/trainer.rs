//! Training of the relay encoders, entropy models and demodulator.
//!
//! The objective is `R1 + R2 + lambda * D`, where each rate is the
//! cross-entropy of a relay's soft index distribution against its entropy
//! model and `D` is the demodulator cross-entropy averaged exactly over
//! all index pairs. Gradients are computed in closed form through every
//! stage (softmax with temperature, composite split-IQ indices, the
//! demodulator lookup table and the networks).
//!
//! Random streams derived from the run seed:
//!
//! | stream | use                              |
//! |--------|----------------------------------|
//! | 0      | symbols                          |
//! | 1, 2   | relay noise                      |
//! | 3      | initialization                   |
//! | 4..6   | p2p phase 2 (symbols, noise, init) |
//! | 7, 8   | Monte-Carlo evaluation           |

use std::io::{Read, Write};
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::ReferenceInfo;
use crate::channel::{split_seed, stream_rng, ChannelConfig, ChannelSampler};
use crate::constellation::{Constellation, Modulation};
use crate::demodulator::{marginal_distortion_grad, neg_log2_rows, neg_log2_softmax_backward, DemodulatorModel};
use crate::error::{Error, Result};
use crate::exact_eval::{self, ExtractionSettings, RelayPartition};
use crate::nn::{self, Adam, AdamConfig, DenseNet, Gradients};
use crate::relay_codec::{combine_component_probs, probs_from_logits, Component, EncoderModel, EntropyModel, IqMode, RelayCodec};

const STREAM_SYMBOLS: u64 = 0;
const STREAM_INIT: u64 = 3;
const STREAM_P2P_SYMBOLS: u64 = 4;
const STREAM_P2P_NOISE: u64 = 5;
const STREAM_P2P_INIT: u64 = 6;
const STREAM_EVAL_SYMBOLS: u64 = 7;
const STREAM_EVAL_NOISE: u64 = 8;
const STREAM_HELDOUT_SYMBOLS: u64 = 9;
const STREAM_HELDOUT_NOISE: u64 = 10;

/// Held-out batch size for the soft/hard rate monitor.
const RATE_GAP_SAMPLES: usize = 20_000;
/// Largest soft/hard rate gap (bits) accepted at convergence.
pub const RATE_GAP_THRESHOLD: f64 = 0.05;

/// Intervals below this probability are ignored when looking for binning.
pub const BINNING_MIN_MASS: f64 = 1e-3;

/// Window of the smoothed loss used for the trend check.
pub const TREND_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Distributed,
    P2p,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Distributed => "distributed",
            Scheme::P2p => "p2p",
        })
    }
}

/// Geometric annealing of the encoder softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.07 }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, step: usize, steps: usize) -> f64 {
        if steps <= 1 {
            return self.start;
        }
        let t = step as f64 / (steps - 1) as f64;
        self.start * (self.end / self.start).powf(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mc_samples: usize,
    pub extraction: ExtractionSettings,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mc_samples: 100_000, extraction: ExtractionSettings::default() }
    }
}

fn default_power() -> f64 {
    1.0
}
fn default_hidden() -> Vec<usize> {
    vec![128, 256, 64]
}
fn default_batch() -> usize {
    512
}
fn default_steps() -> usize {
    30_000
}
fn default_entropy_lr() -> f64 {
    1e-2
}
fn default_lr_final_factor() -> f64 {
    1.0
}
fn default_slope() -> f64 {
    nn::DEFAULT_LEAKY_SLOPE
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub modulation: Modulation,
    #[serde(default = "default_power")]
    pub power: f64,
    pub snr1_db: f64,
    pub snr2_db: f64,
    #[serde(default)]
    pub iq_mode: Option<IqMode>,
    pub lambda: f64,
    pub k1: usize,
    pub k2: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Demodulator-only steps of the p2p second phase (defaults to `steps`).
    #[serde(default)]
    pub phase2_steps: Option<usize>,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Adam step size for the entropy-model logits.
    #[serde(default = "default_entropy_lr")]
    pub entropy_lr: f64,
    /// Step sizes decay geometrically to this fraction of their initial value.
    #[serde(default = "default_lr_final_factor")]
    pub lr_final_factor: f64,
    #[serde(default)]
    pub temperature: TemperatureSchedule,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl TrainConfig {
    /// Distributed 1-D config with default hyperparameters.
    pub fn new(scheme: Scheme, modulation: Modulation, snr_db: f64, lambda: f64, k: usize) -> Self {
        Self {
            scheme,
            modulation,
            power: 1.0,
            snr1_db: snr_db,
            snr2_db: snr_db,
            iq_mode: (modulation.dim() == 2).then_some(IqMode::Joint),
            lambda,
            k1: k,
            k2: k,
            hidden: default_hidden(),
            batch_size: default_batch(),
            steps: default_steps(),
            phase2_steps: None,
            adam: AdamConfig::default(),
            entropy_lr: default_entropy_lr(),
            lr_final_factor: default_lr_final_factor(),
            temperature: TemperatureSchedule::default(),
            leaky_slope: default_slope(),
            seed: 0,
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.steps == 0 || self.phase2_steps == Some(0) {
            return bad("step count must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.k1 == 0 || self.k2 == 0 {
            return bad("latent alphabet sizes must be at least 1".into());
        }
        if self.scheme == Scheme::P2p && self.k1 != self.k2 {
            return bad(format!("p2p replicates one encoder, so k1 must equal k2 ({} vs {})", self.k1, self.k2));
        }
        let d = self.modulation.dim();
        if (d == 2) != self.iq_mode.is_some() {
            return bad(format!("iq_mode must be set exactly for complex constellations ({})", self.modulation));
        }
        let t = self.temperature;
        if !(t.start > 0.0 && t.end > 0.0 && t.start.is_finite() && t.end.is_finite()) {
            return bad("temperatures must be positive".into());
        }
        if !(self.adam.lr > 0.0 && self.entropy_lr > 0.0 && self.lr_final_factor > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.eval.mc_samples < 2 {
            return bad("mc_samples must be at least 2".into());
        }
        self.channel()?;
        Ok(())
    }

    pub fn constellation(&self) -> Result<Constellation> {
        Constellation::new(self.modulation, self.power)
    }

    pub fn channel(&self) -> Result<ChannelConfig> {
        ChannelConfig::from_snr_db(self.snr1_db, self.snr2_db, self.power, self.modulation.dim())
    }

    pub fn iq_label(&self) -> &'static str {
        match self.iq_mode {
            None => "real",
            Some(IqMode::Joint) => "joint",
            Some(IqMode::Split) => "split",
        }
    }

    /// File-name stem: scheme, modulation, SNRs, lambda and seed.
    pub fn file_stem(&self) -> String {
        format!(
            "{}_{}_{}_g{}_{}_lam{}_k{}x{}_s{}",
            self.scheme,
            self.modulation,
            self.iq_label(),
            self.snr1_db,
            self.snr2_db,
            self.lambda,
            self.k1,
            self.k2,
            self.seed
        )
    }
}

/// Relays plus the demodulator that reads them (one or two relays).
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub relays: Vec<RelayCodec>,
    pub demod: DemodulatorModel,
}

const MODELS_MAGIC: &[u8; 4] = b"DCFM";
const MODELS_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    w.write_all(&(v as u32).to_le_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

impl Models {
    /// Fresh models; relay `r` is standardized by `sqrt(P + sigma_r^2)`.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        iq: Option<IqMode>,
        ks: &[usize],
        scales: &[f64],
        order: usize,
        hidden: &[usize],
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let relays = ks
            .iter()
            .zip(scales)
            .map(|(&k, &s)| RelayCodec::new(dim, iq, k, hidden, s, slope, rng))
            .collect::<Result<Vec<_>>>()?;
        let sizes = relays.iter().map(RelayCodec::component_sizes).collect();
        let demod = DemodulatorModel::new(sizes, order, hidden, slope, rng);
        Ok(Self { relays, demod })
    }

    pub fn network_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for r in self.relays.iter_mut() {
            for c in r.components.iter_mut() {
                out.extend(c.encoder.net.tensors_mut());
            }
        }
        out.extend(self.demod.net.tensors_mut());
        out
    }

    pub fn entropy_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.relays
            .iter_mut()
            .flat_map(|r| r.components.iter_mut().map(|c| c.entropy.params.as_mut_slice()))
            .collect()
    }

    /// Network tensors followed by entropy tensors; matches [`LossGrad::all_grads`].
    pub fn all_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut nets = Vec::new();
        let mut ents = Vec::new();
        for r in self.relays.iter_mut() {
            for c in r.components.iter_mut() {
                nets.extend(c.encoder.net.tensors_mut());
                ents.push(c.entropy.params.as_mut_slice());
            }
        }
        nets.extend(self.demod.net.tensors_mut());
        nets.extend(ents);
        nets
    }

    fn sizes(&self) -> (Vec<usize>, Vec<usize>) {
        let mut nets = Vec::new();
        let mut ents = Vec::new();
        for r in &self.relays {
            for c in &r.components {
                nets.extend(c.encoder.net.tensor_sizes());
                ents.push(c.entropy.k());
            }
        }
        nets.extend(self.demod.net.tensor_sizes());
        (nets, ents)
    }

    /// Binary blob: relays (components with coordinates, input scale,
    /// encoder network, entropy logits) followed by the demodulator network.
    ///
    /// ```text
    /// magic "DCFM", version u32, relays u32
    /// per relay: components u32; per component: ncoords u32, coords u32*,
    ///            scale f64, encoder network (DCFN), k u32, logits f64*k
    /// demodulator: per relay, nsizes u32 and sizes u32*; network (DCFN)
    /// ```
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODELS_MAGIC)?;
        write_u32(w, MODELS_VERSION as usize)?;
        write_u32(w, self.relays.len())?;
        for r in &self.relays {
            write_u32(w, r.components.len())?;
            for c in &r.components {
                write_u32(w, c.coords.len())?;
                for &i in &c.coords {
                    write_u32(w, i)?;
                }
                write_f64s(w, &[c.encoder.scale])?;
                c.encoder.net.write_to(w)?;
                write_u32(w, c.entropy.k())?;
                write_f64s(w, &c.entropy.params)?;
            }
        }
        for sizes in self.demod.relay_sizes() {
            write_u32(w, sizes.len())?;
            for &k in sizes {
                write_u32(w, k)?;
            }
        }
        self.demod.net.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODELS_MAGIC {
            return Err(Error::Format("not a model bundle (bad magic)".into()));
        }
        let version = nn::read_u32(r)?;
        if version != MODELS_VERSION {
            return Err(Error::Format(format!("unsupported model bundle version {version}")));
        }
        let n_relays = nn::read_u32(r)? as usize;
        if !(1..=2).contains(&n_relays) {
            return Err(Error::Format(format!("bundle has {n_relays} relays")));
        }
        let mut relays = Vec::with_capacity(n_relays);
        for _ in 0..n_relays {
            let n_comp = nn::read_u32(r)? as usize;
            if !(1..=2).contains(&n_comp) {
                return Err(Error::Format(format!("relay has {n_comp} components")));
            }
            let mut components = Vec::with_capacity(n_comp);
            for _ in 0..n_comp {
                let n_coords = nn::read_u32(r)? as usize;
                if !(1..=2).contains(&n_coords) {
                    return Err(Error::Format(format!("component reads {n_coords} coordinates")));
                }
                let coords = (0..n_coords).map(|_| nn::read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
                let scale = nn::read_f64(r)?;
                let net = DenseNet::read_from(r)?;
                let k = nn::read_u32(r)? as usize;
                let params = nn::read_f64s(r, k)?;
                if net.input_width() != n_coords || net.output_width() != k {
                    return Err(Error::Format("encoder widths disagree with component header".into()));
                }
                components.push(Component { encoder: EncoderModel { net, scale }, entropy: EntropyModel { params }, coords });
            }
            relays.push(RelayCodec { components });
        }
        let mut sizes = Vec::with_capacity(n_relays);
        for _ in 0..n_relays {
            let n = nn::read_u32(r)? as usize;
            sizes.push((0..n).map(|_| nn::read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?);
        }
        let demod = DemodulatorModel::from_net(DenseNet::read_from(r)?, sizes)?;
        Ok(Self { relays, demod })
    }
}

/// Symbols and per-relay observations (rows).
#[derive(Debug, Clone)]
pub struct Batch {
    pub w: Vec<usize>,
    pub ys: Vec<Array2<f64>>,
}

impl Batch {
    /// Draws `n` uniform symbols and observes them at `relays.len()` relays.
    pub fn draw<R: Rng + ?Sized>(
        c: &Constellation,
        sampler: &mut ChannelSampler,
        symbol_rng: &mut R,
        relays: &[usize],
        n: usize,
    ) -> Self {
        let d = c.dim();
        let w: Vec<usize> = (0..n).map(|_| symbol_rng.gen_range(0..c.order())).collect();
        let mut ys: Vec<Array2<f64>> = relays.iter().map(|_| Array2::zeros((n, d))).collect();
        let mut buf = vec![0.0; d];
        for (i, &wi) in w.iter().enumerate() {
            for (y, &r) in ys.iter_mut().zip(relays) {
                sampler.observe_into(r, c.point(wi), &mut buf);
                y.row_mut(i).as_slice_mut().expect("row-major").copy_from_slice(&buf);
            }
        }
        Self { w, ys }
    }
}

#[derive(Debug, Clone)]
pub struct ComponentGrad {
    /// `None` when the encoder ran hard (temperature 0).
    pub net: Option<Gradients>,
    pub entropy: Vec<f64>,
}

/// Loss value, its parts and the gradient of every parameter.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub rates: Vec<f64>,
    pub distortion: f64,
    pub relays: Vec<Vec<ComponentGrad>>,
    pub demod: Gradients,
}

impl LossGrad {
    /// Network gradients (encoders, then demodulator); hard encoders contribute zeros.
    pub fn network_grads(&self, models: &Models) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (rg, relay) in self.relays.iter().zip(&models.relays) {
            for (cg, comp) in rg.iter().zip(&relay.components) {
                match &cg.net {
                    Some(g) => out.extend(g.tensors().into_iter().map(<[f64]>::to_vec)),
                    None => out.extend(comp.encoder.net.tensor_sizes().into_iter().map(|n| vec![0.0; n])),
                }
            }
        }
        out.extend(self.demod.tensors().into_iter().map(<[f64]>::to_vec));
        out
    }

    pub fn entropy_grads(&self) -> Vec<Vec<f64>> {
        self.relays.iter().flat_map(|r| r.iter().map(|c| c.entropy.clone())).collect()
    }

    /// Same order as [`Models::all_params_mut`].
    pub fn all_grads(&self, models: &Models) -> Vec<Vec<f64>> {
        let mut out = self.network_grads(models);
        out.extend(self.entropy_grads());
        out
    }
}

/// Gradient of `sum_j pbar_j * l_j(z)` with `l = -log2 softmax(z)` (capped entries frozen).
fn code_length_grad(params: &[f64], pbar: &[f64]) -> Vec<f64> {
    let q = crate::info::softmax(params);
    let lengths = crate::info::neg_log2_softmax(params);
    let cap = -crate::info::PROB_FLOOR.log2();
    let live: Vec<f64> = pbar.iter().zip(&lengths).map(|(&p, &l)| if l >= cap { 0.0 } else { p }).collect();
    let mass: f64 = live.iter().sum();
    q.iter().zip(&live).map(|(&qk, &pk)| (qk * mass - pk) / std::f64::consts::LN_2).collect()
}

/// Splits a gradient on the composite distribution into component gradients.
fn split_composite_grad(parts: &[Array2<f64>], d_comp: &Array2<f64>) -> Vec<Array2<f64>> {
    if parts.len() == 1 {
        return vec![d_comp.clone()];
    }
    let (a, b) = (&parts[0], &parts[1]);
    let kb = b.ncols();
    let mut da = Array2::zeros(a.raw_dim());
    let mut db = Array2::zeros(b.raw_dim());
    for r in 0..a.nrows() {
        for i in 0..a.ncols() {
            for j in 0..kb {
                let g = d_comp[[r, i * kb + j]];
                da[[r, i]] += g * b[[r, j]];
                db[[r, j]] += g * a[[r, i]];
            }
        }
    }
    vec![da, db]
}

/// `d/dz` of `g . softmax(z / tau)`.
fn softmax_temperature_backward(p: &Array2<f64>, g: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut out = Array2::zeros(p.raw_dim());
    for ((pr, gr), mut o) in p.rows().into_iter().zip(g.rows()).zip(out.rows_mut()) {
        let dot: f64 = pr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for k in 0..pr.len() {
            o[k] = pr[k] * (gr[k] - dot) / tau;
        }
    }
    out
}

/// Objective and exact gradients on one batch. `tau == 0` runs the encoders
/// hard (one-hot), in which case encoder gradients are omitted.
pub fn loss_and_grad(models: &Models, batch: &Batch, lambda: f64, tau: f64) -> Result<LossGrad> {
    let n = batch.w.len();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if batch.ys.len() != models.relays.len() || models.demod.num_relays() != models.relays.len() {
        return Err(Error::Argument("batch, relays and demodulator disagree on the relay count".into()));
    }
    let inv = 1.0 / n as f64;
    // forward through encoders
    struct CompState {
        tape: Option<nn::Tape>,
        probs: Array2<f64>,
    }
    let mut states: Vec<Vec<CompState>> = Vec::new();
    let mut composite = Vec::new();
    let mut rates = Vec::new();
    for (relay, ys) in models.relays.iter().zip(&batch.ys) {
        let mut comp_states = Vec::new();
        let mut rate = 0.0;
        for c in &relay.components {
            let x = c.select(ys.view());
            let (probs, tape) = if tau > 0.0 {
                let (logits, tape) = c.encoder.forward_batch(x.view())?;
                (probs_from_logits(&logits, tau), Some(tape))
            } else {
                (probs_from_logits(&c.encoder.logits_batch(x.view())?, 0.0), None)
            };
            rate += crate::relay_codec::soft_rate(&probs, &c.entropy);
            comp_states.push(CompState { tape, probs });
        }
        let parts: Vec<Array2<f64>> = comp_states.iter().map(|s| s.probs.clone()).collect();
        composite.push(combine_component_probs(&parts));
        states.push(comp_states);
        rates.push(rate);
    }
    // demodulator table and marginalized distortion
    let (table_logits, table_tape) = models.demod.table_forward()?;
    let table = neg_log2_rows(&table_logits);
    let ones;
    let p2 = match composite.get(1) {
        Some(p) => p,
        None => {
            ones = Array2::ones((n, 1));
            &ones
        }
    };
    let dg = marginal_distortion_grad(&table, &composite[0], p2, &batch.w);
    let loss = rates.iter().sum::<f64>() + lambda * dg.value;
    if !loss.is_finite() {
        return Err(Error::Diverged { step: 0, detail: format!("non-finite loss {loss}") });
    }
    let d_table = dg.d_table.mapv(|v| v * lambda);
    let d_logits = neg_log2_softmax_backward(table_logits.view(), &table, &d_table);
    let demod_grad = models.demod.net.backward_params(&table_tape, d_logits.view())?;
    // back to the encoders
    let d_composite = [dg.d_p1, dg.d_p2];
    let mut relay_grads = Vec::new();
    for (r, (relay, comp_states)) in models.relays.iter().zip(&states).enumerate() {
        let parts: Vec<Array2<f64>> = comp_states.iter().map(|s| s.probs.clone()).collect();
        let d_parts = split_composite_grad(&parts, &d_composite[r].mapv(|v| v * lambda));
        let mut grads = Vec::new();
        for ((c, st), mut dp) in relay.components.iter().zip(comp_states).zip(d_parts) {
            let lengths = c.entropy.code_lengths();
            let pbar: Vec<f64> = (0..c.k()).map(|j| st.probs.column(j).sum() * inv).collect();
            let entropy = code_length_grad(&c.entropy.params, &pbar);
            let net = match &st.tape {
                Some(tape) => {
                    for mut row in dp.rows_mut() {
                        for (v, l) in row.iter_mut().zip(&lengths) {
                            *v += l * inv;
                        }
                    }
                    let dz = softmax_temperature_backward(&st.probs, &dp, tau);
                    Some(c.encoder.net.backward_params(tape, dz.view())?)
                }
                None => None,
            };
            grads.push(ComponentGrad { net, entropy });
        }
        relay_grads.push(grads);
    }
    Ok(LossGrad { loss, rates, distortion: dg.value, relays: relay_grads, demod: demod_grad })
}

/// What a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMode {
    /// Encoders, entropy models and demodulator, soft annealed encoders.
    Joint,
    /// Demodulator only, hard encoders.
    DemodOnly,
}

struct Stage<'a> {
    c: &'a Constellation,
    sampler: ChannelSampler,
    symbols: ChaCha8Rng,
    relays: Vec<usize>,
    mode: StageMode,
}

fn run_stage(stage: &mut Stage<'_>, models: &mut Models, cfg: &TrainConfig, steps: usize) -> Result<Vec<f64>> {
    let (net_sizes, ent_sizes) = models.sizes();
    let demod_sizes = models.demod.net.tensor_sizes();
    let mut net_opt = Adam::new(cfg.adam, &net_sizes);
    let mut demod_opt = Adam::new(cfg.adam, &demod_sizes);
    let mut ent_opt = Adam::new(AdamConfig { lr: cfg.entropy_lr, ..cfg.adam }, &ent_sizes);
    let mut losses = Vec::with_capacity(steps);
    let decay = TemperatureSchedule { start: 1.0, end: cfg.lr_final_factor };
    for step in 0..steps {
        let f = decay.at(step, steps);
        net_opt.config.lr = cfg.adam.lr * f;
        demod_opt.config.lr = cfg.adam.lr * f;
        ent_opt.config.lr = cfg.entropy_lr;
        let batch = Batch::draw(stage.c, &mut stage.sampler, &mut stage.symbols, &stage.relays, cfg.batch_size);
        let tau = match stage.mode {
            StageMode::Joint => cfg.temperature.at(step, steps),
            StageMode::DemodOnly => 0.0,
        };
        let lg = loss_and_grad(models, &batch, cfg.lambda, tau).map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged { step, detail },
            other => other,
        })?;
        losses.push(lg.loss);
        let diverged = |e: Error| match e {
            Error::Diverged { detail, .. } => Error::Diverged { step, detail },
            other => other,
        };
        match stage.mode {
            StageMode::Joint => {
                let ng = lg.network_grads(models);
                let eg = lg.entropy_grads();
                let ng_refs: Vec<&[f64]> = ng.iter().map(Vec::as_slice).collect();
                let eg_refs: Vec<&[f64]> = eg.iter().map(Vec::as_slice).collect();
                net_opt.step(&mut models.network_tensors_mut(), &ng_refs).map_err(diverged)?;
                ent_opt.step(&mut models.entropy_tensors_mut(), &eg_refs).map_err(diverged)?;
            }
            StageMode::DemodOnly => {
                let g = lg.demod.tensors();
                demod_opt.step(&mut models.demod.net.tensors_mut(), &g).map_err(diverged)?;
            }
        }
        if !models.demod.net.all_finite() {
            return Err(Error::Diverged { step, detail: "non-finite demodulator parameters".into() });
        }
    }
    Ok(losses)
}

/// Smoothed loss at the start and end of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTrend {
    pub start: f64,
    pub end: f64,
}

impl LossTrend {
    pub fn from_losses(losses: &[f64]) -> Option<Self> {
        if losses.is_empty() {
            return None;
        }
        let w = TREND_WINDOW.min(losses.len().div_ceil(2)).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some(Self { start: mean(&losses[..w]), end: mean(&losses[losses.len() - w..]) })
    }

    pub fn decreasing(&self) -> bool {
        self.end <= self.start
    }
}

/// Oracle and Monte-Carlo metrics of a trained two-relay system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rate1: f64,
    pub rate2: f64,
    /// Average relay rate `(rate1 + rate2) / 2`.
    pub rate: f64,
    pub distortion: f64,
    pub mi_lower_bound: f64,
    pub mi_exact: f64,
    pub h_u1: f64,
    pub h_u2: f64,
    pub ser_demod_exact: f64,
    pub ser_map_exact: f64,
    pub ser_mc: f64,
    pub ser_mc_stderr: f64,
    pub mi_one_relay: f64,
    pub mi_two_relays: f64,
    pub cut_set: f64,
    /// Exact objective `rate1 + rate2 + lambda * distortion` with hard encoders.
    pub objective: f64,
    /// Labels used on two or more non-adjacent intervals of probability at
    /// least [`BINNING_MIN_MASS`], per relay (1-D only).
    pub binned_labels: Vec<Vec<usize>>,
    /// Largest per-relay `|soft rate - hard rate|` (bits) on a held-out batch
    /// at the final temperature.
    #[serde(default)]
    pub rate_gap: f64,
}

/// Single-relay reference of the p2p first phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase1Metrics {
    pub rate: f64,
    pub distortion: f64,
    pub mi_lower_bound: f64,
    pub mi_exact: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunFlags {
    /// Exact MI below the best uniform scalar quantizer at the same total rate.
    pub local_optimum: bool,
    pub loss_trend_ok: bool,
    /// On the upper hull of its sweep (set by [`mark_hull`]).
    pub on_hull: bool,
    /// Soft and hard rates agree within [`RATE_GAP_THRESHOLD`].
    #[serde(default)]
    pub rate_consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed { diagnostic: String },
}

/// One trained operating point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub status: RunStatus,
    pub metrics: Option<RunMetrics>,
    pub phase1: Option<Phase1Metrics>,
    pub loss_trend: Option<LossTrend>,
    pub flags: RunFlags,
    pub wall_clock_s: f64,
    pub seed: u64,
    #[serde(skip)]
    pub models: Option<Models>,
    #[serde(skip)]
    pub partitions: Option<Vec<RelayPartition>>,
}

impl RunRecord {
    pub fn failed(cfg: &TrainConfig, diagnostic: String, wall_clock_s: f64) -> Self {
        Self {
            config: cfg.clone(),
            status: RunStatus::Failed { diagnostic },
            metrics: None,
            phase1: None,
            loss_trend: None,
            flags: RunFlags::default(),
            wall_clock_s,
            seed: cfg.seed,
            models: None,
            partitions: None,
        }
    }

    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

fn scales(cfg: &TrainConfig, ch: &ChannelConfig) -> [f64; 2] {
    [(cfg.power + ch.sigma1_sq).sqrt(), (cfg.power + ch.sigma2_sq).sqrt()]
}

/// Exact and Monte-Carlo evaluation of a trained two-relay system.
pub fn evaluate(models: &Models, cfg: &TrainConfig) -> Result<(RunMetrics, Vec<RelayPartition>)> {
    let c = cfg.constellation()?;
    let ch = cfg.channel()?;
    if models.relays.len() != 2 {
        return Err(Error::Argument("evaluation needs two relays".into()));
    }
    let parts = models
        .relays
        .iter()
        .enumerate()
        .map(|(r, relay)| RelayPartition::extract(relay, cfg.power, ch.variance(r), c.dim(), &cfg.eval.extraction))
        .collect::<Result<Vec<_>>>()?;
    let pm1 = parts[0].conditional(&c, ch.sigma1_sq);
    let pm2 = parts[1].conditional(&c, ch.sigma2_sq);
    let exact = exact_eval::exact_metrics_from_tables(&pm1, &pm2);
    let table = models.demod.neg_log2_table()?;
    let hard = models.demod.hard_table()?;
    let dm = exact_eval::exact_demod_metrics(&pm1, &pm2, &table, &hard);
    let rate1 = exact_eval::exact_rate(&pm1, &models.relays[0].composite_code_lengths());
    let rate2 = exact_eval::exact_rate(&pm2, &models.relays[1].composite_code_lengths());
    let relays: [RelayCodec; 2] = [models.relays[0].clone(), models.relays[1].clone()];
    let mut sampler = ChannelSampler::from_seed(ch, split_seed(cfg.seed, STREAM_EVAL_NOISE));
    let mut symbols = stream_rng(cfg.seed, STREAM_EVAL_SYMBOLS);
    let mc = exact_eval::mc_metrics(&relays, &models.demod, &c, &mut sampler, &mut symbols, cfg.eval.mc_samples, None)?;
    let reference = ReferenceInfo::new(&c, ch.sigma1_sq, ch.sigma2_sq)?;
    let log_m = (c.order() as f64).log2();
    let levels: Vec<f64> = c.points().map(|p| p[0]).collect();
    let binned_labels = parts
        .iter()
        .enumerate()
        .map(|(r, p)| match p.components.as_slice() {
            [exact_eval::ComponentPartition::Interval(ip)] if c.dim() == 1 => {
                ip.binned_labels_with_mass(&levels, ch.variance(r).sqrt(), BINNING_MIN_MASS)
            }
            _ => Vec::new(),
        })
        .collect();
    let metrics = RunMetrics {
        rate1,
        rate2,
        rate: (rate1 + rate2) / 2.0,
        distortion: dm.distortion,
        mi_lower_bound: log_m - dm.distortion,
        mi_exact: exact.mi,
        h_u1: exact.h_u1,
        h_u2: exact.h_u2,
        ser_demod_exact: dm.ser,
        ser_map_exact: exact.map_ser,
        ser_mc: mc.ser.mean,
        ser_mc_stderr: mc.ser.stderr,
        mi_one_relay: reference.mi_relay1,
        mi_two_relays: reference.mi_both,
        cut_set: reference.cut_set(rate1, rate2)?,
        objective: rate1 + rate2 + cfg.lambda * dm.distortion,
        binned_labels,
        rate_gap: rate_gap(models, cfg, &c, ch)?,
    };
    Ok((metrics, parts))
}

/// Soft/hard rate gap of each relay on fresh observations, maximized over relays.
fn rate_gap(models: &Models, cfg: &TrainConfig, c: &Constellation, ch: ChannelConfig) -> Result<f64> {
    let mut sampler = ChannelSampler::from_seed(ch, split_seed(cfg.seed, STREAM_HELDOUT_NOISE));
    let mut symbols = stream_rng(cfg.seed, STREAM_HELDOUT_SYMBOLS);
    let batch = Batch::draw(c, &mut sampler, &mut symbols, &[0, 1], RATE_GAP_SAMPLES);
    let tau = cfg.temperature.end;
    let mut worst: f64 = 0.0;
    for (relay, ys) in models.relays.iter().zip(&batch.ys) {
        let mut soft = 0.0;
        let mut hard = 0.0;
        for comp in &relay.components {
            let x = comp.select(ys.view());
            soft += crate::relay_codec::soft_rate(&comp.encoder.soft_batch(x.view(), tau)?, &comp.entropy);
            hard += crate::relay_codec::hard_rate(&comp.encoder.encode_hard_batch(x.view())?, &comp.entropy);
        }
        worst = worst.max((soft - hard).abs());
    }
    Ok(worst)
}

fn evaluate_single(models: &Models, cfg: &TrainConfig, c: &Constellation, variance: f64) -> Result<Phase1Metrics> {
    let part = RelayPartition::extract(&models.relays[0], cfg.power, variance, c.dim(), &cfg.eval.extraction)?;
    let pm = part.conditional(c, variance);
    let ones = Array2::ones((c.order(), 1));
    let dm = exact_eval::exact_demod_metrics(&pm, &ones, &models.demod.neg_log2_table()?, &models.demod.hard_table()?);
    let exact = exact_eval::exact_metrics_from_tables(&pm, &ones);
    Ok(Phase1Metrics {
        rate: exact_eval::exact_rate(&pm, &models.relays[0].composite_code_lengths()),
        distortion: dm.distortion,
        mi_lower_bound: (c.order() as f64).log2() - dm.distortion,
        mi_exact: exact.mi,
    })
}

struct Trained {
    models: Models,
    losses: Vec<f64>,
    phase1: Option<Phase1Metrics>,
}

fn train_models(cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let c = cfg.constellation()?;
    let ch = cfg.channel()?;
    let s = scales(cfg, &ch);
    match cfg.scheme {
        Scheme::Distributed => {
            let mut init = stream_rng(cfg.seed, STREAM_INIT);
            let mut models =
                Models::init(c.dim(), cfg.iq_mode, &[cfg.k1, cfg.k2], &s, c.order(), &cfg.hidden, cfg.leaky_slope, &mut init)?;
            let mut stage = Stage {
                c: &c,
                sampler: ChannelSampler::from_seed(ch, cfg.seed),
                symbols: stream_rng(cfg.seed, STREAM_SYMBOLS),
                relays: vec![0, 1],
                mode: StageMode::Joint,
            };
            let losses = run_stage(&mut stage, &mut models, cfg, cfg.steps)?;
            Ok(Trained { models, losses, phase1: None })
        }
        Scheme::P2p => {
            let mut init = stream_rng(cfg.seed, STREAM_INIT);
            let mut single =
                Models::init(c.dim(), cfg.iq_mode, &[cfg.k1], &s[..1], c.order(), &cfg.hidden, cfg.leaky_slope, &mut init)?;
            let mut stage = Stage {
                c: &c,
                sampler: ChannelSampler::from_seed(ch, cfg.seed),
                symbols: stream_rng(cfg.seed, STREAM_SYMBOLS),
                relays: vec![0],
                mode: StageMode::Joint,
            };
            let losses = run_stage(&mut stage, &mut single, cfg, cfg.steps)?;
            let phase1 = evaluate_single(&single, cfg, &c, ch.sigma1_sq)?;
            let models = replicate(&single, &c, cfg, &ch)?;
            Ok(Trained { models, losses, phase1: Some(phase1) })
        }
    }
}

/// Copies a trained single-relay encoder to both relays and trains a fresh
/// joint demodulator on hard indices.
fn replicate(single: &Models, c: &Constellation, cfg: &TrainConfig, ch: &ChannelConfig) -> Result<Models> {
    let relay = single.relays[0].clone();
    let sizes = vec![relay.component_sizes(), relay.component_sizes()];
    let mut init = stream_rng(cfg.seed, STREAM_P2P_INIT);
    let demod = DemodulatorModel::new(sizes, c.order(), &cfg.hidden, cfg.leaky_slope, &mut init);
    let mut models = Models { relays: vec![relay.clone(), relay], demod };
    let mut stage = Stage {
        c,
        sampler: ChannelSampler::from_seed(*ch, split_seed(cfg.seed, STREAM_P2P_NOISE)),
        symbols: stream_rng(cfg.seed, STREAM_P2P_SYMBOLS),
        relays: vec![0, 1],
        mode: StageMode::DemodOnly,
    };
    run_stage(&mut stage, &mut models, cfg, cfg.phase2_steps.unwrap_or(cfg.steps))?;
    Ok(models)
}

/// Trains one configuration and evaluates it. Failures become failed records.
pub fn train(cfg: &TrainConfig) -> RunRecord {
    let start = Instant::now();
    let outcome = train_models(cfg).and_then(|t| {
        let (metrics, parts) = evaluate(&t.models, cfg)?;
        Ok((t, metrics, parts))
    });
    let wall = start.elapsed().as_secs_f64();
    match outcome {
        Ok((t, metrics, parts)) => {
            let trend = LossTrend::from_losses(&t.losses);
            let c = cfg.constellation().expect("validated");
            let ch = cfg.channel().expect("validated");
            let baseline = exact_eval::uniform_quantizer_mi(&c, ch.sigma1_sq.min(ch.sigma2_sq), metrics.rate1 + metrics.rate2);
            let flags = RunFlags {
                local_optimum: metrics.mi_exact + 1e-9 < baseline,
                loss_trend_ok: trend.is_some_and(|t| t.decreasing()),
                on_hull: false,
                rate_consistent: metrics.rate_gap <= RATE_GAP_THRESHOLD,
            };
            RunRecord {
                config: cfg.clone(),
                status: RunStatus::Completed,
                metrics: Some(metrics),
                phase1: t.phase1,
                loss_trend: trend,
                flags,
                wall_clock_s: wall,
                seed: cfg.seed,
                models: Some(t.models),
                partitions: Some(parts),
            }
        }
        Err(e) => RunRecord::failed(cfg, e.to_string(), wall),
    }
}

pub fn train_distributed(cfg: &TrainConfig) -> RunRecord {
    train(&TrainConfig { scheme: Scheme::Distributed, ..cfg.clone() })
}

pub fn train_p2p(cfg: &TrainConfig) -> RunRecord {
    train(&TrainConfig { scheme: Scheme::P2p, ..cfg.clone() })
}

/// Runs `replicates` seeds derived from `cfg.seed` and keeps the completed
/// run with the lowest exact objective.
pub fn best_of(cfg: &TrainConfig, replicates: usize) -> RunRecord {
    let runs: Vec<RunRecord> = (0..replicates.max(1) as u64)
        .map(|i| train(&TrainConfig { seed: split_seed(cfg.seed, 100 + i), ..cfg.clone() }))
        .collect();
    select_best(runs)
}

fn select_best(runs: Vec<RunRecord>) -> RunRecord {
    let objective = |r: &RunRecord| r.metrics.as_ref().map_or(f64::INFINITY, |m| m.objective);
    let mut best: Option<RunRecord> = None;
    for r in runs {
        let better = match &best {
            None => true,
            Some(b) => !b.completed() && r.completed() || objective(&r) < objective(b),
        };
        if better {
            best = Some(r);
        }
    }
    best.expect("at least one run")
}

fn sort_by_rate(records: &mut [RunRecord]) {
    let key = |r: &RunRecord| r.metrics.as_ref().map_or(f64::INFINITY, |m| m.rate);
    records.sort_by(|a, b| key(a).total_cmp(&key(b)));
}

/// Trains every config (best-of-`replicates` each) on `workers` threads,
/// sorts by achieved rate and marks the MI hull.
pub fn sweep(cfgs: &[TrainConfig], replicates: usize, workers: usize) -> Result<Vec<RunRecord>> {
    if cfgs.is_empty() {
        return Err(Error::Config("sweep needs at least one configuration".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let mut records: Vec<RunRecord> = pool.install(|| cfgs.par_iter().map(|c| best_of(c, replicates)).collect());
    sort_by_rate(&mut records);
    mark_hull(&mut records);
    Ok(records)
}

/// Indices of the upper concave hull of `(x, y)` restricted to its
/// nondecreasing part (the Pareto frontier for "more y at less x").
pub fn upper_hull(points: &[(f64, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).filter(|&i| points[i].0.is_finite() && points[i].1.is_finite()).collect();
    idx.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(points[b].1.total_cmp(&points[a].1)));
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<usize> = Vec::new();
    for i in idx {
        if let Some(&last) = hull.last() {
            if points[last].0 == points[i].0 {
                continue;
            }
        }
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            if cross(points[a], points[b], points[i]) >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    // keep the part up to the maximum
    if let Some(peak) = (0..hull.len()).max_by(|&a, &b| points[hull[a]].1.total_cmp(&points[hull[b]].1).then(b.cmp(&a))) {
        hull.truncate(peak + 1);
    }
    // a frontier point must beat every cheaper point
    let mut frontier = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for i in hull {
        if points[i].1 > best {
            best = points[i].1;
            frontier.push(i);
        }
    }
    frontier
}

/// Piecewise-linear value of a hull (sorted by x) at `x`; `None` outside its range.
pub fn interpolate(hull: &[(f64, f64)], x: f64) -> Option<f64> {
    let first = hull.first()?;
    if x < first.0 {
        return None;
    }
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x <= b.0 {
            let t = if b.0 > a.0 { (x - a.0) / (b.0 - a.0) } else { 1.0 };
            return Some(a.1 + t * (b.1 - a.1));
        }
    }
    (x == hull.last()?.0).then(|| hull.last().unwrap().1)
}

/// Sets `on_hull` for completed records on the (rate, exact MI) frontier.
pub fn mark_hull(records: &mut [RunRecord]) {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .map(|r| r.metrics.as_ref().map_or((f64::NAN, f64::NAN), |m| (m.rate, m.mi_exact)))
        .collect();
    let hull = upper_hull(&pts);
    for (i, r) in records.iter_mut().enumerate() {
        r.flags.on_hull = hull.contains(&i);
    }
}

/// `(rate, value)` pairs of the records on the (rate, exact MI) hull, sorted by rate.
pub fn hull_curve(records: &[RunRecord], value: impl Fn(&RunMetrics) -> f64) -> Vec<(f64, f64)> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .map(|r| r.metrics.as_ref().map_or((f64::NAN, f64::NAN), |m| (m.rate, m.mi_exact)))
        .collect();
    upper_hull(&pts)
        .into_iter()
        .map(|i| {
            let m = records[i].metrics.as_ref().expect("finite point");
            (m.rate, value(m))
        })
        .collect()
}

/// Objective value only.
pub fn loss_value(models: &Models, batch: &Batch, lambda: f64, tau: f64) -> Result<f64> {
    Ok(loss_and_grad(models, batch, lambda, tau)?.loss)
}

/// Reference information quantities for a config.
pub fn references(cfg: &TrainConfig) -> Result<ReferenceInfo> {
    let c = cfg.constellation()?;
    let ch = cfg.channel()?;
    ReferenceInfo::new(&c, ch.sigma1_sq, ch.sigma2_sq)
}
