//! Exact evaluation of trained relays.
//!
//! A hard quantizer is extracted as a partition of the observation space:
//! labeled intervals for 1-D encoders, a labeled product lattice for 2-D
//! (joint-IQ) encoders. Index probabilities given a symbol then follow
//! from Gaussian CDF differences, and entropies, `I(X;U1,U2)` and the MAP
//! symbol error rate are computed in closed form from those tables.
//! [`mc_metrics`] provides the Monte-Carlo counterpart used to cross-check.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::channel::ChannelSampler;
use crate::constellation::Constellation;
use crate::demodulator::DemodulatorModel;
use crate::error::{Error, Result};
use crate::info::{entropy_bits, EXACT_FLOOR};
use crate::relay_codec::{EncoderModel, RelayCodec};

/// Extraction range in units of `sqrt(P + sigma^2)`.
pub const RANGE_SCALE: f64 = 8.0;
/// Default lattice points per dimension for 1-D extraction.
pub const RESOLUTION_1D: usize = 20_000;
/// Default lattice points per dimension for 2-D extraction.
pub const RESOLUTION_2D: usize = 400;
/// Absolute bisection tolerance for breakpoints.
pub const BREAKPOINT_TOL: f64 = 1e-9;

/// Standard normal CDF.
pub fn phi(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Gaussian tail `Q(z) = 1 - Phi(z)`.
pub fn q_func(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// `P(lo < N(mean, std^2) <= hi)`, evaluated on the tail that keeps precision.
pub fn interval_mass(lo: f64, hi: f64, mean: f64, std: f64) -> f64 {
    let a = (lo - mean) / std;
    let b = (hi - mean) / std;
    if a > 0.0 {
        (q_func(a) - q_func(b)).max(0.0)
    } else {
        (phi(b) - phi(a)).max(0.0)
    }
}

/// Anything that maps points (rows) to hard labels.
pub trait HardQuantizer {
    fn dim(&self) -> usize;
    fn k(&self) -> usize;
    fn labels(&self, points: ArrayView2<f64>) -> Result<Vec<usize>>;
}

impl HardQuantizer for EncoderModel {
    fn dim(&self) -> usize {
        EncoderModel::dim(self)
    }

    fn k(&self) -> usize {
        EncoderModel::k(self)
    }

    fn labels(&self, points: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.encode_hard_batch(points)
    }
}

/// Adapts a labeling closure to [`HardQuantizer`].
pub struct FnQuantizer<F> {
    pub dim: usize,
    pub k: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> usize> HardQuantizer for FnQuantizer<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn k(&self) -> usize {
        self.k
    }

    fn labels(&self, points: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(points.rows().into_iter().map(|r| (self.f)(&r.to_vec())).collect())
    }
}

fn label_1d<Q: HardQuantizer + ?Sized>(q: &Q, y: f64) -> Result<usize> {
    Ok(q.labels(ArrayView2::from_shape((1, 1), &[y]).expect("1x1"))?[0])
}

fn lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Labeled intervals `(b_{i-1}, b_i]` covering the real line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalPartition {
    /// Interior breakpoints, strictly ascending.
    pub breakpoints: Vec<f64>,
    /// One label per interval (`breakpoints.len() + 1` entries).
    pub labels: Vec<usize>,
    pub k: usize,
}

impl IntervalPartition {
    pub fn constant(label: usize, k: usize) -> Self {
        Self { breakpoints: Vec::new(), labels: vec![label], k }
    }

    /// Scans `q` on `resolution` lattice points in `[lo, hi]`, bisects every
    /// label change to [`BREAKPOINT_TOL`], and extends the end labels to
    /// infinity.
    pub fn extract<Q: HardQuantizer + ?Sized>(q: &Q, lo: f64, hi: f64, resolution: usize) -> Result<Self> {
        if q.dim() != 1 {
            return Err(Error::Argument(format!("interval extraction needs a 1-D quantizer, got dim {}", q.dim())));
        }
        if !(lo < hi) {
            return Err(Error::Argument(format!("empty extraction range [{lo}, {hi}]")));
        }
        if resolution < 1000 {
            return Err(Error::Argument(format!("resolution must be at least 1000, got {resolution}")));
        }
        let grid = lattice(lo, hi, resolution);
        let labels = q.labels(ArrayView2::from_shape((resolution, 1), &grid).expect("column"))?;
        let mut breakpoints = Vec::new();
        let mut out_labels = vec![labels[0]];
        for i in 1..resolution {
            if labels[i] == labels[i - 1] {
                continue;
            }
            let (mut a, mut b) = (grid[i - 1], grid[i]);
            while b - a > BREAKPOINT_TOL {
                let mid = 0.5 * (a + b);
                if label_1d(q, mid)? == labels[i - 1] {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            breakpoints.push(0.5 * (a + b));
            out_labels.push(labels[i]);
        }
        Ok(Self { breakpoints, labels: out_labels, k: q.k() })
    }

    pub fn num_intervals(&self) -> usize {
        self.labels.len()
    }

    pub fn label_at(&self, y: f64) -> usize {
        self.labels[self.breakpoints.partition_point(|&b| b < y)]
    }

    /// Interval bounds, with infinite outer ends.
    pub fn bounds(&self, i: usize) -> (f64, f64) {
        let lo = if i == 0 { f64::NEG_INFINITY } else { self.breakpoints[i - 1] };
        let hi = self.breakpoints.get(i).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    /// `p(u | x)` for `Y = x + N(0, std^2)`.
    pub fn cell_probs(&self, x: f64, std: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.k];
        for (i, &label) in self.labels.iter().enumerate() {
            let (lo, hi) = self.bounds(i);
            p[label] += interval_mass(lo, hi, x, std);
        }
        p
    }

    /// Number of intervals carrying each label.
    pub fn intervals_per_label(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Probability of each interval when `Y = X + N(0, std^2)`, `X` uniform over `points`.
    pub fn interval_masses(&self, points: &[f64], std: f64) -> Vec<f64> {
        (0..self.num_intervals())
            .map(|i| {
                let (lo, hi) = self.bounds(i);
                points.iter().map(|&x| interval_mass(lo, hi, x, std)).sum::<f64>() / points.len() as f64
            })
            .collect()
    }

    /// Labels whose intervals of probability at least `min_mass` (see
    /// [`Self::interval_masses`]) are two or more and pairwise non-adjacent.
    pub fn binned_labels_with_mass(&self, points: &[f64], std: f64, min_mass: f64) -> Vec<usize> {
        let masses = self.interval_masses(points, std);
        let mut hits: Vec<Vec<usize>> = vec![Vec::new(); self.k];
        for (i, (&l, &m)) in self.labels.iter().zip(&masses).enumerate() {
            if m >= min_mass {
                hits[l].push(i);
            }
        }
        hits.iter().enumerate().filter(|(_, h)| h.len() >= 2).map(|(l, _)| l).collect()
    }

    /// Labels occupying two or more non-adjacent intervals. Adjacent
    /// intervals always differ in label, so any repeat is non-adjacent.
    pub fn binned_labels(&self) -> Vec<usize> {
        self.intervals_per_label()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= 2)
            .map(|(l, _)| l)
            .collect()
    }
}

/// Labels on a product lattice; cell `(i, j)` spans `edges[0][i-1..i] x edges[1][j-1..j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPartition {
    /// Interior cell edges per axis, ascending.
    pub edges: [Vec<f64>; 2],
    /// Row-major `n0 x n1` labels.
    pub labels: Vec<usize>,
    pub k: usize,
}

impl GridPartition {
    /// Labels cell centers of a `resolution x resolution` lattice on `[lo, hi]^2`.
    pub fn extract<Q: HardQuantizer + ?Sized>(q: &Q, lo: f64, hi: f64, resolution: usize) -> Result<Self> {
        if q.dim() != 2 {
            return Err(Error::Argument(format!("grid extraction needs a 2-D quantizer, got dim {}", q.dim())));
        }
        if !(lo < hi) || resolution < 2 {
            return Err(Error::Argument("invalid grid extraction range".into()));
        }
        let centers = lattice(lo, hi, resolution);
        let edges: Vec<f64> = centers.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let mut pts = Vec::with_capacity(2 * resolution * resolution);
        for &a in &centers {
            for &b in &centers {
                pts.push(a);
                pts.push(b);
            }
        }
        let labels = q.labels(ArrayView2::from_shape((resolution * resolution, 2), &pts).expect("pairs"))?;
        Ok(Self { edges: [edges.clone(), edges], labels, k: q.k() })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.edges[0].len() + 1, self.edges[1].len() + 1)
    }

    pub fn label_at(&self, y: &[f64]) -> usize {
        let i = self.edges[0].partition_point(|&b| b < y[0]);
        let j = self.edges[1].partition_point(|&b| b < y[1]);
        self.labels[i * self.shape().1 + j]
    }

    fn axis_masses(edges: &[f64], mean: f64, std: f64) -> Vec<f64> {
        (0..=edges.len())
            .map(|i| {
                let lo = if i == 0 { f64::NEG_INFINITY } else { edges[i - 1] };
                let hi = edges.get(i).copied().unwrap_or(f64::INFINITY);
                interval_mass(lo, hi, mean, std)
            })
            .collect()
    }

    pub fn cell_probs(&self, x: &[f64], std: f64) -> Vec<f64> {
        let m0 = Self::axis_masses(&self.edges[0], x[0], std);
        let m1 = Self::axis_masses(&self.edges[1], x[1], std);
        let n1 = m1.len();
        let mut p = vec![0.0; self.k];
        for (i, &a) in m0.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (j, &b) in m1.iter().enumerate() {
                p[self.labels[i * n1 + j]] += a * b;
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ComponentPartition {
    Interval(IntervalPartition),
    Grid(GridPartition),
}

impl ComponentPartition {
    pub fn k(&self) -> usize {
        match self {
            ComponentPartition::Interval(p) => p.k,
            ComponentPartition::Grid(p) => p.k,
        }
    }

    pub fn cell_probs(&self, x: &[f64], std: f64) -> Vec<f64> {
        match self {
            ComponentPartition::Interval(p) => p.cell_probs(x[0], std),
            ComponentPartition::Grid(p) => p.cell_probs(x, std),
        }
    }

    pub fn label_at(&self, y: &[f64]) -> usize {
        match self {
            ComponentPartition::Interval(p) => p.label_at(y[0]),
            ComponentPartition::Grid(p) => p.label_at(y),
        }
    }
}

/// Partitions of every component of one relay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayPartition {
    pub components: Vec<ComponentPartition>,
    pub coords: Vec<Vec<usize>>,
    /// Dimension of the full observation (1 or 2).
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSettings {
    pub range_scale: f64,
    pub resolution_1d: usize,
    pub resolution_2d: usize,
}

impl Default for ExtractionSettings {
    fn default() -> Self {
        Self { range_scale: RANGE_SCALE, resolution_1d: RESOLUTION_1D, resolution_2d: RESOLUTION_2D }
    }
}

impl RelayPartition {
    /// Extracts every component over `+-range_scale * sqrt(P + sigma^2)`.
    pub fn extract(relay: &RelayCodec, power: f64, variance: f64, dim: usize, settings: &ExtractionSettings) -> Result<Self> {
        let half = settings.range_scale * (power + variance).sqrt();
        let components = relay
            .components
            .iter()
            .map(|c| match c.encoder.dim() {
                1 => IntervalPartition::extract(&c.encoder, -half, half, settings.resolution_1d).map(ComponentPartition::Interval),
                _ => GridPartition::extract(&c.encoder, -half, half, settings.resolution_2d).map(ComponentPartition::Grid),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components, coords: relay.components.iter().map(|c| c.coords.clone()).collect(), dim })
    }

    pub fn single(part: ComponentPartition, dim: usize) -> Self {
        let coords = (0..dim).collect();
        Self { components: vec![part], coords: vec![coords], dim }
    }

    pub fn composite_size(&self) -> usize {
        self.components.iter().map(ComponentPartition::k).product()
    }

    pub fn component_sizes(&self) -> Vec<usize> {
        self.components.iter().map(ComponentPartition::k).collect()
    }

    pub fn label_at(&self, y: &[f64]) -> usize {
        self.components.iter().zip(&self.coords).fold(0, |acc, (c, coords)| {
            let sub: Vec<f64> = coords.iter().map(|&i| y[i]).collect();
            acc * c.k() + c.label_at(&sub)
        })
    }

    /// Composite `p(u | x)` for total noise variance `variance`.
    pub fn cell_probs(&self, x: &[f64], variance: f64) -> Vec<f64> {
        let std = (variance / self.dim as f64).sqrt();
        let mut acc = vec![1.0];
        for (c, coords) in self.components.iter().zip(&self.coords) {
            let sub: Vec<f64> = coords.iter().map(|&i| x[i]).collect();
            let p = c.cell_probs(&sub, std);
            acc = acc.iter().flat_map(|a| p.iter().map(move |b| a * b)).collect();
        }
        acc
    }

    /// `|X| x K` matrix of `p(u | x)`.
    pub fn conditional(&self, c: &Constellation, variance: f64) -> Array2<f64> {
        let rows: Vec<Vec<f64>> = c.points().map(|x| self.cell_probs(x, variance)).collect();
        let k = self.composite_size();
        Array2::from_shape_fn((rows.len(), k), |(i, j)| rows[i][j])
    }
}

/// Exact information quantities for a pair of relay partitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactMetrics {
    pub h_u1: f64,
    pub h_u2: f64,
    pub h_joint: f64,
    pub mi: f64,
    pub map_ser: f64,
}

fn marginal(prior: f64, cond: &Array2<f64>) -> Vec<f64> {
    cond.sum_axis(ndarray::Axis(0)).iter().map(|v| v * prior).collect()
}

/// Exact metrics from the per-symbol index tables `p(u1|x)`, `p(u2|x)`
/// under a uniform prior and conditional independence given `x`.
pub fn exact_metrics_from_tables(pm1: &Array2<f64>, pm2: &Array2<f64>) -> ExactMetrics {
    let m = pm1.nrows();
    let prior = 1.0 / m as f64;
    let (k1, k2) = (pm1.ncols(), pm2.ncols());
    let mut h_joint = 0.0;
    let mut correct = 0.0;
    for u1 in 0..k1 {
        for u2 in 0..k2 {
            let mut total = 0.0;
            let mut best = 0.0f64;
            for x in 0..m {
                let v = prior * pm1[[x, u1]] * pm2[[x, u2]];
                total += v;
                best = best.max(v);
            }
            if total > 0.0 {
                h_joint -= total * total.max(EXACT_FLOOR).log2();
            }
            correct += best;
        }
    }
    let h_cond: f64 = (0..m)
        .map(|x| prior * (entropy_bits(&pm1.row(x).to_vec()) + entropy_bits(&pm2.row(x).to_vec())))
        .sum();
    ExactMetrics {
        h_u1: entropy_bits(&marginal(prior, pm1)),
        h_u2: entropy_bits(&marginal(prior, pm2)),
        h_joint,
        mi: (h_joint - h_cond).max(0.0),
        map_ser: (1.0 - correct).max(0.0),
    }
}

pub fn exact_metrics(
    part1: &RelayPartition,
    part2: &RelayPartition,
    c: &Constellation,
    sigma1_sq: f64,
    sigma2_sq: f64,
) -> ExactMetrics {
    exact_metrics_from_tables(&part1.conditional(c, sigma1_sq), &part2.conditional(c, sigma2_sq))
}

/// Exact MAP decision for every index pair (ties toward the lowest symbol).
pub fn map_decisions(pm1: &Array2<f64>, pm2: &Array2<f64>) -> Vec<usize> {
    let (k1, k2) = (pm1.ncols(), pm2.ncols());
    let mut out = Vec::with_capacity(k1 * k2);
    for u1 in 0..k1 {
        for u2 in 0..k2 {
            let scores: Vec<f64> = (0..pm1.nrows()).map(|x| pm1[[x, u1]] * pm2[[x, u2]]).collect();
            out.push(crate::info::argmax(&scores));
        }
    }
    out
}

/// Exact cross-entropy distortion and symbol error rate of a demodulator
/// table over index pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactDemodMetrics {
    pub distortion: f64,
    pub ser: f64,
}

pub fn exact_demod_metrics(
    pm1: &Array2<f64>,
    pm2: &Array2<f64>,
    neg_log2_table: &Array2<f64>,
    hard_table: &[usize],
) -> ExactDemodMetrics {
    let m = pm1.nrows();
    let prior = 1.0 / m as f64;
    let (k1, k2) = (pm1.ncols(), pm2.ncols());
    let mut distortion = 0.0;
    let mut correct = 0.0;
    for x in 0..m {
        for u1 in 0..k1 {
            let a = pm1[[x, u1]];
            if a == 0.0 {
                continue;
            }
            for u2 in 0..k2 {
                let p = prior * a * pm2[[x, u2]];
                let t = u1 * k2 + u2;
                distortion += p * neg_log2_table[[t, x]];
                if hard_table[t] == x {
                    correct += p;
                }
            }
        }
    }
    ExactDemodMetrics { distortion, ser: (1.0 - correct).max(0.0) }
}

/// Exact operational rate of a hard relay: `sum_u p(u) * code_length(u)`.
pub fn exact_rate(cond: &Array2<f64>, code_lengths: &[f64]) -> f64 {
    let prior = 1.0 / cond.nrows() as f64;
    marginal(prior, cond).iter().zip(code_lengths).map(|(p, l)| p * l).sum()
}

/// Index marginal `p(u)` under the uniform prior.
pub fn index_marginal(cond: &Array2<f64>) -> Vec<f64> {
    marginal(1.0 / cond.nrows() as f64, cond)
}

/// Symmetric uniform scalar quantizer with `cells` cells of width `step`.
pub fn uniform_partition(cells: usize, step: f64) -> IntervalPartition {
    let breakpoints = (0..cells - 1).map(|j| (j as f64 - (cells as f64 - 2.0) / 2.0) * step).collect();
    IntervalPartition { breakpoints, labels: (0..cells).collect(), k: cells }
}

/// Best `I(X;U)` of a single relay using a symmetric uniform scalar
/// quantizer (per axis for complex constellations) with `H(U) <= budget`.
pub fn uniform_quantizer_mi(c: &Constellation, variance: f64, budget: f64) -> f64 {
    let d = c.dim();
    let max_cells = if d == 1 { 64 } else { 32 };
    let span = c.levels().iter().fold(0.0f64, |m, v| m.max(v.abs())) + 3.0 * (variance / d as f64).sqrt();
    let ones = Array2::ones((c.order(), 1));
    let mut best = 0.0f64;
    for cells in 2..=max_cells {
        for s in 1..=30 {
            let step = 2.0 * span / cells as f64 * s as f64 / 20.0;
            let part = uniform_partition(cells, step);
            let relay = RelayPartition {
                components: vec![ComponentPartition::Interval(part); d],
                coords: (0..d).map(|i| vec![i]).collect(),
                dim: d,
            };
            let m = exact_metrics_from_tables(&relay.conditional(c, variance), &ones);
            if m.h_u1 <= budget {
                best = best.max(m.mi);
            }
        }
    }
    best
}

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    fn from_sums(sum: f64, sum_sq: f64, n: usize) -> Self {
        let nf = n as f64;
        let mean = sum / nf;
        let var = (sum_sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
        Self { mean, stderr: (var / nf).sqrt() }
    }

    /// `|self - value| <= sigmas * stderr + slack`.
    pub fn agrees_with(&self, value: f64, sigmas: f64, slack: f64) -> bool {
        (self.mean - value).abs() <= sigmas * self.stderr + slack
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McMetrics {
    pub n: usize,
    pub rates: Vec<Estimate>,
    /// Plug-in index entropies with delta-method standard errors.
    pub entropies: Vec<Estimate>,
    pub distortion: Estimate,
    pub ser: Estimate,
    /// Error rate of the supplied reference decision table, if any.
    pub reference_ser: Option<Estimate>,
}

/// Monte-Carlo metrics of the hard system: relays encode fresh channel
/// samples, the demodulator decides by table lookup.
///
/// `reference_decisions` optionally scores a second decision table (for
/// instance [`map_decisions`]) on the same samples.
pub fn mc_metrics(
    relays: &[RelayCodec; 2],
    demod: &DemodulatorModel,
    c: &Constellation,
    sampler: &mut ChannelSampler,
    symbol_rng: &mut impl rand::Rng,
    n: usize,
    reference_decisions: Option<&[usize]>,
) -> Result<McMetrics> {
    if n < 2 {
        return Err(Error::Argument("Monte-Carlo evaluation needs at least two samples".into()));
    }
    let table = demod.neg_log2_table()?;
    let hard = demod.hard_table()?;
    let k2 = relays[1].composite_size();
    let lengths = [relays[0].composite_code_lengths(), relays[1].composite_code_lengths()];
    let dim = c.dim();
    let chunk = 8192;
    let mut counts = [vec![0usize; relays[0].composite_size()], vec![0usize; k2]];
    let mut rate_sums = [[0.0; 2]; 2];
    let (mut d_sum, mut d_sq, mut err, mut ref_err) = (0.0, 0.0, 0usize, 0usize);
    let mut done = 0;
    while done < n {
        let b = chunk.min(n - done);
        let mut w = Vec::with_capacity(b);
        let mut ys = [Array2::zeros((b, dim)), Array2::zeros((b, dim))];
        let mut buf = vec![0.0; dim];
        for i in 0..b {
            let wi = symbol_rng.gen_range(0..c.order());
            w.push(wi);
            for (r, y) in ys.iter_mut().enumerate() {
                sampler.observe_into(r, c.point(wi), &mut buf);
                for (j, v) in buf.iter().enumerate() {
                    y[[i, j]] = *v;
                }
            }
        }
        let u1 = relays[0].encode_hard_batch(ys[0].view())?;
        let u2 = relays[1].encode_hard_batch(ys[1].view())?;
        for i in 0..b {
            for (r, u) in [u1[i], u2[i]].into_iter().enumerate() {
                counts[r][u] += 1;
                let l = lengths[r][u];
                rate_sums[r][0] += l;
                rate_sums[r][1] += l * l;
            }
            let t = u1[i] * k2 + u2[i];
            let d = table[[t, w[i]]];
            d_sum += d;
            d_sq += d * d;
            if hard[t] != w[i] {
                err += 1;
            }
            if let Some(refd) = reference_decisions {
                if refd[t] != w[i] {
                    ref_err += 1;
                }
            }
        }
        done += b;
    }
    let nf = n as f64;
    let entropies = counts
        .iter()
        .map(|cnt| {
            let (mut s, mut s2) = (0.0, 0.0);
            for &k in cnt.iter().filter(|&&k| k > 0) {
                let l = -(k as f64 / nf).log2();
                s += k as f64 * l;
                s2 += k as f64 * l * l;
            }
            Estimate::from_sums(s, s2, n)
        })
        .collect();
    let bernoulli = |e: usize| Estimate::from_sums(e as f64, e as f64, n);
    Ok(McMetrics {
        n,
        rates: rate_sums.iter().map(|s| Estimate::from_sums(s[0], s[1], n)).collect(),
        entropies,
        distortion: Estimate::from_sums(d_sum, d_sq, n),
        ser: bernoulli(err),
        reference_ser: reference_decisions.map(|_| bernoulli(ref_err)),
    })
}

/// `p(u|x)` table for a relay evaluated with the exact partition, as an owned array.
pub fn conditional_table(part: &RelayPartition, c: &Constellation, variance: f64) -> Array2<f64> {
    part.conditional(c, variance)
}

/// Rows of `table` normalized to sum to one (guards quadrature round-off).
pub fn normalize_rows(table: &mut Array2<f64>) {
    for mut row in table.rows_mut() {
        let s: f64 = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }
}

pub fn column_sums(table: &Array2<f64>) -> Array1<f64> {
    table.sum_axis(ndarray::Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelConfig;
    use crate::constellation::Modulation;
    use crate::relay_codec::{Component, EntropyModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sign_quantizer() -> FnQuantizer<impl Fn(&[f64]) -> usize> {
        FnQuantizer { dim: 1, k: 2, f: |y: &[f64]| usize::from(y[0] > 0.0) }
    }

    #[test]
    fn extracts_sign_threshold() {
        let p = IntervalPartition::extract(&sign_quantizer(), -5.0, 5.0, 1001).unwrap();
        assert_eq!(p.labels, vec![0, 1]);
        assert_eq!(p.breakpoints.len(), 1);
        assert!(p.breakpoints[0].abs() < 1e-9);
        // off-lattice threshold
        let q = FnQuantizer { dim: 1, k: 2, f: |y: &[f64]| usize::from(y[0] > 0.123_456_789) };
        let p = IntervalPartition::extract(&q, -5.0, 5.0, 1000).unwrap();
        assert!((p.breakpoints[0] - 0.123_456_789).abs() < 1e-9);
    }

    #[test]
    fn constant_encoder_single_interval() {
        let q = FnQuantizer { dim: 1, k: 3, f: |_: &[f64]| 2 };
        let p = IntervalPartition::extract(&q, -1.0, 1.0, 2000).unwrap();
        assert_eq!(p, IntervalPartition::constant(2, 3));
        assert!(p.binned_labels().is_empty());
    }

    #[test]
    fn extraction_errors() {
        assert!(IntervalPartition::extract(&sign_quantizer(), 1.0, -1.0, 2000).is_err());
        assert!(IntervalPartition::extract(&sign_quantizer(), -1.0, 1.0, 10).is_err());
    }

    #[test]
    fn binning_detection() {
        // label 0 on (-inf,-1] and (1, inf), label 1 in between
        let q = FnQuantizer { dim: 1, k: 2, f: |y: &[f64]| usize::from(y[0].abs() <= 1.0) };
        let p = IntervalPartition::extract(&q, -4.0, 4.0, 4000).unwrap();
        assert_eq!(p.labels, vec![0, 1, 0]);
        assert_eq!(p.binned_labels(), vec![0]);
        // both outer intervals carry mass for points at +-1
        assert_eq!(p.binned_labels_with_mass(&[-1.5, 1.5], 0.5, 1e-3), vec![0]);
        // only the left one does for a point far to the left
        assert!(p.binned_labels_with_mass(&[-3.0], 0.3, 1e-3).is_empty());
    }

    #[test]
    fn cell_probs_sign() {
        let p = exact_sign();
        let c = p.cell_probs(0.0, 1.0);
        assert!((c[0] - 0.5).abs() < 1e-9 && (c[1] - 0.5).abs() < 1e-9);
        let s = 0.1f64.sqrt();
        let c = p.cell_probs(1.0, s);
        // Q(3.16227766) ~= 7.827e-4
        assert!((c[0] - 7.827e-4).abs() < 1e-7);
        let oracle = q_tail_series(1.0 / s);
        assert!((c[0] - oracle).abs() < 1e-12, "{} vs {oracle}", c[0]);
        assert!((c[0] + c[1] - 1.0).abs() < 1e-15);
        // an extracted threshold is off by at most 1e-9, i.e. density * 1e-9 in mass
        let extracted = IntervalPartition::extract(&sign_quantizer(), -5.0, 5.0, 1000).unwrap();
        let density = (-0.5f64 / 0.1).exp() / (2.0 * std::f64::consts::PI * 0.1).sqrt();
        assert!((extracted.cell_probs(1.0, s)[0] - oracle).abs() <= density * 1e-9 + 1e-13);
    }

    /// Independent tail oracle: Q(z) from the continued fraction of the Mills ratio.
    fn q_tail_series(z: f64) -> f64 {
        let mut frac = 0.0;
        for k in (1..200).rev() {
            frac = k as f64 / (z + frac);
        }
        (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() / (z + frac)
    }

    #[test]
    fn cell_probs_complete() {
        let q = FnQuantizer { dim: 1, k: 5, f: |y: &[f64]| ((y[0] * 3.0).floor().rem_euclid(5.0)) as usize };
        let p = IntervalPartition::extract(&q, -6.0, 6.0, 5000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = rng.gen_range(-8.0..8.0);
            let s = rng.gen_range(0.05..3.0);
            let total: f64 = p.cell_probs(x, s).iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "{total}");
        }
    }

    #[test]
    fn grid_partition_of_product_quantizer() {
        let q = FnQuantizer { dim: 2, k: 4, f: |y: &[f64]| 2 * usize::from(y[0] > 0.0) + usize::from(y[1] > 0.0) };
        let g = GridPartition::extract(&q, -4.0, 4.0, 100).unwrap();
        let x = [0.3, -0.2];
        let p = g.cell_probs(&x, 0.5);
        let a = q_func(-0.3 / 0.5);
        let b = q_func(0.2 / 0.5);
        let want = [(1.0 - a) * (1.0 - b), (1.0 - a) * b, a * (1.0 - b), a * b];
        for (got, w) in p.iter().zip(want) {
            assert!((got - w).abs() < 1e-12, "{got} {w}");
        }
        assert_eq!(g.label_at(&[1.0, -1.0]), 2);
    }

    fn exact_sign() -> IntervalPartition {
        IntervalPartition { breakpoints: vec![0.0], labels: vec![0, 1], k: 2 }
    }

    fn sign_partition() -> RelayPartition {
        RelayPartition::single(ComponentPartition::Interval(exact_sign()), 1)
    }

    #[test]
    fn constant_relays_carry_nothing() {
        let c = Constellation::new(Modulation::Pam4, 1.0).unwrap();
        let part = RelayPartition::single(ComponentPartition::Interval(IntervalPartition::constant(0, 1)), 1);
        let m = exact_metrics(&part, &part, &c, 0.1, 0.1);
        assert!(m.mi.abs() < 1e-15);
        assert!((m.map_ser - 0.75).abs() < 1e-15);
        assert_eq!(m.h_u1, 0.0);
    }

    /// Two sign quantizers on BPSK: closed form vs. brute-force simulation.
    #[test]
    fn bpsk_sign_quantizers() {
        let c = Constellation::new(Modulation::Bpsk, 1.0).unwrap();
        let part = sign_partition();
        let m = exact_metrics(&part, &part, &c, 0.1, 0.1);
        let eps = q_tail_series(1.0 / 0.1f64.sqrt());
        // disagreeing pairs tie; MAP picks symbol 0 on both, wrong half the time
        let closed = eps * eps + eps * (1.0 - eps);
        assert!((m.map_ser - closed).abs() < 1e-12, "{} vs {closed}", m.map_ser);
        // brute force
        let n = 10_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = ChannelConfig::new(0.1, 0.1, 1.0, 1).unwrap();
        let mut s = ChannelSampler::from_seed(cfg, 18);
        let mut err = 0usize;
        for _ in 0..n {
            let w = rng.gen_range(0..2);
            let (y1, y2) = s.sample(c.point(w)).unwrap();
            let (a, b) = (usize::from(y1[0] > 0.0), usize::from(y2[0] > 0.0));
            let dec = if a == b { a } else { 0 };
            err += usize::from(dec != w);
        }
        let p = err as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((p - m.map_ser).abs() < 3.0 * se, "mc {p} exact {}", m.map_ser);
        // entropy and MI sanity
        assert!((m.h_u1 - 1.0).abs() < 1e-12);
        assert!(m.mi <= m.h_joint + 1e-12 && m.mi <= 1.0);
    }

    #[test]
    fn noiseless_identity_quantizers() {
        for modulation in [Modulation::Bpsk, Modulation::Pam4, Modulation::Pam8] {
            let c = Constellation::new(modulation, 1.0).unwrap();
            let pts: Vec<f64> = c.points().map(|p| p[0]).collect();
            let mids: Vec<f64> = pts.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            let q = FnQuantizer { dim: 1, k: pts.len(), f: move |y: &[f64]| mids.partition_point(|&m| m < y[0]) };
            let p = IntervalPartition::extract(&q, -3.0, 3.0, 3000).unwrap();
            let part = RelayPartition::single(ComponentPartition::Interval(p), 1);
            let m = exact_metrics(&part, &part, &c, 1e-12, 1e-12);
            assert!((m.mi - (c.order() as f64).log2()).abs() < 1e-9);
            assert!(m.map_ser < 1e-12);
        }
    }

    #[test]
    fn split_relay_cell_probs_factorize() {
        let c = Constellation::new(Modulation::Qam4, 1.0).unwrap();
        let sign = exact_sign();
        let part = RelayPartition {
            components: vec![ComponentPartition::Interval(sign.clone()), ComponentPartition::Interval(sign)],
            coords: vec![vec![0], vec![1]],
            dim: 2,
        };
        // QAM4 symbols are sign-detectable per axis; noise per axis = 0.2 / 2
        let m = exact_metrics(&part, &part, &c, 0.2, 0.2);
        let eps = q_func(c.point(0)[0].abs() / 0.1f64.sqrt());
        let per_axis = eps * eps + eps * (1.0 - eps);
        let closed = 1.0 - (1.0 - per_axis).powi(2);
        assert!((m.map_ser - closed).abs() < 1e-12, "{} vs {closed}", m.map_ser);
    }

    #[test]
    fn exact_demod_uniform() {
        let part = sign_partition();
        let c = Constellation::new(Modulation::Bpsk, 1.0).unwrap();
        let pm = part.conditional(&c, 0.1);
        let table = Array2::from_elem((4, 2), 1.0);
        let r = exact_demod_metrics(&pm, &pm, &table, &[0, 0, 0, 0]);
        assert!((r.distortion - 1.0).abs() < 1e-12);
        assert!((r.ser - 0.5).abs() < 1e-12);
        let md = map_decisions(&pm, &pm);
        assert_eq!(md, vec![0, 0, 0, 1]);
    }

    #[test]
    fn mc_agrees_with_exact_and_scales() {
        use crate::demodulator::DemodulatorModel;
        let c = Constellation::new(Modulation::Pam4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hidden = [16, 16];
        let make = |rng: &mut ChaCha8Rng| RelayCodec {
            components: vec![Component {
                encoder: EncoderModel::new(1, 6, &hidden, 1.0, 0.01, rng).unwrap(),
                entropy: EntropyModel { params: vec![0.3, -0.2, 0.0, 1.0, 0.5, -1.0] },
                coords: vec![0],
            }],
        };
        let relays = [make(&mut rng), make(&mut rng)];
        let demod = DemodulatorModel::new(vec![vec![6], vec![6]], 4, &hidden, 0.01, &mut rng);
        let cfg = ChannelConfig::from_snr_db(10.0, 10.0, 1.0, 1).unwrap();
        let settings = ExtractionSettings { resolution_1d: 4000, ..Default::default() };
        let parts: Vec<RelayPartition> = relays
            .iter()
            .enumerate()
            .map(|(i, r)| RelayPartition::extract(r, 1.0, cfg.variance(i), 1, &settings).unwrap())
            .collect();
        let pm1 = parts[0].conditional(&c, cfg.sigma1_sq);
        let pm2 = parts[1].conditional(&c, cfg.sigma2_sq);
        let exact = exact_metrics_from_tables(&pm1, &pm2);
        let demod_exact = exact_demod_metrics(&pm1, &pm2, &demod.neg_log2_table().unwrap(), &demod.hard_table().unwrap());
        let map = map_decisions(&pm1, &pm2);
        let run = |n: usize, seed: u64| {
            let mut s = ChannelSampler::from_seed(cfg, seed);
            let mut sym = ChaCha8Rng::seed_from_u64(seed + 100);
            mc_metrics(&relays, &demod, &c, &mut s, &mut sym, n, Some(&map)).unwrap()
        };
        let mc = run(200_000, 1);
        assert!(mc.entropies[0].agrees_with(exact.h_u1, 3.0, 1e-4), "{:?} {}", mc.entropies[0], exact.h_u1);
        assert!(mc.entropies[1].agrees_with(exact.h_u2, 3.0, 1e-4));
        assert!(mc.ser.agrees_with(demod_exact.ser, 3.0, 0.0));
        assert!(mc.distortion.agrees_with(demod_exact.distortion, 3.0, 0.0));
        assert!(mc.reference_ser.unwrap().agrees_with(exact.map_ser, 3.0, 0.0));
        let lengths = relays[0].composite_code_lengths();
        assert!(mc.rates[0].agrees_with(exact_rate(&pm1, &lengths), 3.0, 0.0));
        let big = run(400_000, 2);
        let ratio = big.ser.stderr / mc.ser.stderr;
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.2 * std::f64::consts::FRAC_1_SQRT_2, "{ratio}");
    }

    #[test]
    fn refinement_fidelity_on_trained_like_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = EncoderModel::new(1, 8, &[32, 32], 0.3, 0.01, &mut rng).unwrap();
        let (lo, hi, res) = (-4.0, 4.0, 2000);
        let p = IntervalPartition::extract(&enc, lo, hi, res).unwrap();
        let fine = lattice(lo, hi, 4 * res);
        let labels = enc.encode_hard_batch(ArrayView2::from_shape((fine.len(), 1), &fine).unwrap()).unwrap();
        let cell = (hi - lo) / (res - 1) as f64;
        let mut bad = 0;
        for (y, l) in fine.iter().zip(labels) {
            if p.label_at(*y) != l {
                bad += 1;
                let near = p.breakpoints.iter().any(|b| (b - y).abs() <= cell);
                assert!(near, "disagreement far from any breakpoint at {y}");
            }
        }
        assert!(bad as f64 / fine.len() as f64 <= 1e-4, "{bad}");
    }
}
