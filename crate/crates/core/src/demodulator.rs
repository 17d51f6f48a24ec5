//! Destination demodulator: maps the relays' index representations to a
//! distribution over the coded symbols.
//!
//! The network input is the concatenation of every component's index
//! vector, relay by relay. One-hot vectors give the deployed (hard) path;
//! arbitrary categorical vectors are accepted as well. Because the hard
//! path only ever sees finitely many inputs, training and exact evaluation
//! work on the full *table* of outputs over all composite index tuples,
//! ordered with relay 1 most significant (`t = u1 * K2 + u2`).

use std::f64::consts::LN_2;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::info::{argmax, neg_log2_softmax, softmax, PROB_FLOOR};
use crate::nn::{DenseNet, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct DemodulatorModel {
    pub net: DenseNet,
    /// Component alphabet sizes, per relay.
    relay_sizes: Vec<Vec<usize>>,
}

impl DemodulatorModel {
    pub fn new<R: Rng + ?Sized>(
        relay_sizes: Vec<Vec<usize>>,
        order: usize,
        hidden: &[usize],
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let width = relay_sizes.iter().flatten().sum();
        Self { net: DenseNet::new(width, hidden, order, slope, rng), relay_sizes }
    }

    pub fn zeros(relay_sizes: Vec<Vec<usize>>, order: usize, hidden: &[usize], slope: f64) -> Self {
        let width = relay_sizes.iter().flatten().sum();
        Self { net: DenseNet::zeros(width, hidden, order, slope), relay_sizes }
    }

    pub fn from_net(net: DenseNet, relay_sizes: Vec<Vec<usize>>) -> Result<Self> {
        let width: usize = relay_sizes.iter().flatten().sum();
        if net.input_width() != width {
            return Err(Error::WidthMismatch { expected: width, got: net.input_width() });
        }
        Ok(Self { net, relay_sizes })
    }

    pub fn relay_sizes(&self) -> &[Vec<usize>] {
        &self.relay_sizes
    }

    pub fn order(&self) -> usize {
        self.net.output_width()
    }

    pub fn num_relays(&self) -> usize {
        self.relay_sizes.len()
    }

    pub fn relay_width(&self, relay: usize) -> usize {
        self.relay_sizes[relay].iter().sum()
    }

    pub fn composite_size(&self, relay: usize) -> usize {
        self.relay_sizes[relay].iter().product()
    }

    pub fn table_len(&self) -> usize {
        (0..self.num_relays()).map(|r| self.composite_size(r)).product()
    }

    fn concat(&self, reprs: &[&[f64]]) -> Result<Vec<f64>> {
        if reprs.len() != self.num_relays() {
            return Err(Error::Argument(format!(
                "expected {} relay representations, got {}",
                self.num_relays(),
                reprs.len()
            )));
        }
        let mut input = Vec::with_capacity(self.net.input_width());
        for (r, rep) in reprs.iter().enumerate() {
            if rep.len() != self.relay_width(r) {
                return Err(Error::WidthMismatch { expected: self.relay_width(r), got: rep.len() });
            }
            input.extend_from_slice(rep);
        }
        Ok(input)
    }

    /// Symbol distribution for one set of relay representations.
    pub fn demod_soft(&self, reprs: &[&[f64]]) -> Result<Vec<f64>> {
        Ok(softmax(&self.net.forward(&self.concat(reprs)?)?.0))
    }

    /// Hard decision (zero-based), ties toward the lowest symbol index.
    pub fn demod_hard(&self, reprs: &[&[f64]]) -> Result<usize> {
        Ok(argmax(&self.net.forward(&self.concat(reprs)?)?.0))
    }

    /// One-hot representation of a composite index at `relay`.
    pub fn one_hot(&self, relay: usize, mut u: usize) -> Vec<f64> {
        let sizes = &self.relay_sizes[relay];
        let mut out = vec![0.0; sizes.iter().sum()];
        let mut parts = vec![0; sizes.len()];
        for (i, &k) in sizes.iter().enumerate().rev() {
            parts[i] = u % k;
            u /= k;
        }
        let mut offset = 0;
        for (&p, &k) in parts.iter().zip(sizes) {
            out[offset + p] = 1.0;
            offset += k;
        }
        out
    }

    /// One-hot network inputs for every composite index tuple (rows).
    pub fn table_inputs(&self) -> Array2<f64> {
        let n = self.table_len();
        let mut inputs = Array2::zeros((n, self.net.input_width()));
        for t in 0..n {
            let mut rem = t;
            let mut tuple = vec![0; self.num_relays()];
            for r in (0..self.num_relays()).rev() {
                let k = self.composite_size(r);
                tuple[r] = rem % k;
                rem /= k;
            }
            let mut offset = 0;
            for (r, &u) in tuple.iter().enumerate() {
                for (j, v) in self.one_hot(r, u).into_iter().enumerate() {
                    inputs[[t, offset + j]] = v;
                }
                offset += self.relay_width(r);
            }
        }
        inputs
    }

    /// Active input coordinates of every table row (the ones of [`Self::table_inputs`]).
    pub fn table_active(&self) -> Vec<Vec<usize>> {
        let n = self.table_len();
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let mut rem = t;
            let mut tuple = vec![0; self.num_relays()];
            for r in (0..self.num_relays()).rev() {
                let k = self.composite_size(r);
                tuple[r] = rem % k;
                rem /= k;
            }
            let mut active = Vec::new();
            let mut offset = 0;
            for (r, &u) in tuple.iter().enumerate() {
                let sizes = &self.relay_sizes[r];
                let mut parts = vec![0; sizes.len()];
                let mut v = u;
                for (i, &k) in sizes.iter().enumerate().rev() {
                    parts[i] = v % k;
                    v /= k;
                }
                for (&p, &k) in parts.iter().zip(sizes) {
                    active.push(offset + p);
                    offset += k;
                }
            }
            out.push(active);
        }
        out
    }

    pub fn table_logits(&self) -> Result<Array2<f64>> {
        self.net.predict_batch_sparse(&self.table_active())
    }

    pub fn table_forward(&self) -> Result<(Array2<f64>, Tape)> {
        self.net.forward_batch_sparse(&self.table_active())
    }

    /// `-log2 p(w | tuple)` for every tuple (rows) and symbol (columns).
    pub fn neg_log2_table(&self) -> Result<Array2<f64>> {
        Ok(neg_log2_rows(&self.table_logits()?))
    }

    /// Hard decision for every tuple.
    pub fn hard_table(&self) -> Result<Vec<usize>> {
        let logits = self.table_logits()?;
        Ok(logits.rows().into_iter().map(|r| argmax(r.as_slice().expect("row-major"))).collect())
    }

    /// Expected cross-entropy (bits) under per-sample relay distributions.
    /// For a single-relay demodulator pass `p2 = None`.
    pub fn distortion(&self, p1: &Array2<f64>, p2: Option<&Array2<f64>>, w: &[usize]) -> Result<f64> {
        let table = self.neg_log2_table()?;
        let ones;
        let p2 = match p2 {
            Some(p) => p,
            None => {
                ones = Array2::ones((p1.nrows(), 1));
                &ones
            }
        };
        if p1.ncols() * p2.ncols() != table.nrows() {
            return Err(Error::WidthMismatch { expected: table.nrows(), got: p1.ncols() * p2.ncols() });
        }
        Ok(marginal_distortion(&table, p1, p2, w))
    }
}

pub fn neg_log2_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (r, mut o) in logits.rows().into_iter().zip(out.rows_mut()) {
        let v = neg_log2_softmax(r.as_slice().expect("row-major"));
        o.as_slice_mut().expect("row-major").copy_from_slice(&v);
    }
    out
}

/// `mean_b sum_{u1,u2} p1[b,u1] p2[b,u2] table[u1*K2+u2, w_b]`.
pub fn marginal_distortion(table: &Array2<f64>, p1: &Array2<f64>, p2: &Array2<f64>, w: &[usize]) -> f64 {
    let k2 = p2.ncols();
    let mut total = 0.0;
    for (b, &wb) in w.iter().enumerate() {
        for u1 in 0..p1.ncols() {
            let a = p1[[b, u1]];
            if a == 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for u2 in 0..k2 {
                inner += p2[[b, u2]] * table[[u1 * k2 + u2, wb]];
            }
            total += a * inner;
        }
    }
    total / w.len() as f64
}

/// Value and gradients of [`marginal_distortion`].
#[derive(Debug, Clone)]
pub struct DistortionGrad {
    pub value: f64,
    pub d_p1: Array2<f64>,
    pub d_p2: Array2<f64>,
    /// Gradient w.r.t. the `-log2 p` table entries.
    pub d_table: Array2<f64>,
}

pub fn marginal_distortion_grad(table: &Array2<f64>, p1: &Array2<f64>, p2: &Array2<f64>, w: &[usize]) -> DistortionGrad {
    let (bsz, k1) = p1.dim();
    let k2 = p2.ncols();
    let order = table.ncols();
    // symbol-major copy for contiguous access
    let table_t = table.t().as_standard_layout().to_owned();
    let mut d_table_t = Array2::<f64>::zeros((order, table.nrows()));
    let mut d_p1 = Array2::zeros((bsz, k1));
    let mut d_p2 = Array2::zeros((bsz, k2));
    let inv = 1.0 / bsz as f64;
    let mut value = 0.0;
    for (b, &wb) in w.iter().enumerate() {
        let col = table_t.row(wb);
        let col = col.as_slice().expect("row-major");
        let mut dcol = d_table_t.row_mut(wb);
        let dcol = dcol.as_slice_mut().expect("row-major");
        let q = p2.row(b);
        let q = q.as_slice().expect("row-major");
        let mut dq = vec![0.0; k2];
        for u1 in 0..k1 {
            let a = p1[[b, u1]];
            let row = &col[u1 * k2..(u1 + 1) * k2];
            let mut inner = 0.0;
            for u2 in 0..k2 {
                inner += q[u2] * row[u2];
            }
            d_p1[[b, u1]] = inner * inv;
            value += a * inner;
            if a != 0.0 {
                let drow = &mut dcol[u1 * k2..(u1 + 1) * k2];
                for u2 in 0..k2 {
                    dq[u2] += a * row[u2];
                    drow[u2] += a * q[u2] * inv;
                }
            }
        }
        for u2 in 0..k2 {
            d_p2[[b, u2]] = dq[u2] * inv;
        }
    }
    DistortionGrad {
        value: value * inv,
        d_p1,
        d_p2,
        d_table: d_table_t.t().as_standard_layout().to_owned(),
    }
}

/// Back-propagates a gradient on `-log2 softmax(logits)` rows to the logits.
/// Entries clamped by the probability floor carry no gradient.
pub fn neg_log2_softmax_backward(logits: ArrayView2<f64>, table: &Array2<f64>, d_table: &Array2<f64>) -> Array2<f64> {
    let cap = -PROB_FLOOR.log2();
    let mut out = Array2::zeros(logits.raw_dim());
    for ((z, (c, g)), mut o) in logits
        .rows()
        .into_iter()
        .zip(table.rows().into_iter().zip(d_table.rows()))
        .zip(out.rows_mut())
    {
        let s = softmax(z.as_slice().expect("row-major"));
        let g: Vec<f64> = g.iter().zip(c.iter()).map(|(&g, &c)| if c >= cap { 0.0 } else { g }).collect();
        let total: f64 = g.iter().sum();
        for k in 0..s.len() {
            o[k] = (s[k] * total - g[k]) / LN_2;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const HIDDEN: [usize; 3] = [16, 24, 8];

    #[test]
    fn sparse_table_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = DemodulatorModel::new(vec![vec![3, 2], vec![4]], 4, &HIDDEN, 0.01, &mut rng);
        let dense = d.table_inputs();
        let active = d.table_active();
        for (row, cols) in dense.rows().into_iter().zip(&active) {
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(j, _)| j).collect();
            assert_eq!(&ones, cols);
            assert_eq!(row.sum(), cols.len() as f64);
        }
        let (a, ta) = d.net.forward_batch(dense.view()).unwrap();
        let (b, tb) = d.net.forward_batch_sparse(&active).unwrap();
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
        let up = Array2::from_shape_fn(a.raw_dim(), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let ga = d.net.backward(&ta, up.view()).unwrap().0;
        let gb = d.net.backward_params(&tb, up.view()).unwrap();
        for (x, y) in ga.tensors().iter().zip(gb.tensors()) {
            assert!(x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-10));
        }
        assert!(d.net.forward_batch_sparse(&[vec![99]]).is_err());
    }

    #[test]
    fn zero_demod_uniform() {
        let d = DemodulatorModel::zeros(vec![vec![4], vec![4]], 4, &HIDDEN, 0.01);
        let p = d.demod_soft(&[&d.one_hot(0, 1), &d.one_hot(1, 3)]).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sums_to_one_random_soft_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DemodulatorModel::new(vec![vec![3], vec![5]], 4, &HIDDEN, 0.01, &mut rng);
        for _ in 0..10_000 {
            let a: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen::<f64>()).collect();
            let p = d.demod_soft(&[&a, &b]).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn width_errors() {
        let d = DemodulatorModel::zeros(vec![vec![4], vec![4]], 4, &HIDDEN, 0.01);
        assert!(matches!(d.demod_soft(&[&[0.0; 3], &[0.0; 4]]), Err(Error::WidthMismatch { .. })));
        assert!(d.demod_soft(&[&[0.0; 4]]).is_err());
    }

    #[test]
    fn hard_decision_ties() {
        use crate::nn::{Activation, Layer};
        use ndarray::array;
        let layer = Layer {
            weight: Array2::zeros((4, 2)),
            bias: array![0.1, 0.9, 0.9, 0.2],
            activation: Activation::Identity,
        };
        let net = DenseNet::from_layers(vec![layer], 0.01).unwrap();
        let d = DemodulatorModel::from_net(net, vec![vec![1], vec![1]]).unwrap();
        assert_eq!(d.demod_hard(&[&[1.0], &[1.0]]).unwrap(), 1);
        let layer = Layer {
            weight: Array2::zeros((4, 2)),
            bias: array![0.1, 0.0, 0.3, 2.0],
            activation: Activation::Identity,
        };
        let d = DemodulatorModel::from_net(DenseNet::from_layers(vec![layer], 0.01).unwrap(), vec![vec![1], vec![1]]).unwrap();
        assert_eq!(d.demod_hard(&[&[1.0], &[1.0]]).unwrap(), 3);
    }

    #[test]
    fn table_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = DemodulatorModel::new(vec![vec![2, 3], vec![4]], 4, &HIDDEN, 0.01, &mut rng);
        let table = d.neg_log2_table().unwrap();
        let hard = d.hard_table().unwrap();
        assert_eq!(table.nrows(), 24);
        for u1 in 0..6 {
            for u2 in 0..4 {
                let p = d.demod_soft(&[&d.one_hot(0, u1), &d.one_hot(1, u2)]).unwrap();
                for w in 0..4 {
                    assert!((table[[u1 * 4 + u2, w]] + p[w].log2()).abs() < 1e-12);
                }
                assert_eq!(hard[u1 * 4 + u2], argmax(&p));
            }
        }
        // component one-hot layout: composite 4 of sizes [2,3] = (1, 1)
        assert_eq!(d.one_hot(0, 4), vec![0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn distortion_limits() {
        let uniform = DemodulatorModel::zeros(vec![vec![2], vec![2]], 4, &HIDDEN, 0.01);
        let p = Array2::from_elem((3, 2), 0.5);
        let d = uniform.distortion(&p, Some(&p), &[0, 1, 3]).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        // perfect predictor: table zero at the true symbol
        let mut table = Array2::from_elem((4, 4), 50.0);
        for t in 0..4 {
            table[[t, t]] = 0.0;
        }
        let p1 = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let p2 = ndarray::array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(marginal_distortion(&table, &p1, &p2, &[1, 2]), 0.0);
    }

    #[test]
    fn distortion_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = Array2::from_shape_fn((6, 3), |_| rng.gen_range(0.1..4.0));
        let p1 = Array2::from_shape_fn((5, 2), |_| rng.gen::<f64>());
        let p2 = Array2::from_shape_fn((5, 3), |_| rng.gen::<f64>());
        let w = [0, 2, 1, 1, 0];
        let g = marginal_distortion_grad(&table, &p1, &p2, &w);
        assert!((g.value - marginal_distortion(&table, &p1, &p2, &w)).abs() < 1e-14);
        let h = 1e-6;
        let check = |an: f64, f: &dyn Fn(f64) -> f64| {
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - an).abs() < 1e-8, "fd {fd} an {an}");
        };
        for i in 0..5 {
            for j in 0..2 {
                check(g.d_p1[[i, j]], &|e| {
                    let mut q = p1.clone();
                    q[[i, j]] += e;
                    marginal_distortion(&table, &q, &p2, &w)
                });
            }
            for j in 0..3 {
                check(g.d_p2[[i, j]], &|e| {
                    let mut q = p2.clone();
                    q[[i, j]] += e;
                    marginal_distortion(&table, &p1, &q, &w)
                });
            }
        }
        for t in 0..6 {
            for s in 0..3 {
                check(g.d_table[[t, s]], &|e| {
                    let mut q = table.clone();
                    q[[t, s]] += e;
                    marginal_distortion(&q, &p1, &p2, &w)
                });
            }
        }
    }
}
