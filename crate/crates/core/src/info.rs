//! Small information-theoretic helpers shared across modules.

use std::f64::consts::LN_2;

/// Floor applied to probabilities inside training-time logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Floor used by exact entropy evaluation; `0 * log 0` contributes nothing.
pub const EXACT_FLOOR: f64 = 1e-300;

/// Index of the largest entry, ties resolved toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `-log2(max(p, PROB_FLOOR))`.
pub fn neg_log2(p: f64) -> f64 {
    -p.max(PROB_FLOOR).log2()
}

/// Shannon entropy in bits of a (possibly unnormalized-by-rounding) pmf.
pub fn entropy_bits(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.max(EXACT_FLOOR).log2())
        .sum()
}

/// Cross-entropy `sum_u p(u) * -log2 q(u)` in bits.
pub fn cross_entropy_bits(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * neg_log2(b))
        .sum()
}

/// Numerically stable softmax of `logits / temperature` written into `out`.
pub fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, 1.0, &mut out);
    out
}

/// `log_softmax(logits)` expressed in bits and negated: `-log2 softmax`.
pub fn neg_log2_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let cap = -PROB_FLOOR.log2();
    logits.iter().map(|z| ((lse - z) / LN_2).min(cap)).collect()
}
