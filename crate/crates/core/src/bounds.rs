//! Reference curves for the primitive diamond relay channel with a fixed
//! uniform finite constellation: the one- and two-perfect-relay mutual
//! informations and the cut-set bound.
//!
//! Mutual informations are computed symbol by symbol with tensorized
//! Gauss-Hermite quadrature over the Gaussian noise:
//!
//! `I(X;Y) = log2 M - (1/M) sum_x E_N[ log2 sum_x' exp(-(|x - x' + N|^2 - |N|^2) / (2 s^2)) ]`
//!
//! where `s^2` is the per-dimension noise variance.

use serde::{Deserialize, Serialize};

use crate::constellation::Constellation;
use crate::error::{Error, Result};

/// Default Gauss-Hermite order.
pub const GH_ORDER: usize = 96;

/// Gauss-Hermite nodes and weights for `int exp(-t^2) f(t) dt`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature order must be positive");
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let nf = n as f64;
        let m = n.div_ceil(2);
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..200 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        // ascending node order
        x.reverse();
        w.reverse();
        Self { nodes: x, weights: w }
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&t, &w)| w * f(t)).sum()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// `I(X; Y_1, ..., Y_n)` for independent Gaussian observations of the same
/// symbol, by tensorized quadrature over all noise coordinates.
fn mi_quadrature(c: &Constellation, variances: &[f64], order: usize) -> f64 {
    let gh = GaussHermite::new(order);
    let dim = c.dim();
    let coords = dim * variances.len();
    let per_dim_var: Vec<f64> = variances.iter().map(|v| v / dim as f64).collect();
    let norm = std::f64::consts::PI.powf(-(coords as f64) / 2.0);
    let m = c.order();
    let points: Vec<&[f64]> = c.points().collect();
    let total_nodes = order.pow(coords as u32);
    let mut expo = vec![0.0; m];
    let mut noise = vec![0.0; coords];
    let mut acc = 0.0;
    for x in &points {
        for flat in 0..total_nodes {
            let mut rem = flat;
            let mut weight = norm;
            for (j, n) in noise.iter_mut().enumerate() {
                let idx = rem % order;
                rem /= order;
                let obs = j / dim;
                *n = (2.0 * per_dim_var[obs]).sqrt() * gh.nodes[idx];
                weight *= gh.weights[idx];
            }
            for (xp, e) in points.iter().zip(expo.iter_mut()) {
                let mut s = 0.0;
                for (j, &n) in noise.iter().enumerate() {
                    let obs = j / dim;
                    let d = x[j % dim] - xp[j % dim];
                    s -= (d * d + 2.0 * d * n) / (2.0 * per_dim_var[obs]);
                }
                *e = s;
            }
            acc += weight * log_sum_exp(&expo);
        }
    }
    let h_cond = acc / m as f64 / std::f64::consts::LN_2;
    ((m as f64).log2() - h_cond).max(0.0)
}

fn check_variance(v: f64) -> Result<()> {
    if !(v > 0.0) || v.is_nan() {
        return Err(Error::Argument(format!("noise variance must be positive, got {v}")));
    }
    Ok(())
}

/// `I(X;Y)` for `Y = X + N`, `N` of total variance `variance` (bits).
pub fn mi_awgn(c: &Constellation, variance: f64) -> Result<f64> {
    check_variance(variance)?;
    Ok(mi_quadrature(c, &[variance], GH_ORDER))
}

/// Variance of the sufficient statistic combining two independent observations.
pub fn combined_variance(v1: f64, v2: f64) -> f64 {
    if v1.is_infinite() {
        return v2;
    }
    if v2.is_infinite() {
        return v1;
    }
    v1 * v2 / (v1 + v2)
}

/// `I(X;Y_1,Y_2)`. Real constellations use 2-D quadrature over both noises;
/// complex ones reduce to [`mi_awgn`] at the combined variance (the weighted
/// sum of observations is sufficient).
pub fn mi_two_obs(c: &Constellation, v1: f64, v2: f64) -> Result<f64> {
    check_variance(v1)?;
    check_variance(v2)?;
    if c.dim() == 1 && v1.is_finite() && v2.is_finite() {
        Ok(mi_quadrature(c, &[v1, v2], GH_ORDER))
    } else {
        mi_awgn(c, combined_variance(v1, v2))
    }
}

/// Sufficient-statistic route for `I(X;Y_1,Y_2)`.
pub fn mi_two_obs_reduced(c: &Constellation, v1: f64, v2: f64) -> Result<f64> {
    check_variance(v1)?;
    check_variance(v2)?;
    mi_awgn(c, combined_variance(v1, v2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    /// Link rates in bits per channel use; `f64::INFINITY` for a perfect link.
    pub rate1: f64,
    pub rate2: f64,
}

/// Mutual informations a cut-set evaluation needs, computed once per SNR pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceInfo {
    pub mi_relay1: f64,
    pub mi_relay2: f64,
    pub mi_both: f64,
}

impl ReferenceInfo {
    pub fn new(c: &Constellation, v1: f64, v2: f64) -> Result<Self> {
        Ok(Self {
            mi_relay1: mi_awgn(c, v1)?,
            mi_relay2: mi_awgn(c, v2)?,
            mi_both: mi_two_obs(c, v1, v2)?,
        })
    }

    /// `min{ I(X;Y1,Y2), R1 + R2, I(X;Y1) + R2, I(X;Y2) + R1 }`.
    pub fn cut_set(&self, rate1: f64, rate2: f64) -> Result<f64> {
        if !(rate1 >= 0.0 && rate2 >= 0.0) {
            return Err(Error::Argument(format!("link rates must be nonnegative ({rate1}, {rate2})")));
        }
        Ok([self.mi_both, rate1 + rate2, self.mi_relay1 + rate2, self.mi_relay2 + rate1]
            .into_iter()
            .fold(f64::INFINITY, f64::min))
    }
}

pub fn cut_set(c: &Constellation, q: &BoundQuery) -> Result<f64> {
    ReferenceInfo::new(c, q.sigma1_sq, q.sigma2_sq)?.cut_set(q.rate1, q.rate2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::snr_db_to_variance;
    use crate::constellation::Modulation;
    use proptest::prelude::*;

    /// Independent oracle: `h(Y) - h(N)` by trapezoidal integration of the
    /// mixture density on a fine grid (real constellations).
    fn mi_trapezoid(c: &Constellation, variance: f64, steps: usize) -> f64 {
        let s = variance.sqrt();
        let pts: Vec<f64> = c.points().map(|p| p[0]).collect();
        let lo = pts[0] - 12.0 * s;
        let hi = pts[pts.len() - 1] + 12.0 * s;
        let dy = (hi - lo) / steps as f64;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * variance).sqrt();
        let mut h = 0.0;
        for i in 0..=steps {
            let y = lo + i as f64 * dy;
            let p: f64 = pts.iter().map(|x| norm * (-(y - x).powi(2) / (2.0 * variance)).exp()).sum::<f64>()
                / pts.len() as f64;
            let f = if p > 0.0 { -p * p.log2() } else { 0.0 };
            h += if i == 0 || i == steps { 0.5 * f } else { f };
        }
        h *= dy;
        h - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * variance).log2()
    }

    #[test]
    fn gauss_hermite_moments() {
        let gh = GaussHermite::new(GH_ORDER);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert!((gh.integrate(|_| 1.0) - sqrt_pi).abs() < 1e-13);
        assert!((gh.integrate(|t| t * t) - sqrt_pi / 2.0).abs() < 1e-13);
        assert!((gh.integrate(|t| t.powi(4)) - 3.0 * sqrt_pi / 4.0).abs() < 1e-12);
        assert!((gh.integrate(|t| t.cos()) - sqrt_pi * (-0.25f64).exp()).abs() < 1e-13);
        let small = GaussHermite::new(5);
        assert!((small.integrate(|t| t.powi(8)) - 105.0 * sqrt_pi / 16.0).abs() < 1e-12);
    }

    #[test]
    fn bpsk_5db_regression() {
        let c = Constellation::new(Modulation::Bpsk, 1.0).unwrap();
        let v = snr_db_to_variance(5.0, 1.0).unwrap();
        let oracle = mi_trapezoid(&c, v, 200_000);
        let quad = mi_awgn(&c, v).unwrap();
        assert!((quad - oracle).abs() < 1e-7, "quad {quad} oracle {oracle}");
        // frozen from the trapezoid oracle above
        assert!((quad - BPSK_5DB_MI).abs() < 1e-7, "{quad}");
    }

    const BPSK_5DB_MI: f64 = 0.859_194_083_749;

    #[test]
    fn pam_matches_trapezoid() {
        for (m, db) in [(Modulation::Pam4, 10.0), (Modulation::Pam8, 5.0), (Modulation::Pam8, 20.0)] {
            let c = Constellation::new(m, 1.0).unwrap();
            let v = snr_db_to_variance(db, 1.0).unwrap();
            let a = mi_awgn(&c, v).unwrap();
            let b = mi_trapezoid(&c, v, 200_000);
            assert!((a - b).abs() < 1e-6, "{m} {db}: {a} vs {b}");
        }
    }

    #[test]
    fn qam_is_twice_half_power_pam() {
        for (q, p) in [(Modulation::Qam4, Modulation::Bpsk), (Modulation::Qam16, Modulation::Pam4)] {
            let cq = Constellation::new(q, 1.0).unwrap();
            let cp = Constellation::new(p, 0.5).unwrap();
            let v = snr_db_to_variance(5.0, 1.0).unwrap();
            let a = mi_awgn(&cq, v).unwrap();
            let b = 2.0 * mi_awgn(&cp, v / 2.0).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn limits() {
        for m in Modulation::ALL {
            let c = Constellation::new(m, 1.0).unwrap();
            let low = mi_awgn(&c, snr_db_to_variance(-40.0, 1.0).unwrap()).unwrap();
            assert!(low < 1e-3, "{m} {low}");
            let high = mi_awgn(&c, snr_db_to_variance(40.0, 1.0).unwrap()).unwrap();
            assert!((high - (c.order() as f64).log2()).abs() < 1e-3, "{m} {high}");
            let both = mi_two_obs(&c, 1e-6, 1e-6).unwrap();
            assert!((both - (c.order() as f64).log2()).abs() < 1e-6, "{m} {both}");
        }
        assert!(mi_awgn(&Constellation::new(Modulation::Bpsk, 1.0).unwrap(), 0.0).is_err());
    }

    #[test]
    fn two_observations() {
        for m in [Modulation::Bpsk, Modulation::Pam4, Modulation::Pam8] {
            let c = Constellation::new(m, 1.0).unwrap();
            let v = snr_db_to_variance(5.0, 1.0).unwrap();
            let quad = mi_two_obs(&c, v, v).unwrap();
            let reduced = mi_awgn(&c, v / 2.0).unwrap();
            assert!((quad - reduced).abs() < 1e-6, "{m}: {quad} vs {reduced}");
            let far = mi_two_obs(&c, v, 1e12).unwrap();
            assert!((far - mi_awgn(&c, v).unwrap()).abs() < 1e-4);
            let asym = mi_two_obs(&c, v, 2.0 * v).unwrap();
            let asym_red = mi_two_obs_reduced(&c, v, 2.0 * v).unwrap();
            assert!((asym - asym_red).abs() < 1e-6);
        }
    }

    #[test]
    fn cut_set_examples() {
        let c = Constellation::new(Modulation::Bpsk, 1.0).unwrap();
        let v = snr_db_to_variance(5.0, 1.0).unwrap();
        let refs = ReferenceInfo::new(&c, v, v).unwrap();
        assert_eq!(refs.cut_set(0.0, 0.0).unwrap(), 0.0);
        assert!((refs.cut_set(f64::INFINITY, f64::INFINITY).unwrap() - refs.mi_both).abs() < 1e-15);
        assert!((refs.cut_set(0.25, 0.25).unwrap() - 0.5).abs() < 1e-15);
        assert!(refs.mi_relay1 + 0.25 > 0.5 && refs.mi_both > 0.5);
        assert!(refs.cut_set(-1.0, 0.0).is_err());
        let q = BoundQuery { sigma1_sq: v, sigma2_sq: v, rate1: 0.25, rate2: 0.25 };
        assert!((cut_set(&c, &q).unwrap() - 0.5).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cut_set_monotone(r1 in 0.0f64..3.0, r2 in 0.0f64..3.0, d1 in 0.0f64..1.0, d2 in 0.0f64..1.0) {
            let refs = ReferenceInfo { mi_relay1: 0.8, mi_relay2: 0.7, mi_both: 1.1 };
            let base = refs.cut_set(r1, r2).unwrap();
            prop_assert!(refs.cut_set(r1 + d1, r2).unwrap() >= base);
            prop_assert!(refs.cut_set(r1, r2 + d2).unwrap() >= base);
            prop_assert!(base <= refs.mi_both);
        }
    }

    #[test]
    fn extra_observation_never_hurts() {
        let c = Constellation::new(Modulation::Pam4, 1.0).unwrap();
        for (a, b) in [(0.1, 0.5), (0.3, 3.0), (1.0, 0.05)] {
            assert!(mi_awgn(&c, a).unwrap() <= mi_two_obs(&c, a, b).unwrap() + 1e-12);
        }
    }
}
