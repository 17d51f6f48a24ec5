//! Finite-order modulation alphabets.
//!
//! Every constellation carries a uniform prior and is scaled so that the
//! average symbol energy equals the requested power. PAM points are ordered
//! by ascending amplitude. QAM points are ordered row-major over
//! (in-phase ascending, quadrature ascending), i.e. index `i * m + q` holds
//! the `i`-th in-phase and `q`-th quadrature level. No Gray labeling is
//! applied since only symbol errors are measured.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supported modulation schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modulation {
    #[serde(rename = "bpsk")]
    Bpsk,
    #[serde(rename = "4pam")]
    Pam4,
    #[serde(rename = "8pam")]
    Pam8,
    #[serde(rename = "4qam")]
    Qam4,
    #[serde(rename = "16qam")]
    Qam16,
}

impl Modulation {
    pub const ALL: [Modulation; 5] = [
        Modulation::Bpsk,
        Modulation::Pam4,
        Modulation::Pam8,
        Modulation::Qam4,
        Modulation::Qam16,
    ];

    pub fn order(self) -> usize {
        match self {
            Modulation::Bpsk => 2,
            Modulation::Pam4 | Modulation::Qam4 => 4,
            Modulation::Pam8 => 8,
            Modulation::Qam16 => 16,
        }
    }

    /// Real dimensions per symbol: 1 for PAM/BPSK, 2 for QAM.
    pub fn dim(self) -> usize {
        match self {
            Modulation::Qam4 | Modulation::Qam16 => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "bpsk",
            Modulation::Pam4 => "4pam",
            Modulation::Pam8 => "8pam",
            Modulation::Qam4 => "4qam",
            Modulation::Qam16 => "16qam",
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Modulation::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| Error::Config(format!("unsupported modulation scheme '{s}'")))
    }
}

/// Unnormalized odd-integer PAM levels `-(m-1), ..., -1, 1, ..., m-1`.
fn pam_levels(m: usize) -> Vec<f64> {
    (0..m).map(|i| 2.0 * i as f64 - (m as f64 - 1.0)).collect()
}

/// A normalized constellation with uniform prior.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    modulation: Modulation,
    power: f64,
    /// Row-major `order x dim` coordinates.
    points: Vec<f64>,
}

impl Constellation {
    pub fn new(modulation: Modulation, power: f64) -> Result<Self> {
        if !(power.is_finite() && power > 0.0) {
            return Err(Error::Argument(format!("power must be positive, got {power}")));
        }
        let raw: Vec<f64> = match modulation {
            Modulation::Bpsk | Modulation::Pam4 | Modulation::Pam8 => {
                pam_levels(modulation.order())
            }
            Modulation::Qam4 | Modulation::Qam16 => {
                let side = if modulation == Modulation::Qam4 { 2 } else { 4 };
                let levels = pam_levels(side);
                let mut pts = Vec::with_capacity(2 * side * side);
                for &i in &levels {
                    for &q in &levels {
                        pts.push(i);
                        pts.push(q);
                    }
                }
                pts
            }
        };
        let n = modulation.order() as f64;
        let energy: f64 = raw.iter().map(|v| v * v).sum::<f64>() / n;
        let scale = (power / energy).sqrt();
        Ok(Self {
            modulation,
            power,
            points: raw.into_iter().map(|v| v * scale).collect(),
        })
    }

    pub fn modulation(&self) -> Modulation {
        self.modulation
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn order(&self) -> usize {
        self.modulation.order()
    }

    pub fn dim(&self) -> usize {
        self.modulation.dim()
    }

    pub fn prior(&self) -> f64 {
        1.0 / self.order() as f64
    }

    /// Symbol at zero-based index `w`.
    pub fn point(&self, w: usize) -> &[f64] {
        let d = self.dim();
        &self.points[w * d..(w + 1) * d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim())
    }

    /// Symbol for a one-based index `w` in `1..=|X|`.
    pub fn symbol_of(&self, w: usize) -> Result<&[f64]> {
        if w == 0 || w > self.order() {
            return Err(Error::Argument(format!(
                "symbol index {w} outside 1..={}",
                self.order()
            )));
        }
        Ok(self.point(w - 1))
    }

    /// Inverse of [`symbol_of`](Self::symbol_of): one-based index of an exact symbol.
    pub fn index_of(&self, point: &[f64]) -> Option<usize> {
        self.points().position(|p| p == point).map(|i| i + 1)
    }

    /// Average symbol energy under the uniform prior.
    pub fn average_energy(&self) -> f64 {
        self.points().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            * self.prior()
    }

    /// Distinct per-dimension levels (the PAM factor of a QAM grid).
    pub fn levels(&self) -> Vec<f64> {
        match self.dim() {
            1 => self.points.clone(),
            _ => {
                let side = (self.order() as f64).sqrt().round() as usize;
                (0..side).map(|q| self.points[2 * q + 1]).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bpsk_is_antipodal() {
        let c = Constellation::new(Modulation::Bpsk, 1.0).unwrap();
        assert_eq!(c.point(0), &[-1.0]);
        assert_eq!(c.point(1), &[1.0]);
        assert_eq!(c.prior(), 0.5);
    }

    #[test]
    fn pam4_scale() {
        let c = Constellation::new(Modulation::Pam4, 1.0).unwrap();
        let s = 5f64.sqrt();
        for (p, want) in c.points().zip([-3.0, -1.0, 1.0, 3.0]) {
            assert_abs_diff_eq!(p[0], want / s, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(c.symbol_of(4).unwrap()[0], 3.0 / s, epsilon = 1e-15);
    }

    #[test]
    fn qam16_grid() {
        let c = Constellation::new(Modulation::Qam16, 1.0).unwrap();
        let s = 10f64.sqrt();
        assert_abs_diff_eq!(c.point(0)[0], -3.0 / s, epsilon = 1e-15);
        assert_abs_diff_eq!(c.point(0)[1], -3.0 / s, epsilon = 1e-15);
        assert_abs_diff_eq!(c.point(1)[1], -1.0 / s, epsilon = 1e-15);
        assert_abs_diff_eq!(c.point(4)[0], -1.0 / s, epsilon = 1e-15);
        assert_abs_diff_eq!(c.point(15)[0], 3.0 / s, epsilon = 1e-15);
    }

    #[test]
    fn power_constraint_all_schemes() {
        for m in Modulation::ALL {
            for p in [0.3, 1.0, 7.5] {
                let c = Constellation::new(m, p).unwrap();
                assert!((c.average_energy() - p).abs() < 1e-12, "{m} {p}");
            }
        }
    }

    #[test]
    fn qam_is_product_of_half_power_pam() {
        for (q, pam) in [(Modulation::Qam4, Modulation::Bpsk), (Modulation::Qam16, Modulation::Pam4)] {
            let c = Constellation::new(q, 2.0).unwrap();
            let p = Constellation::new(pam, 1.0).unwrap();
            let levels = c.levels();
            for (a, b) in levels.iter().zip(p.points()) {
                assert_abs_diff_eq!(*a, b[0], epsilon = 1e-14);
            }
            for (i, pt) in c.points().enumerate() {
                let side = levels.len();
                assert_abs_diff_eq!(pt[0], levels[i / side], epsilon = 1e-14);
                assert_abs_diff_eq!(pt[1], levels[i % side], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn round_trip_and_distinct() {
        for m in Modulation::ALL {
            let c = Constellation::new(m, 1.0).unwrap();
            for w in 1..=c.order() {
                let s = c.symbol_of(w).unwrap().to_vec();
                assert_eq!(c.index_of(&s), Some(w));
            }
        }
    }

    #[test]
    fn errors() {
        let c = Constellation::new(Modulation::Pam4, 1.0).unwrap();
        assert!(c.symbol_of(0).is_err());
        assert!(c.symbol_of(5).is_err());
        assert!(Constellation::new(Modulation::Pam4, 0.0).is_err());
        assert!("64qam".parse::<Modulation>().is_err());
        assert_eq!("16QAM".parse::<Modulation>().unwrap(), Modulation::Qam16);
        assert_eq!(" BPSK".parse::<Modulation>().unwrap(), Modulation::Bpsk);
    }
}
