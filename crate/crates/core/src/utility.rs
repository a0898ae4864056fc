//! Quasi-constant price-elasticity (CPE) utility functions.
//!
//! A pure constant-elasticity demand curve `h(π) = a·π^r` has unbounded marginal
//! utility at zero consumption. The quasi-CPE form shifts the curve left by a small
//! `δ > 0` and rescales the exponent so the elasticity at the anchor price is still
//! the requested `r̂`:
//!
//! ```text
//! g(d) = π₀ · ((d + δ) / (d₀ + δ))^(1/r')
//! U(d) = r'·π₀·((d + δ)^(1/r' + 1) − δ^(1/r' + 1)) / ((r' + 1)·(d₀ + δ)^(1/r'))
//! r'   = r̂ · (1 + δ/d₀)^(−1)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default demand shift as a fraction of the anchor demand.
pub const DEFAULT_SHIFT_FRACTION: f64 = 0.01;

/// Wire form of a utility: the effective exponent is always recomputed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityParams {
    pub pi0: f64,
    pub d0: f64,
    pub r_hat: f64,
    #[serde(default)]
    pub delta_shift: Option<f64>,
}

/// One agent's utility of consumption in one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UtilityParams", into = "UtilityParams")]
pub struct QuasiCpeUtility {
    pi0: f64,
    d0: f64,
    r_hat: f64,
    delta_shift: f64,
    r_prime: f64,
}

impl TryFrom<UtilityParams> for QuasiCpeUtility {
    type Error = Error;

    fn try_from(p: UtilityParams) -> Result<Self> {
        match p.delta_shift {
            Some(shift) => QuasiCpeUtility::new(p.pi0, p.d0, p.r_hat, shift),
            None => QuasiCpeUtility::with_default_shift(p.pi0, p.d0, p.r_hat),
        }
    }
}

impl From<QuasiCpeUtility> for UtilityParams {
    fn from(u: QuasiCpeUtility) -> Self {
        UtilityParams {
            pi0: u.pi0,
            d0: u.d0,
            r_hat: u.r_hat,
            delta_shift: Some(u.delta_shift),
        }
    }
}

impl QuasiCpeUtility {
    /// Fits a utility to the anchor pair `(pi0, d0)` with target elasticity `r_hat`.
    pub fn new(pi0: f64, d0: f64, r_hat: f64, delta_shift: f64) -> Result<Self> {
        if !(pi0.is_finite() && pi0 > 0.0) {
            return Err(Error::domain(format!("anchor price must be > 0, got {pi0}")));
        }
        if !(d0.is_finite() && d0 > 0.0) {
            return Err(Error::domain(format!("anchor demand must be > 0, got {d0}")));
        }
        if !(r_hat.is_finite() && r_hat < 0.0) {
            return Err(Error::domain(format!("elasticity must be < 0, got {r_hat}")));
        }
        if r_hat == -1.0 {
            return Err(Error::domain("elasticity of exactly -1 is not supported"));
        }
        if !(delta_shift.is_finite() && delta_shift > 0.0) {
            return Err(Error::domain(format!("demand shift must be > 0, got {delta_shift}")));
        }
        let r_prime = r_hat / (1.0 + delta_shift / d0);
        Ok(Self {
            pi0,
            d0,
            r_hat,
            delta_shift,
            r_prime,
        })
    }

    /// Same as [`QuasiCpeUtility::new`] with `δ = 0.01·d₀`.
    pub fn with_default_shift(pi0: f64, d0: f64, r_hat: f64) -> Result<Self> {
        Self::new(pi0, d0, r_hat, DEFAULT_SHIFT_FRACTION * d0.abs())
    }

    pub fn pi0(&self) -> f64 {
        self.pi0
    }

    pub fn d0(&self) -> f64 {
        self.d0
    }

    pub fn r_hat(&self) -> f64 {
        self.r_hat
    }

    pub fn delta_shift(&self) -> f64 {
        self.delta_shift
    }

    /// Effective exponent `r'` after compensating for the shift.
    pub fn r_prime(&self) -> f64 {
        self.r_prime
    }

    /// Marginal utility `g(d)`.
    pub fn marginal_utility(&self, d: f64) -> Result<f64> {
        check_demand(d)?;
        Ok(self.marginal_unchecked(d))
    }

    /// Utility `U(d)`, normalized so `U(0) = 0`.
    pub fn utility_value(&self, d: f64) -> Result<f64> {
        check_demand(d)?;
        Ok(self.value_unchecked(d))
    }

    /// Demand at price `pi`, i.e. `g⁻¹(π)` clamped at zero.
    pub fn inverse_demand(&self, pi: f64) -> Result<f64> {
        if !(pi.is_finite() && pi > 0.0) {
            return Err(Error::domain(format!("price must be > 0, got {pi}")));
        }
        let raw = (self.d0 + self.delta_shift) * (pi / self.pi0).powf(self.r_prime) - self.delta_shift;
        Ok(raw.max(0.0))
    }

    /// Point elasticity `h'(π)·π/h(π)` of the (unclamped) demand curve.
    pub fn elasticity_at(&self, pi: f64) -> f64 {
        let scaled = (self.d0 + self.delta_shift) * (pi / self.pi0).powf(self.r_prime);
        self.r_prime * scaled / (scaled - self.delta_shift)
    }

    // The unchecked forms are used by the solver, which keeps iterates inside
    // the open domain d > -δ.

    pub(crate) fn marginal_unchecked(&self, d: f64) -> f64 {
        self.pi0 * ((d + self.delta_shift) / (self.d0 + self.delta_shift)).powf(1.0 / self.r_prime)
    }

    /// Derivative of `g`; strictly negative.
    pub(crate) fn marginal_slope_unchecked(&self, d: f64) -> f64 {
        self.marginal_unchecked(d) / (self.r_prime * (d + self.delta_shift))
    }

    pub(crate) fn value_unchecked(&self, d: f64) -> f64 {
        // (x^a - y^a)/a computed as y^a·expm1(a·ln(x/y))/a; finite as a -> 0 (r' -> -1).
        let a = 1.0 / self.r_prime + 1.0;
        let x = d + self.delta_shift;
        let y = self.delta_shift;
        let log_ratio = (x / y).ln();
        let integral = if (a * log_ratio).abs() < 1e-300 {
            y.powf(a) * log_ratio
        } else {
            y.powf(a) * (a * log_ratio).exp_m1() / a
        };
        self.pi0 * (self.d0 + self.delta_shift).powf(-1.0 / self.r_prime) * integral
    }

    /// Lowest demand for which the formulas are defined (exclusive).
    pub(crate) fn domain_floor(&self) -> f64 {
        -self.delta_shift
    }
}

fn check_demand(d: f64) -> Result<()> {
    if d.is_finite() && d >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("demand must be >= 0, got {d}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> QuasiCpeUtility {
        QuasiCpeUtility::new(0.15, 2.0, -2.0, 0.02).unwrap()
    }

    #[test]
    fn effective_exponent_matches_hand_value() {
        let u = sample();
        assert!((u.r_prime() - (-2.0 / 1.01)).abs() < 1e-15);
        let tiny = QuasiCpeUtility::new(0.15, 2.0, -2.0, 1e-12).unwrap();
        assert!((tiny.r_prime() + 2.0).abs() < 1e-11);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(QuasiCpeUtility::new(0.10, 1.0, -1.0, 0.01).is_err());
        assert!(QuasiCpeUtility::new(0.0, 1.0, -2.0, 0.01).is_err());
        assert!(QuasiCpeUtility::new(0.1, -1.0, -2.0, 0.01).is_err());
        assert!(QuasiCpeUtility::new(0.1, 1.0, 0.5, 0.01).is_err());
        assert!(QuasiCpeUtility::new(0.1, 1.0, -2.0, 0.0).is_err());
        assert!(sample().marginal_utility(-0.1).is_err());
        assert!(sample().utility_value(-1e-9).is_err());
        assert!(sample().inverse_demand(0.0).is_err());
    }

    #[test]
    fn anchor_values() {
        let u = sample();
        assert!((u.marginal_utility(2.0).unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(u.utility_value(0.0).unwrap(), 0.0);
        assert!(u.utility_value(2.0).unwrap() > 0.0);
        assert!(u.marginal_utility(4.0).unwrap() < 0.15);
        assert!((u.inverse_demand(0.15).unwrap() - 2.0).abs() < 1e-12);
        assert!((u.elasticity_at(0.15) - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn marginal_at_zero_is_finite() {
        let u = sample();
        let expected = 0.15 * (0.02f64 / 2.02).powf(1.0 / u.r_prime());
        let got = u.marginal_utility(0.0).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected);
        assert!(got.is_finite());
    }

    #[test]
    fn demand_clamps_above_choke_price() {
        let u = sample();
        // Raw demand hits zero exactly at g(0).
        let choke = u.marginal_utility(0.0).unwrap();
        assert_eq!(u.inverse_demand(choke * 1.01).unwrap(), 0.0);
        assert!(u.inverse_demand(choke * 0.99).unwrap() > 0.0);
    }

    #[test]
    fn value_is_stable_near_unit_exponent() {
        // r' = -1 exactly: U(d) = π₀(d₀+δ)·ln((d+δ)/δ).
        let u = QuasiCpeUtility::new(0.2, 1.0, -1.01, 0.01).unwrap();
        assert!((u.r_prime() + 1.0).abs() < 1e-15);
        let expected = 0.2 * 1.01 * ((3.0f64 + 0.01) / 0.01).ln();
        assert!((u.utility_value(3.0).unwrap() - expected).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn finite_difference_matches_marginal(
            pi0 in 0.05f64..0.5, d0 in 0.2f64..10.0, r_hat in -3.0f64..-0.3,
            frac in 0.0f64..3.0,
        ) {
            prop_assume!((r_hat + 1.0).abs() > 1e-3);
            let u = QuasiCpeUtility::with_default_shift(pi0, d0, r_hat).unwrap();
            let d = (frac * d0).max(1e-4);
            let h = 1e-5;
            let fd = (u.value_unchecked(d + h) - u.value_unchecked(d - h)) / (2.0 * h);
            let g = u.marginal_utility(d).unwrap();
            prop_assert!((fd - g).abs() <= 1e-6 * (1.0 + g), "fd={fd} g={g}");
        }

        #[test]
        fn inverse_round_trip(
            pi0 in 0.05f64..0.5, d0 in 0.2f64..10.0, r_hat in -3.0f64..-0.3,
            frac in 0.001f64..10.0,
        ) {
            prop_assume!((r_hat + 1.0).abs() > 1e-3);
            let u = QuasiCpeUtility::with_default_shift(pi0, d0, r_hat).unwrap();
            let d = frac * d0;
            let back = u.inverse_demand(u.marginal_utility(d).unwrap()).unwrap();
            prop_assert!((back - d).abs() <= 1e-9 * (1.0 + d));
        }

        #[test]
        fn strictly_decreasing_and_concave(
            r_hat in -3.0f64..-0.3, a in 0.0f64..5.0, gap in 1e-3f64..5.0,
        ) {
            prop_assume!((r_hat + 1.0).abs() > 1e-3);
            let u = QuasiCpeUtility::with_default_shift(0.15, 1.5, r_hat).unwrap();
            let b = a + gap;
            prop_assert!(u.marginal_utility(a).unwrap() > u.marginal_utility(b).unwrap());
            let mid = u.utility_value(0.5 * (a + b)).unwrap();
            let chord = 0.5 * (u.utility_value(a).unwrap() + u.utility_value(b).unwrap());
            prop_assert!(mid > chord);
        }

        #[test]
        fn elasticity_at_anchor_by_finite_difference(
            pi0 in 0.05f64..0.5, d0 in 0.2f64..10.0, r_hat in -3.0f64..-0.3,
        ) {
            prop_assume!((r_hat + 1.0).abs() > 1e-3);
            let u = QuasiCpeUtility::with_default_shift(pi0, d0, r_hat).unwrap();
            let h = 1e-6 * pi0;
            let slope = (u.inverse_demand(pi0 + h).unwrap() - u.inverse_demand(pi0 - h).unwrap())
                / (2.0 * h);
            let r = slope * pi0 / u.inverse_demand(pi0).unwrap();
            prop_assert!((r - r_hat).abs() < 1e-6, "r={r} r_hat={r_hat}");
        }
    }
}
