//! Utility functions, their domains, and the risk-aversion functionals
//! derived from them.
//!
//! Every utility is extended to the whole real line: off its domain it
//! evaluates to [`NEG_INF`]. Families form a closed set so that the first and
//! second derivatives and the inverse are available in closed form. A
//! callable-backed family would slot in as another variant with
//! finite-difference fallbacks for `deriv`/`second_deriv`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel for the extended-real value `-inf`.
///
/// IEEE negative infinity already propagates the way the solvers need
/// (`-inf + finite = -inf`, `-inf * positive = -inf`). Callers must never
/// multiply it by zero; the solvers skip zero rates instead.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UtilityError {
    #[error("invalid utility parameter: {0}")]
    InvalidParameter(String),
    #[error("{x} is outside the domain interior of the utility")]
    OutOfDomain { x: f64 },
    #[error("{y} is not in the closure of the utility's range")]
    InverseOutOfRange { y: f64 },
}

impl UtilityError {
    pub fn code(&self) -> &'static str {
        match self {
            UtilityError::InvalidParameter(_) => "INVALID_PARAMETER",
            UtilityError::OutOfDomain { .. } => "OUT_OF_DOMAIN",
            UtilityError::InverseOutOfRange { .. } => "INVERSE_OUT_OF_RANGE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum UtilityFamily {
    /// `U(x) = -exp(-gamma x)`.
    Exponential { gamma: f64 },
    /// `U(x) = ln(x - d)`.
    Logarithmic,
    /// `U(x) = (x - d)^p` with `0 < p < 1`.
    Power { p: f64 },
    /// `U(x) = x`, the risk-neutral decision maker.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    AllReals,
    /// `[d, inf)`
    ClosedLeft,
    /// `(d, inf)`
    OpenLeft,
}

/// A utility family together with its shift `d`.
///
/// The shift only matters for the restricted families (logarithmic and
/// power); it is stored as `0` for the others.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    family: UtilityFamily,
    shift: f64,
}

impl UtilitySpec {
    pub fn exponential(gamma: f64) -> Result<Self, UtilityError> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(UtilityError::InvalidParameter(format!(
                "exponential utility needs gamma > 0, got {gamma}"
            )));
        }
        Ok(Self {
            family: UtilityFamily::Exponential { gamma },
            shift: 0.0,
        })
    }

    pub fn logarithmic(d: f64) -> Result<Self, UtilityError> {
        check_shift(d)?;
        Ok(Self {
            family: UtilityFamily::Logarithmic,
            shift: d,
        })
    }

    pub fn power(p: f64, d: f64) -> Result<Self, UtilityError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(UtilityError::InvalidParameter(format!(
                "power utility needs 0 < p < 1, got {p}"
            )));
        }
        check_shift(d)?;
        Ok(Self {
            family: UtilityFamily::Power { p },
            shift: d,
        })
    }

    pub fn linear() -> Self {
        Self {
            family: UtilityFamily::Linear,
            shift: 0.0,
        }
    }

    pub fn family(&self) -> UtilityFamily {
        self.family
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Risk aversion parameter of the exponential family.
    pub fn gamma(&self) -> Option<f64> {
        match self.family {
            UtilityFamily::Exponential { gamma } => Some(gamma),
            _ => None,
        }
    }

    /// `U(x) = x` is admitted although it is not strictly concave.
    pub fn risk_neutral(&self) -> bool {
        matches!(self.family, UtilityFamily::Linear)
    }

    pub fn domain_kind(&self) -> DomainKind {
        match self.family {
            UtilityFamily::Exponential { .. } | UtilityFamily::Linear => DomainKind::AllReals,
            UtilityFamily::Logarithmic => DomainKind::OpenLeft,
            UtilityFamily::Power { .. } => DomainKind::ClosedLeft,
        }
    }

    /// Left end of the domain, `None` for utilities defined on all of R.
    pub fn lower_bound(&self) -> Option<f64> {
        match self.domain_kind() {
            DomainKind::AllReals => None,
            _ => Some(self.shift),
        }
    }

    pub fn in_domain(&self, x: f64) -> bool {
        match self.domain_kind() {
            DomainKind::AllReals => !x.is_nan(),
            DomainKind::ClosedLeft => x >= self.shift,
            DomainKind::OpenLeft => x > self.shift,
        }
    }

    pub fn in_interior(&self, x: f64) -> bool {
        match self.domain_kind() {
            DomainKind::AllReals => x.is_finite(),
            _ => x.is_finite() && x > self.shift,
        }
    }

    /// Extended utility: `U(x)` on the domain, [`NEG_INF`] elsewhere.
    pub fn eval(&self, x: f64) -> f64 {
        if !self.in_domain(x) {
            return NEG_INF;
        }
        match self.family {
            UtilityFamily::Exponential { gamma } => -(-gamma * x).exp(),
            UtilityFamily::Logarithmic => (x - self.shift).ln(),
            UtilityFamily::Power { p } => (x - self.shift).powf(p),
            UtilityFamily::Linear => x,
        }
    }

    pub fn deriv(&self, x: f64) -> Result<f64, UtilityError> {
        self.require_interior(x)?;
        Ok(match self.family {
            UtilityFamily::Exponential { gamma } => gamma * (-gamma * x).exp(),
            UtilityFamily::Logarithmic => 1.0 / (x - self.shift),
            UtilityFamily::Power { p } => p * (x - self.shift).powf(p - 1.0),
            UtilityFamily::Linear => 1.0,
        })
    }

    pub fn second_deriv(&self, x: f64) -> Result<f64, UtilityError> {
        self.require_interior(x)?;
        Ok(match self.family {
            UtilityFamily::Exponential { gamma } => -gamma * gamma * (-gamma * x).exp(),
            UtilityFamily::Logarithmic => -1.0 / (x - self.shift).powi(2),
            UtilityFamily::Power { p } => p * (p - 1.0) * (x - self.shift).powf(p - 2.0),
            UtilityFamily::Linear => 0.0,
        })
    }

    /// `U^{-1}(y)`, defined on the closure of the range of `U`.
    ///
    /// Boundary points of the range map to the boundary of the domain, e.g.
    /// `0` maps to `+inf` for the exponential family and `-inf` maps to `d`
    /// for the logarithm.
    pub fn inverse(&self, y: f64) -> Result<f64, UtilityError> {
        let out_of_range = || UtilityError::InverseOutOfRange { y };
        if y.is_nan() {
            return Err(out_of_range());
        }
        match self.family {
            UtilityFamily::Exponential { gamma } => {
                if y > 0.0 {
                    Err(out_of_range())
                } else {
                    Ok(-(-y).ln() / gamma)
                }
            }
            UtilityFamily::Logarithmic => Ok(self.shift + y.exp()),
            UtilityFamily::Power { p } => {
                if y < 0.0 {
                    Err(out_of_range())
                } else {
                    Ok(self.shift + y.powf(1.0 / p))
                }
            }
            UtilityFamily::Linear => Ok(y),
        }
    }

    /// Arrow-Pratt coefficient of absolute risk aversion `-U''(x)/U'(x)`.
    pub fn arrow_pratt(&self, x: f64) -> Result<f64, UtilityError> {
        self.require_interior(x)?;
        Ok(match self.family {
            UtilityFamily::Exponential { gamma } => gamma,
            UtilityFamily::Logarithmic => 1.0 / (x - self.shift),
            UtilityFamily::Power { p } => (1.0 - p) / (x - self.shift),
            UtilityFamily::Linear => 0.0,
        })
    }

    /// Second-order approximation `mean - l_U(mean) * variance / 2` of the
    /// certainty equivalent.
    pub fn certainty_equiv_approx(&self, mean: f64, variance: f64) -> Result<f64, UtilityError> {
        if !(variance >= 0.0) {
            return Err(UtilityError::InvalidParameter(format!(
                "variance must be non-negative, got {variance}"
            )));
        }
        let l = self.arrow_pratt(mean)?;
        Ok(mean - 0.5 * l * variance)
    }

    /// Exact certainty equivalent `U^{-1}(E[U(X)])` of a discrete law given
    /// as `(probability, outcome)` pairs.
    pub fn certainty_equiv(&self, law: &[(f64, f64)]) -> Result<f64, UtilityError> {
        let expected: f64 = law.iter().map(|&(p, x)| p * self.eval(x)).sum();
        self.inverse(expected)
    }

    fn require_interior(&self, x: f64) -> Result<(), UtilityError> {
        if self.in_interior(x) {
            Ok(())
        } else {
            Err(UtilityError::OutOfDomain { x })
        }
    }
}

fn check_shift(d: f64) -> Result<(), UtilityError> {
    if d.is_finite() {
        Ok(())
    } else {
        Err(UtilityError::InvalidParameter(format!(
            "domain shift must be finite, got {d}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn log_values_and_sentinel() {
        let u = UtilitySpec::logarithmic(0.0).unwrap();
        assert!((u.eval(E) - 1.0).abs() < 1e-15);
        assert_eq!(u.eval(-1.0), NEG_INF);
        assert_eq!(u.eval(0.0), NEG_INF);
        assert_eq!(u.domain_kind(), DomainKind::OpenLeft);
    }

    #[test]
    fn exponential_at_zero() {
        let u = UtilitySpec::exponential(1.0).unwrap();
        assert_eq!(u.eval(0.0), -1.0);
        assert_eq!(u.domain_kind(), DomainKind::AllReals);
    }

    #[test]
    fn power_square_root_and_inverse() {
        let u = UtilitySpec::power(0.5, 0.0).unwrap();
        assert!((u.eval(4.0) - 2.0).abs() < 1e-15);
        assert!((u.inverse(2.0).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(u.eval(0.0), 0.0);
        assert_eq!(u.domain_kind(), DomainKind::ClosedLeft);
        assert!(matches!(
            u.inverse(-0.5),
            Err(UtilityError::InverseOutOfRange { .. })
        ));
    }

    #[test]
    fn inverse_range_closure() {
        let e = UtilitySpec::exponential(2.0).unwrap();
        assert_eq!(e.inverse(0.0).unwrap(), f64::INFINITY);
        assert!(e.inverse(0.1).is_err());
        let l = UtilitySpec::logarithmic(1.0).unwrap();
        assert_eq!(l.inverse(NEG_INF).unwrap(), 1.0);
    }

    #[test]
    fn arrow_pratt_closed_forms() {
        let e = UtilitySpec::exponential(0.7).unwrap();
        for x in [-3.0, 0.0, 12.5] {
            assert_eq!(e.arrow_pratt(x).unwrap(), 0.7);
        }
        assert_eq!(UtilitySpec::linear().arrow_pratt(5.0).unwrap(), 0.0);
        let l = UtilitySpec::logarithmic(0.0).unwrap();
        assert_eq!(l.arrow_pratt(2.0).unwrap(), 0.5);
        assert!(matches!(
            l.arrow_pratt(-1.0),
            Err(UtilityError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn log_arrow_pratt_matches_finite_difference() {
        let u = UtilitySpec::logarithmic(0.0).unwrap();
        let (x, h) = (2.0, 1e-5);
        let d1 = (u.eval(x + h) - u.eval(x - h)) / (2.0 * h);
        let d2 = (u.deriv(x + h).unwrap() - u.deriv(x - h).unwrap()) / (2.0 * h);
        assert!((-d2 / d1 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn certainty_equivalent_approximation() {
        let lin = UtilitySpec::linear();
        assert_eq!(lin.certainty_equiv_approx(5.0, 100.0).unwrap(), 5.0);
        let e = UtilitySpec::exponential(1.0).unwrap();
        assert_eq!(e.certainty_equiv_approx(0.0, 2.0).unwrap(), -1.0);
        let l = UtilitySpec::logarithmic(0.0).unwrap();
        assert!((l.certainty_equiv_approx(10.0, 1.0).unwrap() - 9.95).abs() < 1e-12);
        assert!(l.certainty_equiv_approx(-1.0, 1.0).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(UtilitySpec::exponential(0.0).is_err());
        assert!(UtilitySpec::power(1.0, 0.0).is_err());
        assert!(UtilitySpec::power(0.5, f64::NAN).is_err());
    }
}
