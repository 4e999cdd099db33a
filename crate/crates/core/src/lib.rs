//! Optimal stopping of a continuous-time Markov chain under a concave
//! utility, with a running cost per unit time.

pub mod cli;
pub mod exp_solver;
pub mod grid;
pub mod grid_solver;
pub mod house;
pub mod model;
pub mod ola;
pub mod quadrature;
pub mod risk_compare;
pub mod simulator;
pub mod utility;

/// Serializes a float that may be infinite as the string `"inf"` or
/// `"-inf"`, which JSON cannot represent as a number.
pub(crate) fn serialize_extended<S: serde::Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_str(&x.to_string())
    }
}
