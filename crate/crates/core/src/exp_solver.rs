//! Exponential utility `U(x) = -e^{-gamma x}`.
//!
//! The value separates as `V(t, i) = e^{c gamma t} W(i)`, and the optimal
//! waiting time after a jump is either `0` or `inf`, so the problem collapses
//! to the finite-dimensional recursion
//!
//! ```text
//! W(i) = max(-e^{-gamma g(i)}, sum_{j != i} q_ij / (q_i - c gamma) W(j))
//! ```
//!
//! for states with `q_i > c gamma`. A state with `q_i <= c gamma` loses more
//! to the running cost than it can gain from a jump and stops at once.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::CtmcModel;

/// Largest state space the enumeration oracle accepts by default.
pub const ORACLE_STATE_CAP: usize = 15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExpError {
    #[error("risk aversion must be positive and finite, got {0}")]
    InvalidGamma(f64),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("{states} states exceed the enumeration cap of {cap}")]
    StateSpaceTooLarge { states: usize, cap: usize },
    #[error("no stop set is consistent with the fixed-point equation")]
    NoConsistentStopSet,
}

impl ExpError {
    pub fn code(&self) -> &'static str {
        match self {
            ExpError::InvalidGamma(_) => "INVALID_PARAMETER",
            ExpError::NoConvergence { .. } => "NO_CONVERGENCE",
            ExpError::StateSpaceTooLarge { .. } => "STATE_SPACE_TOO_LARGE",
            ExpError::NoConsistentStopSet => "NO_CONSISTENT_STOP_SET",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpSolution {
    pub gamma: f64,
    pub cost: f64,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    /// `f*(i) = 0` for members, `inf` otherwise.
    pub stop_set: Vec<bool>,
    pub horizon: Horizon,
    pub iterations: usize,
    /// `max_i |(T W)(i) - W(i)|`.
    pub residual: f64,
}

impl ExpSolution {
    /// `V(t, i) = e^{c gamma t} W(i)`.
    pub fn value(&self, i: usize, t: f64) -> f64 {
        (self.cost * self.gamma * t).exp() * self.w[i]
    }

    /// `f*(i)`.
    pub fn wait(&self, i: usize) -> f64 {
        if self.stop_set[i] {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn stop_indices(&self) -> Vec<usize> {
        (0..self.stop_set.len()).filter(|&i| self.stop_set[i]).collect()
    }

    pub fn stops_everywhere(&self) -> bool {
        self.stop_set.iter().all(|&s| s)
    }
}

/// Options for the infinite-horizon iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ExpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 1_000_000,
        }
    }
}

fn check_gamma(gamma: f64) -> Result<(), ExpError> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(ExpError::InvalidGamma(gamma))
    }
}

/// `q_i <= c gamma` per state.
pub fn check_drift(model: &CtmcModel, gamma: f64) -> Vec<bool> {
    let cg = model.cost() * gamma;
    model.exit_rates().iter().map(|&q| q <= cg).collect()
}

/// `W_0(i) = -e^{-gamma g(i)}`.
pub fn stop_values(model: &CtmcModel, gamma: f64) -> Vec<f64> {
    model.rewards().iter().map(|&g| -(-gamma * g).exp()).collect()
}

/// Coefficients `q_ij / (q_i - c gamma)` of the continuation branch; empty for
/// drift states.
fn continuation_weights(model: &CtmcModel, gamma: f64) -> Vec<Vec<(usize, f64)>> {
    let cg = model.cost() * gamma;
    (0..model.len())
        .map(|i| {
            let q = model.exit_rate(i);
            if q <= cg {
                Vec::new()
            } else {
                model.targets(i).iter().map(|&(j, r)| (j, r / (q - cg))).collect()
            }
        })
        .collect()
}

struct Recursion {
    stop: Vec<f64>,
    weights: Vec<Vec<(usize, f64)>>,
    drift: Vec<bool>,
}

impl Recursion {
    fn new(model: &CtmcModel, gamma: f64) -> Self {
        Self {
            stop: stop_values(model, gamma),
            weights: continuation_weights(model, gamma),
            drift: check_drift(model, gamma),
        }
    }

    fn continuation(&self, i: usize, w: &[f64]) -> f64 {
        self.weights[i].iter().map(|&(j, a)| a * w[j]).sum()
    }

    /// One Jacobi sweep, returning the new iterate and its stop set under the
    /// given tie tolerance.
    fn step(&self, w: &[f64], tie: f64) -> (Vec<f64>, Vec<bool>) {
        (0..w.len())
            .into_par_iter()
            .map(|i| {
                if self.drift[i] {
                    return (self.stop[i], true);
                }
                let cont = self.continuation(i, w);
                (self.stop[i].max(cont), cont <= self.stop[i] + tie)
            })
            .unzip()
    }

    fn residual(&self, w: &[f64]) -> f64 {
        (0..w.len())
            .map(|i| {
                let tw = if self.drift[i] {
                    self.stop[i]
                } else {
                    self.stop[i].max(self.continuation(i, w))
                };
                (tw - w[i]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Exact solution of the linear system induced by a stop set, or `None`
    /// when it is singular.
    fn solve_for(&self, stop_set: &[bool]) -> Option<Vec<f64>> {
        let m = self.stop.len();
        let mut a = DMatrix::<f64>::identity(m, m);
        let mut b = DVector::<f64>::zeros(m);
        for i in 0..m {
            if stop_set[i] {
                b[i] = self.stop[i];
            } else {
                for &(j, w) in &self.weights[i] {
                    a[(i, j)] -= w;
                }
            }
        }
        let x = a.lu().solve(&b)?;
        x.iter().all(|v| v.is_finite()).then(|| x.iter().copied().collect())
    }

    /// A candidate is consistent when it is a strictly negative fixed point
    /// whose maximizing branches reproduce the stop set, with ties counted
    /// as stops.
    fn consistent(&self, stop_set: &[bool], w: &[f64]) -> bool {
        (0..w.len()).all(|i| {
            if !(w[i] < 0.0) {
                return false;
            }
            if self.drift[i] {
                return stop_set[i];
            }
            let cont = self.continuation(i, w);
            let slack = 1e-12 * self.stop[i].abs().max(cont.abs());
            if stop_set[i] {
                cont <= self.stop[i] + slack
            } else {
                cont > self.stop[i] + slack
            }
        })
    }
}

/// `W_0, ..., W_n` of the finite-horizon recursion.
pub fn solve_exp_finite(model: &CtmcModel, gamma: f64, n: usize) -> Result<Vec<ExpSolution>, ExpError> {
    check_gamma(gamma)?;
    let rec = Recursion::new(model, gamma);
    let mut w = rec.stop.clone();
    let mut out = Vec::with_capacity(n + 1);
    out.push(ExpSolution {
        gamma,
        cost: model.cost(),
        w: w.clone(),
        stop_set: vec![true; model.len()],
        horizon: Horizon::Finite(0),
        iterations: 0,
        residual: rec.residual(&w),
    });
    for k in 1..=n {
        let (next, stop_set) = rec.step(&w, 0.0);
        w = next;
        out.push(ExpSolution {
            gamma,
            cost: model.cost(),
            w: w.clone(),
            stop_set,
            horizon: Horizon::Finite(k),
            iterations: k,
            residual: rec.residual(&w),
        });
    }
    Ok(out)
}

/// Iterates the recursion from `W_0` until the sup-norm change drops below
/// `opts.tol`, then solves the linear system of the identified stop set
/// exactly and keeps that solution when it is consistent.
pub fn solve_exp_infinite(model: &CtmcModel, gamma: f64, opts: &ExpOptions) -> Result<ExpSolution, ExpError> {
    check_gamma(gamma)?;
    let rec = Recursion::new(model, gamma);
    let mut w = rec.stop.clone();
    let mut change = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let (next, _) = rec.step(&w, 0.0);
        iterations += 1;
        change = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = next;
        if change < opts.tol {
            break;
        }
    }
    if !(change < opts.tol) {
        return Err(ExpError::NoConvergence {
            iterations,
            residual: change,
        });
    }
    let (_, stop_set) = rec.step(&w, opts.tol);
    if let Some(exact) = rec.solve_for(&stop_set) {
        if rec.consistent(&stop_set, &exact) && sup_dist(&exact, &w) <= 1e3 * opts.tol.max(1e-12) {
            w = exact;
        }
    }
    Ok(ExpSolution {
        gamma,
        cost: model.cost(),
        residual: rec.residual(&w),
        w,
        stop_set,
        horizon: Horizon::Infinite,
        iterations,
    })
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Result of enumerating every stop set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleOutcome {
    /// The pointwise smallest consistent candidate, which is the limit of
    /// the iteration started from `W_0`.
    pub solution: ExpSolution,
    /// Every consistent candidate, the solution included.
    pub candidates: Vec<ExpSolution>,
}

/// Solves the fixed-point equation by brute force: for each of the `2^m`
/// stop sets, solve the induced linear system and keep the candidates whose
/// branches reproduce the set.
pub fn exp_stop_set_oracle(model: &CtmcModel, gamma: f64, cap: usize) -> Result<OracleOutcome, ExpError> {
    check_gamma(gamma)?;
    let m = model.len();
    if m > cap {
        return Err(ExpError::StateSpaceTooLarge { states: m, cap });
    }
    let rec = Recursion::new(model, gamma);
    let make = |w: Vec<f64>, stop_set: Vec<bool>| ExpSolution {
        gamma,
        cost: model.cost(),
        residual: rec.residual(&w),
        w,
        stop_set,
        horizon: Horizon::Infinite,
        iterations: 0,
    };
    if rec.drift.iter().all(|&d| d) {
        let sol = make(rec.stop.clone(), vec![true; m]);
        return Ok(OracleOutcome {
            solution: sol.clone(),
            candidates: vec![sol],
        });
    }

    let free: Vec<usize> = (0..m).filter(|&i| !rec.drift[i]).collect();
    let candidates: Vec<ExpSolution> = (0..1u64 << free.len())
        .into_par_iter()
        .filter_map(|mask| {
            let mut stop_set = rec.drift.clone();
            for (bit, &i) in free.iter().enumerate() {
                stop_set[i] = mask & (1 << bit) != 0;
            }
            let w = rec.solve_for(&stop_set)?;
            rec.consistent(&stop_set, &w).then(|| make(w, stop_set))
        })
        .collect();

    let best = candidates
        .iter()
        .find(|c| candidates.iter().all(|d| c.w.iter().zip(&d.w).all(|(a, b)| a <= b)))
        .or_else(|| candidates.first())
        .cloned()
        .ok_or(ExpError::NoConsistentStopSet)?;
    Ok(OracleOutcome {
        solution: best,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn two_state(q: f64) -> CtmcModel {
        CtmcModel::from_generator(vec![vec![-q, q], vec![q, -q]], vec![0.0, 1.0], 1.0).unwrap()
    }

    #[test]
    fn drift_flags_are_componentwise() {
        assert_eq!(check_drift(&two_state(1.0), 2.0), vec![true, true]);
        assert_eq!(check_drift(&two_state(2.0), 1.0), vec![false, false]);
        let mixed =
            CtmcModel::from_generator(vec![vec![-0.5, 0.5], vec![3.0, -3.0]], vec![0.0, 1.0], 1.0).unwrap();
        assert_eq!(check_drift(&mixed, 1.0), vec![true, false]);
    }

    #[test]
    fn finite_recursion_by_hand() {
        let sols = solve_exp_finite(&two_state(2.0), 1.0, 1).unwrap();
        assert_eq!(sols[0].w, vec![-1.0, -(-1.0_f64).exp()]);
        assert!((sols[1].w[0] + 2.0 / E).abs() < 1e-15);
        assert!((sols[1].w[1] + 1.0 / E).abs() < 1e-15);
        assert_eq!(sols[1].stop_set, vec![false, true]);
    }

    #[test]
    fn two_state_fixed_point() {
        let sol = solve_exp_infinite(&two_state(2.0), 1.0, &ExpOptions::default()).unwrap();
        assert!((sol.w[0] + 2.0 / E).abs() < 1e-14);
        assert!((sol.w[1] + 1.0 / E).abs() < 1e-14);
        assert_eq!(sol.stop_indices(), vec![1]);
        let oracle = exp_stop_set_oracle(&two_state(2.0), 1.0, ORACLE_STATE_CAP).unwrap();
        assert_eq!(oracle.candidates.len(), 1);
        assert_eq!(oracle.solution.stop_set, sol.stop_set);
    }

    #[test]
    fn drift_everywhere_freezes_w0() {
        let model = two_state(1.0);
        let sol = solve_exp_infinite(&model, 2.0, &ExpOptions::default()).unwrap();
        assert_eq!(sol.w, stop_values(&model, 2.0));
        assert!(sol.stops_everywhere());
        for k in solve_exp_finite(&model, 2.0, 5).unwrap() {
            assert_eq!(k.w, sol.w);
        }
        let oracle = exp_stop_set_oracle(&model, 2.0, ORACLE_STATE_CAP).unwrap();
        assert!(oracle.solution.stops_everywhere());
    }

    #[test]
    fn flat_rewards_stop_everywhere() {
        let model = CtmcModel::from_generator(
            vec![vec![-3.0, 1.0, 2.0], vec![1.0, -2.0, 1.0], vec![2.0, 2.0, -4.0]],
            vec![0.7; 3],
            1.0,
        )
        .unwrap();
        let sol = solve_exp_infinite(&model, 1.0, &ExpOptions::default()).unwrap();
        assert!(sol.stops_everywhere());
        assert!(sol.w.iter().all(|&w| (w + (-0.7_f64).exp()).abs() < 1e-15));
    }

    #[test]
    fn oracle_refuses_large_models() {
        let err = exp_stop_set_oracle(&two_state(2.0), 1.0, 1).unwrap_err();
        assert_eq!(err.code(), "STATE_SPACE_TOO_LARGE");
    }

    #[test]
    fn separable_value() {
        let sol = solve_exp_infinite(&two_state(2.0), 1.0, &ExpOptions::default()).unwrap();
        assert!((sol.value(0, 2.0) - 2.0_f64.exp() * sol.w[0]).abs() < 1e-14);
    }
}
