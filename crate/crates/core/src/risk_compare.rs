//! Comparing stopping behavior across risk attitudes.
//!
//! `U` is more risk averse than `W` when `l_U(x) >= l_W(x)` for all `x`, with
//! `l = -U''/U'`. A more risk-averse agent never stops later: wherever
//! `h*_W = 0` also `h*_U = 0`, and `h*_U <= h*_W` throughout.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::TimeGrid;
use crate::grid_solver::{solve_infinite, InfiniteSolution, SolverError, SolverOptions};
use crate::model::{CtmcModel, ModelError, StoppingProblem};
use crate::simulator::{run_rule, McOptions, PathWalker, SimError, StoppingPolicy};
use crate::utility::UtilitySpec;

/// Slack on the Arrow-Pratt comparison.
pub const AVERSION_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiskError {
    #[error("comparison point x = {x} lies outside a utility's domain")]
    DomainMismatch { x: f64 },
    #[error("invalid comparison range: {0}")]
    InvalidRange(String),
    #[error("stop region containment fails at {} nodes", .0.violations.len())]
    ContainmentViolation(Box<ContainmentReport>),
    #[error("coupled paths {streams:?} stop later under the more risk-averse rule")]
    PathwiseViolation { streams: Vec<u64> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl RiskError {
    pub fn code(&self) -> &'static str {
        match self {
            RiskError::DomainMismatch { .. } => "DOMAIN_MISMATCH",
            RiskError::InvalidRange(_) => "INVALID_PARAMETER",
            RiskError::ContainmentViolation(_) => "CONTAINMENT_VIOLATION",
            RiskError::PathwiseViolation { .. } => "PATHWISE_VIOLATION",
            RiskError::Model(e) => e.code(),
            RiskError::Solver(e) => e.code(),
            RiskError::Sim(e) => e.code(),
        }
    }
}

/// Closed interval `[lo, hi]` sampled with spacing `step`, both ends
/// included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct XRange {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl XRange {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self, RiskError> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi && step > 0.0) {
            return Err(RiskError::InvalidRange(format!("[{lo}, {hi}] with step {step}")));
        }
        Ok(Self { lo, hi, step })
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        let n = ((self.hi - self.lo) / self.step).floor() as usize;
        (0..=n)
            .map(move |k| self.lo + k as f64 * self.step)
            .filter(move |&x| x < self.hi)
            .chain(std::iter::once(self.hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AversionVerdict {
    pub more_averse: bool,
    /// First point where `l_U < l_W - tol`.
    pub witness: Option<f64>,
}

/// Checks `l_U(x) >= l_W(x) - 1e-12` on the range.
///
/// For the supported families the difference, multiplied by the positive
/// denominators `(x - d)`, is affine in `x`, so the endpoints (always part of
/// the range) decide the answer and the check is exact on the interval.
pub fn more_risk_averse(u: &UtilitySpec, w: &UtilitySpec, range: &XRange) -> Result<AversionVerdict, RiskError> {
    for x in [range.lo, range.hi] {
        if !(u.in_interior(x) && w.in_interior(x)) {
            return Err(RiskError::DomainMismatch { x });
        }
    }
    let witness = range.points().find(|&x| {
        let lu = u.arrow_pratt(x).expect("interior point");
        let lw = w.arrow_pratt(x).expect("interior point");
        lu < lw - AVERSION_TOL
    });
    Ok(AversionVerdict {
        more_averse: witness.is_none(),
        witness,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeViolation {
    pub state: usize,
    pub t: f64,
    #[serde(serialize_with = "crate::serialize_extended")]
    pub h_u: f64,
    #[serde(serialize_with = "crate::serialize_extended")]
    pub h_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainmentReport {
    pub nodes: usize,
    /// Nodes with `h*_W = 0`.
    pub stop_nodes_w: usize,
    /// Nodes with `h*_U = 0`.
    pub stop_nodes_u: usize,
    /// Nodes skipped because they lie within `dt` of a threshold.
    pub guarded: usize,
    pub violations: Vec<NodeViolation>,
    pub contained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionComparison {
    pub report: ContainmentReport,
    pub u: InfiniteSolution,
    pub w: InfiniteSolution,
}

/// Nodes within `dt` of a switch between stopping and waiting in state `i`.
pub fn guard_band(sol: &InfiniteSolution, grid: &TimeGrid, i: usize) -> Vec<bool> {
    let stops: Vec<bool> = (0..grid.len()).map(|k| sol.rule.wait_at(i, k) == 0.0).collect();
    let mut guard = vec![false; grid.len()];
    for k in 0..grid.steps() {
        if stops[k] != stops[k + 1] {
            for g in guard.iter_mut().take(k + 3).skip(k.saturating_sub(1)) {
                *g = true;
            }
        }
    }
    guard
}

/// Solves both problems and checks, at every node outside the guard bands,
/// that `h*_W = 0` implies `h*_U = 0` and `h*_U <= h*_W + dt`.
pub fn compare_stop_regions(
    model: &CtmcModel,
    u: &UtilitySpec,
    w: &UtilitySpec,
    grid: TimeGrid,
    opts: &SolverOptions,
) -> Result<RegionComparison, RiskError> {
    let pu = StoppingProblem::new(model.clone(), *u)?;
    let pw = StoppingProblem::new(model.clone(), *w)?;
    let su = solve_infinite(&pu, grid, opts)?;
    let sw = solve_infinite(&pw, grid, opts)?;

    let dt = grid.dt();
    let mut report = ContainmentReport {
        nodes: model.len() * grid.len(),
        stop_nodes_w: 0,
        stop_nodes_u: 0,
        guarded: 0,
        violations: Vec::new(),
        contained: true,
    };
    for i in 0..model.len() {
        let gu = guard_band(&su, &grid, i);
        let gw = guard_band(&sw, &grid, i);
        for k in 0..grid.len() {
            let h_u = su.rule.wait_at(i, k);
            let h_w = sw.rule.wait_at(i, k);
            report.stop_nodes_u += usize::from(h_u == 0.0);
            report.stop_nodes_w += usize::from(h_w == 0.0);
            if gu[k] || gw[k] {
                report.guarded += 1;
                continue;
            }
            let region_ok = h_w > 0.0 || h_u == 0.0;
            let order_ok = h_u <= h_w + dt;
            if !(region_ok && order_ok) {
                report.violations.push(NodeViolation {
                    state: i,
                    t: grid.node(k),
                    h_u,
                    h_w,
                });
            }
        }
    }
    report.contained = report.violations.is_empty();
    if !report.contained {
        return Err(RiskError::ContainmentViolation(Box::new(report)));
    }
    Ok(RegionComparison { report, u: su, w: sw })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    pub n_paths: usize,
    pub seed: u64,
    /// Evaluation points of the survival functions.
    pub s: Vec<f64>,
    pub survival_u: Vec<f64>,
    pub survival_w: Vec<f64>,
    /// Paths with `tau_U > tau_W`.
    pub pathwise_violations: usize,
    pub mean_tau_u: f64,
    pub mean_tau_w: f64,
}

/// Runs both rules on the same coupled paths (same seed and stream per path)
/// and checks `tau_U <= tau_W` on every path.
pub fn stochastic_order_check(
    problem: &StoppingProblem,
    rule_u: &impl StoppingPolicy,
    rule_w: &impl StoppingPolicy,
    i0: usize,
    opts: &McOptions,
) -> Result<OrderReport, RiskError> {
    if i0 >= problem.model().len() || opts.n_paths < 2 {
        return Err(SimError::InvalidParameter("bad start state or path count".into()).into());
    }
    let t0 = problem.initial_offset();
    let pairs: Vec<(f64, f64)> = (0..opts.n_paths as u64)
        .into_par_iter()
        .map(|stream| {
            let mut a = PathWalker::new(problem.model(), opts.sampler, i0, opts.seed, stream);
            let mut b = PathWalker::new(problem.model(), opts.sampler, i0, opts.seed, stream);
            let tu = run_rule(&mut a, rule_u, t0, opts.max_jumps).tau;
            let tw = run_rule(&mut b, rule_w, t0, opts.max_jumps).tau;
            (tu, tw)
        })
        .collect();

    let streams: Vec<u64> = pairs
        .iter()
        .enumerate()
        .filter(|(_, &(tu, tw))| tu > tw)
        .map(|(k, _)| k as u64)
        .collect();

    let n = pairs.len() as f64;
    let t_max = pairs.iter().map(|&(a, b)| a.max(b)).fold(0.0, f64::max);
    let s: Vec<f64> = (0..=50).map(|k| t_max * f64::from(k) / 50.0).collect();
    let survival = |pick: fn(&(f64, f64)) -> f64| -> Vec<f64> {
        s.iter()
            .map(|&x| pairs.iter().filter(|p| pick(p) > x).count() as f64 / n)
            .collect()
    };
    let report = OrderReport {
        n_paths: opts.n_paths,
        seed: opts.seed,
        survival_u: survival(|p| p.0),
        survival_w: survival(|p| p.1),
        s,
        pathwise_violations: streams.len(),
        mean_tau_u: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        mean_tau_w: pairs.iter().map(|p| p.1).sum::<f64>() / n,
    };
    if !streams.is_empty() {
        return Err(RiskError::PathwiseViolation { streams });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exp_solver::{solve_exp_infinite, ExpOptions};

    #[test]
    fn exponential_pairs() {
        let r = XRange::new(-5.0, 5.0, 0.01).unwrap();
        let e2 = UtilitySpec::exponential(2.0).unwrap();
        let e1 = UtilitySpec::exponential(1.0).unwrap();
        assert!(more_risk_averse(&e2, &e1, &r).unwrap().more_averse);
        let v = more_risk_averse(&e1, &e2, &r).unwrap();
        assert!(!v.more_averse);
        assert_eq!(v.witness, Some(-5.0));
        assert!(more_risk_averse(&e1, &UtilitySpec::linear(), &r).unwrap().more_averse);
    }

    #[test]
    fn log_against_power_and_exponential() {
        let log = UtilitySpec::logarithmic(0.0).unwrap();
        let pow = UtilitySpec::power(0.5, 0.0).unwrap();
        let r = XRange::new(0.1, 100.0, 0.01).unwrap();
        assert!(more_risk_averse(&log, &pow, &r).unwrap().more_averse);
        let e1 = UtilitySpec::exponential(1.0).unwrap();
        let v = more_risk_averse(&log, &e1, &XRange::new(0.1, 10.0, 0.01).unwrap()).unwrap();
        assert!(!v.more_averse);
        assert!(v.witness.unwrap() > 1.0);
    }

    #[test]
    fn range_outside_domain() {
        let log = UtilitySpec::logarithmic(0.0).unwrap();
        let err = more_risk_averse(&log, &log, &XRange::new(0.0, 1.0, 0.1).unwrap()).unwrap_err();
        assert_eq!(err.code(), "DOMAIN_MISMATCH");
    }

    #[test]
    fn transitivity_on_a_chain_of_gammas() {
        let r = XRange::new(-1.0, 1.0, 0.1).unwrap();
        let e: Vec<UtilitySpec> = [3.0, 2.0, 1.0].iter().map(|&g| UtilitySpec::exponential(g).unwrap()).collect();
        assert!(more_risk_averse(&e[0], &e[1], &r).unwrap().more_averse);
        assert!(more_risk_averse(&e[1], &e[2], &r).unwrap().more_averse);
        assert!(more_risk_averse(&e[0], &e[2], &r).unwrap().more_averse);
    }

    #[test]
    fn exponential_stop_sets_nest() {
        let model =
            CtmcModel::from_generator(vec![vec![-3.0, 3.0], vec![3.0, -3.0]], vec![0.0, 1.0], 1.0).unwrap();
        let s1 = solve_exp_infinite(&model, 1.0, &ExpOptions::default()).unwrap();
        let s2 = solve_exp_infinite(&model, 2.0, &ExpOptions::default()).unwrap();
        assert!(s1.stop_set.iter().zip(&s2.stop_set).all(|(&a, &b)| !a || b));
    }

    #[test]
    fn identical_utilities_are_trivially_contained() {
        let model =
            CtmcModel::from_generator(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], vec![1.0, 3.0], 0.5).unwrap();
        let log = UtilitySpec::logarithmic(0.0).unwrap();
        let grid = TimeGrid::new(6.0, 0.01).unwrap();
        let cmp = compare_stop_regions(&model, &log, &log, grid, &SolverOptions::default()).unwrap();
        assert!(cmp.report.contained);
        assert_eq!(cmp.u.rule, cmp.w.rule);
        let p = StoppingProblem::new(model, log).unwrap();
        let order = stochastic_order_check(
            &p,
            &cmp.u.rule,
            &cmp.w.rule,
            0,
            &McOptions {
                n_paths: 1000,
                ..McOptions::default()
            },
        )
        .unwrap();
        assert_eq!(order.survival_u, order.survival_w);
    }
}
