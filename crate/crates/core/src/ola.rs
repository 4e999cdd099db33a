//! One-step look-ahead sets.
//!
//! `S0_t` holds the states where stopping now beats waiting a little longer
//! at every later time,
//!
//! ```text
//! sum_{j != i} q_ij/q_i U(g(j) - c s) <= U(g(i) - c s) + c/q_i U'(g(i) - c s)   for all s >= t,
//! ```
//!
//! and `Sinf_t` holds the states where the reverse strict inequality holds
//! everywhere. When `S0_t` is closed under the jumps of the chain, stopping
//! on entry is optimal there.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{CtmcModel, ModelError, StoppingProblem};
use crate::utility::{DomainKind, UtilityFamily};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OlaError {
    #[error("look-ahead sets need a utility defined on all of R")]
    UnsupportedDomain,
    #[error("reward increments increase at index {index}")]
    GNotConcave { index: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl OlaError {
    pub fn code(&self) -> &'static str {
        match self {
            OlaError::UnsupportedDomain => "UNSUPPORTED_DOMAIN",
            OlaError::GNotConcave { .. } => "G_NOT_CONCAVE",
            OlaError::InvalidParameter(_) => "INVALID_PARAMETER",
            OlaError::Model(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The inequality reduces to a time-free condition.
    Analytic,
    /// Dense check over a grid of look-ahead times plus a tail test.
    ThetaGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Certificate {
    CertifiedStop,
    CertifiedNeverStop,
    /// In `Sinf_t`, but some successor is undecided.
    NeverStopLocal,
    Undecided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosureReport {
    pub closed: bool,
    pub violations: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Membership {
    pub member: bool,
    pub method: Method,
    /// Look-ahead time at which the inequality failed, if any.
    pub witness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OlaOptions {
    /// Step of the look-ahead grid.
    pub dtheta: f64,
    /// Horizon of the look-ahead grid is `t + span / min_i q_i`.
    pub span: f64,
    /// States left undecided regardless of the sets, e.g. an artificial
    /// truncation boundary.
    pub exclude: Vec<usize>,
}

impl Default for OlaOptions {
    fn default() -> Self {
        Self {
            dtheta: 1e-3,
            span: 50.0,
            exclude: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OlaReport {
    pub t: f64,
    pub s0: Vec<usize>,
    pub s_inf: Vec<usize>,
    pub closed: bool,
    pub certificate: Vec<Certificate>,
    pub method: Method,
    pub violations: Vec<Edge>,
}

fn require_unrestricted(problem: &StoppingProblem) -> Result<(), OlaError> {
    if problem.utility().domain_kind() == DomainKind::AllReals {
        Ok(())
    } else {
        Err(OlaError::UnsupportedDomain)
    }
}

/// `rhs - lhs` of the defining inequality times a positive factor, for the
/// families where it does not depend on the look-ahead time. Nonnegative
/// means stopping wins.
fn analytic_margin(problem: &StoppingProblem, i: usize) -> Option<f64> {
    let model = problem.model();
    let q = model.exit_rate(i);
    let c = model.cost();
    let g = model.reward(i);
    match problem.utility().family() {
        UtilityFamily::Exponential { gamma } => {
            // after multiplying by q_i e^{-c gamma s}
            let jumps: f64 = model.targets(i).iter().map(|&(j, r)| r * (-gamma * model.reward(j)).exp()).sum();
            Some(jumps - (q - c * gamma) * (-gamma * g).exp())
        }
        UtilityFamily::Linear => {
            let jumps: f64 = model.targets(i).iter().map(|&(j, r)| r * model.reward(j)).sum();
            Some(q * g + c - jumps)
        }
        _ => None,
    }
}

/// Margin of the inequality at look-ahead time `s`, scaled by `q_i / U'`.
fn margin_at(problem: &StoppingProblem, i: usize, s: f64) -> f64 {
    let model = problem.model();
    let u = problem.utility();
    let c = model.cost();
    let x = model.reward(i) - c * s;
    let du = u.deriv(x).unwrap_or(f64::NAN);
    let jumps: f64 = model
        .targets(i)
        .iter()
        .map(|&(j, r)| r * u.eval(model.reward(j) - c * s))
        .sum();
    (model.exit_rate(i) * u.eval(x) + c * du - jumps) / du
}

/// Look-ahead times: a grid of step `dtheta` on `[t, t + span/min q]`, then
/// geometrically spaced tail points out to `2^20` such horizons.
fn look_ahead_times(problem: &StoppingProblem, t: f64, opts: &OlaOptions) -> Result<Vec<f64>, OlaError> {
    if !(opts.dtheta > 0.0 && opts.span > 0.0) {
        return Err(OlaError::InvalidParameter("dtheta and span must be positive".into()));
    }
    let q_min = problem.model().exit_rates().iter().copied().fold(f64::INFINITY, f64::min);
    let horizon = opts.span / q_min;
    let steps = (horizon / opts.dtheta).ceil() as usize;
    let grid = (0..=steps).map(|k| t + k as f64 * opts.dtheta);
    let tail = (1..=20).map(|p| t + horizon * f64::from(1u32 << p));
    Ok(grid.chain(tail).collect())
}

/// Margins along the look-ahead times, cut off once the utility leaves the
/// floating-point range.
fn margins(problem: &StoppingProblem, i: usize, t: f64, opts: &OlaOptions) -> Result<Vec<(f64, f64)>, OlaError> {
    require_unrestricted(problem)?;
    Ok(look_ahead_times(problem, t, opts)?
        .into_iter()
        .map(|s| (s, margin_at(problem, i, s)))
        .take_while(|(_, m)| m.is_finite())
        .collect())
}

/// Grid version of [`s0_membership`] for any utility on all of R. Returns
/// the first look-ahead time that violates the inequality.
pub fn s0_membership_grid(
    problem: &StoppingProblem,
    i: usize,
    t: f64,
    opts: &OlaOptions,
) -> Result<(bool, Option<f64>), OlaError> {
    let witness = margins(problem, i, t, opts)?
        .into_iter()
        .find(|&(_, m)| m < -1e-12)
        .map(|(s, _)| s);
    Ok((witness.is_none(), witness))
}

/// Membership of `i` in `S0_t`.
pub fn s0_membership(problem: &StoppingProblem, i: usize, t: f64, opts: &OlaOptions) -> Result<Membership, OlaError> {
    require_unrestricted(problem)?;
    if let Some(m) = analytic_margin(problem, i) {
        return Ok(Membership {
            member: m >= 0.0,
            method: Method::Analytic,
            witness: (m < 0.0).then_some(t),
        });
    }
    let (member, witness) = s0_membership_grid(problem, i, t, opts)?;
    Ok(Membership {
        member,
        method: Method::ThetaGrid,
        witness,
    })
}

/// Membership of `i` in `Sinf_t`.
pub fn s_inf_membership(problem: &StoppingProblem, i: usize, t: f64, opts: &OlaOptions) -> Result<bool, OlaError> {
    require_unrestricted(problem)?;
    if let Some(m) = analytic_margin(problem, i) {
        return Ok(m < 0.0);
    }
    let ms = margins(problem, i, t, opts)?;
    Ok(!ms.is_empty() && ms.iter().all(|&(_, m)| m < 0.0))
}

/// Every positive-rate edge leaving `set`.
pub fn check_closure(model: &CtmcModel, set: &[bool]) -> ClosureReport {
    let violations: Vec<Edge> = (0..model.len())
        .filter(|&i| set[i])
        .flat_map(|i| {
            model
                .targets(i)
                .iter()
                .filter(|&&(j, _)| !set[j])
                .map(move |&(j, rate)| Edge { from: i, to: j, rate })
        })
        .collect();
    ClosureReport {
        closed: violations.is_empty(),
        violations,
    }
}

/// Classifies every state at time `t`.
///
/// A state of `S0_t` is certified when `S0_t` is closed, or, for exponential
/// utility, when stopping beats the continuation value even if every
/// successor were worth the best reward `max g`. A state of `Sinf_t` is
/// certified never-stop when all its successors are certified.
pub fn certify_immediate_stop(problem: &StoppingProblem, t: f64, opts: &OlaOptions) -> Result<OlaReport, OlaError> {
    require_unrestricted(problem)?;
    let model = problem.model();
    let m = model.len();
    let members: Vec<(Membership, bool)> = (0..m)
        .into_par_iter()
        .map(|i| Ok((s0_membership(problem, i, t, opts)?, s_inf_membership(problem, i, t, opts)?)))
        .collect::<Result<_, OlaError>>()?;
    let s0: Vec<bool> = members.iter().map(|(mem, _)| mem.member).collect();
    let s_inf: Vec<bool> = members.iter().map(|&(_, inf)| inf).collect();
    let method = members.first().map_or(Method::Analytic, |(mem, _)| mem.method);
    let closure = check_closure(model, &s0);

    let excluded = |i: usize| opts.exclude.contains(&i);
    let mut certificate = vec![Certificate::Undecided; m];
    for i in 0..m {
        if excluded(i) || !s0[i] {
            continue;
        }
        if closure.closed || value_bound_stop(problem, i) {
            certificate[i] = Certificate::CertifiedStop;
        }
    }
    for i in 0..m {
        if excluded(i) || !s_inf[i] {
            continue;
        }
        let successors_known = model.targets(i).iter().all(|&(j, _)| {
            !excluded(j) && (certificate[j] == Certificate::CertifiedStop || s_inf[j])
        });
        certificate[i] = if successors_known {
            Certificate::CertifiedNeverStop
        } else {
            Certificate::NeverStopLocal
        };
    }

    Ok(OlaReport {
        t,
        s0: indices(&s0),
        s_inf: indices(&s_inf),
        closed: closure.closed,
        certificate,
        method,
        violations: closure.violations,
    })
}

/// For exponential utility the value never exceeds `-e^{-gamma max g}` (in
/// units of `e^{c gamma t}`), so stopping is optimal whenever it beats a
/// continuation that jumps to that bound.
fn value_bound_stop(problem: &StoppingProblem, i: usize) -> bool {
    let UtilityFamily::Exponential { gamma } = problem.utility().family() else {
        return false;
    };
    let model = problem.model();
    let q = model.exit_rate(i);
    let cg = model.cost() * gamma;
    if q <= cg {
        return true;
    }
    let g_max = model.rewards().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (-gamma * model.reward(i)).exp() <= q / (q - cg) * (-gamma * g_max).exp()
}

fn indices(set: &[bool]) -> Vec<usize> {
    (0..set.len()).filter(|&i| set[i]).collect()
}

/// The exponential-utility look-ahead set, evaluated directly:
/// `q_i <= c gamma`, or `sum_{j != i} q_ij/(q_i - c gamma) e^{-gamma g(j)} >= e^{-gamma g(i)}`.
pub fn exp_ola_set(model: &CtmcModel, gamma: f64) -> (Vec<bool>, ClosureReport) {
    let cg = model.cost() * gamma;
    let set: Vec<bool> = (0..model.len())
        .map(|i| {
            let q = model.exit_rate(i);
            if q <= cg {
                return true;
            }
            let cont: f64 = model
                .targets(i)
                .iter()
                .map(|&(j, r)| r / (q - cg) * (-gamma * model.reward(j)).exp())
                .sum();
            cont >= (-gamma * model.reward(i)).exp()
        })
        .collect();
    let closure = check_closure(model, &set);
    (set, closure)
}

/// Smallest `i` in `0..=i_max` with `g(i+1) - g(i) <= ln(lambda/(lambda - c gamma)) / gamma`
/// for a Poisson process of rate `lambda`, or `0` when `lambda <= c gamma`.
///
/// `g` must be concave on `0..=i_max+1`, which makes the look-ahead set an
/// upper set and hence closed.
pub fn poisson_threshold(
    lambda: f64,
    c: f64,
    gamma: f64,
    g: impl Fn(usize) -> f64,
    i_max: usize,
) -> Result<Option<usize>, OlaError> {
    if !(lambda > 0.0 && c > 0.0 && gamma > 0.0) {
        return Err(OlaError::InvalidParameter(
            "lambda, c and gamma must be positive".into(),
        ));
    }
    if lambda <= c * gamma {
        return Ok(Some(0));
    }
    let incr: Vec<f64> = (0..=i_max).map(|i| g(i + 1) - g(i)).collect();
    if let Some(k) = incr.windows(2).position(|w| w[1] > w[0] + 1e-12 * w[0].abs().max(1.0)) {
        return Err(OlaError::GNotConcave { index: k + 1 });
    }
    let bound = (lambda / (lambda - c * gamma)).ln() / gamma;
    Ok(incr.iter().position(|&d| d <= bound))
}

/// Poisson process of rate `lambda` on `0..=i_max`, with the top state
/// reflected back to `i_max - 1` so that every state can leave.
pub fn poisson_chain(lambda: f64, c: f64, g: impl Fn(usize) -> f64, i_max: usize) -> Result<CtmcModel, OlaError> {
    if i_max < 1 {
        return Err(OlaError::InvalidParameter("i_max must be at least 1".into()));
    }
    let m = i_max + 1;
    let mut q = vec![vec![0.0; m]; m];
    for (i, row) in q.iter_mut().enumerate().take(i_max) {
        row[i] = -lambda;
        row[i + 1] = lambda;
    }
    q[i_max][i_max] = -lambda;
    q[i_max][i_max - 1] = lambda;
    let rewards = (0..m).map(g).collect();
    Ok(CtmcModel::from_generator(q, rewards, c)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::UtilitySpec;

    fn exp_two_state() -> StoppingProblem {
        let model =
            CtmcModel::from_generator(vec![vec![-2.0, 2.0], vec![2.0, -2.0]], vec![0.0, 1.0], 1.0).unwrap();
        StoppingProblem::new(model, UtilitySpec::exponential(1.0).unwrap()).unwrap()
    }

    #[test]
    fn two_state_membership() {
        let p = exp_two_state();
        let opts = OlaOptions::default();
        assert!(s0_membership(&p, 1, 0.0, &opts).unwrap().member);
        assert!(!s0_membership(&p, 0, 0.0, &opts).unwrap().member);
        // the grid method agrees
        assert!(s0_membership_grid(&p, 1, 0.0, &opts).unwrap().0);
        assert!(!s0_membership_grid(&p, 0, 0.0, &opts).unwrap().0);
    }

    #[test]
    fn two_state_report() {
        let p = exp_two_state();
        let r = certify_immediate_stop(&p, 0.0, &OlaOptions::default()).unwrap();
        assert_eq!(r.s0, vec![1]);
        assert_eq!(r.s_inf, vec![0]);
        assert!(!r.closed);
        assert_eq!(r.violations, vec![Edge { from: 1, to: 0, rate: 2.0 }]);
        assert_eq!(
            r.certificate,
            vec![Certificate::CertifiedNeverStop, Certificate::CertifiedStop]
        );
    }

    #[test]
    fn restricted_domain_is_rejected() {
        let model =
            CtmcModel::from_generator(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], vec![1.0, 2.0], 1.0).unwrap();
        let p = StoppingProblem::new(model, UtilitySpec::logarithmic(0.0).unwrap()).unwrap();
        let err = s0_membership(&p, 0, 0.0, &OlaOptions::default()).unwrap_err();
        assert_eq!(err.code(), "UNSUPPORTED_DOMAIN");
    }

    #[test]
    fn closure_of_whole_space_is_vacuous() {
        let p = exp_two_state();
        assert!(check_closure(p.model(), &[true, true]).closed);
    }

    #[test]
    fn poisson_thresholds() {
        let sqrt = |i: usize| (i as f64).sqrt();
        assert_eq!(poisson_threshold(2.0, 1.0, 1.0, sqrt, 100).unwrap(), Some(1));
        assert_eq!(poisson_threshold(0.5, 1.0, 1.0, sqrt, 100).unwrap(), Some(0));
        assert_eq!(poisson_threshold(2.0, 1.0, 1.0, |i| i as f64, 100).unwrap(), None);
        let err = poisson_threshold(2.0, 1.0, 1.0, |i| (i * i) as f64, 10).unwrap_err();
        assert_eq!(err.code(), "G_NOT_CONCAVE");
    }

    #[test]
    fn poisson_chain_is_certified_above_threshold() {
        let model = poisson_chain(2.0, 1.0, |i| (i as f64).sqrt(), 30).unwrap();
        let p = StoppingProblem::new(model, UtilitySpec::exponential(1.0).unwrap()).unwrap();
        let opts = OlaOptions {
            exclude: vec![30],
            ..OlaOptions::default()
        };
        let r = certify_immediate_stop(&p, 0.0, &opts).unwrap();
        assert!(r.closed);
        assert_eq!(r.s0, (1..=30).collect::<Vec<_>>());
        assert_eq!(r.certificate[0], Certificate::CertifiedNeverStop);
        assert!(r.certificate[1..30].iter().all(|&c| c == Certificate::CertifiedStop));
        assert_eq!(r.certificate[30], Certificate::Undecided);
    }

    #[test]
    fn linear_utility_reduces_to_drift_test() {
        let model =
            CtmcModel::from_generator(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], vec![0.0, 3.0], 1.0).unwrap();
        let p = StoppingProblem::new(model, UtilitySpec::linear()).unwrap();
        let opts = OlaOptions::default();
        // waiting in state 0 gains 3 per jump at cost 1 per unit time
        assert!(!s0_membership(&p, 0, 0.0, &opts).unwrap().member);
        assert!(s0_membership(&p, 1, 0.0, &opts).unwrap().member);
        assert_eq!(s0_membership_grid(&p, 0, 0.0, &opts).unwrap().0, false);
    }
}
