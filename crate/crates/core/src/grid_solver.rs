//! Grid dynamic programming for general utilities.
//!
//! For a fixed state `i` the Bellman objective depends on `(t, theta)` only
//! through the stop time `u = t + theta`. Writing
//!
//! ```text
//! G_i(u) = U(g(i) - c u) e^{-q_i u} + I_i(u),
//! I_i(u) = int_0^u e^{-q_i s} sum_{j != i} q_ij v(s, j) ds,
//! (Tv)(t, i) = e^{q_i t} (max_{u >= t} G_i(u) - I_i(t)),
//! ```
//!
//! every node's maximizer comes out of one suffix-max sweep over the grid.
//! The sweep is carried out in the rescaled form
//!
//! ```text
//! (Tv)(t_k, i) = max(U(g(i) - c t_k), J_k + e^{-q_i dt} (Tv)(t_{k+1}, i)),
//! ```
//!
//! with `J_k` the integral over `[t_k, t_{k+1}]`. This is the same suffix max
//! multiplied through by `e^{q_i t_k}`, which keeps every quantity at the
//! scale of the values themselves instead of `e^{q_i t}`. A node that
//! continues inherits the stop time of its successor, so the extracted rule
//! satisfies the consistency property exactly.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{MarkovStoppingRule, TimeGrid, ValueField};
use crate::model::StoppingProblem;
use crate::quadrature::{partial_step, StepWeights};
use crate::utility::NEG_INF;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("state {state} has no finite value on the grid")]
    EmptyDomain { state: usize },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("rule grid or state count does not match the requested grid")]
    RuleGridMismatch,
    #[error("value field has {found} states, model has {expected}")]
    StateMismatch { expected: usize, found: usize },
    #[error("values still move with the horizon at t_max = {t_max}")]
    HorizonNotSettled { t_max: f64 },
}

impl SolverError {
    pub fn code(&self) -> &'static str {
        match self {
            SolverError::EmptyDomain { .. } => "EMPTY_DOMAIN",
            SolverError::NoConvergence { .. } => "NO_CONVERGENCE",
            SolverError::RuleGridMismatch => "RULE_GRID_MISMATCH",
            SolverError::StateMismatch { .. } => "STATE_MISMATCH",
            SolverError::HorizonNotSettled { .. } => "HORIZON_NOT_SETTLED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    /// Sharpen interior stop times with a three-point parabola through `G_i`.
    pub refine: bool,
    /// Sup-norm tolerance for the fixed-point iteration.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            refine: false,
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "code", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SolverWarning {
    /// Some maximizer landed on the final grid node, so the answer may
    /// depend on `t_max`.
    TruncationWarning { states: Vec<usize> },
}

/// Output of one application of the T-operator.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorStep {
    pub value: ValueField,
    pub rule: MarkovStoppingRule,
    /// States whose maximizer reached the last grid node.
    pub truncated: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSolution {
    /// `V_0, ..., V_n`.
    pub values: Vec<ValueField>,
    /// `rules[k]` maximizes `T V_k`.
    pub rules: Vec<MarkovStoppingRule>,
    pub warnings: Vec<SolverWarning>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfiniteSolution {
    pub value: ValueField,
    pub rule: MarkovStoppingRule,
    pub iterations: usize,
    pub residual: f64,
    pub warnings: Vec<SolverWarning>,
}

/// Default grid with 2000 steps.
///
/// For utilities on all of R the horizon is `2 max g / c`, raised to at least
/// `20 / min q_i` so that the chain makes a few jumps before the truncation.
/// Restricted utilities use the largest domain cap.
pub fn default_grid(problem: &StoppingProblem) -> TimeGrid {
    let model = problem.model();
    let t_max = if problem.unrestricted() {
        let g_max = model.rewards().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let q_min = model.exit_rates().iter().copied().fold(f64::INFINITY, f64::min);
        (2.0 * g_max / model.cost()).max(20.0 / q_min)
    } else {
        (0..model.len()).map(|i| problem.domain_cap(i)).fold(0.0, f64::max)
    };
    TimeGrid::with_steps(t_max, 2000).expect("positive horizon")
}

/// `V_0(t, i) = U(g(i) - c t)`.
pub fn terminal_field(problem: &StoppingProblem, grid: TimeGrid) -> ValueField {
    ValueField::from_fn(grid, problem.model().len(), |i, t| problem.stop_utility(i, t))
}

/// Jump-weighted continuation integrand `sum_{j != i} q_ij v(t_k, j)` per node.
fn jump_integrand(problem: &StoppingProblem, v: &ValueField, i: usize) -> Vec<f64> {
    let targets = problem.model().targets(i);
    (0..v.grid().len())
        .map(|k| targets.iter().map(|&(j, q)| q * v.at(j, k)).sum())
        .collect()
}

/// Applies the T-operator to `v` and returns `Tv` with its earliest-stop
/// maximizer.
pub fn apply_t(
    problem: &StoppingProblem,
    v: &ValueField,
    refine: bool,
) -> Result<OperatorStep, SolverError> {
    let m = problem.model().len();
    if v.states() != m {
        return Err(SolverError::StateMismatch {
            expected: m,
            found: v.states(),
        });
    }
    if let Some(state) = (0..m).find(|&i| v.at(i, 0) == NEG_INF) {
        return Err(SolverError::EmptyDomain { state });
    }
    let grid = *v.grid();

    let rows: Vec<(Vec<f64>, Vec<f64>, bool)> = (0..m)
        .into_par_iter()
        .map(|i| sweep_state(problem, v, grid, i, refine))
        .collect();

    let mut values = Vec::with_capacity(m);
    let mut stops = Vec::with_capacity(m);
    let mut truncated = Vec::new();
    for (i, (vals, stop_at, trunc)) in rows.into_iter().enumerate() {
        values.push(vals);
        stops.push(stop_at);
        if trunc {
            truncated.push(i);
        }
    }
    Ok(OperatorStep {
        value: ValueField::new(grid, values),
        rule: MarkovStoppingRule::from_stop_times(grid, stops),
        truncated,
    })
}

fn sweep_state(
    problem: &StoppingProblem,
    v: &ValueField,
    grid: TimeGrid,
    i: usize,
    refine: bool,
) -> (Vec<f64>, Vec<f64>, bool) {
    let model = problem.model();
    let q = model.exit_rate(i);
    let last = grid.steps();
    let w = StepWeights::new(q, grid.dt());
    let f = jump_integrand(problem, v, i);
    let stop: Vec<f64> = grid.nodes().map(|t| problem.stop_utility(i, t)).collect();

    let mut out = vec![0.0; grid.len()];
    let mut stop_at = vec![0.0; grid.len()];
    out[last] = stop[last];
    stop_at[last] = grid.t_max();
    if problem.unrestricted() && wants_to_continue(problem, i, grid.t_max(), f[last]) {
        // G_i still increasing at the end of the grid
        stop_at[last] = f64::INFINITY;
    }

    for k in (0..last).rev() {
        let cont = w.integrate(f[k], f[k + 1]) + w.decay * out[k + 1];
        if stop[k] >= cont {
            out[k] = stop[k];
            stop_at[k] = grid.node(k);
        } else {
            out[k] = cont;
            stop_at[k] = stop_at[k + 1];
        }
    }

    let truncated = (0..last).any(|k| stop_at[k] >= grid.t_max() && out[k] > NEG_INF);
    if problem.unrestricted() {
        // Waiting out the whole grid is the truncated image of never stopping.
        for u in stop_at[..last].iter_mut().filter(|u| **u >= grid.t_max()) {
            *u = f64::INFINITY;
        }
    }

    if refine {
        refine_stop_times(&grid, &w, &f, &stop, &mut stop_at);
    }
    (out, stop_at, truncated)
}

/// Sign of `d/dtheta` of the Bellman objective at `theta = 0`: positive when
/// `sum_j q_ij v(t, j) > q_i U(x) + c U'(x)` with `x = g(i) - c t`.
fn wants_to_continue(problem: &StoppingProblem, i: usize, t: f64, jump_term: f64) -> bool {
    let x = problem.model().reward(i) - problem.model().cost() * t;
    let u = problem.utility();
    match u.deriv(x) {
        Ok(du) => jump_term > problem.model().exit_rate(i) * u.eval(x) + problem.model().cost() * du,
        Err(_) => false,
    }
}

/// Moves each interior stop node `l` to the vertex of the parabola through
/// `G_i` at `l - 1, l, l + 1`. Values of `G_i` are taken relative to node `l`
/// and scaled by `e^{q_i t_l}`.
fn refine_stop_times(grid: &TimeGrid, w: &StepWeights, f: &[f64], stop: &[f64], stop_at: &mut [f64]) {
    let last = grid.steps();
    let dt = grid.dt();
    let mut cached: Option<(usize, f64)> = None;
    for k in 0..last {
        let u = stop_at[k];
        if !(u.is_finite() && u > grid.node(k)) {
            continue;
        }
        let l = (u / dt).round() as usize;
        if l == 0 || l >= last || grid.node(l) != u {
            continue;
        }
        let refined = match cached {
            Some((cl, r)) if cl == l => r,
            _ => {
                let r = parabola_vertex(w, f, stop, l).map_or(u, |x| grid.node(l) + x * dt);
                cached = Some((l, r));
                r
            }
        };
        stop_at[k] = refined;
    }
}

fn parabola_vertex(w: &StepWeights, f: &[f64], stop: &[f64], l: usize) -> Option<f64> {
    let vals = [stop[l - 1], stop[l], stop[l + 1], f[l - 1], f[l], f[l + 1]];
    if vals.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let j_next = w.integrate(f[l], f[l + 1]);
    let j_prev = w.integrate(f[l - 1], f[l]);
    let up = stop[l + 1] * w.decay + j_next - stop[l];
    let down = (stop[l - 1] - j_prev) / w.decay - stop[l];
    let curvature = up + down;
    if !(curvature < 0.0) {
        return None;
    }
    Some(((down - up) / (2.0 * curvature)).clamp(-0.5, 0.5))
}

/// Backward iteration `V_{k+1} = T V_k` for `n` jumps.
pub fn solve_finite(
    problem: &StoppingProblem,
    n: usize,
    grid: TimeGrid,
    opts: &SolverOptions,
) -> Result<FiniteSolution, SolverError> {
    let mut values = vec![terminal_field(problem, grid)];
    let mut rules = Vec::with_capacity(n);
    let mut truncated = Vec::new();
    for k in 0..n {
        let step = apply_t(problem, &values[k], opts.refine)?;
        merge(&mut truncated, &step.truncated);
        values.push(step.value);
        rules.push(step.rule);
    }
    Ok(FiniteSolution {
        values,
        rules,
        warnings: warnings_from(truncated),
    })
}

/// Fixed-point iteration from `V_0` until the sup-norm change over finite
/// nodes drops below `opts.tol`.
pub fn solve_infinite(
    problem: &StoppingProblem,
    grid: TimeGrid,
    opts: &SolverOptions,
) -> Result<InfiniteSolution, SolverError> {
    let mut value = terminal_field(problem, grid);
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let step = apply_t(problem, &value, opts.refine)?;
        residual = step.value.sup_diff(&value);
        value = step.value;
        if residual < opts.tol {
            return Ok(InfiniteSolution {
                value,
                rule: step.rule,
                iterations: it,
                residual,
                warnings: warnings_from(step.truncated),
            });
        }
    }
    Err(SolverError::NoConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

/// Doubles the horizon of `grid`, keeping `dt`, until the values on the first
/// half of the grid agree within relative `rel_tol` with those of a grid
/// twice as long. Nodes up to `t_max / 2` of the returned solution then carry
/// no visible effect of the forced stop at `t_max`.
pub fn settle_horizon(
    problem: &StoppingProblem,
    grid: TimeGrid,
    opts: &SolverOptions,
    rel_tol: f64,
    max_doublings: usize,
) -> Result<InfiniteSolution, SolverError> {
    let mut short = solve_infinite(problem, grid, opts)?;
    for _ in 0..max_doublings {
        let g = *short.value.grid();
        let long_grid = TimeGrid::with_steps(2.0 * g.t_max(), 2 * g.steps()).expect("doubled grid is valid");
        let long = solve_infinite(problem, long_grid, opts)?;
        let settled = (0..short.value.states()).all(|i| {
            (0..=g.steps() / 2).all(|k| {
                let (a, b) = (short.value.at(i, k), long.value.at(i, k));
                a == b || (a - b).abs() <= rel_tol * b.abs()
            })
        });
        if settled {
            return Ok(short);
        }
        short = long;
    }
    Err(SolverError::HorizonNotSettled {
        t_max: short.value.grid().t_max(),
    })
}

fn merge(acc: &mut Vec<usize>, more: &[usize]) {
    for &s in more {
        if !acc.contains(&s) {
            acc.push(s);
        }
    }
    acc.sort_unstable();
}

fn warnings_from(truncated: Vec<usize>) -> Vec<SolverWarning> {
    if truncated.is_empty() {
        Vec::new()
    } else {
        vec![SolverWarning::TruncationWarning { states: truncated }]
    }
}

/// Value `V_n(t, i, tau)` of the stationary rule `tau = (h, h, ...)` under
/// the reward iteration, on the same quadrature as [`apply_t`].
///
/// Waiting past the last node is cut off there with a forced stop.
pub fn policy_value(
    problem: &StoppingProblem,
    rule: &MarkovStoppingRule,
    n: usize,
    grid: TimeGrid,
) -> Result<ValueField, SolverError> {
    let m = problem.model().len();
    if *rule.grid() != grid || rule.states() != m {
        return Err(SolverError::RuleGridMismatch);
    }
    let mut v = terminal_field(problem, grid);
    for _ in 0..n {
        let rows: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|i| policy_sweep(problem, rule, &v, i))
            .collect();
        v = ValueField::new(grid, rows);
    }
    Ok(v)
}

fn policy_sweep(
    problem: &StoppingProblem,
    rule: &MarkovStoppingRule,
    v: &ValueField,
    i: usize,
) -> Vec<f64> {
    let grid = *v.grid();
    let q = problem.model().exit_rate(i);
    let dt = grid.dt();
    let last = grid.steps();
    let w = StepWeights::new(q, dt);
    let f = jump_integrand(problem, v, i);
    let stop: Vec<f64> = grid.nodes().map(|t| problem.stop_utility(i, t)).collect();

    let mut out = vec![0.0; grid.len()];
    out[last] = stop[last];
    for k in (0..last).rev() {
        let u = rule.stop_time(i, k);
        let t = grid.node(k);
        out[k] = if u <= t {
            stop[k]
        } else if rule.stop_time(i, k + 1) == u {
            w.integrate(f[k], f[k + 1]) + w.decay * out[k + 1]
        } else {
            let mut acc = 0.0;
            let mut disc = 1.0;
            let mut j = k;
            while j < last && grid.node(j + 1) <= u {
                acc += discounted(disc, w.integrate(f[j], f[j + 1]));
                disc *= w.decay;
                j += 1;
            }
            if j == last {
                acc + discounted(disc, stop[last])
            } else {
                let tau = u - grid.node(j);
                let x = problem.model().reward(i) - problem.model().cost() * u;
                acc + discounted(disc, partial_step(q, dt, tau, f[j], f[j + 1]))
                    + discounted(disc * (-q * tau).exp(), problem.utility().eval(x))
            }
        };
    }
    out
}

/// `weight * x` with an underflowed weight treated as exact zero.
#[inline]
fn discounted(weight: f64, x: f64) -> f64 {
    if weight == 0.0 {
        0.0
    } else {
        weight * x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CtmcModel;
    use crate::utility::UtilitySpec;

    fn worked_example_problem() -> StoppingProblem {
        let g1 = ((10.0_f64).exp() + 99.0) / 10.0;
        let model =
            CtmcModel::from_generator(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], vec![10.0, g1], 1.0).unwrap();
        StoppingProblem::new(model, UtilitySpec::logarithmic(0.0).unwrap()).unwrap()
    }

    fn exp_problem(gamma: f64) -> StoppingProblem {
        let model =
            CtmcModel::from_generator(vec![vec![-2.0, 2.0], vec![2.0, -2.0]], vec![0.0, 1.0], 1.0).unwrap();
        StoppingProblem::new(model, UtilitySpec::exponential(gamma).unwrap()).unwrap()
    }

    #[test]
    fn zero_jumps_is_terminal_value() {
        let p = worked_example_problem();
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let sol = solve_finite(&p, 0, grid, &SolverOptions::default()).unwrap();
        assert_eq!(sol.values.len(), 1);
        assert!(sol.rules.is_empty());
        assert!((sol.values[0].at(0, 0) - 10.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn good_state_stops_immediately_after_one_step() {
        let p = worked_example_problem();
        let grid = TimeGrid::new(10.0, 0.01).unwrap();
        let v0 = terminal_field(&p, grid);
        let step = apply_t(&p, &v0, false).unwrap();
        for k in 0..grid.len() {
            assert_eq!(step.rule.wait_at(1, k), 0.0);
            assert_eq!(step.value.at(1, k), v0.at(1, k));
        }
    }

    #[test]
    fn theta_zero_is_always_feasible() {
        let p = worked_example_problem();
        let grid = TimeGrid::new(10.0, 0.02).unwrap();
        let v0 = terminal_field(&p, grid);
        let tv = apply_t(&p, &v0, false).unwrap().value;
        for i in 0..2 {
            for (k, t) in grid.nodes().enumerate() {
                assert!(tv.at(i, k) >= p.stop_utility(i, t));
            }
        }
    }

    #[test]
    fn first_iterate_matches_exponential_recursion() {
        let p = exp_problem(1.0);
        // the truncation error decays like e^{-(t_max - t)}
        let grid = TimeGrid::new(30.0, 1e-3).unwrap();
        let tv = apply_t(&p, &terminal_field(&p, grid), false).unwrap().value;
        let w1 = [-2.0 / std::f64::consts::E, -(-1.0_f64).exp()];
        for (k, t) in grid.nodes().enumerate().take_while(|(_, t)| *t <= 6.0) {
            for i in 0..2 {
                let want = t.exp() * w1[i];
                assert!(((tv.at(i, k) - want) / want).abs() < 1e-6, "i={i} t={t}");
            }
        }
    }

    #[test]
    fn infinite_horizon_threshold_near_nine_point_nine() {
        let p = worked_example_problem();
        let grid = TimeGrid::new(10.0, 5e-3).unwrap();
        let sol = solve_infinite(&p, grid, &SolverOptions::default()).unwrap();
        let h0 = sol.rule.wait_at(0, 0);
        assert!((h0 - 9.9).abs() <= 0.02, "h*(0,0) = {h0}");
        // consistency along the waiting segment
        for k in 1..grid.len() {
            let t = grid.node(k);
            let h = sol.rule.wait_at(0, k);
            if t < h0 - 1e-9 {
                assert!((h - (h0 - t)).abs() < 1e-9);
            } else {
                assert_eq!(h, 0.0);
            }
        }
    }

    #[test]
    fn refinement_sharpens_coarse_threshold() {
        let p = worked_example_problem();
        // 9.9 falls between nodes
        let grid = TimeGrid::new(10.0, 0.08).unwrap();
        let coarse = solve_infinite(&p, grid, &SolverOptions::default()).unwrap();
        let refined = solve_infinite(
            &p,
            grid,
            &SolverOptions {
                refine: true,
                ..SolverOptions::default()
            },
        )
        .unwrap();
        let e_coarse = (coarse.rule.wait_at(0, 0) - 9.9).abs();
        let e_refined = (refined.rule.wait_at(0, 0) - 9.9).abs();
        assert!(e_refined <= e_coarse, "{e_refined} vs {e_coarse}");
        assert!(e_refined < 0.25 * 0.08);
    }

    #[test]
    fn immediate_stop_policy_value_is_terminal() {
        let p = worked_example_problem();
        let grid = TimeGrid::new(10.0, 0.05).unwrap();
        let rule = MarkovStoppingRule::immediate(grid, 2);
        let v = policy_value(&p, &rule, 3, grid).unwrap();
        assert_eq!(v, terminal_field(&p, grid));
    }

    #[test]
    fn policy_value_rejects_foreign_grid() {
        let p = worked_example_problem();
        let rule = MarkovStoppingRule::immediate(TimeGrid::new(10.0, 0.05).unwrap(), 2);
        let err = policy_value(&p, &rule, 1, TimeGrid::new(10.0, 0.1).unwrap()).unwrap_err();
        assert_eq!(err, SolverError::RuleGridMismatch);
    }

    #[test]
    fn drift_case_converges_in_one_iteration() {
        let p = exp_problem(3.0);
        let grid = TimeGrid::new(4.0, 0.01).unwrap();
        let sol = solve_infinite(&p, grid, &SolverOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.residual, 0.0);
        assert!(sol.rule.waits().iter().flatten().all(|&h| h == 0.0));
        assert!(sol.warnings.is_empty());
    }

    #[test]
    fn truncation_is_reported() {
        let p = exp_problem(1.0);
        let grid = TimeGrid::new(3.0, 0.01).unwrap();
        let sol = solve_infinite(&p, grid, &SolverOptions::default()).unwrap();
        assert_eq!(sol.rule.wait_at(0, 0), f64::INFINITY);
        assert_eq!(
            sol.warnings,
            vec![SolverWarning::TruncationWarning { states: vec![0] }]
        );
    }
}
