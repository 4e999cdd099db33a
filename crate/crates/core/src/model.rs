//! Validated continuous-time Markov chains and the stopping problem built on
//! top of them.
//!
//! Two standing assumptions of the underlying theory are *not* checked here
//! because they are not decidable in general: finiteness of the best
//! expected reward-minus-cost, and the liminf condition that lets the
//! infinite-horizon value be approximated by jump-truncated problems. The
//! simulator's tail diagnostic is the only runtime evidence offered for them.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::utility::UtilitySpec;

/// Relative tolerance for generator row sums, scaled by `max |q_ij|`.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// One violated model invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "code", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    TooFewStates { m: usize },
    NotSquare { row: usize, len: usize, expected: usize },
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
    NonFinite { row: usize, col: usize },
    NonFiniteReward { state: usize },
    RowSumNonzero { row: usize, defect: f64 },
    NegativeOffdiagonal { row: usize, col: usize, value: f64 },
    AbsorbingState { row: usize },
    NonpositiveCost { c: f64 },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::TooFewStates { .. } => "TOO_FEW_STATES",
            Violation::NotSquare { .. } => "NOT_SQUARE",
            Violation::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            Violation::NonFinite { .. } => "NON_FINITE",
            Violation::NonFiniteReward { .. } => "NON_FINITE_REWARD",
            Violation::RowSumNonzero { .. } => "ROW_SUM_NONZERO",
            Violation::NegativeOffdiagonal { .. } => "NEGATIVE_OFFDIAGONAL",
            Violation::AbsorbingState { .. } => "ABSORBING_STATE",
            Violation::NonpositiveCost { .. } => "NONPOSITIVE_COST",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewStates { m } => write!(f, "TOO_FEW_STATES: m = {m}, need at least 2"),
            Violation::NotSquare { row, len, expected } => {
                write!(f, "NOT_SQUARE: row {row} has {len} entries, expected {expected}")
            }
            Violation::DimensionMismatch { what, expected, found } => {
                write!(f, "DIMENSION_MISMATCH: {what} has length {found}, expected {expected}")
            }
            Violation::NonFinite { row, col } => write!(f, "NON_FINITE: Q[{row}][{col}]"),
            Violation::NonFiniteReward { state } => write!(f, "NON_FINITE_REWARD: g[{state}]"),
            Violation::RowSumNonzero { row, defect } => {
                write!(f, "ROW_SUM_NONZERO: row {row}, defect {defect}")
            }
            Violation::NegativeOffdiagonal { row, col, value } => {
                write!(f, "NEGATIVE_OFFDIAGONAL: Q[{row}][{col}] = {value}")
            }
            Violation::AbsorbingState { row } => write!(f, "ABSORBING_STATE: row {row}"),
            Violation::NonpositiveCost { c } => write!(f, "NONPOSITIVE_COST: c = {c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("domain shift d = {d} must lie strictly below min g = {min_g}")]
    ShiftNotBelowRewards { d: f64, min_g: f64 },
    #[error("initial time offset must be finite and non-negative, got {0}")]
    NegativeOffset(f64),
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::Invalid(v) => v.first().map(Violation::code).unwrap_or("INVALID_MODEL"),
            ModelError::ShiftNotBelowRewards { .. } => "SHIFT_NOT_BELOW_REWARDS",
            ModelError::NegativeOffset(_) => "NEGATIVE_OFFSET",
        }
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            ModelError::Invalid(v) => v,
            _ => &[],
        }
    }
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// Unvalidated model data, as read from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawModel {
    pub states: Vec<String>,
    pub q: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub c: f64,
}

/// A conservative finite CTMC without absorbing states, with per-state
/// rewards `g` and a running cost rate `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtmcModel {
    states: Vec<String>,
    q: Vec<Vec<f64>>,
    g: Vec<f64>,
    c: f64,
    exit: Vec<f64>,
    targets: Vec<Vec<(usize, f64)>>,
}

/// Checks every invariant and reports all violations at once.
pub fn validate_model(raw: RawModel) -> Result<CtmcModel, ModelError> {
    let RawModel { states, q, g, c } = raw;
    let m = q.len();
    let mut bad = Vec::new();

    if m < 2 {
        bad.push(Violation::TooFewStates { m });
    }
    if states.len() != m {
        bad.push(Violation::DimensionMismatch {
            what: "states",
            expected: m,
            found: states.len(),
        });
    }
    if g.len() != m {
        bad.push(Violation::DimensionMismatch {
            what: "g",
            expected: m,
            found: g.len(),
        });
    }
    for (i, gi) in g.iter().enumerate() {
        if !gi.is_finite() {
            bad.push(Violation::NonFiniteReward { state: i });
        }
    }
    if !(c > 0.0 && c.is_finite()) {
        bad.push(Violation::NonpositiveCost { c });
    }

    let mut square = true;
    for (i, row) in q.iter().enumerate() {
        if row.len() != m {
            bad.push(Violation::NotSquare {
                row: i,
                len: row.len(),
                expected: m,
            });
            square = false;
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                bad.push(Violation::NonFinite { row: i, col: j });
                square = false;
            }
        }
    }

    if square {
        let scale = q
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0_f64, |a, v| a.max(v.abs()));
        for (i, row) in q.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if i != j && v < 0.0 {
                    bad.push(Violation::NegativeOffdiagonal { row: i, col: j, value: v });
                }
            }
            let sum: f64 = row.iter().sum();
            if sum.abs() > ROW_SUM_TOL * scale {
                bad.push(Violation::RowSumNonzero { row: i, defect: sum.abs() });
            }
            if !(-row[i] > 0.0) {
                bad.push(Violation::AbsorbingState { row: i });
            }
        }
    }

    if !bad.is_empty() {
        return Err(ModelError::Invalid(bad));
    }

    let exit = (0..m).map(|i| -q[i][i]).collect();
    let targets = q
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(|&(j, &v)| j != i && v > 0.0)
                .map(|(j, &v)| (j, v))
                .collect()
        })
        .collect();
    Ok(CtmcModel {
        states,
        q,
        g,
        c,
        exit,
        targets,
    })
}

impl CtmcModel {
    /// Validates a model whose states are named `0..m`.
    pub fn from_generator(q: Vec<Vec<f64>>, g: Vec<f64>, c: f64) -> Result<Self, ModelError> {
        let states = (0..q.len()).map(|i| i.to_string()).collect();
        validate_model(RawModel { states, q, g, c })
    }

    pub fn to_raw(&self) -> RawModel {
        RawModel {
            states: self.states.clone(),
            q: self.q.clone(),
            g: self.g.clone(),
            c: self.c,
        }
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn generator(&self) -> &[Vec<f64>] {
        &self.q
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.q[i][j]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.g
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.g[i]
    }

    pub fn cost(&self) -> f64 {
        self.c
    }

    /// Exit rate `q_i = -q_ii`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        self.exit[i]
    }

    pub fn exit_rates(&self) -> &[f64] {
        &self.exit
    }

    /// Off-diagonal targets of `i` with strictly positive rate.
    pub fn targets(&self, i: usize) -> &[(usize, f64)] {
        &self.targets[i]
    }

    /// Jump distribution of the embedded chain from `i`.
    pub fn embedded_transition(&self, i: usize) -> Vec<f64> {
        let qi = self.exit[i];
        let mut p = vec![0.0; self.len()];
        for &(j, v) in &self.targets[i] {
            p[j] = v / qi;
        }
        p
    }

    pub fn with_rewards(&self, g: Vec<f64>) -> Result<Self, ModelError> {
        validate_model(RawModel {
            g,
            ..self.to_raw()
        })
    }
}

/// A CTMC stopping problem: maximize `E_i[U(g(X_tau) - c (t + tau))]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingProblem {
    model: CtmcModel,
    utility: UtilitySpec,
    t0: f64,
}

impl StoppingProblem {
    pub fn new(model: CtmcModel, utility: UtilitySpec) -> Result<Self, ModelError> {
        Self::with_offset(model, utility, 0.0)
    }

    pub fn with_offset(model: CtmcModel, utility: UtilitySpec, t0: f64) -> Result<Self, ModelError> {
        if !(t0 >= 0.0 && t0.is_finite()) {
            return Err(ModelError::NegativeOffset(t0));
        }
        if let Some(d) = utility.lower_bound() {
            let min_g = model.rewards().iter().copied().fold(f64::INFINITY, f64::min);
            if d >= min_g {
                return Err(ModelError::ShiftNotBelowRewards { d, min_g });
            }
        }
        Ok(Self { model, utility, t0 })
    }

    pub fn model(&self) -> &CtmcModel {
        &self.model
    }

    pub fn utility(&self) -> &UtilitySpec {
        &self.utility
    }

    pub fn initial_offset(&self) -> f64 {
        self.t0
    }

    /// Time after which stopping in `i` yields `-inf`: `(g(i) - d) / c`, or
    /// `+inf` when the utility is defined on all of R.
    pub fn domain_cap(&self, i: usize) -> f64 {
        match self.utility.lower_bound() {
            Some(d) => (self.model.reward(i) - d) / self.model.cost(),
            None => f64::INFINITY,
        }
    }

    /// Utility of stopping in `i` at elapsed time `t`.
    pub fn stop_utility(&self, i: usize, t: f64) -> f64 {
        self.utility.eval(self.model.reward(i) - self.model.cost() * t)
    }

    /// `true` when the utility is defined on all of R.
    pub fn unrestricted(&self) -> bool {
        self.utility.lower_bound().is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_example_rewards() -> Vec<f64> {
        vec![10.0, ((10.0_f64).exp() + 99.0) / 10.0]
    }

    #[test]
    fn worked_two_state_model_is_valid() {
        let m = CtmcModel::from_generator(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], worked_example_rewards(), 1.0)
            .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.exit_rate(0), 1.0);
    }

    #[test]
    fn absorbing_row_is_reported() {
        let err = CtmcModel::from_generator(vec![vec![0.0, 0.0], vec![1.0, -1.0]], vec![0.0, 1.0], 1.0)
            .unwrap_err();
        assert_eq!(err.violations(), &[Violation::AbsorbingState { row: 0 }]);
        assert_eq!(err.code(), "ABSORBING_STATE");
    }

    #[test]
    fn row_sum_defect_is_reported() {
        let err = CtmcModel::from_generator(vec![vec![-1.0, 0.5], vec![1.0, -1.0]], vec![0.0, 1.0], 1.0)
            .unwrap_err();
        assert_eq!(
            err.violations(),
            &[Violation::RowSumNonzero { row: 0, defect: 0.5 }]
        );
    }

    #[test]
    fn all_violations_listed() {
        let err = CtmcModel::from_generator(
            vec![vec![-1.0, 2.0, -1.0], vec![0.0, 0.0, 0.0], vec![1.0, 1.0, -2.0]],
            vec![0.0, 1.0],
            0.0,
        )
        .unwrap_err();
        let codes: Vec<_> = err.violations().iter().map(Violation::code).collect();
        assert!(codes.contains(&"DIMENSION_MISMATCH"));
        assert!(codes.contains(&"NONPOSITIVE_COST"));
        assert!(codes.contains(&"NEGATIVE_OFFDIAGONAL"));
        assert!(codes.contains(&"ABSORBING_STATE"));
    }

    #[test]
    fn embedded_rows() {
        let sym = CtmcModel::from_generator(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], vec![0.0, 1.0], 1.0)
            .unwrap();
        assert_eq!(sym.embedded_transition(0), vec![0.0, 1.0]);
        let m3 = CtmcModel::from_generator(
            vec![vec![-3.0, 1.0, 2.0], vec![1.0, -2.0, 1.0], vec![2.0, 2.0, -4.0]],
            vec![0.0, 1.0, 2.0],
            1.0,
        )
        .unwrap();
        let p = m3.embedded_transition(0);
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn validation_is_idempotent() {
        let m = CtmcModel::from_generator(vec![vec![-2.0, 2.0], vec![0.5, -0.5]], vec![1.0, 3.0], 0.3)
            .unwrap();
        assert_eq!(validate_model(m.to_raw()).unwrap(), m);
    }

    #[test]
    fn shift_must_lie_below_rewards() {
        let m = CtmcModel::from_generator(vec![vec![-1.0, 1.0], vec![1.0, -1.0]], vec![1.0, 2.0], 1.0)
            .unwrap();
        let u = UtilitySpec::logarithmic(1.0).unwrap();
        assert!(matches!(
            StoppingProblem::new(m.clone(), u),
            Err(ModelError::ShiftNotBelowRewards { .. })
        ));
        let p = StoppingProblem::new(m, UtilitySpec::logarithmic(0.0).unwrap()).unwrap();
        assert_eq!(p.domain_cap(1), 2.0);
    }
}
