//! Selling a house with offers arriving from a Markov chain.
//!
//! Offers take the levels `1..=m`. Level `j` arrives at rate `alpha_j`
//! regardless of the current offer, so the chain jumps `i -> j` at rate
//! `alpha_j` and leaves `i` at rate `sum_{j != i} alpha_j`. The reward of
//! accepting offer `i` is `g(i) = i`, and holding the house costs `c` per
//! unit time.

use serde::Serialize;
use thiserror::Error;

use crate::grid::{MarkovStoppingRule, ValueField};
use crate::model::{validate_model, CtmcModel, ModelError, RawModel, StoppingProblem};
use crate::simulator::Sampler;
use crate::utility::UtilitySpec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HouseError {
    #[error("offer intensity alpha[{index}] = {value} is not positive")]
    NonpositiveIntensity { index: usize, value: f64 },
    #[error("a house model needs at least two offer levels, got {0}")]
    TooFewLevels(usize),
    #[error("offer monotonicity fails at {} nodes", .0.violations.len())]
    MonotonicityViolation(Box<MonotonicityReport>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl HouseError {
    pub fn code(&self) -> &'static str {
        match self {
            HouseError::NonpositiveIntensity { .. } => "NONPOSITIVE_INTENSITY",
            HouseError::TooFewLevels(_) => "VALIDATION_ERROR",
            HouseError::MonotonicityViolation(_) => "MONOTONICITY_VIOLATION",
            HouseError::Model(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HouseModel {
    alpha: Vec<f64>,
    model: CtmcModel,
}

/// Builds the offer chain with states named `"1"..="m"`.
pub fn build_house_model(alpha: &[f64], c: f64) -> Result<HouseModel, HouseError> {
    let m = alpha.len();
    if m < 2 {
        return Err(HouseError::TooFewLevels(m));
    }
    if let Some((index, &value)) = alpha.iter().enumerate().find(|(_, &a)| !(a > 0.0 && a.is_finite())) {
        return Err(HouseError::NonpositiveIntensity { index, value });
    }
    let total: f64 = alpha.iter().sum();
    let q = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| if i == j { -(total - alpha[i]) } else { alpha[j] })
                .collect()
        })
        .collect();
    let model = validate_model(RawModel {
        states: (1..=m).map(|i| i.to_string()).collect(),
        q,
        g: (1..=m).map(|i| i as f64).collect(),
        c,
    })?;
    Ok(HouseModel {
        alpha: alpha.to_vec(),
        model,
    })
}

impl HouseModel {
    pub fn model(&self) -> &CtmcModel {
        &self.model
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn levels(&self) -> usize {
        self.alpha.len()
    }

    pub fn total_rate(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Law of an offer drawn at a tick of the rate-`alpha` clock, repeats
    /// of the current offer included.
    pub fn offer_distribution(&self) -> Vec<f64> {
        let total = self.total_rate();
        self.alpha.iter().map(|a| a / total).collect()
    }

    /// The i.i.d.-offer description: a rate-`alpha` clock with offers drawn
    /// from [`HouseModel::offer_distribution`].
    pub fn offer_sampler(&self) -> Sampler {
        Sampler::Uniformized {
            rate: self.total_rate(),
        }
    }

    pub fn problem(&self, utility: UtilitySpec) -> Result<StoppingProblem, HouseError> {
        Ok(StoppingProblem::new(self.model.clone(), utility)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HouseViolation {
    /// A better offer waits longer than a worse one.
    Order {
        t: f64,
        better: usize,
        #[serde(serialize_with = "crate::serialize_extended")]
        h_better: f64,
        #[serde(serialize_with = "crate::serialize_extended")]
        h_worse: f64,
    },
    /// The best offer is not accepted at once.
    TopOffer {
        t: f64,
        #[serde(serialize_with = "crate::serialize_extended")]
        h: f64,
    },
    /// `V(t, i)` outside `[U(g_min - c t), U(g_max - c t)]`.
    Sandwich {
        t: f64,
        state: usize,
        #[serde(serialize_with = "crate::serialize_extended")]
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub nodes: usize,
    pub violations: Vec<HouseViolation>,
    pub monotone: bool,
}

/// Checks that better offers never wait longer, the best offer is accepted
/// at once, and `U(g_min - c t) <= V(t, i) <= U(g_max - c t)`. States are
/// ordered by reward, so relabeled offer values are handled too.
pub fn check_offer_monotonicity(
    problem: &StoppingProblem,
    value: &ValueField,
    rule: &MarkovStoppingRule,
) -> Result<MonotonicityReport, HouseError> {
    let model = problem.model();
    let m = model.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| model.reward(a).total_cmp(&model.reward(b)));
    let (worst, best) = (order[0], order[m - 1]);
    let grid = *rule.grid();

    let mut violations = Vec::new();
    for (k, t) in grid.nodes().enumerate() {
        for pair in order.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let (h_worse, h_better) = (rule.wait_at(lo, k), rule.wait_at(hi, k));
            if h_better > h_worse {
                violations.push(HouseViolation::Order {
                    t,
                    better: hi,
                    h_better,
                    h_worse,
                });
            }
        }
        let h = rule.wait_at(best, k);
        if h != 0.0 {
            violations.push(HouseViolation::TopOffer { t, h });
        }
        let floor = problem.stop_utility(worst, t);
        let ceil = problem.stop_utility(best, t);
        for i in 0..m {
            let v = value.at(i, k);
            let slack = 1e-12 * v.abs().max(1.0);
            let below = floor.is_finite() && v < floor - slack;
            if below || v > ceil + slack {
                violations.push(HouseViolation::Sandwich { t, state: i, value: v });
            }
        }
    }
    let report = MonotonicityReport {
        nodes: m * grid.len(),
        monotone: violations.is_empty(),
        violations,
    };
    if report.monotone {
        Ok(report)
    } else {
        Err(HouseError::MonotonicityViolation(Box::new(report)))
    }
}
