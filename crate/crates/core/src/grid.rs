//! Uniform time grids and the tabulated objects that live on them.

use serde::Serialize;
use thiserror::Error;

use crate::utility::NEG_INF;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid needs t_max > 0 and dt > 0, got t_max = {t_max}, dt = {dt}")]
    NonPositive { t_max: f64, dt: f64 },
    #[error("dt = {dt} does not divide t_max = {t_max}")]
    NotDivisible { t_max: f64, dt: f64 },
    #[error("a grid needs at least one step")]
    NoSteps,
}

/// Uniform grid `t_k = k * dt`, `k = 0..=steps`, with `t_max` a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    t_max: f64,
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    /// `dt` must divide `t_max` to within `1e-12` relative.
    pub fn new(t_max: f64, dt: f64) -> Result<Self, GridError> {
        if !(t_max > 0.0 && dt > 0.0 && t_max.is_finite() && dt.is_finite()) {
            return Err(GridError::NonPositive { t_max, dt });
        }
        let ratio = t_max / dt;
        let steps = ratio.round();
        if steps < 1.0 {
            return Err(GridError::NoSteps);
        }
        if (steps * dt - t_max).abs() > 1e-12 * t_max.max(1.0) {
            return Err(GridError::NotDivisible { t_max, dt });
        }
        Self::with_steps(t_max, steps as usize)
    }

    pub fn with_steps(t_max: f64, steps: usize) -> Result<Self, GridError> {
        if steps == 0 {
            return Err(GridError::NoSteps);
        }
        if !(t_max > 0.0 && t_max.is_finite()) {
            return Err(GridError::NonPositive { t_max, dt: t_max / steps as f64 });
        }
        Ok(Self {
            t_max,
            dt: t_max / steps as f64,
            steps,
        })
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of intervals `K`; there are `K + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_max
        } else {
            k as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |k| self.node(k))
    }

    /// Index of the last node `<= t`, clamped to the grid.
    pub fn floor_index(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let k = (t / self.dt).floor() as usize;
        // guard against t = k*dt landing a hair below the node
        let k = if k < self.steps && self.node(k + 1) <= t { k + 1 } else { k };
        k.min(self.steps)
    }
}

/// Value function `V(t_k, i)` tabulated per state on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    grid: TimeGrid,
    values: Vec<Vec<f64>>,
}

impl ValueField {
    pub fn new(grid: TimeGrid, values: Vec<Vec<f64>>) -> Self {
        debug_assert!(values.iter().all(|r| r.len() == grid.len()));
        Self { grid, values }
    }

    /// Tabulates `f(i, t)` on the grid.
    pub fn from_fn(grid: TimeGrid, states: usize, f: impl Fn(usize, f64) -> f64) -> Self {
        let values = (0..states)
            .map(|i| grid.nodes().map(|t| f(i, t)).collect())
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn states(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn at(&self, i: usize, k: usize) -> f64 {
        self.values[i][k]
    }

    /// Piecewise-linear value at an arbitrary time. Returns `(value,
    /// truncated)`, where `truncated` flags `t` beyond the grid (the last
    /// node's value is used there).
    pub fn interpolate(&self, i: usize, t: f64) -> (f64, bool) {
        let row = &self.values[i];
        if t >= self.grid.t_max() {
            let truncated = t > self.grid.t_max();
            return (row[self.grid.steps()], truncated);
        }
        let k = self.grid.floor_index(t);
        let (a, b) = (row[k], row[k + 1]);
        let w = ((t - self.grid.node(k)) / self.grid.dt()).clamp(0.0, 1.0);
        if w == 0.0 {
            return (a, false);
        }
        if a == NEG_INF || b == NEG_INF {
            return (NEG_INF, false);
        }
        (a + w * (b - a), false)
    }

    /// Largest absolute change between two fields over nodes where both are
    /// finite. A node finite in one field and `-inf` in the other counts as
    /// an infinite change.
    pub fn sup_diff(&self, other: &ValueField) -> f64 {
        let mut worst = 0.0_f64;
        for (ra, rb) in self.values.iter().zip(&other.values) {
            for (&a, &b) in ra.iter().zip(rb) {
                match (a == NEG_INF, b == NEG_INF) {
                    (true, true) => {}
                    (false, false) => worst = worst.max((a - b).abs()),
                    _ => return f64::INFINITY,
                }
            }
        }
        worst
    }
}

/// A Markovian stopping rule: in state `i` at elapsed time `t`, stop after
/// `h(t, i)` more time units unless a jump comes first.
///
/// Stored as the absolute stop time `u*(t_k, i) = t_k + h(t_k, i)` per node,
/// which makes the consistency property `h(t + delta, i) = h(t, i) - delta`
/// exact along every waiting segment. `u* = +inf` means never stop.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovStoppingRule {
    grid: TimeGrid,
    stop_at: Vec<Vec<f64>>,
}

impl MarkovStoppingRule {
    /// Builds a rule from absolute stop times; each entry must be `>= t_k`.
    pub fn from_stop_times(grid: TimeGrid, stop_at: Vec<Vec<f64>>) -> Self {
        debug_assert!(stop_at
            .iter()
            .all(|r| r.len() == grid.len() && r.iter().enumerate().all(|(k, &u)| u >= grid.node(k))));
        Self { grid, stop_at }
    }

    /// Builds a rule from waiting times `h(t_k, i) >= 0`.
    pub fn from_waits(grid: TimeGrid, waits: Vec<Vec<f64>>) -> Self {
        let stop_at = waits
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .enumerate()
                    .map(|(k, h)| grid.node(k) + h.max(0.0))
                    .collect()
            })
            .collect();
        Self { grid, stop_at }
    }

    /// Waiting time given by a function of `(state, t)`.
    pub fn from_fn(grid: TimeGrid, states: usize, h: impl Fn(usize, f64) -> f64) -> Self {
        let waits = (0..states)
            .map(|i| grid.nodes().map(|t| h(i, t)).collect())
            .collect();
        Self::from_waits(grid, waits)
    }

    /// `h = 0` in `stop` states and `h = inf` elsewhere, constant in time.
    pub fn from_stop_set(grid: TimeGrid, stop: &[bool]) -> Self {
        Self::from_fn(grid, stop.len(), |i, _| if stop[i] { 0.0 } else { f64::INFINITY })
    }

    pub fn immediate(grid: TimeGrid, states: usize) -> Self {
        Self::from_fn(grid, states, |_, _| 0.0)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn states(&self) -> usize {
        self.stop_at.len()
    }

    /// Absolute stop time at node `k`.
    pub fn stop_time(&self, i: usize, k: usize) -> f64 {
        self.stop_at[i][k]
    }

    pub fn stop_times(&self, i: usize) -> &[f64] {
        &self.stop_at[i]
    }

    /// `h(t_k, i)`.
    pub fn wait_at(&self, i: usize, k: usize) -> f64 {
        let u = self.stop_at[i][k];
        if u == f64::INFINITY {
            u
        } else {
            (u - self.grid.node(k)).max(0.0)
        }
    }

    /// `h(t, i)` at an arbitrary time: the stop time of the last node at or
    /// before `t` is carried forward, `h = max(u* - t, 0)`. Times past the
    /// grid use the final node.
    pub fn wait(&self, i: usize, t: f64) -> f64 {
        let k = self.grid.floor_index(t);
        let u = self.stop_at[i][k];
        if u == f64::INFINITY {
            u
        } else {
            (u - t).max(0.0)
        }
    }

    pub fn waits(&self) -> Vec<Vec<f64>> {
        (0..self.states())
            .map(|i| (0..self.grid.len()).map(|k| self.wait_at(i, k)).collect())
            .collect()
    }
}
