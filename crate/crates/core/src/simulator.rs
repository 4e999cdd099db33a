//! Monte Carlo paths of the chain and rule evaluation on them.
//!
//! Path `k` of a run with seed `s` draws from ChaCha8 seeded with `s` on
//! stream `k`, so each path is reproducible on its own and parallel runs
//! agree bit for bit with serial ones. Sums over paths use a fixed pairwise
//! tree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::exp_solver::ExpSolution;
use crate::grid::{MarkovStoppingRule, ValueField};
use crate::model::{CtmcModel, StoppingProblem};

/// Largest tolerated fraction of paths that reach the jump cap unstopped.
pub const UNSTOPPED_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{fraction} of paths were still running at the jump cap (limit {limit})")]
    HorizonExhausted { fraction: f64, limit: f64 },
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::InvalidParameter(_) => "INVALID_PARAMETER",
            SimError::HorizonExhausted { .. } => "HORIZON_EXHAUSTED_FRACTION",
        }
    }
}

/// How holding times and successors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    /// Exponential holding time with rate `q_i`, then the embedded chain.
    Direct,
    /// Poisson clock at `rate >= max q_i` with transition matrix
    /// `I + Q / rate`; self-jumps are merged into the holding time.
    Uniformized { rate: f64 },
}

impl Sampler {
    /// Uniformization at the smallest admissible rate.
    pub fn uniformized(model: &CtmcModel) -> Self {
        Sampler::Uniformized {
            rate: model.exit_rates().iter().copied().fold(0.0, f64::max),
        }
    }

    fn check(&self, model: &CtmcModel) -> Result<(), SimError> {
        if let Sampler::Uniformized { rate } = *self {
            let q_max = model.exit_rates().iter().copied().fold(0.0, f64::max);
            if !(rate >= q_max && rate.is_finite()) {
                return Err(SimError::InvalidParameter(format!(
                    "uniformization rate {rate} is below max exit rate {q_max}"
                )));
            }
        }
        Ok(())
    }
}

/// Waiting-time lookup shared by grid rules and the exponential rule.
pub trait StoppingPolicy: Sync {
    /// `h(t, i)`, possibly `inf`.
    fn wait(&self, i: usize, t: f64) -> f64;
}

impl StoppingPolicy for MarkovStoppingRule {
    fn wait(&self, i: usize, t: f64) -> f64 {
        MarkovStoppingRule::wait(self, i, t)
    }
}

impl StoppingPolicy for ExpSolution {
    fn wait(&self, i: usize, _t: f64) -> f64 {
        ExpSolution::wait(self, i)
    }
}

/// Stop on entering a set of states.
#[derive(Debug, Clone, PartialEq)]
pub struct HittingRule(pub Vec<bool>);

impl StoppingPolicy for HittingRule {
    fn wait(&self, i: usize, _t: f64) -> f64 {
        if self.0[i] {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Value lookup for the tail diagnostic. Returns `(value, truncated)`.
pub trait ValueLookup: Sync {
    fn value(&self, i: usize, t: f64) -> (f64, bool);
}

impl ValueLookup for ValueField {
    fn value(&self, i: usize, t: f64) -> (f64, bool) {
        self.interpolate(i, t)
    }
}

impl ValueLookup for ExpSolution {
    fn value(&self, i: usize, t: f64) -> (f64, bool) {
        (ExpSolution::value(self, i, t), false)
    }
}

/// Lazily sampled path of one stream.
pub struct PathWalker<'a> {
    model: &'a CtmcModel,
    sampler: Sampler,
    rng: ChaCha8Rng,
    state: usize,
    time: f64,
}

impl<'a> PathWalker<'a> {
    pub fn new(model: &'a CtmcModel, sampler: Sampler, i0: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            model,
            sampler,
            rng,
            state: i0,
            time: 0.0,
        }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Draws the holding time in the current state and the state entered
    /// next, without moving. Call [`PathWalker::advance`] to take the jump.
    pub fn draw(&mut self) -> (f64, usize) {
        match self.sampler {
            Sampler::Direct => {
                let q = self.model.exit_rate(self.state);
                let e: f64 = Exp1.sample(&mut self.rng);
                let next = self.pick(self.state, q);
                (e / q, next)
            }
            Sampler::Uniformized { rate } => {
                let mut hold = 0.0;
                loop {
                    let e: f64 = Exp1.sample(&mut self.rng);
                    hold += e / rate;
                    let next = self.pick(self.state, rate);
                    if next != self.state {
                        return (hold, next);
                    }
                }
            }
        }
    }

    /// Successor of `i` drawn from `q_ij / total`; the remainder is a
    /// self-jump.
    fn pick(&mut self, i: usize, total: f64) -> usize {
        let u: f64 = self.rng.random::<f64>() * total;
        let mut acc = 0.0;
        for &(j, r) in self.model.targets(i) {
            acc += r;
            if u < acc {
                return j;
            }
        }
        // rounding can leave u just above the last cumulative rate
        if total == self.model.exit_rate(i) {
            self.model.targets(i).last().map_or(i, |&(j, _)| j)
        } else {
            i
        }
    }

    pub fn advance(&mut self, hold: f64, next: usize) {
        self.time += hold;
        self.state = next;
    }
}

/// A sampled path: jump times `S_0 = 0 < ... < S_K`, states `Z_0..Z_K`, and
/// the time `Z_K` is left.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub jump_times: Vec<f64>,
    pub states: Vec<usize>,
    pub exit_time: f64,
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PathHorizon {
    /// Record this many jumps.
    Jumps(usize),
    /// Record jumps up to this time.
    Time(f64),
}

/// `n_paths` independent paths from `i0`.
pub fn sample_paths(
    model: &CtmcModel,
    i0: usize,
    horizon: PathHorizon,
    n_paths: usize,
    seed: u64,
    sampler: Sampler,
) -> Result<Vec<Trajectory>, SimError> {
    check_start(model, i0)?;
    sampler.check(model)?;
    if n_paths == 0 {
        return Err(SimError::InvalidParameter("n_paths must be at least 1".into()));
    }
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|stream| {
            let mut walker = PathWalker::new(model, sampler, i0, seed, stream);
            let mut jump_times = vec![0.0];
            let mut states = vec![i0];
            loop {
                let (hold, next) = walker.draw();
                let exit = walker.time() + hold;
                let done = match horizon {
                    PathHorizon::Jumps(n) => states.len() > n,
                    PathHorizon::Time(t) => exit > t,
                };
                if done {
                    return Trajectory {
                        jump_times,
                        states,
                        exit_time: exit,
                        seed,
                        stream,
                    };
                }
                walker.advance(hold, next);
                jump_times.push(walker.time());
                states.push(next);
            }
        })
        .collect())
}

fn check_start(model: &CtmcModel, i0: usize) -> Result<(), SimError> {
    if i0 < model.len() {
        Ok(())
    } else {
        Err(SimError::InvalidParameter(format!("start state {i0} out of range")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RuleOutcome {
    pub tau: f64,
    pub state: usize,
    /// `false` when the path ended before the rule stopped; `tau` is then the
    /// last recorded jump time.
    pub stopped: bool,
}

/// Walks the path and stops at `S_k + h(t_offset + S_k, Z_k)` in the first
/// holding interval that outlasts the wait.
pub fn apply_rule(traj: &Trajectory, rule: &impl StoppingPolicy, t_offset: f64) -> RuleOutcome {
    let last = traj.states.len() - 1;
    for k in 0..=last {
        let s = traj.jump_times[k];
        let next = if k < last { traj.jump_times[k + 1] } else { traj.exit_time };
        let w = rule.wait(traj.states[k], t_offset + s);
        if w < next - s {
            return RuleOutcome {
                tau: s + w,
                state: traj.states[k],
                stopped: true,
            };
        }
    }
    RuleOutcome {
        tau: traj.jump_times[last],
        state: traj.states[last],
        stopped: false,
    }
}

/// Runs the rule on a lazily sampled path of at most `max_jumps` jumps.
pub fn run_rule(walker: &mut PathWalker<'_>, rule: &impl StoppingPolicy, t_offset: f64, max_jumps: usize) -> RuleOutcome {
    for _ in 0..=max_jumps {
        let w = rule.wait(walker.state(), t_offset + walker.time());
        let (hold, next) = walker.draw();
        if w < hold {
            return RuleOutcome {
                tau: walker.time() + w,
                state: walker.state(),
                stopped: true,
            };
        }
        walker.advance(hold, next);
    }
    RuleOutcome {
        tau: walker.time(),
        state: walker.state(),
        stopped: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McOptions {
    pub n_paths: usize,
    pub seed: u64,
    /// Jump cap per path; paths still running there are stopped where they
    /// are and counted as unstopped.
    pub max_jumps: usize,
    pub sampler: Sampler,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            seed: 0,
            max_jumps: 10_000,
            sampler: Sampler::Direct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimand: String,
    #[serde(serialize_with = "crate::serialize_extended")]
    pub mean: f64,
    #[serde(serialize_with = "crate::serialize_extended")]
    pub se: f64,
    pub n: usize,
    pub seed: u64,
    /// `U^{-1}(mean)`, when it exists.
    pub certainty_equivalent: Option<f64>,
    /// Delta-method error bar `se / U'(CE)`.
    pub ce_se: Option<f64>,
    pub unstopped_fraction: f64,
}

/// Sum with a fixed binary tree, independent of thread count.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Sample mean and standard error of the mean, with `n - 1` in the variance.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = pairwise_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn check_mc(problem: &StoppingProblem, i0: usize, opts: &McOptions) -> Result<(), SimError> {
    check_start(problem.model(), i0)?;
    opts.sampler.check(problem.model())?;
    if opts.n_paths < 2 {
        return Err(SimError::InvalidParameter("n_paths must be at least 2".into()));
    }
    Ok(())
}

/// Stop outcome of every path of the run, in path order.
pub fn stop_outcomes(
    problem: &StoppingProblem,
    rule: &impl StoppingPolicy,
    i0: usize,
    opts: &McOptions,
) -> Result<Vec<RuleOutcome>, SimError> {
    check_mc(problem, i0, opts)?;
    let t0 = problem.initial_offset();
    Ok((0..opts.n_paths as u64)
        .into_par_iter()
        .map(|stream| {
            let mut walker = PathWalker::new(problem.model(), opts.sampler, i0, opts.seed, stream);
            run_rule(&mut walker, rule, t0, opts.max_jumps)
        })
        .collect())
}

/// Estimates `E_i[U(g(X_tau) - c (t0 + tau))]` for the rule started in `i0`
/// at the problem's initial offset `t0`.
pub fn mc_expected_utility(
    problem: &StoppingProblem,
    rule: &impl StoppingPolicy,
    i0: usize,
    opts: &McOptions,
) -> Result<McEstimate, SimError> {
    let outcomes = stop_outcomes(problem, rule, i0, opts)?;
    let t0 = problem.initial_offset();
    let unstopped = outcomes.iter().filter(|o| !o.stopped).count() as f64 / outcomes.len() as f64;
    if unstopped > UNSTOPPED_TOLERANCE {
        return Err(SimError::HorizonExhausted {
            fraction: unstopped,
            limit: UNSTOPPED_TOLERANCE,
        });
    }
    let payoffs: Vec<f64> = outcomes.iter().map(|o| problem.stop_utility(o.state, t0 + o.tau)).collect();
    let (mean, se) = mean_and_se(&payoffs);
    let u = problem.utility();
    let ce = u.inverse(mean).ok().filter(|x| x.is_finite());
    let ce_se = ce.and_then(|x| u.deriv(x).ok()).map(|d| se / d);
    Ok(McEstimate {
        estimand: format!("E_{i0}[U(g(X_tau) - c(t + tau))]"),
        mean,
        se,
        n: opts.n_paths,
        seed: opts.seed,
        certainty_equivalent: ce,
        ce_se,
        unstopped_fraction: unstopped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailTerm {
    pub n: usize,
    /// Estimate of `E_i[V(t + S_n, Z_n) 1{tau >= S_n}]`.
    #[serde(serialize_with = "crate::serialize_extended")]
    pub mean: f64,
    #[serde(serialize_with = "crate::serialize_extended")]
    pub se: f64,
    /// Empirical `P(tau >= S_n)`.
    pub p_running: f64,
    /// Fraction of paths whose `t + S_n` fell beyond the value table.
    pub truncated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    pub terms: Vec<TailTerm>,
    pub verdict: Verdict,
    pub seed: u64,
    pub n_paths: usize,
}

/// Monte Carlo estimates of the transversality terms
/// `E_i[V(t + S_n, Z_n) 1{tau >= S_n}]` for each `n` in `n_list`.
///
/// The verdict is a heuristic: `PASS` when the magnitudes do not grow by
/// more than three combined standard errors from one `n` to the next and the
/// last one is within three standard errors of zero.
pub fn tail_diagnostic(
    problem: &StoppingProblem,
    rule: &impl StoppingPolicy,
    value: &impl ValueLookup,
    i0: usize,
    n_list: &[usize],
    opts: &McOptions,
) -> Result<TailReport, SimError> {
    check_mc(problem, i0, opts)?;
    if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::InvalidParameter("n_list must be strictly increasing and nonempty".into()));
    }
    let t0 = problem.initial_offset();
    let n_max = *n_list.last().expect("nonempty");
    // per path: (term, running, truncated) for each n
    let rows: Vec<Vec<(f64, bool, bool)>> = (0..opts.n_paths as u64)
        .into_par_iter()
        .map(|stream| {
            let mut walker = PathWalker::new(problem.model(), opts.sampler, i0, opts.seed, stream);
            let mut out = Vec::with_capacity(n_list.len());
            let mut next_n = 0;
            for jump in 0..=n_max {
                if jump == n_list[next_n] {
                    let (v, trunc) = value.value(walker.state(), t0 + walker.time());
                    out.push((v, true, trunc));
                    next_n += 1;
                    if next_n == n_list.len() {
                        break;
                    }
                }
                let w = rule.wait(walker.state(), t0 + walker.time());
                let (hold, next) = walker.draw();
                if w < hold {
                    break;
                }
                walker.advance(hold, next);
            }
            out.resize(n_list.len(), (0.0, false, false));
            out
        })
        .collect();

    let n = opts.n_paths as f64;
    let terms: Vec<TailTerm> = n_list
        .iter()
        .enumerate()
        .map(|(k, &jumps)| {
            let xs: Vec<f64> = rows.iter().map(|r| if r[k].1 { r[k].0 } else { 0.0 }).collect();
            let (mean, se) = mean_and_se(&xs);
            TailTerm {
                n: jumps,
                mean,
                se,
                p_running: rows.iter().filter(|r| r[k].1).count() as f64 / n,
                truncated: rows.iter().filter(|r| r[k].2).count() as f64 / n,
            }
        })
        .collect();

    let settles = terms
        .windows(2)
        .all(|w| w[1].mean.abs() <= w[0].mean.abs() + 3.0 * (w[0].se + w[1].se));
    let last = terms.last().expect("nonempty");
    let vanishes = last.mean.abs() <= 3.0 * last.se;
    Ok(TailReport {
        verdict: if settles && vanishes {
            Verdict::Pass
        } else {
            Verdict::Inconclusive
        },
        terms,
        seed: opts.seed,
        n_paths: opts.n_paths,
    })
}
