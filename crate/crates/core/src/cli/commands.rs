//! One function per subcommand. Each returns the `result` and `diagnostics`
//! objects of the report, or a [`Failure`] carrying the exit status.

use std::path::Path;

use serde_json::{json, Value};

use crate::exp_solver::{check_drift, solve_exp_finite, solve_exp_infinite, ExpError, ExpSolution};
use crate::grid::MarkovStoppingRule;
use crate::grid_solver::{solve_finite, solve_infinite, InfiniteSolution, SolverError};
use crate::house::{build_house_model, check_offer_monotonicity, HouseError};
use crate::model::{ModelError, StoppingProblem};
use crate::ola::{certify_immediate_stop, exp_ola_set, OlaError, OlaOptions};
use crate::risk_compare::{compare_stop_regions, more_risk_averse, stochastic_order_check, RiskError};
use crate::simulator::{mc_expected_utility, stop_outcomes, tail_diagnostic, HittingRule, SimError, StoppingPolicy, ValueLookup};
use crate::utility::UtilityFamily;

use super::config::{utility_json, Config, Policy};
use super::output::{num, nums, write_exp_csv, write_file, write_value_csv};
use super::{exit, Command, Failure, Outcome, RunArgs};

pub fn dispatch(command: &Command, cfg: &Config, args: &RunArgs) -> Result<Outcome, Failure> {
    let out = args.out.as_deref();
    match command {
        Command::Validate(_) => validate(cfg),
        Command::SolveFinite(_) => finite(cfg, out),
        Command::SolveInfinite(_) => infinite(cfg, out),
        Command::SolveExp(_) => exp(cfg, out),
        Command::Ola(_) => ola(cfg),
        Command::Simulate(_) => simulate(cfg, args.paths_csv.as_deref()),
        Command::TailCheck(_) => tail_check(cfg),
        Command::CompareRisk(_) => compare(cfg),
        Command::House(_) => house(cfg, out),
    }
}

pub fn model_failure(e: &ModelError) -> Failure {
    let f = Failure::new(exit::VALIDATION, "VALIDATION_ERROR", e.to_string());
    match e {
        ModelError::Invalid(v) => f.with_details(json!({"violations": v})),
        _ => f.with_details(json!({"violations": [{"code": e.code()}]})),
    }
}

fn solver_failure(e: SolverError) -> Failure {
    let status = match e {
        SolverError::NoConvergence { .. } => exit::NO_CONVERGENCE,
        _ => exit::VALIDATION,
    };
    Failure::new(status, e.code(), e.to_string())
}

fn exp_failure(e: ExpError) -> Failure {
    let status = match e {
        ExpError::NoConvergence { .. } | ExpError::NoConsistentStopSet => exit::NO_CONVERGENCE,
        _ => exit::VALIDATION,
    };
    Failure::new(status, e.code(), e.to_string())
}

fn sim_failure(e: SimError) -> Failure {
    let status = match e {
        SimError::HorizonExhausted { .. } => exit::NO_CONVERGENCE,
        SimError::InvalidParameter(_) => exit::VALIDATION,
    };
    Failure::new(status, e.code(), e.to_string())
}

fn ola_failure(e: OlaError) -> Failure {
    match e {
        OlaError::Model(m) => model_failure(&m),
        e => Failure::new(exit::VALIDATION, e.code(), e.to_string()),
    }
}

fn risk_failure(e: RiskError) -> Failure {
    match e {
        RiskError::ContainmentViolation(report) => {
            Failure::new(exit::PROPERTY, "CONTAINMENT_VIOLATION", "stop regions are not nested")
                .with_details(json!(report))
        }
        RiskError::PathwiseViolation { streams } => Failure::new(
            exit::PROPERTY,
            "PATHWISE_VIOLATION",
            format!("{} coupled paths stop later under the more risk-averse rule", streams.len()),
        )
        .with_details(json!({"streams": streams})),
        RiskError::Model(m) => model_failure(&m),
        RiskError::Solver(s) => solver_failure(s),
        RiskError::Sim(s) => sim_failure(s),
        e => Failure::new(exit::VALIDATION, e.code(), e.to_string()),
    }
}

fn house_failure(e: HouseError) -> Failure {
    match e {
        HouseError::MonotonicityViolation(report) => {
            Failure::new(exit::PROPERTY, "MONOTONICITY_VIOLATION", "offer monotonicity fails")
                .with_details(json!(report))
        }
        HouseError::Model(m) => model_failure(&m),
        e => Failure::new(exit::VALIDATION, e.code(), e.to_string()),
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::new(exit::VALIDATION, "IO_ERROR", e.to_string())
}

fn problem(cfg: &Config) -> Result<StoppingProblem, Failure> {
    cfg.problem().map_err(|e| model_failure(&e))
}

fn exp_gamma(cfg: &Config) -> Result<f64, Failure> {
    match cfg.utility.family() {
        UtilityFamily::Exponential { gamma } => Ok(gamma),
        _ => Err(Failure::new(
            exit::VALIDATION,
            "UTILITY_NOT_EXPONENTIAL",
            "this command needs an exponential utility",
        )),
    }
}

fn per_state(cfg: &Config, f: impl Fn(usize) -> f64) -> Value {
    let states = cfg.model.states();
    Value::Object(states.iter().enumerate().map(|(i, s)| (s.clone(), num(f(i)))).collect())
}

fn stop_set_json(cfg: &Config, sol: &ExpSolution) -> Value {
    if sol.stops_everywhere() {
        json!("all")
    } else {
        json!(sol.stop_indices().iter().map(|&i| &cfg.model.states()[i]).collect::<Vec<_>>())
    }
}

fn write_values(out: Option<&Path>, name: &str, cfg: &Config, sol: &InfiniteSolution) -> Result<(), Failure> {
    if let Some(dir) = out {
        write_file(dir, name, |f| write_value_csv(f, cfg.model.states(), &sol.value, Some(&sol.rule))).map_err(io_failure)?;
    }
    Ok(())
}

fn validate(cfg: &Config) -> Result<Outcome, Failure> {
    let p = problem(cfg)?;
    let m = &cfg.model;
    let mut result = json!({
        "states": m.states(),
        "m": m.len(),
        "exit_rates": m.exit_rates(),
        "rewards": m.rewards(),
        "c": m.cost(),
        "utility": utility_json(&cfg.utility),
        "domain_caps": nums(&(0..m.len()).map(|i| p.domain_cap(i)).collect::<Vec<_>>()),
    });
    if let UtilityFamily::Exponential { gamma } = cfg.utility.family() {
        let drift = check_drift(m, gamma);
        result["drift_states"] = json!((0..m.len()).filter(|&i| drift[i]).collect::<Vec<_>>());
    }
    Ok(Outcome {
        result,
        diagnostics: json!({}),
    })
}

fn finite(cfg: &Config, out: Option<&Path>) -> Result<Outcome, Failure> {
    let n = cfg.horizon.ok_or_else(|| {
        Failure::new(exit::VALIDATION, "SCHEMA_ERROR", "solve-finite needs a jump horizon")
            .with_details(json!({"pointer": "/solver/horizon"}))
    })?;
    let p = problem(cfg)?;
    let sol = solve_finite(&p, n, cfg.grid, &cfg.solver).map_err(solver_failure)?;
    let value = sol.values.last().expect("V_0 is always present");
    let rule = sol.rules.last();
    if let Some(dir) = out {
        write_file(dir, "values.csv", |f| write_value_csv(f, cfg.model.states(), value, rule)).map_err(io_failure)?;
    }
    let result = json!({
        "n": n,
        "value_t0": per_state(cfg, |i| value.interpolate(i, cfg.t0).0),
        "h_star_t0": rule.map(|r| per_state(cfg, |i| r.wait(i, cfg.t0))),
    });
    Ok(Outcome {
        result,
        diagnostics: json!({"warnings": sol.warnings}),
    })
}

fn infinite(cfg: &Config, out: Option<&Path>) -> Result<Outcome, Failure> {
    let p = problem(cfg)?;
    let sol = solve_infinite(&p, cfg.grid, &cfg.solver).map_err(solver_failure)?;
    write_values(out, "values.csv", cfg, &sol)?;
    let result = json!({
        "iterations": sol.iterations,
        "residual": sol.residual,
        "value_t0": per_state(cfg, |i| sol.value.interpolate(i, cfg.t0).0),
        "h_star_t0": per_state(cfg, |i| sol.rule.wait(i, cfg.t0)),
    });
    Ok(Outcome {
        result,
        diagnostics: json!({"warnings": sol.warnings}),
    })
}

fn exp(cfg: &Config, out: Option<&Path>) -> Result<Outcome, Failure> {
    let gamma = exp_gamma(cfg)?;
    let sol = match cfg.horizon {
        Some(n) => solve_exp_finite(&cfg.model, gamma, n)
            .map_err(exp_failure)?
            .pop()
            .expect("n + 1 solutions"),
        None => solve_exp_infinite(&cfg.model, gamma, &cfg.exp).map_err(exp_failure)?,
    };
    if let Some(dir) = out {
        write_file(dir, "exp.csv", |f| write_exp_csv(f, cfg.model.states(), &sol)).map_err(io_failure)?;
    }
    let drift = check_drift(&cfg.model, gamma);
    let result = json!({
        "gamma": gamma,
        "horizon": sol.horizon,
        "W": per_state(cfg, |i| sol.w[i]),
        "f_star": per_state(cfg, |i| sol.wait(i)),
        "stop_set": stop_set_json(cfg, &sol),
        "value_t0": per_state(cfg, |i| sol.value(i, cfg.t0)),
    });
    Ok(Outcome {
        result,
        diagnostics: json!({
            "iterations": sol.iterations,
            "residual": sol.residual,
            "drift_states": (0..drift.len()).filter(|&i| drift[i]).collect::<Vec<_>>(),
        }),
    })
}

fn ola(cfg: &Config) -> Result<Outcome, Failure> {
    let p = problem(cfg)?;
    let opts = OlaOptions {
        dtheta: cfg.ola_dtheta,
        ..OlaOptions::default()
    };
    let report = certify_immediate_stop(&p, cfg.ola_t, &opts).map_err(ola_failure)?;
    let mut result = json!(report);
    if let UtilityFamily::Exponential { gamma } = cfg.utility.family() {
        let (set, closure) = exp_ola_set(&cfg.model, gamma);
        result["exp_ola"] = json!({
            "set": (0..set.len()).filter(|&i| set[i]).collect::<Vec<_>>(),
            "closed": closure.closed,
        });
    }
    Ok(Outcome {
        result,
        diagnostics: json!({}),
    })
}

/// The optimal rule with its value, from the closed form when the utility is
/// exponential and from the grid solver otherwise.
enum Optimal {
    Exp(ExpSolution),
    Grid(Box<InfiniteSolution>),
}

impl StoppingPolicy for Optimal {
    fn wait(&self, i: usize, t: f64) -> f64 {
        match self {
            Optimal::Exp(s) => StoppingPolicy::wait(s, i, t),
            Optimal::Grid(s) => s.rule.wait(i, t),
        }
    }
}

impl ValueLookup for Optimal {
    fn value(&self, i: usize, t: f64) -> (f64, bool) {
        match self {
            Optimal::Exp(s) => ValueLookup::value(s, i, t),
            Optimal::Grid(s) => s.value.interpolate(i, t),
        }
    }
}

impl Optimal {
    fn solve(cfg: &Config, p: &StoppingProblem) -> Result<(Self, Value), Failure> {
        match cfg.utility.family() {
            UtilityFamily::Exponential { gamma } => {
                let s = solve_exp_infinite(&cfg.model, gamma, &cfg.exp).map_err(exp_failure)?;
                let diag = json!({"solver": "exp", "iterations": s.iterations, "residual": s.residual});
                Ok((Optimal::Exp(s), diag))
            }
            _ => {
                let s = solve_infinite(p, cfg.grid, &cfg.solver).map_err(solver_failure)?;
                let diag = json!({"solver": "grid", "iterations": s.iterations, "residual": s.residual, "warnings": s.warnings});
                Ok((Optimal::Grid(Box::new(s)), diag))
            }
        }
    }
}

fn simulate(cfg: &Config, paths_csv: Option<&Path>) -> Result<Outcome, Failure> {
    let p = problem(cfg)?;
    let sim = &cfg.simulation;
    let (estimate, reference, diag, outcomes) = match sim.policy {
        Policy::Optimal => {
            let (rule, diag) = Optimal::solve(cfg, &p)?;
            let est = mc_expected_utility(&p, &rule, sim.i0, &sim.mc).map_err(sim_failure)?;
            let reference = rule.value(sim.i0, cfg.t0).0;
            let outcomes = paths_csv
                .map(|_| stop_outcomes(&p, &rule, sim.i0, &sim.mc))
                .transpose()
                .map_err(sim_failure)?;
            (est, Some(reference), diag, outcomes)
        }
        Policy::Immediate => {
            let rule = HittingRule(vec![true; cfg.model.len()]);
            let est = mc_expected_utility(&p, &rule, sim.i0, &sim.mc).map_err(sim_failure)?;
            let outcomes = paths_csv
                .map(|_| stop_outcomes(&p, &rule, sim.i0, &sim.mc))
                .transpose()
                .map_err(sim_failure)?;
            (est, Some(p.stop_utility(sim.i0, cfg.t0)), json!({}), outcomes)
        }
    };
    if let (Some(path), Some(outcomes)) = (paths_csv, outcomes) {
        let write = || -> csv::Result<()> {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["stream", "tau", "state", "stopped", "payoff"])?;
            for (k, o) in outcomes.iter().enumerate() {
                let payoff = p.stop_utility(o.state, cfg.t0 + o.tau);
                w.write_record([
                    k.to_string(),
                    o.tau.to_string(),
                    cfg.model.states()[o.state].clone(),
                    o.stopped.to_string(),
                    payoff.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        };
        write().map_err(|e| io_failure(std::io::Error::other(e)))?;
    }
    let mut result = json!(estimate);
    result["dp_value"] = reference.map_or(Value::Null, num);
    Ok(Outcome {
        result,
        diagnostics: diag,
    })
}

fn tail_check(cfg: &Config) -> Result<Outcome, Failure> {
    let p = problem(cfg)?;
    let sim = &cfg.simulation;
    let (rule, diag) = Optimal::solve(cfg, &p)?;
    let report = tail_diagnostic(&p, &rule, &rule, sim.i0, &sim.n_list, &sim.mc).map_err(sim_failure)?;
    Ok(Outcome {
        result: json!(report),
        diagnostics: diag,
    })
}

fn compare(cfg: &Config) -> Result<Outcome, Failure> {
    let cmp = cfg.compare.as_ref().ok_or_else(|| {
        Failure::new(exit::VALIDATION, "SCHEMA_ERROR", "compare-risk needs a second utility")
            .with_details(json!({"pointer": "/compare"}))
    })?;
    let (u, w) = (cfg.utility, cmp.utility_w);
    let verdict = more_risk_averse(&u, &w, &cmp.x_range).map_err(risk_failure)?;
    if !verdict.more_averse {
        return Err(Failure::new(
            exit::VALIDATION,
            "NOT_COMPARABLE",
            "the first utility is not more risk averse than the second on the range",
        )
        .with_details(json!(verdict)));
    }
    let regions = compare_stop_regions(&cfg.model, &u, &w, cfg.grid, &cfg.solver).map_err(risk_failure)?;
    let p = problem(cfg)?;
    let sim = &cfg.simulation;
    let order =
        stochastic_order_check(&p, &regions.u.rule, &regions.w.rule, sim.i0, &sim.mc).map_err(risk_failure)?;
    let mut result = json!({
        "aversion": verdict,
        "containment": regions.report,
        "order": order,
    });
    if let (UtilityFamily::Exponential { gamma: gu }, UtilityFamily::Exponential { gamma: gw }) = (u.family(), w.family()) {
        let su = solve_exp_infinite(&cfg.model, gu, &cfg.exp).map_err(exp_failure)?;
        let sw = solve_exp_infinite(&cfg.model, gw, &cfg.exp).map_err(exp_failure)?;
        let nested = sw.stop_set.iter().zip(&su.stop_set).all(|(&w_stops, &u_stops)| !w_stops || u_stops);
        if !nested {
            return Err(Failure::new(exit::PROPERTY, "CONTAINMENT_VIOLATION", "exponential stop sets are not nested")
                .with_details(json!({"stop_set_u": su.stop_set, "stop_set_w": sw.stop_set})));
        }
        result["exp_stop_sets"] = json!({"u": su.stop_indices(), "w": sw.stop_indices(), "nested": nested});
    }
    Ok(Outcome {
        result,
        diagnostics: json!({
            "iterations_u": regions.u.iterations,
            "iterations_w": regions.w.iterations,
            "warnings_u": regions.u.warnings,
            "warnings_w": regions.w.warnings,
        }),
    })
}

fn house(cfg: &Config, out: Option<&Path>) -> Result<Outcome, Failure> {
    let alpha = cfg.house_alpha().ok_or_else(|| {
        Failure::new(exit::VALIDATION, "SCHEMA_ERROR", "house needs offer intensities")
            .with_details(json!({"pointer": "/alpha"}))
    })?;
    let h = build_house_model(alpha, cfg.model.cost()).map_err(house_failure)?;
    let p = problem(cfg)?;
    let sol = solve_infinite(&p, cfg.grid, &cfg.solver).map_err(solver_failure)?;
    write_values(out, "values.csv", cfg, &sol)?;
    let report = check_offer_monotonicity(&p, &sol.value, &sol.rule).map_err(house_failure)?;
    let mut result = json!({
        "levels": h.levels(),
        "offer_distribution": h.offer_distribution(),
        "monotonicity": report,
        "value_t0": per_state(cfg, |i| sol.value.interpolate(i, cfg.t0).0),
        "h_star_t0": per_state(cfg, |i| sol.rule.wait(i, cfg.t0)),
        "reservation_offer_t0": reservation(&sol.rule, cfg).map(|i| cfg.model.states()[i].clone()),
    });
    if let UtilityFamily::Exponential { gamma } = cfg.utility.family() {
        let s = solve_exp_infinite(h.model(), gamma, &cfg.exp).map_err(exp_failure)?;
        let upward = s.stop_set.windows(2).all(|w| !w[0] || w[1]);
        if !upward {
            return Err(Failure::new(exit::PROPERTY, "MONOTONICITY_VIOLATION", "exponential stop set is not upward closed")
                .with_details(json!({"stop_set": s.stop_set})));
        }
        result["exp_stop_set"] = stop_set_json(cfg, &s);
    }
    Ok(Outcome {
        result,
        diagnostics: json!({"iterations": sol.iterations, "residual": sol.residual, "warnings": sol.warnings}),
    })
}

/// Lowest offer accepted at once at `t0`.
fn reservation(rule: &MarkovStoppingRule, cfg: &Config) -> Option<usize> {
    (0..cfg.model.len()).find(|&i| rule.wait(i, cfg.t0) == 0.0)
}
