use proptest::prelude::*;

use riskstop::exp_solver::{solve_exp_finite, solve_exp_infinite, ExpOptions};
use riskstop::grid::{TimeGrid, ValueField};
use riskstop::grid_solver::{apply_t, settle_horizon, solve_finite, solve_infinite, terminal_field, SolverOptions};
use riskstop::house::{build_house_model, check_offer_monotonicity, HouseError, HouseViolation};
use riskstop::model::{validate_model, CtmcModel, StoppingProblem};
use riskstop::ola::{check_closure, exp_ola_set, s0_membership, OlaOptions};
use riskstop::risk_compare::{more_risk_averse, XRange};
use riskstop::simulator::{apply_rule, mc_expected_utility, sample_paths, McOptions, PathHorizon, Sampler, StoppingPolicy};
use riskstop::utility::UtilitySpec;

/// Dense generator with off-diagonal rates in `[0, 3]`; every row keeps at
/// least one positive rate.
fn arb_model(max_states: usize) -> impl Strategy<Value = CtmcModel> {
    (2..=max_states).prop_flat_map(|m| {
        (
            prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0), 0.1..3.0f64], m), m),
            prop::collection::vec(0.0..5.0f64, m),
            0.1..2.0f64,
        )
            .prop_map(move |(mut rates, g, c)| {
                for (i, row) in rates.iter_mut().enumerate() {
                    row[i] = 0.0;
                    if row.iter().all(|&r| r == 0.0) {
                        row[(i + 1) % m] = 1.0;
                    }
                    row[i] = -row.iter().sum::<f64>();
                }
                CtmcModel::from_generator(rates, g, c).unwrap()
            })
    })
}

fn arb_utility() -> impl Strategy<Value = UtilitySpec> {
    prop_oneof![
        (0.1..2.0f64).prop_map(|g| UtilitySpec::exponential(g).unwrap()),
        (-2.0..-0.5f64).prop_map(|d| UtilitySpec::logarithmic(d).unwrap()),
        (0.1..0.9f64, -2.0..-0.5f64).prop_map(|(p, d)| UtilitySpec::power(p, d).unwrap()),
        Just(UtilitySpec::linear()),
    ]
}

/// `a <= b` up to a relative slack, with equal infinities allowed.
fn le(a: f64, b: f64) -> bool {
    a == b || a <= b + 1e-12 * a.abs().max(1.0)
}

fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derivatives_match_differences(u in arb_utility(), x in 0.0..4.0f64) {
        let h = 1e-5;
        let d1 = (u.eval(x + h) - u.eval(x - h)) / (2.0 * h);
        prop_assert!(rel_close(d1, u.deriv(x).unwrap(), 1e-5));
        let d2 = (u.deriv(x + h).unwrap() - u.deriv(x - h).unwrap()) / (2.0 * h);
        let exact = u.second_deriv(x).unwrap();
        prop_assert!(rel_close(d2, exact, 1e-5) || (exact == 0.0 && d2.abs() < 1e-9));
    }

    #[test]
    fn utility_is_increasing_and_concave(u in arb_utility(), a in 0.0..6.0f64, b in 0.0..6.0f64, s in 0.0..1.0f64) {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        prop_assume!(y - x > 1e-9);
        prop_assert!(u.eval(x) < u.eval(y));
        let z = x + s * (y - x);
        let chord = u.eval(x) + s * (u.eval(y) - u.eval(x));
        prop_assert!(u.eval(z) >= chord - 1e-12 * chord.abs().max(1.0));
    }

    #[test]
    fn embedded_rows_are_distributions(model in arb_model(6)) {
        for i in 0..model.len() {
            let p = model.embedded_transition(i);
            prop_assert_eq!(p[i], 0.0);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_is_idempotent(model in arb_model(6)) {
        prop_assert_eq!(validate_model(model.to_raw()).unwrap(), model);
    }

    #[test]
    fn exp_iteration_increases_and_stays_nonpositive(model in arb_model(6), gamma in 0.1..2.0f64) {
        let sols = solve_exp_finite(&model, gamma, 12).unwrap();
        for pair in sols.windows(2) {
            for i in 0..model.len() {
                prop_assert!(pair[0].w[i] <= pair[1].w[i] + 1e-15 * pair[0].w[i].abs());
                prop_assert!(pair[1].w[i] <= 0.0);
            }
        }
    }

    #[test]
    fn exp_s0_ignores_time(model in arb_model(5), gamma in 0.1..2.0f64, t in 0.0..5.0f64) {
        let p = StoppingProblem::new(model.clone(), UtilitySpec::exponential(gamma).unwrap()).unwrap();
        let (set, _) = exp_ola_set(&model, gamma);
        let opts = OlaOptions::default();
        for i in 0..model.len() {
            prop_assert_eq!(s0_membership(&p, i, t, &opts).unwrap().member, set[i]);
            prop_assert_eq!(s0_membership(&p, i, 0.0, &opts).unwrap().member, set[i]);
        }
    }

    #[test]
    fn stop_set_sits_inside_exp_ola_set(model in arb_model(6), gamma in 0.1..2.0f64) {
        let (set, closure) = exp_ola_set(&model, gamma);
        prop_assert_eq!(check_closure(&model, &set).closed, closure.closed);
        let sol = solve_exp_infinite(&model, gamma, &ExpOptions::default()).unwrap();
        for i in 0..model.len() {
            prop_assert!(set[i] || !sol.stop_set[i], "state {} stops outside S0", i);
        }
        if closure.closed {
            prop_assert_eq!(&set, &sol.stop_set);
        }
    }

    #[test]
    fn aversion_is_transitive(u in arb_utility(), v in arb_utility(), w in arb_utility()) {
        let range = XRange::new(0.0, 4.0, 0.25).unwrap();
        let uv = more_risk_averse(&u, &v, &range).unwrap().more_averse;
        let vw = more_risk_averse(&v, &w, &range).unwrap().more_averse;
        if uv && vw {
            prop_assert!(more_risk_averse(&u, &w, &range).unwrap().more_averse);
        }
    }

    #[test]
    fn rule_stops_inside_the_right_holding_interval(model in arb_model(4), seed in any::<u64>(), t0 in 0.0..2.0f64) {
        let grid = TimeGrid::new(10.0, 0.5).unwrap();
        let m = model.len();
        let rule = riskstop::grid::MarkovStoppingRule::from_fn(grid, m, |i, t| (0.3 * (i + 1) as f64 - 0.1 * t).max(0.0));
        let paths = sample_paths(&model, 0, PathHorizon::Jumps(50), 20, seed, Sampler::Direct).unwrap();
        for path in &paths {
            let out = apply_rule(path, &rule, t0);
            if !out.stopped {
                continue;
            }
            let k = path.jump_times.iter().rposition(|&s| s <= out.tau).unwrap();
            let s_k = path.jump_times[k];
            prop_assert_eq!(out.state, path.states[k]);
            prop_assert!((out.tau - (s_k + rule.wait(path.states[k], t0 + s_k))).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_estimate(model in arb_model(4), seed in any::<u64>()) {
        let p = StoppingProblem::new(model.clone(), UtilitySpec::exponential(0.5).unwrap()).unwrap();
        let sol = solve_exp_infinite(&model, 0.5, &ExpOptions::default()).unwrap();
        prop_assume!(sol.stop_set[0] || sol.stop_set.iter().any(|&s| s));
        let opts = McOptions { n_paths: 500, seed, ..McOptions::default() };
        let a = mc_expected_utility(&p, &sol, 0, &opts);
        let b = mc_expected_utility(&p, &sol, 0, &opts);
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_is_monotone(model in arb_model(4), u in arb_utility(), bumps in prop::collection::vec(0.0..1.0f64, 4 * 41)) {
        let p = StoppingProblem::new(model.clone(), u).unwrap();
        let grid = TimeGrid::new(4.0, 0.1).unwrap();
        let v = terminal_field(&p, grid);
        let m = model.len();
        let w = ValueField::from_fn(grid, m, |i, t| {
            let k = grid.floor_index(t);
            v.at(i, k) + bumps[i * grid.len() + k]
        });
        let tv = apply_t(&p, &v, false).unwrap().value;
        let tw = apply_t(&p, &w, false).unwrap().value;
        for i in 0..m {
            for k in 0..grid.len() {
                let (a, b) = (tv.at(i, k), tw.at(i, k));
                prop_assert!(le(a, b), "({}, {}): {} > {}", i, k, a, b);
            }
        }
    }

    #[test]
    fn values_grow_with_horizon_and_fall_with_time(model in arb_model(4), u in arb_utility()) {
        let p = StoppingProblem::new(model.clone(), u).unwrap();
        let grid = TimeGrid::new(4.0, 0.05).unwrap();
        let sol = solve_finite(&p, 5, grid, &SolverOptions::default()).unwrap();
        for (n, v) in sol.values.iter().enumerate() {
            for i in 0..model.len() {
                let row = v.row(i);
                prop_assert!(row.windows(2).all(|w| le(w[1], w[0])), "V_{} not decreasing in t", n);
                for k in 0..grid.len() {
                    // stopping at once stays feasible
                    let stop = p.stop_utility(i, grid.node(k));
                    prop_assert!(le(stop, row[k]));
                }
            }
        }
        for pair in sol.values.windows(2) {
            for i in 0..model.len() {
                for k in 0..grid.len() {
                    let (a, b) = (pair[0].at(i, k), pair[1].at(i, k));
                    prop_assert!(le(a, b));
                }
            }
        }
    }

    #[test]
    fn exp_grid_solution_is_separable(model in arb_model(4), gamma in 0.2..1.5f64) {
        let p = StoppingProblem::new(model.clone(), UtilitySpec::exponential(gamma).unwrap()).unwrap();
        let exact = solve_exp_infinite(&model, gamma, &ExpOptions::default()).unwrap();
        let q_min = model.exit_rates().iter().copied().fold(f64::INFINITY, f64::min);
        let t_max = 40.0 / q_min;
        let opts = SolverOptions::default();
        let start = TimeGrid::with_steps(t_max, 1000).unwrap();
        let sol = settle_horizon(&p, start, &opts, start.dt(), 6).unwrap();
        let grid = *sol.value.grid();
        let t_max = grid.t_max();
        let cg = model.cost() * gamma;
        let dt = grid.dt();
        for i in 0..model.len() {
            for k in 0..grid.len() {
                let t = grid.node(k);
                let h = sol.rule.wait_at(i, k);
                if t <= t_max / 2.0 {
                    let w = sol.value.at(i, k) * (-cg * t).exp();
                    prop_assert!((w - exact.w[i]).abs() <= 10.0 * (dt + opts.tol) * exact.w[i].abs(),
                        "state {} t {}: {} vs {}", i, t, w, exact.w[i]);
                    // a positive wait runs past the window into the truncation zone
                    prop_assert!(h == 0.0 || t + h > t_max / 2.0, "state {} t {}: h = {}", i, t, h);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn house_values_are_sandwiched(alpha in prop::collection::vec(0.3..2.0f64, 3..=5), c in 0.1..0.5f64) {
        let h = build_house_model(&alpha, c).unwrap();
        let p = h.problem(UtilitySpec::logarithmic(0.0).unwrap()).unwrap();
        let t_max = alpha.len() as f64 / c;
        let grid = TimeGrid::with_steps(t_max, (t_max / 0.0125).ceil() as usize).unwrap();
        let sol = solve_infinite(&p, grid, &SolverOptions::default()).unwrap();
        // Offer order can genuinely flip near the domain wall of the worst
        // offer when intensities differ, so only the bounds are asserted here.
        let violations = match check_offer_monotonicity(&p, &sol.value, &sol.rule) {
            Ok(_) => Vec::new(),
            Err(HouseError::MonotonicityViolation(r)) => r.violations,
            Err(e) => panic!("{e}"),
        };
        for v in violations {
            prop_assert!(matches!(v, HouseViolation::Order { .. }), "{:?}", v);
        }
    }
}

#[test]
fn hitting_rule_matches_stop_set_policy() {
    let model = CtmcModel::from_generator(vec![vec![-1.0, 1.0], vec![2.0, -2.0]], vec![0.0, 2.0], 1.0).unwrap();
    let sol = solve_exp_infinite(&model, 0.5, &ExpOptions::default()).unwrap();
    let hit = riskstop::simulator::HittingRule(sol.stop_set.clone());
    for i in 0..2 {
        assert_eq!(StoppingPolicy::wait(&hit, i, 1.0), sol.wait(i));
    }
}
