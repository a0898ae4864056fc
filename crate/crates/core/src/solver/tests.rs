use proptest::prelude::*;

use super::*;

fn utility(pi0: f64, d0: f64, r_hat: f64) -> QuasiCpeUtility {
    QuasiCpeUtility::with_default_shift(pi0, d0, r_hat).unwrap()
}

#[test]
fn single_consumer_matches_inverse_demand() {
    let u = utility(0.15, 2.0, -2.0);
    for pi in [0.05, 0.15, 0.4, 3.0] {
        let mut p = ConcaveProgram::new();
        let d = p.add_variable(0.0, f64::INFINITY, pi);
        p.set_concave(d, u);
        let r = solve_concave_program(&p).unwrap();
        assert!(r.is_optimal(), "{r:?}");
        assert!((r.x[0] - u.inverse_demand(pi).unwrap()).abs() < 1e-7, "pi={pi} {r:?}");
        assert!(r.kkt_residual <= OPTIMALITY_TOL);
    }
}

#[test]
fn empty_equality_with_nonzero_rhs_is_infeasible() {
    let mut p = ConcaveProgram::new();
    let x = p.add_variable(0.0, 1.0, 1.0);
    p.add_equality(vec![(x, 0.0)], 1.0);
    assert_eq!(solve_linear_program(&p).unwrap().status, SolveStatus::Infeasible);
}

#[test]
fn conflicting_rows_are_infeasible() {
    let mut p = ConcaveProgram::new();
    let x = p.add_variable(0.0, 10.0, 1.0);
    let y = p.add_variable(0.0, 10.0, 1.0);
    p.add_less_equal(vec![(x, 1.0), (y, 1.0)], -1.0);
    let r = solve_linear_program(&p).unwrap();
    assert_eq!(r.status, SolveStatus::Infeasible, "{r:?}");

    let mut p = ConcaveProgram::new();
    let x = p.add_variable(0.0, 10.0, 0.0);
    let y = p.add_variable(0.0, 10.0, 0.0);
    p.add_equality(vec![(x, 1.0), (y, 1.0)], 5.0);
    p.add_equality(vec![(x, 1.0), (y, 1.0)], 6.0);
    assert_eq!(solve_linear_program(&p).unwrap().status, SolveStatus::Infeasible);
}

#[test]
fn malformed_programs_are_rejected() {
    let mut p = ConcaveProgram::new();
    p.add_variable(0.0, 1.0, 0.0);
    p.add_equality(vec![(3, 1.0)], 0.0);
    assert!(matches!(solve_concave_program(&p), Err(Error::Malformed(_))));

    let mut p = ConcaveProgram::new();
    let d = p.add_variable(f64::NEG_INFINITY, 1.0, 0.0);
    p.set_concave(d, utility(0.1, 1.0, -2.0));
    assert!(matches!(solve_concave_program(&p), Err(Error::Malformed(_))));

    let mut p = ConcaveProgram::new();
    let d = p.add_variable(0.0, 1.0, 0.0);
    p.set_concave(d, utility(0.1, 1.0, -2.0));
    assert!(matches!(solve_linear_program(&p), Err(Error::Malformed(_))));
}

#[test]
fn minimal_beta_with_slack_constraints_is_zero() {
    let mut p = ConcaveProgram::new();
    let b = p.add_variable(0.0, 1.0, 1.0);
    p.add_less_equal(vec![(b, 1.0)], 5.0);
    p.add_greater_equal(vec![(b, 2.0)], -3.0);
    let r = solve_linear_program(&p).unwrap();
    assert!(r.is_optimal(), "{r:?}");
    assert!(r.x[0].abs() < 1e-8);
    assert!((r.bound_duals[0] + 1.0).abs() < 1e-8);
}

#[test]
fn positive_price_sells_at_capacity() {
    let mut p = ConcaveProgram::new();
    let ps = p.add_variable(0.0, 2.5, -0.2);
    let r = solve_linear_program(&p).unwrap();
    assert!((r.x[ps] - 2.5).abs() < 1e-8);
    assert!((r.bound_duals[ps] - 0.2).abs() < 1e-8);
    assert!((r.objective + 0.5).abs() < 1e-8);
}

#[test]
fn fixed_variables_are_eliminated_with_duals() {
    let u = utility(0.2, 1.0, -1.5);
    let mut p = ConcaveProgram::new();
    let d = p.add_variable(0.0, f64::INFINITY, 0.0);
    p.set_concave(d, u);
    let s = p.add_variable(1.3, 1.3, 0.0);
    p.add_equality(vec![(d, 1.0), (s, -1.0)], 0.0);
    let r = solve_concave_program(&p).unwrap();
    assert!(r.is_optimal());
    assert!((r.x[d] - 1.3).abs() < 1e-8);
    let g = u.marginal_utility(1.3).unwrap();
    assert!((r.eq_duals[0] - g).abs() < 1e-7);
    // Stationarity for s: −y + λ_b = 0.
    assert!((r.bound_duals[s] - g).abs() < 1e-7);
    assert!(r.kkt_residual < 1e-7);
}

/// Battery arbitrage over five periods, state of charge written cumulatively.
fn remark_lp(tie: f64) -> ConcaveProgram {
    let price = [1.0, 1.0, 2.0, 3.0, 1.0];
    let mut p = ConcaveProgram::new();
    let vars: Vec<usize> = price.iter().map(|&pi| p.add_variable(-3.0, 3.0, -pi)).collect();
    for &v in &vars {
        p.set_tie_break(v, tie);
    }
    for t in 0..5 {
        let row = vars[..=t].iter().map(|&v| (v, -1.0)).collect();
        p.add_range(row, -5.0, 5.0);
    }
    p
}

#[test]
fn battery_arbitrage_net_cost() {
    let r = solve_linear_program(&remark_lp(0.0)).unwrap();
    assert!(r.is_optimal(), "{r:?}");
    assert!((r.objective + 14.0).abs() < 1e-6);
    assert!(r.duality_gap.abs() < 1e-6);
    let r = solve_concave_program(&remark_lp(CANONICAL_TIE_BREAK)).unwrap();
    assert!(r.is_optimal());
    assert!((r.objective + 14.0).abs() < 1e-6);
}

#[test]
fn solves_are_deterministic() {
    let p = remark_lp(0.0);
    let a = solve_linear_program(&p).unwrap();
    let b = solve_linear_program(&p).unwrap();
    assert_eq!(a, b);
}

/// Two consumers with one shared supply and a lossless battery, solved by
/// exhaustive search over the battery schedule.
#[test]
fn two_period_instance_matches_grid_search() {
    let u1 = utility(0.15, 1.0, -2.0);
    let u2 = utility(0.30, 0.8, -2.5);
    let supply = [1.6, 0.4];
    let (p_max, s_max, s0) = (0.6, 1.0, 0.3);

    let mut p = ConcaveProgram::new();
    let mut batt = Vec::new();
    for t in 0..2 {
        let d1 = p.add_variable(0.0, f64::INFINITY, 0.0);
        let d2 = p.add_variable(0.0, f64::INFINITY, 0.0);
        p.set_concave(d1, u1);
        p.set_concave(d2, u2);
        let b = p.add_variable(-p_max, p_max, 0.0);
        batt.push(b);
        p.add_equality(vec![(d1, 1.0), (d2, 1.0), (b, -1.0)], supply[t]);
    }
    p.add_range(vec![(batt[0], -1.0)], -s0, s_max - s0);
    p.add_range(vec![(batt[0], -1.0), (batt[1], -1.0)], -s0, s_max - s0);
    let r = solve_concave_program(&p).unwrap();
    assert!(r.is_optimal(), "{r:?}");
    let welfare = -r.objective;

    // For fixed battery power the split between consumers equalizes marginal utility.
    let split = |e: f64| -> f64 {
        let (mut lo, mut hi) = (1e-12, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let total = u1.inverse_demand(mid).unwrap() + u2.inverse_demand(mid).unwrap();
            if total > e {
                lo = mid
            } else {
                hi = mid
            }
        }
        let pi = 0.5 * (lo + hi);
        let d1 = u1.inverse_demand(pi).unwrap().min(e);
        u1.utility_value(d1).unwrap() + u2.utility_value(e - d1).unwrap()
    };
    let step = 1e-3;
    let k = (p_max / step).round() as i64;
    let grid: Vec<f64> = (-k..=k).map(|i| i as f64 * step).collect();
    // Welfare separates by period once the battery schedule is fixed.
    let period = |t: usize| -> Vec<f64> {
        grid.iter()
            .map(|b| {
                let e = supply[t] + b;
                if e < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    split(e)
                }
            })
            .collect()
    };
    let (w1, w2) = (period(0), period(1));
    let mut best = f64::NEG_INFINITY;
    for (i, b1) in grid.iter().enumerate() {
        for (j, b2) in grid.iter().enumerate() {
            let s1 = s0 - b1;
            let s2 = s1 - b2;
            if !(-1e-12..=s_max + 1e-12).contains(&s1) || !(-1e-12..=s_max + 1e-12).contains(&s2) {
                continue;
            }
            best = best.max(w1[i] + w2[j]);
        }
    }
    assert!(welfare >= best - 1e-9);
    assert!((welfare - best).abs() < 1e-4, "solver {welfare} grid {best}");
}

/// Water-filling oracle for `min Σ c_j x_j − U_j(x_j)`, `Σ x_j = b`, `0 ≤ x_j ≤ u_j`.
fn water_fill(c: &[f64], utils: &[QuasiCpeUtility], caps: &[f64], b: f64) -> Vec<f64> {
    let alloc = |nu: f64| -> Vec<f64> {
        (0..c.len())
            .map(|j| {
                let price = c[j] + nu;
                if price <= 0.0 {
                    caps[j]
                } else {
                    utils[j].inverse_demand(price).unwrap().min(caps[j])
                }
            })
            .collect()
    };
    let (mut lo, mut hi) = (-1e3, 1e3);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if alloc(mid).iter().sum::<f64>() > b {
            lo = mid
        } else {
            hi = mid
        }
    }
    alloc(0.5 * (lo + hi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resource_allocation_matches_water_filling(
        spec in prop::collection::vec(
            (0.05f64..0.5, 0.2f64..4.0, -3.0f64..-0.3, -0.2f64..0.2, 0.5f64..5.0), 2..6),
        frac in 0.05f64..0.95,
    ) {
        let utils: Vec<_> = spec.iter()
            .filter_map(|s| QuasiCpeUtility::with_default_shift(s.0, s.1, s.2).ok())
            .collect();
        prop_assume!(utils.len() == spec.len());
        let c: Vec<f64> = spec.iter().map(|s| s.3).collect();
        let caps: Vec<f64> = spec.iter().map(|s| s.4).collect();
        let b = frac * caps.iter().sum::<f64>();

        let mut p = ConcaveProgram::new();
        let vars: Vec<usize> = (0..c.len()).map(|j| {
            let v = p.add_variable(0.0, caps[j], c[j]);
            p.set_concave(v, utils[j]);
            v
        }).collect();
        p.add_equality(vars.iter().map(|&v| (v, 1.0)).collect(), b);
        let r = solve_concave_program(&p).unwrap();
        prop_assert!(r.is_optimal(), "{:?}", r);
        prop_assert!(r.duality_gap.abs() < 1e-6);
        let oracle = water_fill(&c, &utils, &caps, b);
        for j in 0..c.len() {
            prop_assert!((r.x[j] - oracle[j]).abs() < 1e-6, "{} vs {}", r.x[j], oracle[j]);
        }
    }

    #[test]
    fn random_box_lps_hit_the_cheapest_corner(
        costs in prop::collection::vec((-2.0f64..2.0, -3.0f64..0.0, 0.1f64..3.0), 1..8),
    ) {
        let mut p = ConcaveProgram::new();
        for &(c, l, w) in &costs {
            p.add_variable(l, l + w, c);
        }
        let r = solve_linear_program(&p).unwrap();
        prop_assert!(r.is_optimal());
        let best: f64 = costs.iter().map(|&(c, l, w)| (c * l).min(c * (l + w))).sum();
        prop_assert!((r.objective - best).abs() < 1e-6);
    }
}
