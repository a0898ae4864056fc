use super::*;
use crate::battery::IdealBattery;
use crate::dispatch::{solve_centralized, BatteryModel};
use crate::utility::QuasiCpeUtility;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn u(pi0: f64, d0: f64, r: f64) -> QuasiCpeUtility {
    QuasiCpeUtility::with_default_shift(pi0, d0, r).unwrap()
}

fn agent(id: &str, utility: Vec<QuasiCpeUtility>, solar: Vec<f64>, battery: Option<BatteryModel>) -> AgentSpec {
    AgentSpec {
        id: id.into(),
        utility,
        solar,
        battery,
    }
}

fn cfg() -> NegotiationConfig {
    NegotiationConfig::default()
}

fn random_pair(rng: &mut ChaCha8Rng) -> Scenario {
    let one = |id: &str, rng: &mut ChaCha8Rng| {
        agent(
            id,
            vec![u(
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.5..3.0),
                rng.gen_range(-3.0..-0.5),
            )],
            vec![rng.gen_range(0.0..4.0)],
            None,
        )
    };
    let v = one("v", rng);
    let k = one("k", rng);
    Scenario {
        horizon: 1,
        dt: 1.0,
        agents: vec![v, k],
    }
}

/// Quantity received by agent `k` in the centralized optimum.
fn central_q(sc: &Scenario, k: usize) -> Vec<f64> {
    let sol = solve_centralized(sc).unwrap();
    let a = &sol.agents[k];
    (0..sc.horizon)
        .map(|t| a.demand[t] - a.solar[t] - a.battery.as_ref().map_or(0.0, |b| b.discharge[t] - b.charge[t]))
        .collect()
}

#[test]
fn oscillation_flags() {
    assert_eq!(update_oscillation(&[3.0], &[2.0], &[1.0]), vec![false]);
    assert_eq!(update_oscillation(&[1.0], &[2.0], &[3.0]), vec![false]);
    assert_eq!(update_oscillation(&[2.0], &[3.0], &[1.0]), vec![true]);
    assert_eq!(update_oscillation(&[2.0], &[2.0], &[2.0]), vec![true]);
}

#[test]
fn step_limit_updates() {
    assert_eq!(update_delta(&[2.0], &[true], false, 0.5), vec![1.0]);
    assert_eq!(update_delta(&[2.0], &[false], false, 0.5), vec![2.0]);
    assert_eq!(update_delta(&[2.0], &[true], true, 0.5), vec![2.0]);
}

#[test]
fn config_validation() {
    assert!(cfg().validate().is_ok());
    let bad = NegotiationConfig { delta0: 1e-4, ..cfg() };
    assert!(bad.validate().is_err());
    assert!(NegotiationConfig { gamma: 1.0, ..cfg() }.validate().is_err());
}

#[test]
fn closed_form_branches() {
    let k = agent("k", vec![u(0.2, 2.0, -2.0)], vec![1.0], None);
    let ut = k.utility[0];
    // Price above the marginal utility of zero consumption: sell all solar.
    let ceiling = ut.marginal_utility(0.0).unwrap();
    assert!((closed_form_response(&k, 2.0 * ceiling, -1.0, 0.5).unwrap() + 1.0).abs() < 1e-12);
    let free = ut.inverse_demand(0.2).unwrap() - 1.0;
    assert!((closed_form_response(&k, 0.2, free, 0.1).unwrap() - free).abs() < 1e-12);
    assert!((closed_form_response(&k, 0.2, free - 0.5, 0.1).unwrap() - (free - 0.4)).abs() < 1e-12);
    assert!((closed_form_response(&k, 0.2, free + 0.5, 0.1).unwrap() - (free + 0.4)).abs() < 1e-12);
    let with_battery = agent(
        "b",
        vec![ut],
        vec![1.0],
        Some(BatteryModel::Ideal(IdealBattery::new(1.0, 1.0, 0.0, 1.0).unwrap())),
    );
    assert!(closed_form_response(&with_battery, 0.2, 0.0, 0.1).is_err());
}

#[test]
fn projection_keeps_feasible_requests() {
    let v = agent("v", vec![u(0.1, 1.0, -2.0); 2], vec![3.0, 1.0], None);
    let q = vec![vec![1.0, 0.5], vec![0.5, -1.0]];
    let hat = vec![vec![0.0; 2]; 2];
    let p = pi_project(&v, &q, &hat, &[0.0, 0.0]).unwrap();
    assert_eq!(p.beta, 0.0);
    assert_eq!(p.q_prime, q);
    // q = q̂ returns β = 0.
    let p = pi_project(&v, &hat, &hat, &[0.0, 0.0]).unwrap();
    assert_eq!(p.beta, 0.0);
}

#[test]
fn projection_matches_grid_scan() {
    // One period, no storage: deliverable iff the total request is at most the solar capacity.
    let v = agent("v", vec![u(0.1, 1.0, -2.0)], vec![2.0], None);
    let q = vec![vec![1.7], vec![1.1]];
    let hat = vec![vec![0.3], vec![-0.4]];
    let p = pi_project(&v, &q, &hat, &[0.1]).unwrap();
    let total = |b: f64| 0.1 + (0..2).map(|j| b * hat[j][0] + (1.0 - b) * q[j][0]).sum::<f64>();
    let grid = (0..=10_000)
        .map(|i| i as f64 * 1e-4)
        .find(|&b| total(b) <= 2.0)
        .unwrap();
    assert!(p.beta > 0.0);
    assert!(p.beta <= grid && grid - p.beta <= 1e-4 + 1e-9, "{} vs {grid}", p.beta);
    let delivered: f64 = 0.1 + p.q_prime.iter().map(|r| r[0]).sum::<f64>();
    assert!(delivered <= 2.0 + 1e-9);
}

#[test]
fn projection_with_storage_is_tight() {
    let b = IdealBattery::new(1.0, 2.0, 1.0, 1.0).unwrap();
    let v = agent(
        "v",
        vec![u(0.1, 1.0, -2.0); 3],
        vec![0.5, 0.0, 2.0],
        Some(BatteryModel::Ideal(b)),
    );
    let q = vec![vec![1.0, 1.5, 1.0]];
    let hat = vec![vec![0.0; 3]];
    let p = pi_project(&v, &q, &hat, &[0.0; 3]).unwrap();
    assert!(p.beta > 0.0 && p.beta < 1.0);
    // The solver finds a schedule at β and none slightly closer to the request.
    let at = |beta: f64| -> Vec<f64> { q[0].iter().map(|x| -(1.0 - beta) * x).collect() };
    assert!(agent::fixed_trade(&v, &[0.0; 3], &at(p.beta)).is_ok());
    assert!(agent::fixed_trade(&v, &[0.0; 3], &at(p.beta - 1e-4)).is_err());
}

#[test]
fn price_without_trade_is_own_marginal_utility() {
    let v = agent("v", vec![u(0.15, 2.0, -2.0)], vec![1.5], None);
    let offer = pi_price(&v, &[vec![0.0]], &[0.0]).unwrap();
    assert!((offer.price[0] - v.utility[0].marginal_utility(1.5).unwrap()).abs() < 1e-9);
    assert!(offer.alpha);
    // Price after selling Q follows the marginal utility of the remainder.
    let offer = pi_price(&v, &[vec![0.4], vec![0.3]], &[0.0]).unwrap();
    assert!((offer.price[0] - v.utility[0].marginal_utility(0.8).unwrap()).abs() < 1e-8);
    // Receiving free energy is strictly better than no trade.
    let offer = pi_price(&v, &[vec![-0.5]], &[0.0]).unwrap();
    let base = no_trade_value(&v, 1).unwrap();
    assert!(offer.alpha && offer.value > base + 1e-6);
}

#[test]
fn degenerate_price_is_flagged() {
    let v = agent("v", vec![u(0.05, 1.0, -2.0)], vec![1.0], None);
    let offer = pi_price(&v, &[vec![1.0]], &[0.0]).unwrap();
    assert_eq!(offer.degenerate_periods, vec![0]);
    assert!((offer.price[0] - v.utility[0].marginal_utility(0.0).unwrap()).abs() < 1e-12);
    let offer = pi_price(&v, &[vec![0.5]], &[0.0]).unwrap();
    assert!(offer.degenerate_periods.is_empty());
}

#[test]
fn fixed_point_reply() {
    let k = agent("k", vec![u(0.2, 1.0, -1.5)], vec![1.0], None);
    let pi = k.utility[0].marginal_utility(1.0).unwrap();
    let r = q_respond(&k, &[pi], &[0.0], &[0.5], &cfg()).unwrap();
    assert!(r.q[0].abs() < 1e-8, "{}", r.q[0]);
    assert!(r.eta && r.alpha);
}

#[test]
fn replies_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let k = agent(
            "k",
            vec![u(
                rng.gen_range(0.05..0.4),
                rng.gen_range(0.5..3.0),
                rng.gen_range(-3.0..-0.5),
            )],
            vec![rng.gen_range(0.0..3.0)],
            None,
        );
        let pi = rng.gen_range(0.02..1.5);
        let qp = rng.gen_range(-k.solar[0]..3.0);
        let delta = rng.gen_range(0.01..2.0);
        let exact = closed_form_response(&k, pi, qp, delta).unwrap();
        let solved = q_respond(&k, &[pi], &[qp], &[delta], &cfg()).unwrap().q[0];
        assert!((exact - solved).abs() < 1e-8, "{exact} vs {solved}");
    }
}

#[test]
fn nothing_to_sell_settles_at_zero() {
    let sc = Scenario {
        horizon: 1,
        dt: 1.0,
        agents: vec![
            agent("v", vec![u(0.1, 1.0, -2.0)], vec![0.0], None),
            agent("k", vec![u(0.3, 2.0, -2.0)], vec![0.0], None),
        ],
    };
    let ledger = run_negotiation(&sc, &cfg()).unwrap();
    assert!(ledger.converged());
    assert!(ledger.settled[0].quantity[0].abs() < 1e-9);
}

/// Checks ledger-level invariants shared by every run.
fn audit(sc: &Scenario, c: &NegotiationConfig, ledger: &TradeLedger) {
    let v = &sc.agents[ledger.pi_agent];
    for w in ledger.records.windows(2) {
        for (j, k) in w[1].negotiating.iter().enumerate() {
            let prev = w[0].negotiating.iter().position(|x| x == k).unwrap();
            for t in 0..sc.horizon {
                assert!(w[1].delta[j][t] <= w[0].delta[prev][t]);
            }
        }
    }
    for s in &ledger.states {
        assert!(s.delta.iter().all(|&d| d > 0.0 && d <= c.delta0));
        if s.exited {
            let trade = s.settled_trade.as_ref().unwrap();
            let rec = &ledger.records[trade.iteration - 1];
            let j = rec.negotiating.iter().position(|&x| x == s.agent).unwrap();
            assert_eq!(rec.q_prime[j], trade.quantity);
            assert_eq!(rec.price, trade.price);
            assert!(rec.accepted && rec.eta[j]);
        }
    }
    let report = settle(sc, ledger).unwrap();
    assert!(report.deliverable);
    assert!(report.min_slack() >= -1e-6, "{report:?}");
    let paid: f64 = report
        .agents
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ledger.pi_agent)
        .map(|(_, a)| a.payment)
        .sum();
    let pi_index = report.agents.iter().position(|a| a.agent_id == v.id).unwrap();
    assert!((paid + report.agents[pi_index].payment).abs() < 1e-9);
}

#[test]
fn two_agent_runs_reach_the_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let c = cfg();
    for case in 0..40 {
        let sc = random_pair(&mut rng);
        let q_star = central_q(&sc, 1)[0];
        let ledger = run_negotiation(&sc, &c).unwrap();
        assert!(ledger.converged(), "case {case}");
        let q = ledger.settled[0].quantity[0];
        assert!((q - q_star).abs() <= c.epsilon, "case {case}: {q} vs {q_star}");
        audit(&sc, &c, &ledger);
    }
}

#[test]
fn boundary_optimum_sells_all_solar() {
    let sc = Scenario {
        horizon: 1,
        dt: 1.0,
        agents: vec![
            agent("v", vec![u(0.05, 1.0, -2.0)], vec![1.0], None),
            agent("k", vec![u(0.5, 5.0, -2.0)], vec![0.0], None),
        ],
    };
    let q_star = central_q(&sc, 1)[0];
    assert!((q_star - 1.0).abs() < 1e-7);
    let ledger = run_negotiation(&sc, &cfg()).unwrap();
    assert!(ledger.converged());
    assert!((ledger.settled[0].quantity[0] - q_star).abs() <= 1e-3);
    assert!(ledger.degenerate_price_iterations > 0);
    audit(&sc, &cfg(), &ledger);
}

#[test]
fn two_agent_traces_obey_the_lemmas() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = cfg();
    for _ in 0..30 {
        let sc = random_pair(&mut rng);
        let q_star = central_q(&sc, 1)[0];
        let cap_v = sc.agents[0].solar[0];
        if q_star >= cap_v - 1e-6 {
            continue;
        }
        let ledger = run_negotiation(&sc, &c).unwrap();
        for r in &ledger.records {
            let (q, qp, next, delta) = (r.q[0][0], r.q_prime[0][0], r.response[0][0], r.delta[0][0]);
            // Movement towards the equilibrium.
            if qp < q_star - 1e-9 {
                assert!(
                    next >= q - 1e-9,
                    "iter {}: {q} -> {next}, q' {qp}, q* {q_star}",
                    r.iteration
                );
            }
            if qp > q_star + 1e-9 {
                assert!(
                    next <= q + 1e-9,
                    "iter {}: {q} -> {next}, q' {qp}, q* {q_star}",
                    r.iteration
                );
            }
            // Bounded distance while oscillating.
            if r.iteration > 2 && r.oscillation[0][0] {
                assert!((qp - q_star).abs() < delta / c.gamma + 1e-9);
            }
        }
    }
}

#[test]
fn multi_agent_run_is_close_to_centralized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let horizon = 6;
    let agents = (0..3)
        .map(|i| {
            let battery = (i == 0).then(|| BatteryModel::Ideal(IdealBattery::new(1.0, 3.0, 1.5, 1.0).unwrap()));
            agent(
                &format!("a{i}"),
                (0..horizon)
                    .map(|_| {
                        u(
                            rng.gen_range(0.1..0.3),
                            rng.gen_range(0.5..2.0),
                            rng.gen_range(-1.5..-0.5),
                        )
                    })
                    .collect(),
                (0..horizon)
                    .map(|t| {
                        if (1..5).contains(&t) {
                            rng.gen_range(0.5..3.0)
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                battery,
            )
        })
        .collect();
    let sc = Scenario {
        horizon,
        dt: 1.0,
        agents,
    };
    let c = cfg();
    let ledger = run_negotiation(&sc, &c).unwrap();
    assert!(ledger.converged());
    audit(&sc, &c, &ledger);
    let central = solve_centralized(&sc).unwrap().welfare;
    let p2p = settle(&sc, &ledger).unwrap().welfare;
    assert!(p2p <= central + 1e-6);
    assert!((central - p2p) / central <= 0.01, "{central} vs {p2p}");
}

#[test]
fn ledger_csv_has_documented_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sc = random_pair(&mut rng);
    let ledger = run_negotiation(&sc, &cfg()).unwrap();
    let mut buf = Vec::new();
    ledger.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("iter,agent_id,t,q,q_prime,beta,pi,alpha,eta,delta\n"));
    assert_eq!(text.lines().count(), 1 + ledger.records.len());
    let trades: Vec<SettledTrade> = serde_json::from_str(&ledger.trades_json().unwrap()).unwrap();
    assert_eq!(trades, ledger.settled);
}

#[test]
fn runs_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sc = random_pair(&mut rng);
    let a = run_negotiation(&sc, &cfg()).unwrap();
    let b = run_negotiation(&sc, &cfg()).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn two_agent_settlement_within_tolerance(seed in any::<u64>(), gamma in 0.1f64..0.9, delta0 in 0.2f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sc = random_pair(&mut rng);
        let c = NegotiationConfig { gamma, delta0, ..cfg() };
        let q_star = central_q(&sc, 1)[0];
        let ledger = run_negotiation(&sc, &c).unwrap();
        prop_assert!(ledger.converged());
        // Two consecutive reversal flags shrink δ by γ², so below γ = 1/2 the
        // exit can land up to (1−γ)/γ·ε away.
        let bound = c.epsilon * ((1.0 - gamma) / gamma).max(1.0);
        prop_assert!((ledger.settled[0].quantity[0] - q_star).abs() <= bound + 1e-7);
    }
}
