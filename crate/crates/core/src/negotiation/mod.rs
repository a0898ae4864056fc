//! Bounded cobweb negotiation between one price-setting agent and several
//! quantity-proposing agents.

mod agent;
mod settlement;
#[cfg(test)]
mod tests;

use std::collections::VecDeque;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispatch::{AgentSpec, Scenario};
use crate::error::{Error, Result};

use agent::{can_deliver, fixed_trade, projection_lp, solve_private, CERTIFY_TOL};
pub use settlement::{settle, AgentSettlement, SettlementReport};

/// Relative slack when comparing a trade's value against no trade.
const PREFERENCE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegotiationConfig {
    /// Step-limit shrink factor γ ∈ (0, 1).
    pub gamma: f64,
    /// Settle tolerance ε (kWh).
    pub epsilon: f64,
    /// Initial step limit δ⁽⁰⁾ (kWh), greater than γε.
    pub delta0: f64,
    pub max_iters: usize,
    pub pi_agent_index: usize,
    /// Keep one record per iteration in the ledger.
    pub keep_history: bool,
}

impl Default for NegotiationConfig {
    fn default() -> Self {
        NegotiationConfig {
            gamma: 0.5,
            epsilon: 1e-3,
            delta0: 0.5,
            max_iters: 5000,
            pi_agent_index: 0,
            keep_history: true,
        }
    }
}

impl NegotiationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::domain(format!("gamma {} must lie in (0, 1)", self.gamma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::domain(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.delta0 > self.gamma * self.epsilon && self.delta0.is_finite()) {
            return Err(Error::domain(format!(
                "initial step limit {} must exceed gamma * epsilon = {}",
                self.delta0,
                self.gamma * self.epsilon
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::domain("max_iters must be at least one"));
        }
        Ok(())
    }
}

/// Result of projecting requested quantities onto the π-agent's feasible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// One sequence per negotiating agent, in the order requested.
    pub q_prime: Vec<Vec<f64>>,
    pub beta: f64,
}

fn column_sums(rows: &[Vec<f64>], horizon: usize) -> Vec<f64> {
    (0..horizon).map(|t| rows.iter().map(|r| r[t]).sum()).collect()
}

fn blend(beta: f64, known: &[Vec<f64>], requested: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if beta == 0.0 {
        return requested.to_vec();
    }
    if beta == 1.0 {
        return known.to_vec();
    }
    known
        .iter()
        .zip(requested)
        .map(|(h, q)| h.iter().zip(q).map(|(h, q)| beta * h + (1.0 - beta) * q).collect())
        .collect()
}

/// Moves the requests `q` toward the known-feasible `q_hat` just far enough for
/// the π-agent to deliver them on top of the already settled quantities.
pub fn pi_project(pi_agent: &AgentSpec, q: &[Vec<f64>], q_hat: &[Vec<f64>], settled: &[f64]) -> Result<Projection> {
    let horizon = settled.len();
    if q.len() != q_hat.len() || q.iter().chain(q_hat).any(|r| r.len() != horizon) {
        return Err(Error::domain(
            "requested and known quantities must have matching shapes",
        ));
    }
    let total = |rows: &[Vec<f64>]| -> Vec<f64> {
        column_sums(rows, horizon)
            .iter()
            .zip(settled)
            .map(|(a, b)| a + b)
            .collect()
    };
    if can_deliver(pi_agent, &total(q), CERTIFY_TOL) {
        return Ok(Projection {
            q_prime: q.to_vec(),
            beta: 0.0,
        });
    }
    let deliverable = |beta: f64| can_deliver(pi_agent, &total(&blend(beta, q_hat, q)), CERTIFY_TOL);
    if !deliverable(1.0) {
        return Err(Error::Internal(format!(
            "known-feasible quantities are not deliverable by agent {}",
            pi_agent.id
        )));
    }
    let lp = projection_lp(
        pi_agent,
        &column_sums(q, horizon),
        &column_sums(q_hat, horizon),
        settled,
    )?;
    let beta = match lp {
        // Step toward q̂ until the blend is certified deliverable.
        Some(mut beta) => {
            let mut bump = 1e-12;
            while !deliverable(beta) {
                beta = (beta + bump).min(1.0);
                bump *= 4.0;
            }
            beta
        }
        None => {
            log::debug!("projection LP did not solve; bisecting on deliverability");
            let (mut lo, mut hi) = (0.0, 1.0);
            while hi - lo > 1e-13 {
                let mid = 0.5 * (lo + hi);
                if deliverable(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        }
    };
    Ok(Projection {
        q_prime: blend(beta, q_hat, q),
        beta,
    })
}

/// The π-agent's price offer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceOffer {
    /// Marginal utility at the π-agent's optimal consumption.
    pub price: Vec<f64>,
    /// Whether the offer is at least as good for the π-agent as not trading.
    pub alpha: bool,
    /// Periods where the π-agent consumes nothing and its marginal utility
    /// understates the shadow price of energy.
    pub degenerate_periods: Vec<usize>,
    /// Consumption utility plus revenue from the offered quantities.
    pub value: f64,
}

fn prefers(value: f64, baseline: f64) -> bool {
    value >= baseline - PREFERENCE_SLACK * baseline.abs().max(1.0)
}

fn price_offer(pi_agent: &AgentSpec, q_prime: &[Vec<f64>], settled: &[f64], baseline: f64) -> Result<PriceOffer> {
    let horizon = settled.len();
    let offered = column_sums(q_prime, horizon);
    let received: Vec<f64> = offered.iter().zip(settled).map(|(a, b)| -(a + b)).collect();
    let opt = fixed_trade(pi_agent, &vec![0.0; horizon], &received)?;
    let price: Vec<f64> = (0..horizon)
        .map(|t| pi_agent.utility[t].marginal_unchecked(opt.demand[t]))
        .collect();
    let degenerate_periods = (0..horizon)
        .filter(|&t| opt.demand[t] <= 1e-9 && opt.demand_duals[t] > 1e-9)
        .collect();
    let value = opt.value + price.iter().zip(&offered).map(|(p, q)| p * q).sum::<f64>();
    Ok(PriceOffer {
        alpha: prefers(value, baseline),
        price,
        degenerate_periods,
        value,
    })
}

/// Value to the π-agent of delivering only the settled quantities; −∞ when
/// the settled subset alone is not deliverable, which happens once a buyer has
/// exited while the seller offsetting it is still negotiating.
fn pi_baseline(pi_agent: &AgentSpec, settled: &[f64]) -> Result<f64> {
    if !can_deliver(pi_agent, settled, CERTIFY_TOL) {
        return Ok(f64::NEG_INFINITY);
    }
    let received: Vec<f64> = settled.iter().map(|s| -s).collect();
    Ok(fixed_trade(pi_agent, &vec![0.0; settled.len()], &received)?.value)
}

/// The π-agent's revenue after the given agents settle at `price`, or `None`
/// when that settlement would be undeliverable or leave the π-agent below its
/// no-trade value.
fn exit_keeps_pi_whole(
    pi_agent: &AgentSpec,
    settled: &[f64],
    exiting: &[Vec<f64>],
    price: &[f64],
    revenue: f64,
    no_trade: f64,
) -> Result<Option<f64>> {
    let horizon = settled.len();
    let after: Vec<f64> = column_sums(exiting, horizon)
        .iter()
        .zip(settled)
        .map(|(a, b)| a + b)
        .collect();
    if !can_deliver(pi_agent, &after, CERTIFY_TOL) {
        return Ok(None);
    }
    let received: Vec<f64> = after.iter().map(|s| -s).collect();
    let utility = fixed_trade(pi_agent, &vec![0.0; horizon], &received)?.value;
    let revenue = revenue
        + exiting
            .iter()
            .flat_map(|q| q.iter().zip(price).map(|(q, p)| p * q))
            .sum::<f64>();
    Ok(prefers(utility + revenue, no_trade).then_some(revenue))
}

/// Prices the projected quantities at the π-agent's marginal utility.
pub fn pi_price(pi_agent: &AgentSpec, q_prime: &[Vec<f64>], settled: &[f64]) -> Result<PriceOffer> {
    let baseline = pi_baseline(pi_agent, settled)?;
    price_offer(pi_agent, q_prime, settled, baseline)
}

/// A q-agent's reply to a price and offered quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QResponse {
    pub q: Vec<f64>,
    /// Whether trading the offered quantity at the price beats not trading.
    pub alpha: bool,
    /// Whether the reply is within γε of the offer in every period.
    pub eta: bool,
}

/// Value of the agent's best schedule without trading.
pub fn no_trade_value(agent: &AgentSpec, horizon: usize) -> Result<f64> {
    Ok(fixed_trade(agent, &vec![0.0; horizon], &vec![0.0; horizon])?.value)
}

fn respond(
    agent: &AgentSpec,
    price: &[f64],
    q_prime: &[f64],
    delta: &[f64],
    cfg: &NegotiationConfig,
    baseline: f64,
) -> Result<QResponse> {
    if delta.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::domain(format!(
            "agent {}: step limits must be positive",
            agent.id
        )));
    }
    let bounds: Vec<(f64, f64)> = q_prime.iter().zip(delta).map(|(q, d)| (q - d, q + d)).collect();
    let best = solve_private(agent, price, &bounds).map_err(|e| Error::Internal(format!("agent {}: {e}", agent.id)))?;
    let q: Vec<f64> = best
        .q
        .iter()
        .zip(&bounds)
        .map(|(x, (lo, hi))| x.clamp(*lo, *hi))
        .collect();
    let at_offer =
        fixed_trade(agent, price, q_prime).map_err(|e| Error::Internal(format!("agent {}: {e}", agent.id)))?;
    let band = cfg.gamma * cfg.epsilon;
    Ok(QResponse {
        eta: q.iter().zip(q_prime).all(|(a, b)| (a - b).abs() <= band),
        alpha: prefers(at_offer.value, baseline),
        q,
    })
}

/// Step-limited best response of a q-agent.
pub fn q_respond(
    agent: &AgentSpec,
    price: &[f64],
    q_prime: &[f64],
    delta: &[f64],
    cfg: &NegotiationConfig,
) -> Result<QResponse> {
    let baseline = no_trade_value(agent, price.len())?;
    respond(agent, price, q_prime, delta, cfg, baseline)
}

/// Closed-form step-limited response for one period without storage.
pub fn closed_form_response(agent: &AgentSpec, price: f64, q_prime: f64, delta: f64) -> Result<f64> {
    if agent.utility.len() != 1 || agent.solar.len() != 1 || agent.battery.is_some() {
        return Err(Error::domain("closed form needs one period and no battery"));
    }
    if !(price > 0.0) {
        return Err(Error::domain(format!("price {price} must be positive")));
    }
    let u = &agent.utility[0];
    let cap = agent.solar[0];
    let ceiling = u.marginal_unchecked(0.0);
    let unconstrained = u.inverse_demand(price.min(ceiling))? - cap;
    Ok(unconstrained.clamp(q_prime - delta, q_prime + delta))
}

/// Oscillation flag per period: not strictly monotone over three proposals.
pub fn update_oscillation(q_next: &[f64], q_curr: &[f64], q_prev: &[f64]) -> Vec<bool> {
    q_next
        .iter()
        .zip(q_curr)
        .zip(q_prev)
        .map(|((&a, &b), &c)| !((a > b && b > c) || (a < b && b < c)))
        .collect()
}

/// Shrinks the step limit by γ where oscillating, unless the agent is satisfied.
/// Stays at or above the smallest normal float, which already pins `q`.
pub fn update_delta(delta: &[f64], oscillating: &[bool], eta: bool, gamma: f64) -> Vec<f64> {
    if eta {
        return delta.to_vec();
    }
    delta
        .iter()
        .zip(oscillating)
        .map(|(&d, &o)| if o { (gamma * d).max(f64::MIN_POSITIVE) } else { d })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettlementKind {
    /// Agent exited the negotiation.
    Negotiated,
    /// Still negotiating at the iteration limit; no trade.
    NoTrade,
    /// Still negotiating at the iteration limit; held at the last jointly accepted offer.
    LastAccepted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettledTrade {
    pub agent: usize,
    pub agent_id: String,
    /// Iteration of exit; the iteration limit for fallback settlements.
    pub iteration: usize,
    pub price: Vec<f64>,
    pub quantity: Vec<f64>,
    pub kind: SettlementKind,
}

/// Per-agent negotiation state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAgentState {
    pub agent: usize,
    pub delta: Vec<f64>,
    /// Up to three most recent proposals, oldest first.
    pub q_hist: VecDeque<Vec<f64>>,
    pub alpha: bool,
    pub eta: bool,
    pub exited: bool,
    pub settled_trade: Option<SettledTrade>,
    /// Cumulative count of oscillating periods.
    pub osc_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Indices of the agents still negotiating, in the order of the vectors below.
    pub negotiating: Vec<usize>,
    pub q: Vec<Vec<f64>>,
    pub q_prime: Vec<Vec<f64>>,
    pub beta: f64,
    pub price: Vec<f64>,
    pub alpha_pi: bool,
    pub alpha: Vec<bool>,
    pub eta: Vec<bool>,
    /// Step limits used in this iteration.
    pub delta: Vec<Vec<f64>>,
    /// Replies, which become the next requests.
    pub response: Vec<Vec<f64>>,
    pub oscillation: Vec<Vec<bool>>,
    pub degenerate_price: bool,
    /// Whether every participant preferred the offer, updating the known-feasible point.
    pub accepted: bool,
    /// Whether the π-agent blocked the satisfied agents from exiting.
    pub exit_vetoed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AllExited,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeLedger {
    pub pi_agent: usize,
    pub agent_ids: Vec<String>,
    pub records: Vec<IterationRecord>,
    /// One entry per q-agent, in agent order.
    pub settled: Vec<SettledTrade>,
    pub states: Vec<QAgentState>,
    pub iterations: usize,
    pub termination: Termination,
    /// Iterations in which the π-agent's price was flagged degenerate.
    pub degenerate_price_iterations: usize,
    /// Iterations in which the π-agent blocked an exit.
    pub exit_vetoes: usize,
}

#[derive(Serialize)]
struct LedgerRow<'a> {
    iter: usize,
    agent_id: &'a str,
    t: usize,
    q: f64,
    q_prime: f64,
    beta: f64,
    pi: f64,
    alpha: bool,
    eta: bool,
    delta: f64,
}

impl TradeLedger {
    pub fn converged(&self) -> bool {
        self.termination == Termination::AllExited
    }

    /// One CSV row per iteration, negotiating agent and period.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            for (j, &k) in r.negotiating.iter().enumerate() {
                for t in 0..r.price.len() {
                    w.serialize(LedgerRow {
                        iter: r.iteration,
                        agent_id: &self.agent_ids[k],
                        t,
                        q: r.q[j][t],
                        q_prime: r.q_prime[j][t],
                        beta: r.beta,
                        pi: r.price[t],
                        alpha: r.alpha[j],
                        eta: r.eta[j],
                        delta: r.delta[j][t],
                    })?;
                }
            }
        }
        w.flush().map_err(|e| Error::Internal(format!("writing ledger: {e}")))?;
        Ok(())
    }

    /// Settled trades as pretty JSON.
    pub fn trades_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.settled)?)
    }
}

/// Runs the negotiation to completion or the iteration limit.
pub fn run_negotiation(sc: &Scenario, cfg: &NegotiationConfig) -> Result<TradeLedger> {
    sc.validate()?;
    cfg.validate()?;
    let horizon = sc.horizon;
    let v = cfg.pi_agent_index;
    let pi_agent = sc
        .agents
        .get(v)
        .ok_or_else(|| Error::Config(format!("pi_agent_index {v} out of range")))?;
    let zeros = vec![0.0; horizon];

    let mut states: Vec<QAgentState> = (0..sc.agents.len())
        .filter(|&k| k != v)
        .map(|k| QAgentState {
            agent: k,
            delta: vec![cfg.delta0; horizon],
            q_hist: VecDeque::from([zeros.clone()]),
            alpha: false,
            eta: false,
            exited: false,
            settled_trade: None,
            osc_count: 0,
        })
        .collect();
    let baselines: Vec<f64> = states
        .par_iter()
        .map(|s| no_trade_value(&sc.agents[s.agent], horizon))
        .collect::<Result<_>>()?;
    let mut q_hat = vec![zeros.clone(); states.len()];
    let mut settled = zeros.clone();
    let mut pi_base = pi_baseline(pi_agent, &settled)?;
    let mut last_accepted: Option<Vec<f64>> = None;
    let pi_no_trade = no_trade_value(pi_agent, horizon)?;
    let mut pi_revenue = 0.0;
    let mut vetoes = 0;
    let mut records = Vec::new();
    let mut degenerate = 0;
    let mut iteration = 1;

    while states.iter().any(|s| !s.exited) && iteration <= cfg.max_iters {
        let active: Vec<usize> = (0..states.len()).filter(|&j| !states[j].exited).collect();
        let mut exit_vetoed = false;
        let requested: Vec<Vec<f64>> = active
            .iter()
            .map(|&j| states[j].q_hist.back().expect("history is never empty").clone())
            .collect();
        let known: Vec<Vec<f64>> = active.iter().map(|&j| q_hat[j].clone()).collect();
        let proj = pi_project(pi_agent, &requested, &known, &settled)?;
        let offer = price_offer(pi_agent, &proj.q_prime, &settled, pi_base)?;
        if !offer.degenerate_periods.is_empty() {
            degenerate += 1;
        }
        let replies: Vec<QResponse> = active
            .par_iter()
            .enumerate()
            .map(|(n, &j)| {
                let s = &states[j];
                respond(
                    &sc.agents[s.agent],
                    &offer.price,
                    &proj.q_prime[n],
                    &s.delta,
                    cfg,
                    baselines[j],
                )
            })
            .collect::<Result<_>>()?;

        let delta_used: Vec<Vec<f64>> = active.iter().map(|&j| states[j].delta.clone()).collect();
        let mut oscillation = Vec::with_capacity(active.len());
        for (n, &j) in active.iter().enumerate() {
            let s = &mut states[j];
            let reply = &replies[n];
            let o = if iteration <= 2 {
                vec![true; horizon]
            } else {
                let len = s.q_hist.len();
                update_oscillation(&reply.q, &s.q_hist[len - 1], &s.q_hist[len - 2])
            };
            s.osc_count += o.iter().filter(|&&x| x).count();
            s.delta = update_delta(&s.delta, &o, reply.eta, cfg.gamma);
            s.alpha = reply.alpha;
            s.eta = reply.eta;
            s.q_hist.push_back(reply.q.clone());
            if s.q_hist.len() > 3 {
                s.q_hist.pop_front();
            }
            oscillation.push(o);
        }

        let accepted = offer.alpha && replies.iter().all(|r| r.alpha);
        if accepted {
            for (n, &j) in active.iter().enumerate() {
                q_hat[j] = proj.q_prime[n].clone();
            }
            last_accepted = Some(offer.price.clone());
            let leaving: Vec<usize> = (0..active.len()).filter(|&n| replies[n].eta).collect();
            let mut any_exit = false;
            if !leaving.is_empty() {
                let exiting: Vec<Vec<f64>> = leaving.iter().map(|&n| proj.q_prime[n].clone()).collect();
                let gain = exit_keeps_pi_whole(pi_agent, &settled, &exiting, &offer.price, pi_revenue, pi_no_trade)?;
                match gain {
                    Some(revenue) => pi_revenue = revenue,
                    None => {
                        exit_vetoed = true;
                        vetoes += 1;
                    }
                }
                any_exit = gain.is_some();
            }
            for &n in leaving.iter().filter(|_| any_exit) {
                let j = active[n];
                let s = &mut states[j];
                s.exited = true;
                s.settled_trade = Some(SettledTrade {
                    agent: s.agent,
                    agent_id: sc.agents[s.agent].id.clone(),
                    iteration,
                    price: offer.price.clone(),
                    quantity: proj.q_prime[n].clone(),
                    kind: SettlementKind::Negotiated,
                });
                for t in 0..horizon {
                    settled[t] += proj.q_prime[n][t];
                }
            }
            if any_exit {
                pi_base = pi_baseline(pi_agent, &settled)?;
            }
        }
        log::debug!(
            "iteration {iteration}: beta {:.3e}, accepted {accepted}, negotiating {}",
            proj.beta,
            states.iter().filter(|s| !s.exited).count()
        );
        if cfg.keep_history {
            records.push(IterationRecord {
                iteration,
                negotiating: active.iter().map(|&j| states[j].agent).collect(),
                q: requested,
                q_prime: proj.q_prime,
                beta: proj.beta,
                price: offer.price,
                alpha_pi: offer.alpha,
                alpha: replies.iter().map(|r| r.alpha).collect(),
                eta: replies.iter().map(|r| r.eta).collect(),
                delta: delta_used,
                response: replies.into_iter().map(|r| r.q).collect(),
                oscillation,
                degenerate_price: !offer.degenerate_periods.is_empty(),
                accepted,
                exit_vetoed,
            });
        }
        iteration += 1;
    }

    let termination = if states.iter().all(|s| s.exited) {
        Termination::AllExited
    } else {
        Termination::MaxIterations
    };
    if termination == Termination::MaxIterations {
        fallback_settlement(
            sc,
            pi_agent,
            &mut states,
            &q_hat,
            &settled,
            last_accepted,
            iteration - 1,
        );
    }
    Ok(TradeLedger {
        pi_agent: v,
        agent_ids: sc.agents.iter().map(|a| a.id.clone()).collect(),
        records,
        settled: states.iter().filter_map(|s| s.settled_trade.clone()).collect(),
        states,
        iterations: iteration - 1,
        termination,
        degenerate_price_iterations: degenerate,
        exit_vetoes: vetoes,
    })
}

/// Agents still negotiating at the limit trade nothing if the π-agent can still
/// deliver the settled total; otherwise they keep the last jointly accepted offer.
fn fallback_settlement(
    sc: &Scenario,
    pi_agent: &AgentSpec,
    states: &mut [QAgentState],
    q_hat: &[Vec<f64>],
    settled: &[f64],
    last_accepted: Option<Vec<f64>>,
    iteration: usize,
) {
    let horizon = settled.len();
    let hold = match &last_accepted {
        Some(_) => !can_deliver(pi_agent, settled, CERTIFY_TOL),
        None => false,
    };
    for (j, s) in states.iter_mut().enumerate() {
        if s.exited {
            continue;
        }
        let (price, quantity, kind) = match (&last_accepted, hold) {
            (Some(p), true) => (p.clone(), q_hat[j].clone(), SettlementKind::LastAccepted),
            _ => (vec![0.0; horizon], vec![0.0; horizon], SettlementKind::NoTrade),
        };
        s.settled_trade = Some(SettledTrade {
            agent: s.agent,
            agent_id: sc.agents[s.agent].id.clone(),
            iteration,
            price,
            quantity,
            kind,
        });
    }
}
