//! Welfare of each agent at the settled trades versus not trading.

use serde::{Deserialize, Serialize};

use crate::dispatch::Scenario;
use crate::error::Result;

use super::agent::{can_deliver, fixed_trade};
use super::{no_trade_value, TradeLedger};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSettlement {
    pub agent_id: String,
    /// Best welfare without any trade ($).
    pub no_trade: f64,
    /// Consumption utility plus net payments at the settled trades ($).
    pub realized: f64,
    /// Consumption utility only ($).
    pub utility: f64,
    /// Net payment received (negative when paying).
    pub payment: f64,
}

impl AgentSettlement {
    pub fn slack(&self) -> f64 {
        self.realized - self.no_trade
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlementReport {
    pub agents: Vec<AgentSettlement>,
    /// Total welfare without trade.
    pub no_trade_welfare: f64,
    /// Total welfare at the settled trades; payments cancel.
    pub welfare: f64,
    /// Whether the π-agent can deliver all settled quantities.
    pub deliverable: bool,
}

impl SettlementReport {
    /// Smallest per-agent gain over not trading.
    pub fn min_slack(&self) -> f64 {
        self.agents
            .iter()
            .map(AgentSettlement::slack)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates every agent's welfare at the ledger's settled trades.
pub fn settle(sc: &Scenario, ledger: &TradeLedger) -> Result<SettlementReport> {
    let horizon = sc.horizon;
    let zeros = vec![0.0; horizon];
    let v = ledger.pi_agent;
    let mut agents: Vec<Option<AgentSettlement>> = vec![None; sc.agents.len()];
    let mut delivered = zeros.clone();
    let mut revenue = 0.0;
    for trade in &ledger.settled {
        let spec = &sc.agents[trade.agent];
        let opt = fixed_trade(spec, &trade.price, &trade.quantity)?;
        let payment: f64 = -trade.price.iter().zip(&trade.quantity).map(|(p, q)| p * q).sum::<f64>();
        revenue -= payment;
        for t in 0..horizon {
            delivered[t] += trade.quantity[t];
        }
        agents[trade.agent] = Some(AgentSettlement {
            agent_id: spec.id.clone(),
            no_trade: no_trade_value(spec, horizon)?,
            realized: opt.value,
            utility: opt.value - payment,
            payment,
        });
    }
    let pi = &sc.agents[v];
    let received: Vec<f64> = delivered.iter().map(|d| -d).collect();
    let deliverable = can_deliver(pi, &delivered, 1e-6);
    let utility = fixed_trade(pi, &zeros, &received)?.value;
    agents[v] = Some(AgentSettlement {
        agent_id: pi.id.clone(),
        no_trade: no_trade_value(pi, horizon)?,
        realized: utility + revenue,
        utility,
        payment: revenue,
    });
    let agents: Vec<AgentSettlement> = agents.into_iter().flatten().collect();
    Ok(SettlementReport {
        no_trade_welfare: agents.iter().map(|a| a.no_trade).sum(),
        welfare: agents.iter().map(|a| a.utility).sum(),
        agents,
        deliverable,
    })
}
