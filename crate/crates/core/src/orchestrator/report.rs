use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::PriceTable;
use super::state::RunState;
use crate::error::{Error, Result};
use crate::eval::TranscriptRecord;
use crate::registry::rank_order;

/// Markdown leaderboard in ranking order.
pub fn leaderboard(state: &RunState) -> Result<String> {
    if state.iterations.is_empty() {
        return Err(Error::InvalidState("no completed iteration".into()));
    }
    let mut agents: Vec<_> = state.registry.agents.iter().collect();
    agents.sort_by(|a, b| rank_order(&a.record, &b.record));
    let mut out = String::from("# Leaderboard\n\n");
    let _ = writeln!(out, "After iteration {}.\n", state.completed());
    out.push_str("| Rank | Agent | Rating | Tests | Wins | Created | Parents |\n");
    out.push_str("|---:|---|---:|---:|---:|---:|---|\n");
    for (i, a) in agents.iter().enumerate() {
        let parents = if a.lineage.is_empty() { "-".to_string() } else { a.lineage.join(", ") };
        let _ = writeln!(
            out,
            "| {} | {} | {:.2} | {} | {} | {} | {} |",
            i + 1,
            a.record.agent_id,
            a.record.rating.value,
            a.record.tests,
            a.record.iteration_wins,
            a.iteration_created,
            parents
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
}

impl Usage {
    fn add(&mut self, prompt: u64, completion: u64, prices: &PriceTable) {
        self.prompt_tokens += prompt;
        self.completion_tokens += completion;
        self.cost_usd = (self.prompt_tokens as f64 * prices.prompt_per_million
            + self.completion_tokens as f64 * prices.completion_per_million)
            / 1e6;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_iteration: BTreeMap<u32, Usage>,
    pub per_agent: BTreeMap<String, Usage>,
    pub total: Usage,
}

/// Sums the estimated prompt and completion tokens of every generation call
/// and prices them.
pub fn token_cost_accounting(transcripts: &[(u32, Vec<TranscriptRecord>)], prices: &PriceTable) -> CostReport {
    let mut report = CostReport::default();
    for (iteration, records) in transcripts {
        let it = report.per_iteration.entry(*iteration).or_default();
        for r in records {
            let p = r.transcript.prompt_tokens() as u64;
            let c = r.transcript.completion_tokens() as u64;
            it.add(p, c, prices);
            report.per_agent.entry(r.agent_id.clone()).or_default().add(p, c, prices);
            report.total.add(p, c, prices);
        }
    }
    report
}
