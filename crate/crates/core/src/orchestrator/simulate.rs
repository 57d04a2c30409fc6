//! Synthetic agents with fixed per-database accuracies, driven through the
//! real scheduler, registry and rating code.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::elo::decompose_and_update;
use crate::error::{Error, Result};
use crate::registry::{agent_id, AgentPackage, ExecutionMode, Registry};
use crate::scheduler::{
    choose_mode, determine_winners, iteration_rng, sample_iteration_tasks, select_competitors, Mode, QuestionItem,
    QuestionPool, Stream, DEFAULT_LATE_STAGE_START, QUESTIONS_PER_DATABASE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAgent {
    pub id: String,
    /// Probability of answering a question on each database correctly.
    #[serde(default)]
    pub latent: BTreeMap<String, f64>,
    /// Used for databases missing from `latent`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<f64>,
}

impl SyntheticAgent {
    pub fn uniform(id: &str, p: f64) -> Self {
        Self {
            id: id.to_string(),
            latent: BTreeMap::new(),
            global: Some(p),
        }
    }

    pub fn per_database(id: &str, latent: &[(&str, f64)]) -> Self {
        Self {
            id: id.to_string(),
            latent: latent.iter().map(|(db, p)| (db.to_string(), *p)).collect(),
            global: None,
        }
    }

    pub fn probability(&self, db: &str) -> Option<f64> {
        self.latent.get(db).copied().or(self.global)
    }

    /// Mean probability over `databases`.
    pub fn strength(&self, databases: &[String]) -> f64 {
        let sum: f64 = databases.iter().map(|db| self.probability(db).unwrap_or(0.0)).sum();
        sum / databases.len().max(1) as f64
    }

    fn validate(&self, databases: &[String]) -> Result<()> {
        let probs = self.latent.values().chain(self.global.iter());
        for p in probs {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Validation(format!("{}: probability {p} outside [0, 1]", self.id)));
            }
        }
        for db in databases {
            if self.probability(db).is_none() {
                return Err(Error::Validation(format!("{} has no probability for {db}", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum SyntheticEvolution {
    /// Evolve iterations run as `none`.
    Off,
    /// Per database, the best parent probability plus `delta`, capped.
    MaxParentPlusDelta { delta: f64, cap: f64 },
}

impl Default for SyntheticEvolution {
    fn default() -> Self {
        SyntheticEvolution::MaxParentPlusDelta { delta: 0.02, cap: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub iterations: u32,
    pub seed: u64,
    pub databases: Vec<String>,
    pub questions_per_database: usize,
    pub late_stage_start: u32,
    pub evolution: SyntheticEvolution,
}

impl SimulationConfig {
    pub fn new(iterations: u32, seed: u64, databases: usize) -> Self {
        Self {
            iterations,
            seed,
            databases: (1..=databases).map(|i| format!("db{i}")).collect(),
            questions_per_database: QUESTIONS_PER_DATABASE,
            late_stage_start: DEFAULT_LATE_STAGE_START,
            evolution: SyntheticEvolution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub final_ratings: BTreeMap<String, f64>,
    /// Ratings of every registered agent after each iteration.
    pub trajectories: Vec<BTreeMap<String, f64>>,
    pub accuracies: Vec<Vec<(String, f64)>>,
    pub modes: Vec<Mode>,
    /// Rank correlation between mean latent probability and final rating.
    pub kendall_tau: f64,
    pub population: Vec<SyntheticAgent>,
}

impl SimulationResult {
    /// Agent ids by final rating, best first.
    pub fn rating_order(&self) -> Vec<String> {
        let mut ids: Vec<(&String, f64)> = self.final_ratings.iter().map(|(k, v)| (k, *v)).collect();
        ids.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ids.into_iter().map(|(k, _)| k.clone()).collect()
    }

    /// Largest rating spread among `ids` over the last `window` iterations.
    pub fn max_spread(&self, ids: &[&str], window: usize) -> f64 {
        let start = self.trajectories.len().saturating_sub(window);
        self.trajectories[start..]
            .iter()
            .map(|snap| {
                let vals: Vec<f64> = ids.iter().filter_map(|id| snap.get(*id).copied()).collect();
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}

/// Tau-a over paired observations; tied pairs count as neither.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let s = (x[i] - x[j]).signum() * (y[i] - y[j]).signum();
            if (x[i] - x[j]) != 0.0 && (y[i] - y[j]) != 0.0 {
                score += s as i64;
            }
        }
    }
    score as f64 / (n * (n - 1) / 2) as f64
}

fn dummy_package(id: &str, iteration: u32, lineage: Vec<String>) -> AgentPackage {
    AgentPackage {
        id: id.to_string(),
        name: id.to_string(),
        description: "synthetic".into(),
        iteration_created: iteration,
        root_dir: PathBuf::new(),
        execution_mode: ExecutionMode::FallbackNaive,
        tool_command: String::new(),
        tool_output_file: String::new(),
        eval_instructions: String::new(),
        lineage,
        metadata: IndexMap::new(),
        body: String::new(),
    }
}

fn synthetic_pool(config: &SimulationConfig) -> QuestionPool {
    let mut pool = QuestionPool {
        databases: BTreeMap::new(),
        questions: BTreeMap::new(),
    };
    for db in &config.databases {
        pool.databases.insert(db.clone(), PathBuf::new());
        let qs = (0..config.questions_per_database as u64)
            .map(|i| QuestionItem {
                question_id: i,
                db_id: db.clone(),
                question: format!("q{i}"),
                evidence: String::new(),
                gold_sql: String::new(),
                difficulty: None,
            })
            .collect();
        pool.questions.insert(db.clone(), qs);
    }
    pool
}

/// Runs the selection and rating loop with Bernoulli outcomes in place of
/// generated SQL.
pub fn simulate(config: &SimulationConfig, population: &[SyntheticAgent]) -> Result<SimulationResult> {
    if population.len() < 2 {
        return Err(Error::Validation("simulation needs at least two agents".into()));
    }
    if config.iterations < 1 || config.late_stage_start < 2 {
        return Err(Error::Validation("iterations ≥ 1 and late_stage_start ≥ 2 required".into()));
    }
    if config.databases.is_empty() || config.questions_per_database == 0 {
        return Err(Error::Validation("simulation needs databases and questions".into()));
    }
    if let SyntheticEvolution::MaxParentPlusDelta { delta, cap } = config.evolution {
        if !(0.0..=1.0).contains(&cap) || !delta.is_finite() {
            return Err(Error::Validation("evolution cap must lie in [0, 1]".into()));
        }
    }
    let mut agents: BTreeMap<String, SyntheticAgent> = BTreeMap::new();
    let mut registry = Registry::new();
    for a in population {
        a.validate(&config.databases)?;
        if agents.insert(a.id.clone(), a.clone()).is_some() {
            return Err(Error::Validation(format!("duplicate agent {}", a.id)));
        }
        registry.register(dummy_package(&a.id, 0, Vec::new()))?;
    }
    let pool = synthetic_pool(config);
    let seed = config.seed;
    let mut result = SimulationResult {
        final_ratings: BTreeMap::new(),
        trajectories: Vec::new(),
        accuracies: Vec::new(),
        modes: Vec::new(),
        kendall_tau: 0.0,
        population: Vec::new(),
    };
    let mut previous_roster: Vec<String> = Vec::new();

    for i in 1..=config.iterations {
        let (databases, questions) = sample_iteration_tasks(&pool, &mut iteration_rng(seed, i, Stream::Sampling))?;
        let mut mode = Mode::None;
        let mut new_agent = None;
        if i > 1 {
            mode = choose_mode(i, config.late_stage_start, &mut iteration_rng(seed, i, Stream::Mode))?;
            if mode == Mode::Evolve {
                match config.evolution {
                    SyntheticEvolution::Off => mode = Mode::None,
                    SyntheticEvolution::MaxParentPlusDelta { delta, cap } => {
                        let id = agent_id("synthetic", i);
                        let latent = config
                            .databases
                            .iter()
                            .map(|db| {
                                let best = previous_roster
                                    .iter()
                                    .filter_map(|p| agents[p].probability(db))
                                    .fold(0.0, f64::max);
                                (db.clone(), (best + delta).clamp(0.0, cap))
                            })
                            .collect();
                        agents.insert(
                            id.clone(),
                            SyntheticAgent {
                                id: id.clone(),
                                latent,
                                global: None,
                            },
                        );
                        registry.register(dummy_package(&id, i, previous_roster.clone()))?;
                        new_agent = Some(id);
                    }
                }
            }
        }
        let competitors = if i == 1 {
            registry.ranked().into_iter().map(|r| r.agent_id.clone()).collect()
        } else {
            select_competitors(mode, &registry, new_agent.as_deref(), &mut iteration_rng(seed, i, Stream::Selection))?
        };

        let mut draws = iteration_rng(seed, i, Stream::Simulation);
        let accuracies: Vec<(String, f64)> = competitors
            .iter()
            .map(|id| {
                let agent = &agents[id];
                let mut correct = 0usize;
                let mut total = 0usize;
                for db in &databases {
                    let p = agent.probability(db).unwrap_or(0.0);
                    for _ in &questions[db] {
                        total += 1;
                        if draws.gen_bool(p) {
                            correct += 1;
                        }
                    }
                }
                (id.clone(), correct as f64 / total as f64)
            })
            .collect();
        decompose_and_update(&mut registry, i, &accuracies)?;
        let winners: BTreeSet<String> = determine_winners(&accuracies);
        registry.record_iteration_outcome(&competitors, &winners)?;

        result
            .trajectories
            .push(registry.records().map(|r| (r.agent_id.clone(), r.rating.value)).collect());
        result.accuracies.push(accuracies);
        result.modes.push(mode);
        previous_roster = competitors;
    }

    result.final_ratings = registry.records().map(|r| (r.agent_id.clone(), r.rating.value)).collect();
    let (strengths, ratings): (Vec<f64>, Vec<f64>) = agents
        .values()
        .map(|a| (a.strength(&config.databases), result.final_ratings[&a.id]))
        .unzip();
    result.kendall_tau = kendall_tau(&strengths, &ratings);
    result.population = agents.into_values().collect();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn off(iterations: u32, seed: u64, dbs: usize) -> SimulationConfig {
        SimulationConfig {
            evolution: SyntheticEvolution::Off,
            ..SimulationConfig::new(iterations, seed, dbs)
        }
    }

    #[test]
    fn strong_beats_weak_in_every_seed() {
        let pop = [SyntheticAgent::uniform("strong", 0.9), SyntheticAgent::uniform("weak", 0.1)];
        for seed in 0..50 {
            let r = simulate(&off(50, seed, 6), &pop).unwrap();
            assert!(r.final_ratings["strong"] > r.final_ratings["weak"], "seed {seed}");
            assert_eq!(r.kendall_tau, 1.0);
        }
    }

    #[test]
    fn equal_latents_have_no_systematic_gap() {
        let pop = [SyntheticAgent::uniform("a", 0.5), SyntheticAgent::uniform("b", 0.5)];
        let gaps: Vec<f64> = (0..40)
            .map(|seed| {
                let r = simulate(&off(60, seed, 6), &pop).unwrap();
                r.final_ratings["a"] - r.final_ratings["b"]
            })
            .collect();
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let t = mean / (var / n).sqrt();
        assert!(t.abs() < 3.0, "t = {t}");
    }

    #[test]
    fn zero_sum_ratings_without_evolution() {
        let pop = [
            SyntheticAgent::uniform("a", 0.7),
            SyntheticAgent::uniform("b", 0.5),
            SyntheticAgent::uniform("c", 0.3),
        ];
        let r = simulate(&off(30, 3, 6), &pop).unwrap();
        let total: f64 = r.final_ratings.values().sum();
        assert!((total - 4500.0).abs() < 1e-6);
        assert!(r.modes.iter().all(|m| *m != Mode::Evolve));
    }

    #[test]
    fn evolution_adds_capped_agents() {
        let pop = [SyntheticAgent::uniform("a", 0.94), SyntheticAgent::uniform("b", 0.5)];
        let r = simulate(&SimulationConfig::new(5, 1, 6), &pop).unwrap();
        assert_eq!(r.final_ratings.len(), 2 + 4);
        for a in &r.population {
            for p in a.latent.values() {
                assert!(*p <= 0.95);
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let pop = [SyntheticAgent::uniform("a", 0.6), SyntheticAgent::uniform("b", 0.4)];
        let cfg = SimulationConfig::new(20, 9, 6);
        assert_eq!(simulate(&cfg, &pop).unwrap(), simulate(&cfg, &pop).unwrap());
    }

    #[test]
    fn invalid_population_is_rejected() {
        let cfg = off(5, 0, 3);
        assert!(simulate(&cfg, &[SyntheticAgent::uniform("a", 0.5)]).is_err());
        let bad = [SyntheticAgent::uniform("a", 1.5), SyntheticAgent::uniform("b", 0.5)];
        assert!(simulate(&cfg, &bad).is_err());
        let partial = [
            SyntheticAgent::per_database("a", &[("db1", 0.5)]),
            SyntheticAgent::uniform("b", 0.5),
        ];
        assert!(simulate(&cfg, &partial).is_err());
    }

    #[test]
    fn tau_extremes() {
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(kendall_tau(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    }
}
