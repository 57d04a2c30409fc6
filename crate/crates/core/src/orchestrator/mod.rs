//! The iteration loop with persistence and resume, reports, and the
//! synthetic-agent simulation.

mod config;
mod report;
mod simulate;
mod state;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::analyzer::{agent_analysis, FallbackReason};
use crate::elo::decompose_and_update;
use crate::error::{Error, IoContext, Result};
use crate::eval::{
    evaluate_agent, write_error_analysis, AgentEvaluation, EvalEnv, GoldCache, QuestionKey, SqliteExecutor,
    TranscriptRecord,
};
use crate::evolution::{build_context, deep_focus, evolve_agent, EvolutionBackend, FocusIteration};
use crate::generation::GenerationBackend;
use crate::registry::{load_package, AgentPackage, Registry, TOOL_OUTPUT_DIR};
use crate::scheduler::{
    choose_mode, determine_winners, iteration_rng, iteration_seed, load_question_pool, sample_iteration_tasks,
    select_competitors, IterationPlan, Mode, QuestionItem, QuestionPool, Stream,
};
use crate::toy::write_baseline_package;

pub use config::{evolution_backend, generation_backend, PriceTable, RunConfig};
pub use report::{leaderboard, token_cost_accounting, CostReport, Usage};
pub use simulate::{
    kendall_tau, simulate, SimulationConfig, SimulationResult, SyntheticAgent, SyntheticEvolution,
};
pub use state::{
    read_json, replay_ratings, write_atomic, write_json, EvolutionRecord, IterationRecord, IterationSeeds,
    RunState, STATE_FILE, STATE_SCHEMA_VERSION,
};

pub const AGENTS_DIR: &str = "agents";
pub const PLAN_FILE: &str = "plan.json";
pub const OUTCOMES_FILE: &str = "outcomes.json";
pub const TRANSCRIPTS_FILE: &str = "transcripts.json";
pub const ANALYSIS_LOG_FILE: &str = "analysis.json";
pub const REPORT_FILE: &str = "error_analysis_report.md";
pub const LEADERBOARD_FILE: &str = "leaderboard.md";
pub const COST_FILE: &str = "cost_report.json";
/// Wall-clock timings live here, outside the reproducible state.
pub const TIMING_FILE: &str = "iteration_log.json";
pub const NEW_AGENT_DIR: &str = "agent";
const EMPTY_ANALYSIS: &str = "(the analysis tool produced no output)";
const TRUNCATION_MARK: &str = "\n[analysis truncated at the token budget]\n";

pub fn iteration_dir(output_dir: &Path, iteration: u32) -> PathBuf {
    output_dir.join(format!("iter_{iteration}"))
}

/// How one agent's analysis of one database was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisNote {
    pub tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<FallbackReason>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TimingEntry {
    iteration: u32,
    wall_ms: u64,
    evolution_ms: u64,
}

fn copy_package_dir(src: &Path, dst: &Path) -> Result<()> {
    for entry in WalkDir::new(src).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io {
            path: src.to_path_buf(),
            source: e.into(),
        })?;
        let rel = entry.path().strip_prefix(src).unwrap_or(entry.path());
        if rel.starts_with(TOOL_OUTPUT_DIR) {
            continue;
        }
        let target = dst.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&target).at(&target)?;
        } else if entry.file_type().is_file() {
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).at(parent)?;
            }
            fs::copy(entry.path(), &target).at(&target)?;
        }
    }
    Ok(())
}

fn cut_to_budget(text: &str, budget_tokens: usize) -> (String, bool) {
    let max_bytes = budget_tokens.saturating_mul(4);
    if text.len() <= max_bytes {
        return (text.to_string(), false);
    }
    let mut end = max_bytes.saturating_sub(TRUNCATION_MARK.len());
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    (format!("{}{TRUNCATION_MARK}", &text[..end]), true)
}

/// Owns the population and drives iterations.
pub struct Orchestrator {
    config: RunConfig,
    out: PathBuf,
    pool: QuestionPool,
    generation: Box<dyn GenerationBackend>,
    evolution: Option<Box<dyn EvolutionBackend>>,
    executor: SqliteExecutor,
    workers: rayon::ThreadPool,
    registry: Registry,
    state: RunState,
}

impl Orchestrator {
    fn assemble(config: RunConfig, registry: Registry, state: RunState) -> Result<Self> {
        config.validate()?;
        let pool = load_question_pool(&config.data_root)?;
        let generation = generation_backend(&config.gen_backend, &pool)?;
        let evolution = evolution_backend(&config.evo_backend)?;
        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::InvalidState(format!("worker pool: {e}")))?;
        Ok(Self {
            out: config.output_dir.clone(),
            executor: SqliteExecutor {
                timeout: Duration::from_secs(config.query_timeout_secs),
                ..SqliteExecutor::default()
            },
            config,
            pool,
            generation,
            evolution,
            workers,
            registry,
            state,
        })
    }

    /// Prepares a fresh run directory with the initial population.
    pub fn start(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let out = config.output_dir.clone();
        if out.join(STATE_FILE).exists() {
            return Err(Error::Conflict(format!(
                "{} already holds a run; resume it instead",
                out.display()
            )));
        }
        fs::create_dir_all(&out).at(&out)?;
        let agents_dir = out.join(AGENTS_DIR);
        let mut registry = Registry::new();
        if config.initial_agents.is_empty() {
            let pkg = write_baseline_package(&agents_dir.join("naive"))?;
            registry.register(pkg)?;
        } else {
            for src in &config.initial_agents {
                let probe = load_package(src)?;
                let dst = agents_dir.join(&probe.id);
                if dst.exists() {
                    fs::remove_dir_all(&dst).at(&dst)?;
                }
                copy_package_dir(src, &dst)?;
                registry.register(load_package(&dst)?)?;
            }
        }
        let state = RunState {
            schema_version: STATE_SCHEMA_VERSION,
            config: config.clone(),
            registry: registry.snapshot(&out),
            iterations: Vec::new(),
        };
        state.save(&out)?;
        Self::assemble(config, registry, state)
    }

    /// Reopens a run directory. `iterations` may extend the planned total.
    pub fn open(output_dir: &Path, iterations: Option<u32>) -> Result<Self> {
        let mut state = RunState::load(output_dir)?;
        if let Some(n) = iterations {
            if n < state.completed() {
                return Err(Error::InvalidArgument(format!(
                    "{n} iterations requested but {} already completed",
                    state.completed()
                )));
            }
            state.config.iterations = n;
        }
        let registry = Registry::restore(&state.registry, output_dir)?;
        let config = state.config.clone();
        Self::assemble(config, registry, state)
    }

    /// Replaces the backends built from the configuration.
    pub fn with_backends(
        mut self,
        generation: Box<dyn GenerationBackend>,
        evolution: Option<Box<dyn EvolutionBackend>>,
    ) -> Self {
        self.generation = generation;
        self.evolution = evolution;
        self
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn pool(&self) -> &QuestionPool {
        &self.pool
    }

    /// Runs the remaining iterations up to the configured total.
    pub fn run(&mut self) -> Result<&RunState> {
        self.run_until(self.config.iterations)
    }

    /// Runs iterations up to and including `last`.
    pub fn run_until(&mut self, last: u32) -> Result<&RunState> {
        let last = last.min(self.config.iterations);
        while self.state.completed() < last {
            let i = self.state.completed() + 1;
            let started = Instant::now();
            let evolution_ms = self.run_iteration(i)?;
            self.log_timing(TimingEntry {
                iteration: i,
                wall_ms: started.elapsed().as_millis() as u64,
                evolution_ms,
            })?;
            tracing::info!(iteration = i, "iteration complete");
        }
        Ok(&self.state)
    }

    fn log_timing(&self, entry: TimingEntry) -> Result<()> {
        let path = self.out.join(TIMING_FILE);
        let mut entries: Vec<TimingEntry> = if path.is_file() { read_json(&path)? } else { Vec::new() };
        entries.retain(|e| e.iteration != entry.iteration);
        entries.push(entry);
        write_json(&path, &entries)
    }

    fn env(&self) -> EvalEnv<'_> {
        EvalEnv {
            pool: &self.pool,
            gold: &EMPTY_GOLD,
            backend: self.generation.as_ref(),
            executor: &self.executor,
            workers: &self.workers,
            max_rounds: self.config.max_rounds,
        }
    }

    /// Analysis text per database for one package.
    fn analyses(
        &self,
        pkg: &AgentPackage,
        databases: &[String],
    ) -> Result<(BTreeMap<String, String>, BTreeMap<String, AnalysisNote>)> {
        let timeout = Duration::from_secs(self.config.tool_timeout_secs);
        let pool = &self.pool;
        let budget = self.config.token_budget;
        let runs: Vec<Result<(String, String, AnalysisNote)>> = self.workers.install(|| {
            databases
                .par_iter()
                .map(|db| {
                    let run = agent_analysis(pkg, pool.db_path(db)?, timeout)?;
                    let empty = run.text.trim().is_empty();
                    let text = if empty { EMPTY_ANALYSIS.to_string() } else { run.text };
                    let (text, truncated) = cut_to_budget(&text, budget);
                    let note = AnalysisNote {
                        tokens: crate::analyzer::estimate_tokens(&text),
                        fallback: run.fallback,
                        truncated,
                        empty,
                    };
                    Ok((db.clone(), text, note))
                })
                .collect()
        });
        let mut texts = BTreeMap::new();
        let mut notes = BTreeMap::new();
        for r in runs {
            let (db, text, note) = r?;
            texts.insert(db.clone(), text);
            notes.insert(db, note);
        }
        Ok((texts, notes))
    }

    fn evaluate(
        &self,
        gold: &GoldCache,
        pkg: &AgentPackage,
        databases: &[String],
        questions: &[QuestionItem],
    ) -> Result<(AgentEvaluation, BTreeMap<String, AnalysisNote>)> {
        let (texts, notes) = self.analyses(pkg, databases)?;
        let env = EvalEnv { gold, ..self.env() };
        let eval = evaluate_agent(&env, &pkg.id, &pkg.eval_instructions, &texts, questions)?;
        Ok((eval, notes))
    }

    fn focus_history(&self, before: u32) -> Result<Vec<FocusIteration>> {
        let mut history = Vec::new();
        for record in self.state.iterations.iter().rev().filter(|r| r.iteration < before) {
            if history.len() == self.config.deep_focus_k {
                break;
            }
            let dir = self.out.join(&record.artifacts);
            let plan: IterationPlan = read_json(&dir.join(PLAN_FILE))?;
            let evals: Vec<AgentEvaluation> = read_json(&dir.join(OUTCOMES_FILE))?;
            history.push(FocusIteration {
                iteration: record.iteration,
                questions: plan.all_questions().cloned().collect(),
                roster_results: evals
                    .into_iter()
                    .map(|e| {
                        let results = e.outcomes.into_iter().map(|o| (o.key, o.matched)).collect();
                        (e.agent_id, results)
                    })
                    .collect(),
            });
        }
        Ok(history)
    }

    /// Drafts and refines a new agent into `iter_dir/agent`.
    fn evolve(&self, iteration: u32, iter_dir: &Path) -> Result<(AgentPackage, EvolutionRecord)> {
        let backend = self
            .evolution
            .as_ref()
            .ok_or_else(|| Error::Evolution("no evolution backend configured".into()))?;
        let previous = self
            .state
            .iterations
            .last()
            .ok_or_else(|| Error::InvalidState("evolution needs a completed iteration".into()))?;
        let report_path = self.out.join(&previous.artifacts).join(REPORT_FILE);
        let report = fs::read_to_string(&report_path).ok();
        let ctx = build_context(
            iteration,
            &self.registry,
            &previous.competitors,
            &self.state.summaries(),
            report,
            self.config.strategy.as_deref(),
        )?;
        let dir = iter_dir.join(NEW_AGENT_DIR);
        let mut session = backend.start_session(iteration)?;
        let evolved = evolve_agent(&ctx, session.as_mut(), &dir, &previous.competitors)?;
        let history = self.focus_history(iteration)?;
        let mut eval = |pkg: &AgentPackage, focus: &FocusIteration| -> Result<BTreeMap<QuestionKey, bool>> {
            let gold = GoldCache::build(&focus.questions, &self.pool, &self.executor, &self.workers)?;
            let mut dbs: Vec<String> = focus.questions.iter().map(|q| q.db_id.clone()).collect();
            dbs.dedup();
            let (eval, _) = self.evaluate(&gold, pkg, &dbs, &focus.questions)?;
            Ok(eval.outcomes.into_iter().map(|o| (o.key, o.matched)).collect())
        };
        let (pkg, rounds) = deep_focus(
            evolved.package,
            &ctx,
            session.as_mut(),
            &history,
            self.config.deep_focus_k,
            &mut eval,
        )?;
        if self.registry.contains(&pkg.id) {
            return Err(Error::Conflict(format!("agent id {} is already taken", pkg.id)));
        }
        let record = EvolutionRecord {
            agent_id: Some(pkg.id.clone()),
            error: None,
            rejected_first_draft: evolved.rejected,
            deep_focus: rounds,
        };
        Ok((pkg, record))
    }

    /// Runs one iteration and persists it. Returns the evolution time in ms.
    fn run_iteration(&mut self, i: u32) -> Result<u64> {
        let seed = self.config.run_seed;
        let seeds = IterationSeeds {
            sampling: iteration_seed(seed, i, Stream::Sampling),
            mode: iteration_seed(seed, i, Stream::Mode),
            selection: iteration_seed(seed, i, Stream::Selection),
        };
        let (databases, questions) =
            sample_iteration_tasks(&self.pool, &mut iteration_rng(seed, i, Stream::Sampling))?;
        let iter_dir = iteration_dir(&self.out, i);
        fs::create_dir_all(&iter_dir).at(&iter_dir)?;

        let evolution_started = Instant::now();
        let mut drawn_mode = None;
        let mut mode = Mode::None;
        let mut new_agent = None;
        let mut evolution = None;
        if i > 1 {
            let drawn = choose_mode(i, self.config.late_stage_start, &mut iteration_rng(seed, i, Stream::Mode))?;
            drawn_mode = Some(drawn);
            mode = drawn;
            if drawn == Mode::Evolve {
                match self.evolve(i, &iter_dir) {
                    Ok((pkg, record)) => {
                        new_agent = Some(pkg.id.clone());
                        self.registry.register(pkg)?;
                        evolution = Some(record);
                    }
                    Err(e) => {
                        tracing::warn!(iteration = i, error = %e, "evolution failed; running without a new agent");
                        let dir = iter_dir.join(NEW_AGENT_DIR);
                        if dir.exists() {
                            fs::remove_dir_all(&dir).at(&dir)?;
                        }
                        mode = Mode::None;
                        evolution = Some(EvolutionRecord {
                            error: Some(e.to_string()),
                            ..EvolutionRecord::default()
                        });
                    }
                }
            }
        }
        let evolution_ms = evolution_started.elapsed().as_millis() as u64;

        let competitors = if i == 1 {
            self.registry.ranked().into_iter().map(|r| r.agent_id.clone()).collect()
        } else {
            select_competitors(
                mode,
                &self.registry,
                new_agent.as_deref(),
                &mut iteration_rng(seed, i, Stream::Selection),
            )?
        };
        let plan = IterationPlan {
            iteration: i,
            mode,
            databases,
            questions,
            competitors,
            new_agent_slot: mode == Mode::Evolve,
            new_agent,
        };
        plan.check_invariants()?;
        write_json(&iter_dir.join(PLAN_FILE), &plan)?;

        let all_questions: Vec<QuestionItem> = plan.all_questions().cloned().collect();
        let gold = GoldCache::build(&all_questions, &self.pool, &self.executor, &self.workers)?;
        let mut evaluations = Vec::new();
        let mut notes = BTreeMap::new();
        for id in &plan.competitors {
            let pkg = self
                .registry
                .package(id)
                .ok_or_else(|| Error::NotFound(format!("agent {id}")))?
                .clone();
            let (eval, n) = self.evaluate(&gold, &pkg, &plan.databases, &all_questions)?;
            evaluations.push(eval);
            notes.insert(id.clone(), n);
        }

        let accuracies: Vec<(String, f64)> = evaluations
            .iter()
            .map(|e| (e.agent_id.clone(), e.accuracy.value()))
            .collect();
        let matches = decompose_and_update(&mut self.registry, i, &accuracies)?;
        let winners = determine_winners(&accuracies);
        self.registry.record_iteration_outcome(&plan.competitors, &winners)?;

        let transcripts: Vec<TranscriptRecord> = evaluations.iter().flat_map(|e| e.transcripts.clone()).collect();
        write_json(&iter_dir.join(OUTCOMES_FILE), &evaluations)?;
        write_json(&iter_dir.join(TRANSCRIPTS_FILE), &transcripts)?;
        write_json(&iter_dir.join(ANALYSIS_LOG_FILE), &notes)?;
        write_atomic(
            &iter_dir.join(REPORT_FILE),
            write_error_analysis(i, &evaluations).as_bytes(),
        )?;

        self.state.iterations.push(IterationRecord {
            iteration: i,
            seeds,
            drawn_mode,
            mode,
            databases: plan.databases.clone(),
            questions: all_questions.iter().map(QuestionKey::of).collect(),
            competitors: plan.competitors.clone(),
            evolution,
            accuracies: evaluations.iter().map(|e| (e.agent_id.clone(), e.accuracy)).collect(),
            matches,
            winners: winners.into_iter().collect(),
            excluded: gold.defective(),
            artifacts: format!("iter_{i}"),
        });
        self.state.registry = self.registry.snapshot(&self.out);
        self.state.save(&self.out)?;
        write_atomic(&self.out.join(LEADERBOARD_FILE), leaderboard(&self.state)?.as_bytes())?;
        write_json(&self.out.join(COST_FILE), &self.cost_report()?)?;
        Ok(evolution_ms)
    }

    /// Token and cost totals over every persisted transcript.
    pub fn cost_report(&self) -> Result<CostReport> {
        cost_report(&self.out, &self.state)
    }
}

static EMPTY_GOLD: std::sync::LazyLock<GoldCache> = std::sync::LazyLock::new(GoldCache::default);

pub fn cost_report(output_dir: &Path, state: &RunState) -> Result<CostReport> {
    let mut all = Vec::new();
    for record in &state.iterations {
        let path = output_dir.join(&record.artifacts).join(TRANSCRIPTS_FILE);
        let transcripts: Vec<TranscriptRecord> = read_json(&path)?;
        all.push((record.iteration, transcripts));
    }
    Ok(token_cost_accounting(&all, &state.config.prices))
}

/// Starts a new run and completes it.
pub fn run(config: RunConfig) -> Result<RunState> {
    let mut orchestrator = Orchestrator::start(config)?;
    orchestrator.run()?;
    Ok(orchestrator.state)
}

/// Continues a run from its state file, optionally extending it.
pub fn resume(output_dir: &Path, iterations: Option<u32>) -> Result<RunState> {
    let mut orchestrator = Orchestrator::open(output_dir, iterations)?;
    orchestrator.run()?;
    Ok(orchestrator.state)
}

/// Scores one package on the questions of `databases` (all when empty),
/// outside any run.
pub fn evaluate_package(
    package_dir: &Path,
    data_root: &Path,
    databases: &[String],
    gen_backend: &str,
    workers: usize,
) -> Result<AgentEvaluation> {
    let pool = load_question_pool(data_root)?;
    let pkg = load_package(package_dir)?;
    let dbs: Vec<String> = if databases.is_empty() {
        pool.questions.keys().cloned().collect()
    } else {
        databases.to_vec()
    };
    let mut questions = Vec::new();
    for db in &dbs {
        let qs = pool
            .questions
            .get(db)
            .ok_or_else(|| Error::NotFound(format!("database {db} has no questions")))?;
        questions.extend(qs.iter().cloned());
    }
    let mut config = RunConfig::new(data_root, package_dir, 1);
    config.gen_backend = gen_backend.to_string();
    config.workers = workers.max(1);
    let orchestrator = Orchestrator::assemble(
        config,
        Registry::new(),
        RunState {
            schema_version: STATE_SCHEMA_VERSION,
            config: RunConfig::new(data_root, package_dir, 1),
            registry: Registry::new().snapshot(package_dir),
            iterations: Vec::new(),
        },
    )?;
    let gold = GoldCache::build(&questions, &pool, &orchestrator.executor, &orchestrator.workers)?;
    let (eval, _) = orchestrator.evaluate(&gold, &pkg, &dbs, &questions)?;
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_cut_respects_char_boundaries() {
        let text = "é".repeat(100);
        let (cut, truncated) = cut_to_budget(&text, 20);
        assert!(truncated);
        assert!(cut.len() <= 80);
        assert!(cut.ends_with(TRUNCATION_MARK));
        assert_eq!(cut_to_budget("short", 20), ("short".to_string(), false));
    }
}
