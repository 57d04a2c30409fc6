//! Per-iteration task sampling and competitor selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elo::INITIAL_RATING;
use crate::error::{Error, IoContext, Result};
use crate::registry::{AgentRecord, Registry};

pub const DATABASES_PER_ITERATION: usize = 5;
pub const QUESTIONS_PER_DATABASE: usize = 30;
pub const EVOLVE_ROSTER: usize = 3;
pub const NON_EVOLVE_ROSTER: usize = 4;
pub const DEFAULT_LATE_STAGE_START: u32 = 12;
pub const EVOLVE_PROBABILITY: f64 = 0.70;
pub const CHALLENGER_PROBABILITY: f64 = 0.15;

/// Candidate file names for the question pool, in lookup order.
pub const QUESTION_FILES: [&str; 3] = ["questions.json", "train.json", "dev.json"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Simple,
    Moderate,
    Challenging,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub question_id: u64,
    pub db_id: String,
    pub question: String,
    #[serde(default)]
    pub evidence: String,
    #[serde(rename = "SQL")]
    pub gold_sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<Difficulty>,
}

/// BIRD omits `question_id` in its training split.
#[derive(Deserialize)]
struct RawQuestion {
    question_id: Option<u64>,
    db_id: String,
    question: String,
    #[serde(default)]
    evidence: Option<String>,
    #[serde(rename = "SQL")]
    sql: String,
    #[serde(default)]
    difficulty: Option<Difficulty>,
}

#[derive(Debug, Clone, Default)]
pub struct QuestionPool {
    /// db_id -> SQLite file.
    pub databases: BTreeMap<String, PathBuf>,
    /// db_id -> questions sorted by id.
    pub questions: BTreeMap<String, Vec<QuestionItem>>,
}

impl QuestionPool {
    pub fn question_count(&self) -> usize {
        self.questions.values().map(Vec::len).sum()
    }

    pub fn db_path(&self, db_id: &str) -> Result<&Path> {
        self.databases
            .get(db_id)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::NotFound(format!("database {db_id}")))
    }

    pub fn find(&self, db_id: &str, question_id: u64) -> Option<&QuestionItem> {
        self.questions
            .get(db_id)?
            .iter()
            .find(|q| q.question_id == question_id)
    }
}

/// Database file for `db_id` under the standard `<root>/<db_id>/<db_id>.sqlite` layout.
pub fn database_file(data_root: &Path, db_id: &str) -> PathBuf {
    data_root.join(db_id).join(format!("{db_id}.sqlite"))
}

pub fn load_question_pool(data_root: &Path) -> Result<QuestionPool> {
    let questions_path = QUESTION_FILES
        .iter()
        .map(|f| data_root.join(f))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::NotFound(format!("questions file in {}", data_root.display()))
        })?;

    let mut databases = BTreeMap::new();
    let mut missing_files = Vec::new();
    for entry in fs::read_dir(data_root).at(data_root)? {
        let entry = entry.at(data_root)?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if !path.is_dir() || name.starts_with('.') {
            continue;
        }
        let file = database_file(data_root, &name);
        if file.is_file() {
            databases.insert(name, file);
        } else {
            missing_files.push(name);
        }
    }
    if !missing_files.is_empty() {
        return Err(Error::Validation(format!(
            "database directories without an SQLite file: {}",
            missing_files.join(", ")
        )));
    }

    let text = fs::read_to_string(&questions_path).at(&questions_path)?;
    let raw: Vec<RawQuestion> = serde_json::from_str(&text)?;
    let mut questions: BTreeMap<String, Vec<QuestionItem>> = BTreeMap::new();
    let mut unknown = BTreeSet::new();
    let mut seen = BTreeSet::new();
    for (index, q) in raw.into_iter().enumerate() {
        if !databases.contains_key(&q.db_id) {
            unknown.insert(q.db_id.clone());
            continue;
        }
        let question_id = q.question_id.unwrap_or(index as u64);
        if !seen.insert(question_id) {
            return Err(Error::Validation(format!("duplicate question_id {question_id}")));
        }
        questions.entry(q.db_id.clone()).or_default().push(QuestionItem {
            question_id,
            db_id: q.db_id,
            question: q.question,
            evidence: q.evidence.unwrap_or_default(),
            gold_sql: q.sql,
            difficulty: q.difficulty,
        });
    }
    if !unknown.is_empty() {
        return Err(Error::Validation(format!(
            "questions reference unknown databases: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    for list in questions.values_mut() {
        list.sort_by_key(|q| q.question_id);
    }
    Ok(QuestionPool {
        databases,
        questions,
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent random streams drawn within one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Sampling = 1,
    Mode = 2,
    Selection = 3,
    Simulation = 4,
}

/// Seed for one stream of one iteration; a resumed run reproduces it exactly.
pub fn iteration_seed(run_seed: u64, iteration: u32, stream: Stream) -> u64 {
    splitmix64(splitmix64(run_seed ^ splitmix64(u64::from(iteration))) ^ stream as u64)
}

pub fn iteration_rng(run_seed: u64, iteration: u32, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(iteration_seed(run_seed, iteration, stream))
}

pub type SampledTasks = (Vec<String>, BTreeMap<String, Vec<QuestionItem>>);

/// Draws up to five databases and up to thirty questions from each, without
/// replacement. Databases without questions are never drawn.
pub fn sample_iteration_tasks<R: Rng + ?Sized>(
    pool: &QuestionPool,
    rng: &mut R,
) -> Result<SampledTasks> {
    let candidates: Vec<&String> = pool
        .questions
        .iter()
        .filter(|(_, qs)| !qs.is_empty())
        .map(|(db, _)| db)
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidState("question pool is empty".into()));
    }
    let mut databases: Vec<String> = candidates
        .choose_multiple(rng, DATABASES_PER_ITERATION)
        .map(|s| (*s).clone())
        .collect();
    databases.sort();
    let mut questions = BTreeMap::new();
    for db in &databases {
        let mut picked: Vec<QuestionItem> = pool.questions[db]
            .choose_multiple(rng, QUESTIONS_PER_DATABASE)
            .cloned()
            .collect();
        picked.sort_by_key(|q| q.question_id);
        questions.insert(db.clone(), picked);
    }
    Ok((databases, questions))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Evolve,
    Challenger,
    None,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Evolve => "evolve",
            Mode::Challenger => "challenger",
            Mode::None => "none",
        }
    }

    pub fn roster_size(self) -> usize {
        match self {
            Mode::Evolve => EVOLVE_ROSTER,
            Mode::Challenger | Mode::None => NON_EVOLVE_ROSTER,
        }
    }
}

/// Iterations before `late_stage_start` always evolve; later ones draw
/// evolve/challenger/none with probabilities 0.70/0.15/0.15.
pub fn choose_mode<R: Rng + ?Sized>(
    iteration: u32,
    late_stage_start: u32,
    rng: &mut R,
) -> Result<Mode> {
    if iteration == 0 {
        return Err(Error::InvalidArgument("iterations are numbered from 1".into()));
    }
    if iteration < late_stage_start {
        return Ok(Mode::Evolve);
    }
    let u: f64 = rng.gen();
    Ok(if u < EVOLVE_PROBABILITY {
        Mode::Evolve
    } else if u < EVOLVE_PROBABILITY + CHALLENGER_PROBABILITY {
        Mode::Challenger
    } else {
        Mode::None
    })
}

fn pick_from_top<R: Rng + ?Sized>(
    registry: &Registry,
    chosen: &[String],
    rng: &mut R,
) -> Option<String> {
    let exclude: BTreeSet<String> = chosen.iter().cloned().collect();
    registry.top_by_elo(2, &exclude).choose(rng).cloned()
}

/// Orders challenger candidates: non-pending first, then fewest tests, then
/// rating descending, then id.
fn challenger_order(a: &AgentRecord, b: &AgentRecord) -> std::cmp::Ordering {
    a.pending_winner
        .cmp(&b.pending_winner)
        .then(a.tests.cmp(&b.tests))
        .then(b.rating.value.total_cmp(&a.rating.value))
        .then_with(|| a.agent_id.cmp(&b.agent_id))
}

pub fn select_competitors<R: Rng + ?Sized>(
    mode: Mode,
    registry: &Registry,
    new_agent: Option<&str>,
    rng: &mut R,
) -> Result<Vec<String>> {
    if registry.is_empty() {
        return Err(Error::InvalidState("agent population is empty".into()));
    }
    let mut roster: Vec<String> = Vec::new();
    match mode {
        Mode::Evolve => {
            let new_agent = new_agent.ok_or_else(|| {
                Error::InvalidArgument("evolve mode requires the newly evolved agent".into())
            })?;
            if !registry.contains(new_agent) {
                return Err(Error::NotFound(format!("agent {new_agent} is not registered")));
            }
            roster.extend(
                registry
                    .pending_winners()
                    .into_iter()
                    .filter(|id| id != new_agent),
            );
            roster.push(new_agent.to_string());
            while roster.len() < EVOLVE_ROSTER {
                match pick_from_top(registry, &roster, rng) {
                    Some(id) => roster.push(id),
                    None => break,
                }
            }
        }
        Mode::Challenger => {
            let mut above: Vec<&AgentRecord> = registry
                .records()
                .filter(|r| r.rating.value > INITIAL_RATING)
                .collect();
            above.sort_by(|a, b| challenger_order(a, b));
            roster.extend(
                above
                    .into_iter()
                    .take(NON_EVOLVE_ROSTER)
                    .map(|r| r.agent_id.clone()),
            );
            if roster.len() < NON_EVOLVE_ROSTER {
                let mut rest: Vec<&AgentRecord> = registry
                    .records()
                    .filter(|r| !roster.contains(&r.agent_id))
                    .collect();
                rest.sort_by(|a, b| {
                    a.tests
                        .cmp(&b.tests)
                        .then(b.rating.value.total_cmp(&a.rating.value))
                        .then_with(|| a.agent_id.cmp(&b.agent_id))
                });
                let missing = NON_EVOLVE_ROSTER - roster.len();
                roster.extend(rest.into_iter().take(missing).map(|r| r.agent_id.clone()));
            }
        }
        Mode::None => {
            while roster.len() < NON_EVOLVE_ROSTER {
                match pick_from_top(registry, &roster, rng) {
                    Some(id) => roster.push(id),
                    None => break,
                }
            }
        }
    }
    Ok(roster)
}

/// Every agent attaining the maximum accuracy.
pub fn determine_winners(accuracies: &[(String, f64)]) -> BTreeSet<String> {
    let best = accuracies
        .iter()
        .map(|(_, a)| *a)
        .fold(f64::NEG_INFINITY, f64::max);
    accuracies
        .iter()
        .filter(|(_, a)| *a == best)
        .map(|(id, _)| id.clone())
        .collect()
}

/// One iteration's tasks and roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub iteration: u32,
    pub mode: Mode,
    pub databases: Vec<String>,
    pub questions: BTreeMap<String, Vec<QuestionItem>>,
    pub competitors: Vec<String>,
    pub new_agent_slot: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_agent: Option<String>,
}

impl IterationPlan {
    /// Questions in evaluation order: by database, then by question id.
    pub fn all_questions(&self) -> impl Iterator<Item = &QuestionItem> {
        self.databases
            .iter()
            .filter_map(|db| self.questions.get(db))
            .flatten()
    }

    pub fn question_count(&self) -> usize {
        self.questions.values().map(Vec::len).sum()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let unique: BTreeSet<&String> = self.competitors.iter().collect();
        if unique.len() != self.competitors.len() {
            return Err(Error::InvalidState("duplicate competitor in plan".into()));
        }
        let dbs: BTreeSet<&String> = self.databases.iter().collect();
        if dbs.len() != self.databases.len() {
            return Err(Error::InvalidState("duplicate database in plan".into()));
        }
        for (db, qs) in &self.questions {
            let ids: BTreeSet<u64> = qs.iter().map(|q| q.question_id).collect();
            if ids.len() != qs.len() {
                return Err(Error::InvalidState(format!("duplicate question in {db}")));
            }
        }
        if self.new_agent_slot != (self.mode == Mode::Evolve) {
            return Err(Error::InvalidState("new-agent slot disagrees with mode".into()));
        }
        Ok(())
    }
}
