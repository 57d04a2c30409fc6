//! Evolution context, the file-block draft protocol, drafting new agents and
//! Deep Focus refinement.
//!
//! A backend reply carries files as fenced blocks. A block opens with a line
//! `` ````file:<relative path> `` and closes with a line of exactly four
//! backticks. A block for `reasoning.md` holds the reasoning; without one,
//! the text outside all blocks is used.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::chat::ChatClient;
use crate::error::{Error, IoContext, Result};
use crate::eval::{Accuracy, QuestionKey};
use crate::registry::{load_package, write_package, AgentPackage, Registry, TOOL_OUTPUT_DIR};
use crate::scheduler::{Mode, QuestionItem};
use crate::toy::CROSS_POLLINATION_STRATEGY;

pub const REASONING_FILE: &str = "reasoning.md";
pub const DEFAULT_DEEP_FOCUS_K: usize = 1;
const FENCE: &str = "````";
const FILE_TAG: &str = "````file:";
const MAX_PARENT_FILE_BYTES: u64 = 256 * 1024;
const EVOLUTION_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub agent_id: String,
    pub rating: f64,
    pub tests: u32,
    pub wins: u32,
    pub pending_winner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageFiles {
    pub agent_id: String,
    /// (relative path, text) in path order.
    pub files: Vec<(String, String)>,
}

/// Per-iteration summary kept in the run history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: u32,
    pub mode: Mode,
    pub databases: Vec<String>,
    pub accuracies: Vec<(String, Accuracy)>,
    pub winners: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_agent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionContext {
    pub iteration: u32,
    pub leaderboard: Vec<LeaderboardEntry>,
    pub parents: Vec<PackageFiles>,
    pub error_report: Option<String>,
    pub strategy: String,
    pub history: Vec<IterationSummary>,
}

/// Text files of a package, skipping tool output and anything binary or large.
pub fn package_files(pkg: &AgentPackage) -> Result<PackageFiles> {
    let mut files = Vec::new();
    for entry in WalkDir::new(&pkg.root_dir).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io {
            path: pkg.root_dir.clone(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(&pkg.root_dir).unwrap_or(entry.path());
        if rel.starts_with(TOOL_OUTPUT_DIR) {
            continue;
        }
        let meta = entry.metadata().map_err(|e| Error::Io {
            path: entry.path().to_path_buf(),
            source: e.into(),
        })?;
        if meta.len() > MAX_PARENT_FILE_BYTES {
            continue;
        }
        let bytes = fs::read(entry.path()).at(entry.path())?;
        if let Ok(text) = String::from_utf8(bytes) {
            let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            files.push((rel.join("/"), text));
        }
    }
    Ok(PackageFiles {
        agent_id: pkg.id.clone(),
        files,
    })
}

/// Gathers what the evolution backend sees. `parents` are the agents of the
/// latest roster; `strategy_path` of `None` selects the bundled
/// cross-pollination strategy.
pub fn build_context(
    iteration: u32,
    registry: &Registry,
    parents: &[String],
    history: &[IterationSummary],
    error_report: Option<String>,
    strategy_path: Option<&Path>,
) -> Result<EvolutionContext> {
    let strategy = match strategy_path {
        None => CROSS_POLLINATION_STRATEGY.to_string(),
        Some(p) => fs::read_to_string(p)
            .map_err(|_| Error::NotFound(format!("strategy file {}", p.display())))?,
    };
    let leaderboard = registry
        .ranked()
        .into_iter()
        .map(|r| LeaderboardEntry {
            agent_id: r.agent_id.clone(),
            rating: r.rating.value,
            tests: r.tests,
            wins: r.iteration_wins,
            pending_winner: r.pending_winner,
        })
        .collect();
    let parents = parents
        .iter()
        .map(|id| {
            let pkg = registry
                .package(id)
                .ok_or_else(|| Error::NotFound(format!("agent {id}")))?;
            package_files(pkg)
        })
        .collect::<Result<_>>()?;
    Ok(EvolutionContext {
        iteration,
        leaderboard,
        parents,
        error_report,
        strategy,
        history: history.to_vec(),
    })
}

pub const PROTOCOL_NOTE: &str = "Reply with every file of the new agent package as a fenced block. \
Open each block with a line ````file:<relative path> and close it with a line of four backticks. \
The package needs agent.md (frontmatter with name, description, execution_mode, tool_command, \
tool_output_file), eval_instructions.md and the tool files. Put your analysis in a block for reasoning.md.";

impl EvolutionContext {
    /// The request text sent to a live backend.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Evolution request for iteration {}\n", self.iteration);
        let _ = writeln!(out, "## Strategy\n\n{}\n", self.strategy.trim_end());
        out.push_str("## Leaderboard\n\n| Agent | Rating | Tests | Wins |\n|---|---|---|---|\n");
        for e in &self.leaderboard {
            let _ = writeln!(out, "| {} | {:.1} | {} | {} |", e.agent_id, e.rating, e.tests, e.wins);
        }
        out.push_str("\n## Parent agents\n");
        for p in &self.parents {
            let _ = writeln!(out, "\n### {}\n", p.agent_id);
            for (path, text) in &p.files {
                let _ = writeln!(out, "{FILE_TAG}{path}\n{}\n{FENCE}", text.trim_end_matches('\n'));
            }
        }
        if let Some(report) = &self.error_report {
            let _ = writeln!(out, "\n## Latest error analysis\n\n{}", report.trim_end());
        }
        if !self.history.is_empty() {
            out.push_str("\n## History\n\n");
            for h in &self.history {
                let acc: Vec<String> = h.accuracies.iter().map(|(a, x)| format!("{a} {x}")).collect();
                let _ = writeln!(
                    out,
                    "- iteration {} ({}) on {}: {}; winners {}",
                    h.iteration,
                    h.mode.as_str(),
                    h.databases.join(", "),
                    acc.join(", "),
                    h.winners.join(", ")
                );
            }
        }
        let _ = writeln!(out, "\n## Output format\n\n{PROTOCOL_NOTE}");
        out
    }
}

/// Files and reasoning parsed from a backend reply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Draft {
    pub files: BTreeMap<String, String>,
    pub reasoning: String,
}

fn check_draft_path(path: &str) -> std::result::Result<(), String> {
    let p = Path::new(path);
    if path.is_empty() || p.is_absolute() {
        return Err(format!("invalid file path '{path}'"));
    }
    if p.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(format!("file path '{path}' must be relative without '..'"));
    }
    if p.starts_with(TOOL_OUTPUT_DIR) {
        return Err(format!("file path '{path}' is inside {TOOL_OUTPUT_DIR}/"));
    }
    Ok(())
}

pub fn parse_file_blocks(text: &str) -> std::result::Result<Draft, Vec<String>> {
    let mut files = BTreeMap::new();
    let mut outside = String::new();
    let mut problems = Vec::new();
    let mut open: Option<(String, String)> = None;
    for line in text.split_inclusive('\n') {
        let bare = line.trim_end_matches(['\n', '\r']);
        match &mut open {
            Some((path, body)) => {
                if bare == FENCE {
                    if files.insert(path.clone(), std::mem::take(body)).is_some() {
                        problems.push(format!("file '{path}' appears twice"));
                    }
                    open = None;
                } else {
                    body.push_str(line);
                }
            }
            None => {
                if let Some(path) = bare.strip_prefix(FILE_TAG) {
                    let path = path.trim().to_string();
                    if let Err(p) = check_draft_path(&path) {
                        problems.push(p);
                    }
                    open = Some((path, String::new()));
                } else {
                    outside.push_str(line);
                }
            }
        }
    }
    if let Some((path, _)) = open {
        problems.push(format!("block for '{path}' is not closed"));
    }
    if files.is_empty() && problems.is_empty() {
        problems.push("reply contains no file blocks".into());
    }
    if !problems.is_empty() {
        return Err(problems);
    }
    let reasoning = files
        .remove(REASONING_FILE)
        .map(|r| r.trim().to_string())
        .unwrap_or_else(|| outside.trim().to_string());
    Ok(Draft { files, reasoning })
}

pub fn render_file_blocks(draft: &Draft) -> String {
    let mut out = String::new();
    for (path, text) in &draft.files {
        let _ = writeln!(out, "{FILE_TAG}{path}\n{}\n{FENCE}", text.trim_end_matches('\n'));
    }
    if !draft.reasoning.is_empty() {
        let _ = writeln!(out, "{FILE_TAG}{REASONING_FILE}\n{}\n{FENCE}", draft.reasoning.trim_end());
    }
    out
}

/// One backend conversation, covering the proposal and its refinements.
pub trait EvolutionSession {
    /// `feedback` carries validation errors when a draft is re-requested.
    fn propose(&mut self, ctx: &EvolutionContext, feedback: Option<&str>) -> Result<String>;
    fn refine(&mut self, ctx: &EvolutionContext, feedback: &str) -> Result<String>;
}

pub trait EvolutionBackend {
    fn start_session(&self, iteration: u32) -> Result<Box<dyn EvolutionSession>>;
    fn identity(&self) -> String;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEvolutionFixture {
    pub propose: Vec<String>,
    #[serde(default)]
    pub refine: Vec<String>,
}

/// Replays fixture replies; each session starts from the first entry.
#[derive(Debug, Clone)]
pub struct ScriptedEvolution {
    pub fixture: ScriptedEvolutionFixture,
}

impl ScriptedEvolution {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Ok(Self {
            fixture: serde_json::from_str(&text)?,
        })
    }
}

struct ScriptedSession {
    fixture: ScriptedEvolutionFixture,
    proposals: usize,
    refinements: usize,
}

impl EvolutionSession for ScriptedSession {
    fn propose(&mut self, _: &EvolutionContext, _: Option<&str>) -> Result<String> {
        let i = self.proposals;
        self.proposals += 1;
        self.fixture
            .propose
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Backend(format!("script has no proposal {i}")))
    }

    fn refine(&mut self, _: &EvolutionContext, _: &str) -> Result<String> {
        let i = self.refinements;
        self.refinements += 1;
        self.fixture
            .refine
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Backend(format!("script has no refinement {i}")))
    }
}

impl EvolutionBackend for ScriptedEvolution {
    fn start_session(&self, _: u32) -> Result<Box<dyn EvolutionSession>> {
        Ok(Box::new(ScriptedSession {
            fixture: self.fixture.clone(),
            proposals: 0,
            refinements: 0,
        }))
    }

    fn identity(&self) -> String {
        "scripted".into()
    }
}

/// Live backend over a chat endpoint; the session is the message history.
#[derive(Debug, Clone)]
pub struct ChatEvolution {
    pub client: ChatClient,
}

struct ChatSession {
    client: ChatClient,
    messages: Vec<(String, String)>,
}

impl ChatSession {
    fn send(&mut self, content: String) -> Result<String> {
        self.messages.push(("user".into(), content));
        let msgs: Vec<(&str, &str)> = self.messages.iter().map(|(r, c)| (r.as_str(), c.as_str())).collect();
        let reply = self.client.complete(&msgs, EVOLUTION_TEMPERATURE)?;
        self.messages.push(("assistant".into(), reply.clone()));
        Ok(reply)
    }
}

impl EvolutionSession for ChatSession {
    fn propose(&mut self, ctx: &EvolutionContext, feedback: Option<&str>) -> Result<String> {
        let content = match feedback {
            None => ctx.render(),
            Some(f) => format!("{f}\n\n{PROTOCOL_NOTE}"),
        };
        self.send(content)
    }

    fn refine(&mut self, _: &EvolutionContext, feedback: &str) -> Result<String> {
        self.send(format!("{feedback}\n\n{PROTOCOL_NOTE}"))
    }
}

impl EvolutionBackend for ChatEvolution {
    fn start_session(&self, _: u32) -> Result<Box<dyn EvolutionSession>> {
        Ok(Box::new(ChatSession {
            client: self.client.clone(),
            messages: Vec::new(),
        }))
    }

    fn identity(&self) -> String {
        self.client.identity()
    }
}

fn clear_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    Ok(())
}

/// Writes a reply's files into `dir` and loads them as the package for
/// `iteration` with the given parents. Problems are returned as messages
/// suitable for feeding back to the backend.
fn materialize(
    reply: &str,
    dir: &Path,
    iteration: u32,
    lineage: &[String],
) -> std::result::Result<(AgentPackage, String), Vec<String>> {
    let draft = parse_file_blocks(reply)?;
    let io = |e: Error| vec![e.to_string()];
    clear_dir(dir).map_err(io)?;
    for (path, text) in &draft.files {
        let target = dir.join(path);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).at(parent).map_err(io)?;
        }
        fs::write(&target, text).at(&target).map_err(io)?;
    }
    let mut pkg = match load_package(dir) {
        Ok(p) => p,
        Err(e) => {
            let _ = clear_dir(dir);
            return Err(vec![e.to_string()]);
        }
    };
    pkg.iteration_created = iteration;
    pkg.lineage = lineage.to_vec();
    write_package(&pkg, dir).map_err(io)?;
    let pkg = load_package(dir).map_err(io)?;
    Ok((pkg, draft.reasoning))
}

fn write_reasoning(dir: &Path, reasoning: &str) -> Result<()> {
    let text = if reasoning.trim().is_empty() { "(no reasoning provided)" } else { reasoning.trim_end() };
    let path = dir.join(REASONING_FILE);
    fs::write(&path, format!("{text}\n")).at(&path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolvedAgent {
    pub package: AgentPackage,
    pub reasoning: String,
    /// Rejection messages of the first draft, when it needed a retry.
    pub rejected: Vec<String>,
}

/// Requests a new package, retrying once with the validation errors of an
/// invalid first draft. The package is written to `dir` with `reasoning.md`.
pub fn evolve_agent(
    ctx: &EvolutionContext,
    session: &mut dyn EvolutionSession,
    dir: &Path,
    lineage: &[String],
) -> Result<EvolvedAgent> {
    let first = session
        .propose(ctx, None)
        .map_err(|e| Error::Evolution(e.to_string()))?;
    let rejected = match materialize(&first, dir, ctx.iteration, lineage) {
        Ok((package, reasoning)) => {
            write_reasoning(dir, &reasoning)?;
            return Ok(EvolvedAgent {
                package,
                reasoning,
                rejected: Vec::new(),
            });
        }
        Err(problems) => problems,
    };
    let mut feedback = String::from("The package draft was rejected:\n");
    for p in &rejected {
        let _ = writeln!(feedback, "- {p}");
    }
    feedback.push_str("Send a corrected, complete package.");
    let second = session
        .propose(ctx, Some(&feedback))
        .map_err(|e| Error::Evolution(e.to_string()))?;
    match materialize(&second, dir, ctx.iteration, lineage) {
        Ok((package, reasoning)) => {
            write_reasoning(dir, &reasoning)?;
            Ok(EvolvedAgent {
                package,
                reasoning,
                rejected,
            })
        }
        Err(problems) => {
            let _ = clear_dir(dir);
            Err(Error::Evolution(format!(
                "second draft rejected: {}",
                problems.join("; ")
            )))
        }
    }
}

/// A past iteration as seen by Deep Focus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusIteration {
    pub iteration: u32,
    pub questions: Vec<QuestionItem>,
    /// agent id -> question -> correct, for that iteration's whole roster.
    pub roster_results: BTreeMap<String, BTreeMap<QuestionKey, bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusRound {
    pub iteration: u32,
    pub accuracy: Accuracy,
    pub uniquely_correct: Vec<QuestionKey>,
    pub uniquely_incorrect: Vec<QuestionKey>,
    pub refined: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Questions the new agent alone got right, and those only it got wrong.
pub fn uniqueness_sets(
    new_results: &BTreeMap<QuestionKey, bool>,
    roster: &BTreeMap<String, BTreeMap<QuestionKey, bool>>,
) -> (Vec<QuestionKey>, Vec<QuestionKey>) {
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for (key, &ok) in new_results {
        let others: Vec<bool> = roster.values().filter_map(|r| r.get(key).copied()).collect();
        if others.is_empty() {
            continue;
        }
        if ok && others.iter().all(|o| !o) {
            correct.push(key.clone());
        } else if !ok && others.iter().all(|o| *o) {
            incorrect.push(key.clone());
        }
    }
    (correct, incorrect)
}

fn focus_feedback(
    round: usize,
    focus: &FocusIteration,
    accuracy: Accuracy,
    correct: &[QuestionKey],
    incorrect: &[QuestionKey],
) -> String {
    let by_key: BTreeMap<QuestionKey, &QuestionItem> =
        focus.questions.iter().map(|q| (QuestionKey::of(q), q)).collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Deep Focus round {round}: your package was evaluated on the questions of iteration {}.\n",
        focus.iteration
    );
    let _ = writeln!(out, "Your accuracy: {accuracy}");
    for (agent, results) in &focus.roster_results {
        let right = results.values().filter(|v| **v).count();
        let _ = writeln!(out, "{agent}: {right}/{}", results.len());
    }
    out.push_str("\nQuestions only you answered correctly:\n");
    if correct.is_empty() {
        out.push_str("none\n");
    }
    for k in correct {
        if let Some(q) = by_key.get(k) {
            let _ = writeln!(out, "- {k}: {}", q.question);
        }
    }
    out.push_str("\nQuestions every other agent answered correctly and you missed:\n");
    if incorrect.is_empty() {
        out.push_str("none\n");
    }
    for k in incorrect {
        if let Some(q) = by_key.get(k) {
            let _ = writeln!(out, "- {k}: {}\n  evidence: {}\n  gold: {}", q.question, q.evidence, q.gold_sql);
        }
    }
    out.push_str("\nRevise the package to keep what works and fix what fails. Send the complete package.");
    out
}

/// Refines a freshly evolved package against up to `k` past iterations, most
/// recent first. `history` must already be ordered most recent first. A
/// failed refinement keeps the package from before that round and ends the
/// loop.
pub fn deep_focus(
    mut pkg: AgentPackage,
    ctx: &EvolutionContext,
    session: &mut dyn EvolutionSession,
    history: &[FocusIteration],
    k: usize,
    eval: &mut dyn FnMut(&AgentPackage, &FocusIteration) -> Result<BTreeMap<QuestionKey, bool>>,
) -> Result<(AgentPackage, Vec<FocusRound>)> {
    let mut rounds = Vec::new();
    for (r, focus) in history.iter().take(k).enumerate() {
        let results = match eval(&pkg, focus) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(agent = %pkg.id, error = %e, "deep focus evaluation failed");
                break;
            }
        };
        let accuracy = Accuracy {
            correct: results.values().filter(|v| **v).count() as u64,
            total: results.len() as u64,
        };
        let (correct, incorrect) = uniqueness_sets(&results, &focus.roster_results);
        let feedback = focus_feedback(r + 1, focus, accuracy, &correct, &incorrect);
        let mut round = FocusRound {
            iteration: focus.iteration,
            accuracy,
            uniquely_correct: correct,
            uniquely_incorrect: incorrect,
            refined: false,
            error: None,
        };
        let outcome = session.refine(ctx, &feedback).map_err(|e| vec![e.to_string()]).and_then(|reply| {
            let staging = staging_dir(&pkg.root_dir);
            let res = materialize(&reply, &staging, pkg.iteration_created, &pkg.lineage);
            if res.is_err() {
                let _ = clear_dir(&staging);
            }
            res.map(|(p, reasoning)| (p, reasoning, staging))
        });
        match outcome {
            Ok((_, reasoning, staging)) => {
                let dir = pkg.root_dir.clone();
                let previous = fs::read_to_string(dir.join(REASONING_FILE)).unwrap_or_default();
                clear_dir(&dir)?;
                fs::rename(&staging, &dir).at(&dir)?;
                let mut combined = previous.trim_end().to_string();
                let _ = write!(combined, "\n\n## Deep Focus round {}\n\n{}", r + 1, reasoning.trim());
                write_reasoning(&dir, &combined)?;
                pkg = load_package(&dir)?;
                round.refined = true;
                rounds.push(round);
            }
            Err(problems) => {
                round.error = Some(problems.join("; "));
                rounds.push(round);
                break;
            }
        }
    }
    Ok((pkg, rounds))
}

fn staging_dir(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.refine"))
}

/// Question keys mentioned anywhere in the context, for hygiene checks.
pub fn referenced_questions(ctx: &EvolutionContext) -> BTreeSet<String> {
    let text = ctx.render();
    let re = regex::Regex::new(r"(?m)^### ([^\s:#]+#\d+):").expect("static regex");
    re.captures_iter(&text).map(|c| c[1].to_string()).collect()
}
