//! SQL execution, set-based result comparison, per-agent accuracy and the
//! per-iteration error-analysis report.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, ErrorCode, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{assemble_prompt, generate_with_verification, GenerationBackend, VerificationTranscript};
use crate::scheduler::{QuestionItem, QuestionPool};

pub const DEFAULT_QUERY_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_ROW_CAP: usize = 100_000;
/// Rows shown per side for a failed question in the report.
pub const REPORT_PREVIEW_ROWS: usize = 5;

/// A canonical result cell. Reals with an integral value are stored as
/// integers so `1.0` and `1` compare equal.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    pub fn real(v: f64) -> Cell {
        // i64::MAX as f64 rounds up to 2^63, hence the strict upper bound.
        if v.fract() == 0.0 && v >= -9.223_372_036_854_775_808e18 && v < 9.223_372_036_854_775_808e18 {
            Cell::Integer(v as i64)
        } else {
            Cell::Real(v)
        }
    }

    fn from_value(v: ValueRef<'_>) -> Cell {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Integer(i),
            ValueRef::Real(r) => Cell::real(r),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Cell::Null => 0,
            Cell::Integer(_) => 1,
            Cell::Real(_) => 2,
            Cell::Text(_) => 3,
            Cell::Blob(_) => 4,
        }
    }
}

impl PartialEq for Cell {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cell {}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cell {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Cell::Integer(a), Cell::Integer(b)) => a.cmp(b),
            (Cell::Real(a), Cell::Real(b)) => a.total_cmp(b),
            (Cell::Text(a), Cell::Text(b)) => a.cmp(b),
            (Cell::Blob(a), Cell::Blob(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl Hash for Cell {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match self {
            Cell::Null => {}
            Cell::Integer(i) => i.hash(state),
            Cell::Real(r) => r.to_bits().hash(state),
            Cell::Text(t) => t.hash(state),
            Cell::Blob(b) => b.hash(state),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => f.write_str("NULL"),
            Cell::Integer(i) => write!(f, "{i}"),
            Cell::Real(r) => write!(f, "{r}"),
            Cell::Text(t) => write!(f, "'{t}'"),
            Cell::Blob(b) => {
                f.write_str("x'")?;
                for byte in b {
                    write!(f, "{byte:02x}")?;
                }
                f.write_str("'")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    /// Set when the row cap cut the result short.
    pub truncated: bool,
}

impl ResultTable {
    pub fn row_count(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecErrorKind {
    Syntax,
    Runtime,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecError {
    pub kind: ExecErrorKind,
    pub message: String,
}

impl fmt::Display for ExecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ExecErrorKind::Syntax => "syntax error",
            ExecErrorKind::Runtime => "runtime error",
            ExecErrorKind::Timeout => "timeout",
        };
        write!(f, "{kind}: {}", self.message)
    }
}

impl std::error::Error for ExecError {}

fn classify(e: rusqlite::Error) -> ExecError {
    let message = e.to_string();
    let kind = match &e {
        rusqlite::Error::SqliteFailure(f, _) if f.code == ErrorCode::OperationInterrupted => {
            ExecErrorKind::Timeout
        }
        rusqlite::Error::MultipleStatement => ExecErrorKind::Syntax,
        _ if message.contains("syntax error")
            || message.contains("incomplete input")
            || message.contains("unrecognized token") =>
        {
            ExecErrorKind::Syntax
        }
        _ => ExecErrorKind::Runtime,
    };
    ExecError { kind, message }
}

/// Runs one query on a read-only connection, materializing at most
/// `row_cap` rows.
pub fn execute_sql_capped(
    db_path: &Path,
    sql: &str,
    timeout: Duration,
    row_cap: usize,
) -> std::result::Result<ResultTable, ExecError> {
    if sql.trim().is_empty() {
        return Err(ExecError {
            kind: ExecErrorKind::Syntax,
            message: "empty query".into(),
        });
    }
    let conn = Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|e| ExecError {
        kind: ExecErrorKind::Runtime,
        message: format!("cannot open {}: {e}", db_path.display()),
    })?;
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1_000, Some(move || Instant::now() >= deadline))
        .map_err(classify)?;

    let mut stmt = conn.prepare(sql).map_err(classify)?;
    let columns: Vec<String> = stmt.column_names().into_iter().map(String::from).collect();
    let width = columns.len();
    let mut rows = Vec::new();
    let mut truncated = false;
    let mut cursor = stmt.query([]).map_err(classify)?;
    while let Some(row) = cursor.next().map_err(classify)? {
        if rows.len() == row_cap {
            truncated = true;
            break;
        }
        let mut cells = Vec::with_capacity(width);
        for i in 0..width {
            cells.push(Cell::from_value(row.get_ref(i).map_err(classify)?));
        }
        rows.push(cells);
    }
    Ok(ResultTable {
        columns,
        rows,
        truncated,
    })
}

pub fn execute_sql(db_path: &Path, sql: &str, timeout: Duration) -> std::result::Result<ResultTable, ExecError> {
    execute_sql_capped(db_path, sql, timeout, DEFAULT_ROW_CAP)
}

/// Set equality of the row tuples. Row order and duplicates are ignored; a
/// different column count makes every tuple differ.
pub fn compare_results(pred: &ResultTable, gold: &ResultTable) -> bool {
    let p: HashSet<&Vec<Cell>> = pred.rows.iter().collect();
    let g: HashSet<&Vec<Cell>> = gold.rows.iter().collect();
    p == g
}

pub trait SqlExecutor: Send + Sync {
    fn execute(&self, db_path: &Path, sql: &str) -> std::result::Result<ResultTable, ExecError>;
}

#[derive(Debug, Clone)]
pub struct SqliteExecutor {
    pub timeout: Duration,
    pub row_cap: usize,
}

impl Default for SqliteExecutor {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_QUERY_TIMEOUT,
            row_cap: DEFAULT_ROW_CAP,
        }
    }
}

impl SqlExecutor for SqliteExecutor {
    fn execute(&self, db_path: &Path, sql: &str) -> std::result::Result<ResultTable, ExecError> {
        execute_sql_capped(db_path, sql, self.timeout, self.row_cap)
    }
}

/// Wraps an executor and counts calls per SQL text.
#[derive(Debug, Default)]
pub struct CountingExecutor<E> {
    pub inner: E,
    calls: AtomicUsize,
    log: std::sync::Mutex<BTreeMap<String, usize>>,
}

impl<E> CountingExecutor<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            log: Default::default(),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(AtomicOrdering::SeqCst)
    }

    pub fn calls_for(&self, sql: &str) -> usize {
        self.log.lock().unwrap().get(sql).copied().unwrap_or(0)
    }
}

impl<E: SqlExecutor> SqlExecutor for CountingExecutor<E> {
    fn execute(&self, db_path: &Path, sql: &str) -> std::result::Result<ResultTable, ExecError> {
        self.calls.fetch_add(1, AtomicOrdering::SeqCst);
        *self.log.lock().unwrap().entry(sql.to_string()).or_default() += 1;
        self.inner.execute(db_path, sql)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    None,
    WrongResult,
    SqlError,
    Timeout,
    EmptyVsNonempty,
    PipelineError,
}

impl FailureKind {
    pub const ALL: [FailureKind; 6] = [
        FailureKind::None,
        FailureKind::WrongResult,
        FailureKind::SqlError,
        FailureKind::Timeout,
        FailureKind::EmptyVsNonempty,
        FailureKind::PipelineError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::None => "none",
            FailureKind::WrongResult => "wrong_result",
            FailureKind::SqlError => "sql_error",
            FailureKind::Timeout => "timeout",
            FailureKind::EmptyVsNonempty => "empty_vs_nonempty",
            FailureKind::PipelineError => "pipeline_error",
        }
    }
}

/// Identifies one question across agents; also the key of its transcript.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuestionKey {
    pub db_id: String,
    pub question_id: u64,
}

impl QuestionKey {
    pub fn of(q: &QuestionItem) -> Self {
        Self {
            db_id: q.db_id.clone(),
            question_id: q.question_id,
        }
    }
}

impl fmt::Display for QuestionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.db_id, self.question_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub agent_id: String,
    pub key: QuestionKey,
    pub question: String,
    pub evidence: String,
    pub predicted_sql: Option<String>,
    pub gold_sql: String,
    #[serde(rename = "match")]
    pub matched: bool,
    pub failure_kind: FailureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicted_preview: Vec<Vec<Cell>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_preview: Vec<Vec<Cell>>,
}

/// Exact accuracy as a count ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
}

impl Accuracy {
    pub fn value(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({:.2}%)", self.correct, self.total, 100.0 * self.value())
    }
}

/// Gold results for one iteration, executed once and shared by all agents.
#[derive(Debug, Clone, Default)]
pub struct GoldCache {
    results: BTreeMap<QuestionKey, std::result::Result<ResultTable, ExecError>>,
}

impl GoldCache {
    pub fn build<'a>(
        questions: impl IntoIterator<Item = &'a QuestionItem>,
        pool: &QuestionPool,
        executor: &dyn SqlExecutor,
        workers: &rayon::ThreadPool,
    ) -> Result<Self> {
        let jobs: Vec<(QuestionKey, &Path, &str)> = questions
            .into_iter()
            .map(|q| Ok((QuestionKey::of(q), pool.db_path(&q.db_id)?, q.gold_sql.as_str())))
            .collect::<Result<_>>()?;
        let results = workers.install(|| {
            jobs.par_iter()
                .map(|(key, db, sql)| (key.clone(), executor.execute(db, sql)))
                .collect::<Vec<_>>()
        });
        for (key, r) in &results {
            if let Err(e) = r {
                tracing::warn!(question = %key, error = %e, "gold SQL failed; question excluded");
            }
        }
        Ok(Self {
            results: results.into_iter().collect(),
        })
    }

    pub fn get(&self, key: &QuestionKey) -> Option<&std::result::Result<ResultTable, ExecError>> {
        self.results.get(key)
    }

    /// Questions whose gold SQL failed, in key order.
    pub fn defective(&self) -> Vec<QuestionKey> {
        self.results
            .iter()
            .filter(|(_, r)| r.is_err())
            .map(|(k, _)| k.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub agent_id: String,
    pub key: QuestionKey,
    pub transcript: VerificationTranscript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEvaluation {
    pub agent_id: String,
    pub accuracy: Accuracy,
    pub outcomes: Vec<QuestionOutcome>,
    /// Questions left out because their gold SQL failed.
    pub excluded: Vec<QuestionKey>,
    #[serde(skip)]
    pub transcripts: Vec<TranscriptRecord>,
}

/// Shared inputs for evaluating agents within one iteration.
pub struct EvalEnv<'a> {
    pub pool: &'a QuestionPool,
    pub gold: &'a GoldCache,
    pub backend: &'a dyn GenerationBackend,
    pub executor: &'a dyn SqlExecutor,
    pub workers: &'a rayon::ThreadPool,
    pub max_rounds: u32,
}

fn preview(rows: &[Vec<Cell>]) -> Vec<Vec<Cell>> {
    rows.iter().take(REPORT_PREVIEW_ROWS).cloned().collect()
}

fn judge(
    env: &EvalEnv<'_>,
    agent_id: &str,
    q: &QuestionItem,
    gold: &ResultTable,
    transcript: &VerificationTranscript,
) -> Result<QuestionOutcome> {
    let mut outcome = QuestionOutcome {
        agent_id: agent_id.to_string(),
        key: QuestionKey::of(q),
        question: q.question.clone(),
        evidence: q.evidence.clone(),
        predicted_sql: transcript.final_sql.clone(),
        gold_sql: q.gold_sql.clone(),
        matched: false,
        failure_kind: FailureKind::PipelineError,
        error: transcript.error.clone(),
        predicted_preview: Vec::new(),
        gold_preview: preview(&gold.rows),
    };
    let Some(sql) = &transcript.final_sql else {
        return Ok(outcome);
    };
    match env.executor.execute(env.pool.db_path(&q.db_id)?, sql) {
        Err(e) => {
            outcome.failure_kind = if e.kind == ExecErrorKind::Timeout {
                FailureKind::Timeout
            } else {
                FailureKind::SqlError
            };
            outcome.error = Some(e.to_string());
        }
        Ok(pred) => {
            outcome.predicted_preview = preview(&pred.rows);
            if compare_results(&pred, gold) {
                outcome.matched = true;
                outcome.failure_kind = FailureKind::None;
                outcome.error = None;
            } else if pred.rows.is_empty() != gold.rows.is_empty() {
                outcome.failure_kind = FailureKind::EmptyVsNonempty;
            } else {
                outcome.failure_kind = FailureKind::WrongResult;
            }
        }
    }
    Ok(outcome)
}

/// Runs the generation pipeline for every question and scores the results
/// against the cached gold output. `analyses` maps database id to the
/// agent's analysis text.
pub fn evaluate_agent(
    env: &EvalEnv<'_>,
    agent_id: &str,
    instructions: &str,
    analyses: &BTreeMap<String, String>,
    questions: &[QuestionItem],
) -> Result<AgentEvaluation> {
    let mut excluded = Vec::new();
    let mut jobs = Vec::new();
    for q in questions {
        let key = QuestionKey::of(q);
        match env.gold.get(&key) {
            Some(Ok(gold)) => {
                let analysis = analyses.get(&q.db_id).ok_or_else(|| {
                    Error::InvalidArgument(format!("no analysis for database {}", q.db_id))
                })?;
                jobs.push((q, gold, analysis));
            }
            Some(Err(_)) => excluded.push(key),
            None => {
                return Err(Error::InvalidState(format!(
                    "gold result for {key} was not precomputed"
                )))
            }
        }
    }
    if jobs.is_empty() {
        return Err(Error::InvalidState(format!(
            "no question with working gold SQL for agent {agent_id}"
        )));
    }

    let results: Vec<Result<(QuestionOutcome, TranscriptRecord)>> = env.workers.install(|| {
        jobs.par_iter()
            .map(|(q, gold, analysis)| {
                let system = assemble_prompt(analysis, instructions, &q.question, &q.evidence)?;
                let transcript = generate_with_verification(
                    env.backend,
                    &system,
                    &q.question,
                    env.pool.db_path(&q.db_id)?,
                    env.executor,
                    env.max_rounds,
                );
                let outcome = judge(env, agent_id, q, gold, &transcript)?;
                Ok((
                    outcome,
                    TranscriptRecord {
                        agent_id: agent_id.to_string(),
                        key: QuestionKey::of(q),
                        transcript,
                    },
                ))
            })
            .collect()
    });

    let mut outcomes = Vec::with_capacity(results.len());
    let mut transcripts = Vec::with_capacity(results.len());
    for r in results {
        let (o, t) = r?;
        outcomes.push(o);
        transcripts.push(t);
    }
    let correct = outcomes.iter().filter(|o| o.matched).count() as u64;
    Ok(AgentEvaluation {
        agent_id: agent_id.to_string(),
        accuracy: Accuracy {
            correct,
            total: outcomes.len() as u64,
        },
        outcomes,
        excluded,
        transcripts,
    })
}

fn render_rows(out: &mut String, label: &str, rows: &[Vec<Cell>]) {
    let _ = writeln!(out, "{label}:");
    if rows.is_empty() {
        out.push_str("  (no rows)\n");
    }
    for row in rows {
        let cells: Vec<String> = row.iter().map(Cell::to_string).collect();
        let _ = writeln!(out, "  ({})", cells.join(", "));
    }
}

fn fenced(out: &mut String, label: &str, sql: Option<&str>) {
    let _ = writeln!(out, "{label}:");
    out.push_str("```sql\n");
    out.push_str(sql.unwrap_or("(none)").trim_end());
    out.push_str("\n```\n");
}

/// Markdown error report for one iteration. Agents appear in the given order.
pub fn write_error_analysis(iteration: u32, evaluations: &[AgentEvaluation]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Error Analysis: Iteration {iteration}\n");
    let excluded: BTreeSet<&QuestionKey> = evaluations.iter().flat_map(|e| &e.excluded).collect();
    if !excluded.is_empty() {
        out.push_str("Questions excluded because their gold SQL failed: ");
        let keys: Vec<String> = excluded.iter().map(|k| k.to_string()).collect();
        out.push_str(&keys.join(", "));
        out.push_str("\n\n");
    }

    for eval in evaluations {
        let _ = writeln!(out, "## Agent {}\n", eval.agent_id);
        let _ = writeln!(out, "Accuracy: {}\n", eval.accuracy);
        let failures: Vec<&QuestionOutcome> = eval.outcomes.iter().filter(|o| !o.matched).collect();
        if failures.is_empty() {
            out.push_str("No errors.\n\n");
            continue;
        }
        out.push_str("| Failure kind | Count |\n|---|---|\n");
        for kind in FailureKind::ALL.iter().skip(1) {
            let n = failures.iter().filter(|o| o.failure_kind == *kind).count();
            if n > 0 {
                let _ = writeln!(out, "| {} | {n} |", kind.as_str());
            }
        }
        out.push('\n');
        for o in failures {
            let _ = writeln!(out, "### {}: {}\n", o.key, o.question);
            let evidence = if o.evidence.trim().is_empty() { "(none)" } else { o.evidence.as_str() };
            let _ = writeln!(out, "Evidence: {evidence}\n");
            let _ = writeln!(out, "Failure: {}", o.failure_kind.as_str());
            if let Some(e) = &o.error {
                let _ = writeln!(out, "Error: {e}");
            }
            out.push('\n');
            fenced(&mut out, "Predicted SQL", o.predicted_sql.as_deref());
            fenced(&mut out, "Gold SQL", Some(&o.gold_sql));
            render_rows(&mut out, "Predicted rows", &o.predicted_preview);
            render_rows(&mut out, "Gold rows", &o.gold_preview);
            out.push('\n');
        }
    }

    out.push_str("## Cross-agent comparison\n\n");
    let mut solved: BTreeMap<&QuestionKey, (Vec<&str>, usize, &str)> = BTreeMap::new();
    for eval in evaluations {
        for o in &eval.outcomes {
            let entry = solved.entry(&o.key).or_insert((Vec::new(), 0, o.question.as_str()));
            entry.1 += 1;
            if o.matched {
                entry.0.push(&eval.agent_id);
            }
        }
    }
    let n = evaluations.len();
    out.push_str("### Missed by every agent\n\n");
    let missed: Vec<_> = solved
        .iter()
        .filter(|(_, (who, seen, _))| who.is_empty() && *seen == n)
        .collect();
    if missed.is_empty() {
        out.push_str("none\n");
    }
    for (key, (_, _, question)) in missed {
        let _ = writeln!(out, "- {key}: {question}");
    }
    out.push_str("\n### Solved by exactly one agent\n\n");
    let unique: Vec<_> = solved.iter().filter(|(_, (who, _, _))| who.len() == 1).collect();
    if unique.is_empty() || n < 2 {
        out.push_str("none\n");
    } else {
        for (key, (who, _, question)) in unique {
            let _ = writeln!(out, "- {key} ({}): {question}", who[0]);
        }
    }
    out
}
