#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sqlevo_core::orchestrator::RunConfig;
use sqlevo_core::scheduler::load_question_pool;
use sqlevo_core::toy::{toy_evolution_fixture, toy_generation_fixture, write_toy_dataset};

pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub gen_fixture: PathBuf,
    pub evo_fixture: PathBuf,
}

impl Workspace {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        write_toy_dataset(&data).unwrap();
        let pool = load_question_pool(&data).unwrap();
        let gen_fixture = dir.path().join("generation.json");
        std::fs::write(&gen_fixture, serde_json::to_string_pretty(&toy_generation_fixture(&pool)).unwrap()).unwrap();
        let evo_fixture = dir.path().join("evolution.json");
        std::fs::write(&evo_fixture, serde_json::to_string_pretty(&toy_evolution_fixture()).unwrap()).unwrap();
        Self {
            dir,
            data,
            gen_fixture,
            evo_fixture,
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Scripted generation and evolution.
    pub fn config(&self, out: &str, iterations: u32, seed: u64) -> RunConfig {
        let mut c = RunConfig::new(&self.data, self.out(out), iterations);
        c.run_seed = seed;
        c.gen_backend = format!("scripted:{}", self.gen_fixture.display());
        c.evo_backend = format!("scripted:{}", self.evo_fixture.display());
        c.workers = 2;
        c.tool_timeout_secs = 30;
        c
    }
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

use std::sync::atomic::{AtomicUsize, Ordering};

use sqlevo_core::generation::{GenerationBackend, Message, Verdict, VerificationTranscript};

/// Counts backend calls.
pub struct Counting<B> {
    pub inner: B,
    pub calls: AtomicUsize,
}

impl<B> Counting<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: GenerationBackend> GenerationBackend for Counting<B> {
    fn complete(&self, system: &str, conversation: &[Message], temperature: f64) -> sqlevo_core::Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(system, conversation, temperature)
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

/// Checks a transcript against the schedule: a prefix of (0.0, 0.2, 0.3),
/// then at most one retry at 0.3 that is the last attempt.
pub fn schedule_violation(t: &VerificationTranscript) -> Option<String> {
    let schedule = [0.0, 0.2, 0.3];
    let retries = t.attempts.iter().filter(|a| a.verdict == Verdict::ErrorRetry).count();
    if retries > 1 {
        return Some(format!("{retries} retries"));
    }
    let main: Vec<f64> = t
        .attempts
        .iter()
        .filter(|a| a.verdict != Verdict::ErrorRetry)
        .map(|a| a.temperature)
        .collect();
    if main.len() > schedule.len() || main[..] != schedule[..main.len()] {
        return Some(format!("main temperatures {main:?}"));
    }
    if retries == 1 {
        let last = t.attempts.last().unwrap();
        if last.verdict != Verdict::ErrorRetry || last.temperature != 0.3 {
            return Some("retry is not the final 0.3 attempt".into());
        }
    }
    None
}

use rand::seq::SliceRandom;
use rand::Rng;

/// A literal in a generated row, kept as source values so the oracle never
/// touches the crate's cell type.
#[derive(Debug, Clone, PartialEq)]
pub enum Lit {
    Null,
    Int(i64),
    Real(f64),
    Text(&'static str),
}

impl Lit {
    fn sql(&self) -> String {
        match self {
            Lit::Null => "NULL".into(),
            Lit::Int(i) => i.to_string(),
            Lit::Real(r) => format!("{r:?}"),
            Lit::Text(t) => format!("'{t}'"),
        }
    }

    /// Equality key with Python semantics: 2 == 2.0, text is exact.
    fn key(&self) -> String {
        match self {
            Lit::Null => "null".into(),
            Lit::Int(i) => format!("num:{i}"),
            Lit::Real(r) if r.fract() == 0.0 => format!("num:{}", *r as i64),
            Lit::Real(r) => format!("real:{}", r.to_bits()),
            Lit::Text(t) => format!("text:{t}"),
        }
    }
}

pub type Rows = Vec<Vec<Lit>>;

fn random_lit<R: Rng>(rng: &mut R) -> Lit {
    match rng.gen_range(0..4) {
        0 => Lit::Null,
        1 => Lit::Int(rng.gen_range(-2..4)),
        2 => Lit::Real(*[0.5, 2.0, -1.0, 1e-3].choose(rng).unwrap()),
        _ => Lit::Text(["a", "b", "A", "", "2"].choose(rng).unwrap()),
    }
}

fn random_rows<R: Rng>(rng: &mut R, arity: usize, max_rows: usize) -> Rows {
    let n = rng.gen_range(0..=max_rows);
    (0..n).map(|_| (0..arity).map(|_| random_lit(rng)).collect()).collect()
}

/// A gold row set and a prediction derived from it in one of several ways.
pub fn random_pair<R: Rng>(rng: &mut R) -> ((Rows, usize), (Rows, usize)) {
    let arity = rng.gen_range(1..=3);
    let gold = random_rows(rng, arity, 6);
    let mut pred = gold.clone();
    let mut pred_arity = arity;
    match rng.gen_range(0..7) {
        0 => {}
        1 => {
            if let Some(r) = gold.choose(rng) {
                pred.push(r.clone());
                pred.push(r.clone());
            }
        }
        2 => {
            if !pred.is_empty() {
                let i = rng.gen_range(0..pred.len());
                let j = rng.gen_range(0..arity);
                pred[i][j] = random_lit(rng);
            }
        }
        3 => {
            pred_arity = if arity > 1 && rng.gen_bool(0.5) { arity - 1 } else { arity + 1 };
            for row in &mut pred {
                if pred_arity < arity {
                    row.pop();
                } else {
                    row.push(random_lit(rng));
                }
            }
        }
        4 => {
            for row in &mut pred {
                for v in row.iter_mut() {
                    if let Lit::Int(i) = v {
                        *v = Lit::Real(*i as f64);
                    }
                }
            }
        }
        5 => pred.clear(),
        _ => pred = random_rows(rng, arity, 6),
    }
    pred.shuffle(rng);
    ((gold, arity), (pred, pred_arity))
}

/// A query producing exactly `rows` with `arity` columns.
pub fn values_sql(rows: &Rows, arity: usize) -> String {
    if rows.is_empty() {
        let cols: Vec<String> = (0..arity).map(|i| i.to_string()).collect();
        return format!("SELECT * FROM (VALUES ({})) WHERE 0", cols.join(", "));
    }
    let tuples: Vec<String> = rows
        .iter()
        .map(|r| format!("({})", r.iter().map(Lit::sql).collect::<Vec<_>>().join(", ")))
        .collect();
    format!("SELECT * FROM (VALUES {})", tuples.join(", "))
}

/// Set equality over canonical tuples, the way BIRD's scorer compares
/// `set(fetchall())`.
pub fn oracle_equal(a: &Rows, b: &Rows) -> bool {
    use std::collections::BTreeSet;
    let canon = |rows: &Rows| -> BTreeSet<Vec<String>> { rows.iter().map(|r| r.iter().map(Lit::key).collect()).collect() };
    canon(a) == canon(b)
}
