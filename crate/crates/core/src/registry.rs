//! Agent packages on disk and the competition bookkeeping kept for each one.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::elo::{Rating, RatingStore};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "agent.md";
pub const INSTRUCTIONS_FILE: &str = "eval_instructions.md";
pub const TOOLS_DIR: &str = "tools";
pub const TOOL_OUTPUT_DIR: &str = "tool_output";

const DELIMITER: &str = "---";
const KNOWN_KEYS: [&str; 7] = [
    "name",
    "description",
    "execution_mode",
    "tool_command",
    "tool_output_file",
    "created_iteration",
    "parents",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    ToolOnly,
    FallbackNaive,
}

impl ExecutionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionMode::ToolOnly => "tool_only",
            ExecutionMode::FallbackNaive => "fallback_naive",
        }
    }
}

impl std::str::FromStr for ExecutionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tool_only" => Ok(ExecutionMode::ToolOnly),
            "fallback_naive" => Ok(ExecutionMode::FallbackNaive),
            other => Err(Error::Validation(format!("unknown execution_mode '{other}'"))),
        }
    }
}

/// The unit of evolution: an analysis tool command plus SQL-generation instructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPackage {
    pub id: String,
    pub name: String,
    pub description: String,
    pub iteration_created: u32,
    pub root_dir: PathBuf,
    pub execution_mode: ExecutionMode,
    pub tool_command: String,
    pub tool_output_file: String,
    pub eval_instructions: String,
    pub lineage: Vec<String>,
    /// Manifest keys this crate does not interpret, in file order.
    pub metadata: IndexMap<String, String>,
    /// Manifest text after the closing delimiter.
    pub body: String,
}

/// Agent ids carry the creation iteration so evolved names never collide.
pub fn agent_id(name: &str, iteration: u32) -> String {
    let prefix = format!("iter{iteration}_");
    if iteration == 0 || name.starts_with(&prefix) {
        name.to_string()
    } else {
        format!("{prefix}{name}")
    }
}

impl AgentPackage {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Validation("manifest name is empty".into()));
        }
        if self.execution_mode == ExecutionMode::ToolOnly {
            if self.tool_command.trim().is_empty() {
                return Err(Error::Validation(
                    "tool_command is required when execution_mode is tool_only".into(),
                ));
            }
            if self.tool_output_file.trim().is_empty() {
                return Err(Error::Validation(
                    "tool_output_file is required when execution_mode is tool_only".into(),
                ));
            }
            let out = Path::new(&self.tool_output_file);
            if out.is_absolute() || out.components().any(|c| c == std::path::Component::ParentDir) {
                return Err(Error::Validation(format!(
                    "tool_output_file must stay inside the package: {}",
                    self.tool_output_file
                )));
            }
        }
        if self.eval_instructions.trim().is_empty() {
            return Err(Error::Validation("eval instructions are empty".into()));
        }
        Ok(())
    }

    /// Renders the manifest file text.
    pub fn manifest_text(&self) -> String {
        let mut out = String::from("---\n");
        let mut line = |k: &str, v: &str| {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(v);
            out.push('\n');
        };
        line("name", &self.name);
        line("description", &self.description);
        line("execution_mode", self.execution_mode.as_str());
        if !self.tool_command.is_empty() {
            line("tool_command", &self.tool_command);
        }
        if !self.tool_output_file.is_empty() {
            line("tool_output_file", &self.tool_output_file);
        }
        if self.iteration_created > 0 {
            line("created_iteration", &self.iteration_created.to_string());
        }
        if !self.lineage.is_empty() {
            line("parents", &self.lineage.join(", "));
        }
        for (k, v) in &self.metadata {
            line(k, v);
        }
        out.push_str("---\n");
        out.push_str(&self.body);
        out
    }
}

struct Frontmatter {
    fields: IndexMap<String, String>,
    body: String,
}

fn parse_frontmatter(path: &Path, text: &str) -> Result<Frontmatter> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.split_inclusive('\n');
    match lines.next() {
        Some(first) if first.trim_end_matches(['\r', '\n']) == DELIMITER => {}
        _ => return Err(parse_err(1, "manifest must start with '---'".into())),
    }
    let mut fields = IndexMap::new();
    let mut consumed = DELIMITER.len() + 1;
    let mut line_no = 1;
    for raw in lines {
        line_no += 1;
        consumed += raw.len();
        let line = raw.trim_end_matches(['\r', '\n']);
        if line == DELIMITER {
            let body = text.get(consumed..).unwrap_or_default().to_string();
            return Ok(Frontmatter { fields, body });
        }
        if line.trim().is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(parse_err(line_no, format!("expected 'key: value', got '{line}'")));
        };
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(parse_err(line_no, format!("empty key in '{line}'")));
        }
        if fields.contains_key(&key) {
            return Err(parse_err(line_no, format!("duplicate key '{key}'")));
        }
        fields.insert(key, value.trim().to_string());
    }
    Err(parse_err(line_no, "frontmatter has no closing '---'".into()))
}

/// Reads an agent package directory.
pub fn load_package(dir: &Path) -> Result<AgentPackage> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::NotFound(format!(
            "agent manifest {}",
            manifest_path.display()
        )));
    }
    let text = fs::read_to_string(&manifest_path).at(&manifest_path)?;
    let Frontmatter { mut fields, body } = parse_frontmatter(&manifest_path, &text)?;

    let instructions_path = dir.join(INSTRUCTIONS_FILE);
    if !instructions_path.is_file() {
        return Err(Error::NotFound(format!(
            "eval instructions {}",
            instructions_path.display()
        )));
    }
    let eval_instructions = fs::read_to_string(&instructions_path).at(&instructions_path)?;

    let name = fields
        .get("name")
        .cloned()
        .ok_or_else(|| Error::Validation(format!("{}: missing 'name'", manifest_path.display())))?;
    let execution_mode = fields
        .get("execution_mode")
        .map(|m| m.parse())
        .transpose()?
        .unwrap_or(ExecutionMode::ToolOnly);
    let iteration_created = match fields.get("created_iteration") {
        Some(v) => v.parse().map_err(|_| {
            Error::Validation(format!("created_iteration is not an integer: '{v}'"))
        })?,
        None => 0,
    };
    let lineage = fields
        .get("parents")
        .map(|p| {
            p.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        })
        .unwrap_or_default();
    let get = |k: &str| fields.get(k).cloned().unwrap_or_default();

    let pkg = AgentPackage {
        id: agent_id(&name, iteration_created),
        description: get("description"),
        tool_command: get("tool_command"),
        tool_output_file: get("tool_output_file"),
        name,
        iteration_created,
        root_dir: dir.to_path_buf(),
        execution_mode,
        eval_instructions,
        lineage,
        metadata: {
            fields.retain(|k, _| !KNOWN_KEYS.contains(&k.as_str()));
            fields
        },
        body,
    };
    pkg.validate()?;
    Ok(pkg)
}

/// Writes the manifest and instructions of `pkg` into `dir`. Tool files are
/// written by whoever produced them.
pub fn write_package(pkg: &AgentPackage, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, pkg.manifest_text()).at(&manifest)?;
    let instructions = dir.join(INSTRUCTIONS_FILE);
    fs::write(&instructions, &pkg.eval_instructions).at(&instructions)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: String,
    pub rating: Rating,
    /// Iterations this agent competed in.
    pub tests: u32,
    pub iteration_wins: u32,
    pub pending_winner: bool,
}

impl AgentRecord {
    fn new(agent_id: String) -> Self {
        Self {
            agent_id,
            rating: Rating::default(),
            tests: 0,
            iteration_wins: 0,
            pending_winner: false,
        }
    }
}

/// Ordering used wherever agents are ranked: rating descending, then fewest
/// tests, then id.
pub fn rank_order(a: &AgentRecord, b: &AgentRecord) -> Ordering {
    b.rating
        .value
        .total_cmp(&a.rating.value)
        .then(a.tests.cmp(&b.tests))
        .then_with(|| a.agent_id.cmp(&b.agent_id))
}

#[derive(Debug, Clone)]
struct Entry {
    package: AgentPackage,
    record: AgentRecord,
}

/// The agent population.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: BTreeMap<String, Entry>,
}

/// Serializable registry state; package directories are stored relative to
/// a base directory so snapshots are location independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrySnapshot {
    pub agents: Vec<SnapshotEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub record: AgentRecord,
    pub package_dir: PathBuf,
    pub iteration_created: u32,
    pub lineage: Vec<String>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn register(&mut self, pkg: AgentPackage) -> Result<AgentRecord> {
        if self.entries.contains_key(&pkg.id) {
            return Err(Error::Conflict(format!("agent {} already registered", pkg.id)));
        }
        let record = AgentRecord::new(pkg.id.clone());
        self.entries.insert(
            pkg.id.clone(),
            Entry {
                package: pkg,
                record: record.clone(),
            },
        );
        Ok(record)
    }

    pub fn package(&self, id: &str) -> Option<&AgentPackage> {
        self.entries.get(id).map(|e| &e.package)
    }

    pub fn record(&self, id: &str) -> Option<&AgentRecord> {
        self.entries.get(id).map(|e| &e.record)
    }

    #[cfg(test)]
    pub(crate) fn record_mut(&mut self, id: &str) -> Option<&mut AgentRecord> {
        self.entries.get_mut(id).map(|e| &mut e.record)
    }

    pub fn records(&self) -> impl Iterator<Item = &AgentRecord> {
        self.entries.values().map(|e| &e.record)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn pending_winners(&self) -> Vec<String> {
        let mut pending: Vec<&AgentRecord> =
            self.records().filter(|r| r.pending_winner).collect();
        pending.sort_by(|a, b| rank_order(a, b));
        pending.into_iter().map(|r| r.agent_id.clone()).collect()
    }

    /// All records in ranking order.
    pub fn ranked(&self) -> Vec<&AgentRecord> {
        let mut all: Vec<&AgentRecord> = self.records().collect();
        all.sort_by(|a, b| rank_order(a, b));
        all
    }

    pub fn top_by_elo(&self, n: usize, exclude: &BTreeSet<String>) -> Vec<String> {
        self.ranked()
            .into_iter()
            .filter(|r| !exclude.contains(&r.agent_id))
            .take(n)
            .map(|r| r.agent_id.clone())
            .collect()
    }

    pub fn record_iteration_outcome(
        &mut self,
        competitors: &[String],
        winners: &BTreeSet<String>,
    ) -> Result<()> {
        if winners.is_empty() {
            return Err(Error::InvalidArgument(
                "a scored iteration has at least one winner".into(),
            ));
        }
        for w in winners {
            if !competitors.contains(w) {
                return Err(Error::InvalidArgument(format!(
                    "winner {w} is not among the competitors"
                )));
            }
        }
        for c in competitors {
            if !self.entries.contains_key(c) {
                return Err(Error::NotFound(format!("agent {c} is not registered")));
            }
        }
        for entry in self.entries.values_mut() {
            let r = &mut entry.record;
            r.pending_winner = winners.contains(&r.agent_id);
            if competitors.contains(&r.agent_id) {
                r.tests += 1;
            }
            if r.pending_winner {
                r.iteration_wins += 1;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, base: &Path) -> RegistrySnapshot {
        RegistrySnapshot {
            agents: self
                .entries
                .values()
                .map(|e| SnapshotEntry {
                    record: e.record.clone(),
                    package_dir: e
                        .package
                        .root_dir
                        .strip_prefix(base)
                        .map(Path::to_path_buf)
                        .unwrap_or_else(|_| e.package.root_dir.clone()),
                    iteration_created: e.package.iteration_created,
                    lineage: e.package.lineage.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a registry by reloading every package from disk.
    pub fn restore(snapshot: &RegistrySnapshot, base: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for s in &snapshot.agents {
            let mut package = load_package(&base.join(&s.package_dir))?;
            package.id = s.record.agent_id.clone();
            package.iteration_created = s.iteration_created;
            package.lineage = s.lineage.clone();
            entries.insert(
                s.record.agent_id.clone(),
                Entry {
                    package,
                    record: s.record.clone(),
                },
            );
        }
        Ok(Self { entries })
    }
}

impl RatingStore for Registry {
    fn rating_mut(&mut self, id: &str) -> Option<&mut Rating> {
        self.entries.get_mut(id).map(|e| &mut e.record.rating)
    }
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
