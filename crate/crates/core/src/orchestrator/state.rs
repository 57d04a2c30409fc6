use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::elo::{decompose_and_update, MatchRecord, Rating};
use crate::error::{Error, IoContext, Result};
use crate::eval::{Accuracy, QuestionKey};
use crate::evolution::{FocusRound, IterationSummary};
use crate::registry::RegistrySnapshot;
use crate::scheduler::Mode;

pub const STATE_SCHEMA_VERSION: u32 = 1;
pub const STATE_FILE: &str = "run_state.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationSeeds {
    pub sampling: u64,
    pub mode: u64,
    pub selection: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected_first_draft: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deep_focus: Vec<FocusRound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub seeds: IterationSeeds,
    /// Mode drawn by the selection protocol; absent for the first iteration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drawn_mode: Option<Mode>,
    /// Mode actually run (a failed evolution runs as `none`).
    pub mode: Mode,
    pub databases: Vec<String>,
    pub questions: Vec<QuestionKey>,
    pub competitors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evolution: Option<EvolutionRecord>,
    pub accuracies: Vec<(String, Accuracy)>,
    pub matches: Vec<MatchRecord>,
    pub winners: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<QuestionKey>,
    /// Artifact directory relative to the output directory.
    pub artifacts: String,
}

impl IterationRecord {
    pub fn summary(&self) -> IterationSummary {
        IterationSummary {
            iteration: self.iteration,
            mode: self.mode,
            databases: self.databases.clone(),
            accuracies: self.accuracies.clone(),
            winners: self.winners.clone(),
            new_agent: self.evolution.as_ref().and_then(|e| e.agent_id.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub schema_version: u32,
    pub config: RunConfig,
    pub registry: RegistrySnapshot,
    pub iterations: Vec<IterationRecord>,
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).at(dir)?;
    tmp.write_all(bytes).at(path)?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    Ok(serde_json::from_str(&text)?)
}

impl RunState {
    pub fn load(output_dir: &Path) -> Result<Self> {
        let path = output_dir.join(STATE_FILE);
        if !path.is_file() {
            return Err(Error::NotFound(format!("no run state at {}", path.display())));
        }
        let value: serde_json::Value = read_json(&path)?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as u32;
        if found != STATE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found,
                expected: STATE_SCHEMA_VERSION,
            });
        }
        let mut state: RunState = serde_json::from_value(value)?;
        state.config.output_dir = output_dir.to_path_buf();
        Ok(state)
    }

    pub fn save(&self, output_dir: &Path) -> Result<()> {
        write_json(&output_dir.join(STATE_FILE), self)
    }

    pub fn completed(&self) -> u32 {
        self.iterations.last().map_or(0, |r| r.iteration)
    }

    pub fn summaries(&self) -> Vec<IterationSummary> {
        self.iterations.iter().map(IterationRecord::summary).collect()
    }
}

/// Recomputes every rating from the persisted accuracies alone.
pub fn replay_ratings(state: &RunState) -> Result<BTreeMap<String, Rating>> {
    let mut ratings: BTreeMap<String, Rating> = state
        .registry
        .agents
        .iter()
        .map(|a| (a.record.agent_id.clone(), Rating::default()))
        .collect();
    for record in &state.iterations {
        let acc: Vec<(String, f64)> = record
            .accuracies
            .iter()
            .map(|(id, a)| (id.clone(), a.value()))
            .collect();
        decompose_and_update(&mut ratings, record.iteration, &acc)?;
    }
    Ok(ratings)
}
