use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analyzer::DEFAULT_TOKEN_BUDGET;
use crate::chat::ChatClient;
use crate::error::{Error, IoContext, Result};
use crate::evolution::{ChatEvolution, EvolutionBackend, ScriptedEvolution, DEFAULT_DEEP_FOCUS_K};
use crate::generation::{ChatBackend, GenerationBackend, OracleBackend, ScriptedBackend, DEFAULT_MAX_ROUNDS};
use crate::scheduler::{QuestionPool, DEFAULT_LATE_STAGE_START};

/// USD per million tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceTable {
    #[serde(default)]
    pub prompt_per_million: f64,
    #[serde(default)]
    pub completion_per_million: f64,
}

fn default_gen_backend() -> String {
    "oracle".into()
}
fn default_evo_backend() -> String {
    "none".into()
}
fn default_workers() -> usize {
    4
}
fn default_token_budget() -> usize {
    DEFAULT_TOKEN_BUDGET
}
fn default_tool_timeout() -> u64 {
    300
}
fn default_query_timeout() -> u64 {
    30
}
fn default_deep_focus_k() -> usize {
    DEFAULT_DEEP_FOCUS_K
}
fn default_late_stage_start() -> u32 {
    DEFAULT_LATE_STAGE_START
}
fn default_max_rounds() -> u32 {
    DEFAULT_MAX_ROUNDS
}

/// Run settings, read from TOML. `output_dir` is not part of the persisted
/// state so a run directory can be moved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: PathBuf,
    #[serde(default, skip_serializing)]
    pub output_dir: PathBuf,
    pub iterations: u32,
    #[serde(default)]
    pub run_seed: u64,
    /// Strategy text file; the bundled cross-pollination strategy when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<PathBuf>,
    /// `oracle`, `oracle:<noise>`, `scripted:<fixture.json>` or `chat:<model>@<base_url>`.
    #[serde(default = "default_gen_backend")]
    pub gen_backend: String,
    /// `none`, `scripted:<fixture.json>` or `chat:<model>@<base_url>`.
    #[serde(default = "default_evo_backend")]
    pub evo_backend: String,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Analysis text beyond this many estimated tokens is cut off.
    #[serde(default = "default_token_budget")]
    pub token_budget: usize,
    #[serde(default = "default_tool_timeout")]
    pub tool_timeout_secs: u64,
    #[serde(default = "default_query_timeout")]
    pub query_timeout_secs: u64,
    #[serde(default = "default_deep_focus_k")]
    pub deep_focus_k: usize,
    #[serde(default = "default_late_stage_start")]
    pub late_stage_start: u32,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    /// Package directories of the initial population; the bundled baseline
    /// when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub initial_agents: Vec<PathBuf>,
    #[serde(default)]
    pub prices: PriceTable,
}

impl RunConfig {
    pub fn new(data_root: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, iterations: u32) -> Self {
        Self {
            data_root: data_root.into(),
            output_dir: output_dir.into(),
            iterations,
            run_seed: 0,
            strategy: None,
            gen_backend: default_gen_backend(),
            evo_backend: default_evo_backend(),
            workers: default_workers(),
            token_budget: default_token_budget(),
            tool_timeout_secs: default_tool_timeout(),
            query_timeout_secs: default_query_timeout(),
            deep_focus_k: default_deep_focus_k(),
            late_stage_start: default_late_stage_start(),
            max_rounds: default_max_rounds(),
            initial_agents: Vec::new(),
            prices: PriceTable::default(),
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Validation("iterations must be at least 1".into()));
        }
        if self.late_stage_start < 2 {
            return Err(Error::Validation("late_stage_start must be at least 2".into()));
        }
        if self.workers == 0 {
            return Err(Error::Validation("workers must be at least 1".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Validation("output_dir is required".into()));
        }
        Ok(())
    }
}

pub fn generation_backend(spec: &str, pool: &QuestionPool) -> Result<Box<dyn GenerationBackend>> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "oracle" => {
            let noise = if arg.is_empty() {
                0.0
            } else {
                arg.parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad oracle noise '{arg}'")))?
            };
            // Keyed by question text; prompts do not name the database.
            let gold: BTreeMap<String, String> = pool
                .questions
                .values()
                .flatten()
                .map(|q| (q.question.trim().to_string(), q.gold_sql.clone()))
                .collect();
            Ok(Box::new(OracleBackend::new(gold, noise)?))
        }
        "scripted" if !arg.is_empty() => Ok(Box::new(ScriptedBackend::from_file(Path::new(arg))?)),
        "chat" => Ok(Box::new(ChatBackend {
            client: ChatClient::from_spec(arg)?,
        })),
        _ => Err(Error::InvalidArgument(format!("unknown generation backend '{spec}'"))),
    }
}

pub fn evolution_backend(spec: &str) -> Result<Option<Box<dyn EvolutionBackend>>> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "none" => Ok(None),
        "scripted" if !arg.is_empty() => Ok(Some(Box::new(ScriptedEvolution::from_file(Path::new(arg))?))),
        "chat" => Ok(Some(Box::new(ChatEvolution {
            client: ChatClient::from_spec(arg)?,
        }))),
        _ => Err(Error::InvalidArgument(format!("unknown evolution backend '{spec}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_defaults() {
        let c: RunConfig = toml::from_str("data_root = \"d\"\noutput_dir = \"o\"\niterations = 3\n").unwrap();
        assert_eq!(c.workers, 4);
        assert_eq!(c.deep_focus_k, 1);
        assert_eq!(c.late_stage_start, 12);
        assert_eq!(c.max_rounds, 2);
        assert_eq!(c.gen_backend, "oracle");
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let mut c = RunConfig::new("d", "o", 0);
        assert!(c.validate().is_err());
        c.iterations = 2;
        c.late_stage_start = 1;
        assert!(c.validate().is_err());
        assert!(toml::from_str::<RunConfig>("data_root = \"d\"\niterations = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn output_dir_is_not_serialized() {
        let c = RunConfig::new("d", "/somewhere", 2);
        let json = serde_json::to_string(&c).unwrap();
        assert!(!json.contains("somewhere"));
    }

    #[test]
    fn backend_specs() {
        let pool = QuestionPool {
            databases: Default::default(),
            questions: Default::default(),
        };
        assert_eq!(generation_backend("oracle", &pool).unwrap().identity(), "oracle");
        assert_eq!(generation_backend("oracle:0.25", &pool).unwrap().identity(), "oracle:0.25");
        assert!(generation_backend("scripted", &pool).is_err());
        assert!(generation_backend("magic", &pool).is_err());
        assert!(evolution_backend("none").unwrap().is_none());
        assert!(evolution_backend("chat:m@http://x").unwrap().is_some());
    }
}
