use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{prompt_question, GenerationBackend, Message, Role, ACCEPT_TOKEN};
use crate::chat::ChatClient;
use crate::error::{Error, IoContext, Result};

/// Replies for the scripted backend. The reply index is the number of
/// assistant turns already in the conversation, so the backend keeps no state
/// between calls.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedFixture {
    #[serde(default)]
    pub default: Vec<String>,
    /// Keyed by question text.
    #[serde(default)]
    pub by_question: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    fixture: ScriptedFixture,
    label: String,
}

impl ScriptedBackend {
    pub fn new(fixture: ScriptedFixture) -> Self {
        Self {
            fixture,
            label: "scripted".into(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let fixture = serde_json::from_str(&text)?;
        Ok(Self {
            fixture,
            label: format!("scripted:{}", path.display()),
        })
    }

    /// The same replies for every question.
    pub fn replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(ScriptedFixture {
            default: replies.into_iter().map(Into::into).collect(),
            by_question: BTreeMap::new(),
        })
    }
}

fn assistant_turns(conversation: &[Message]) -> usize {
    conversation.iter().filter(|m| m.role == Role::Assistant).count()
}

impl GenerationBackend for ScriptedBackend {
    fn complete(&self, system: &str, conversation: &[Message], _temperature: f64) -> Result<String> {
        let replies = prompt_question(system)
            .and_then(|q| self.fixture.by_question.get(q))
            .unwrap_or(&self.fixture.default);
        let turn = assistant_turns(conversation);
        replies
            .get(turn)
            .cloned()
            .ok_or_else(|| Error::Backend(format!("script has no reply for turn {turn}")))
    }

    fn identity(&self) -> String {
        self.label.clone()
    }
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.iter().chain(&[0xff]) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Answers with the gold SQL for each question. With `noise > 0`, a
/// prompt-dependent share of turns instead returns a query with the right
/// shape and no rows, or accepts whatever is on the table.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    gold: BTreeMap<String, String>,
    noise: f64,
}

impl OracleBackend {
    /// `gold` maps question text to gold SQL.
    pub fn new(gold: BTreeMap<String, String>, noise: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::InvalidArgument(format!("noise {noise} outside [0, 1]")));
        }
        Ok(Self { gold, noise })
    }

    fn on_target(&self, system: &str, turn: usize, temperature: f64) -> bool {
        if self.noise == 0.0 {
            return true;
        }
        let h = fnv1a(&[
            system.as_bytes(),
            &turn.to_le_bytes(),
            &temperature.to_bits().to_le_bytes(),
        ]);
        (h >> 11) as f64 / (1u64 << 53) as f64 >= self.noise
    }
}

impl GenerationBackend for OracleBackend {
    fn complete(&self, system: &str, conversation: &[Message], temperature: f64) -> Result<String> {
        let question = prompt_question(system)
            .ok_or_else(|| Error::Backend("prompt has no question section".into()))?;
        let gold = self
            .gold
            .get(question)
            .ok_or_else(|| Error::Backend(format!("no gold SQL for question '{question}'")))?;
        let turn = assistant_turns(conversation);
        let good = self.on_target(system, turn, temperature);
        if turn == 0 {
            return Ok(if good {
                gold.clone()
            } else {
                format!("SELECT * FROM ({}) LIMIT 0", gold.trim_end().trim_end_matches(';'))
            });
        }
        let current = conversation
            .iter()
            .rev()
            .filter(|m| m.role == Role::Assistant)
            .map(|m| m.content.trim())
            .find(|c| !c.starts_with(ACCEPT_TOKEN))
            .unwrap_or_default();
        if !good || current == gold.trim() {
            Ok(ACCEPT_TOKEN.to_string())
        } else {
            Ok(gold.clone())
        }
    }

    fn identity(&self) -> String {
        if self.noise == 0.0 {
            "oracle".into()
        } else {
            format!("oracle:{}", self.noise)
        }
    }
}

/// Live chat-completion model.
#[derive(Debug, Clone)]
pub struct ChatBackend {
    pub client: ChatClient,
}

impl GenerationBackend for ChatBackend {
    fn complete(&self, system: &str, conversation: &[Message], temperature: f64) -> Result<String> {
        let mut messages = vec![("system", system)];
        for m in conversation {
            let role = match m.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            messages.push((role, m.content.as_str()));
        }
        self.client.complete(&messages, temperature)
    }

    fn identity(&self) -> String {
        self.client.identity()
    }
}
