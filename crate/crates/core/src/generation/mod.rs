//! Prompt assembly and the verification loop around a text-generation backend.

mod backends;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analyzer::estimate_tokens;
use crate::error::{Error, Result};
use crate::eval::{ResultTable, SqlExecutor};

pub use backends::{ChatBackend, OracleBackend, ScriptedBackend, ScriptedFixture};

pub const DEFAULT_MAX_ROUNDS: u32 = 2;
pub const INITIAL_TEMPERATURE: f64 = 0.0;
/// Temperature for verification round r (1-based); later rounds reuse the last.
pub const ROUND_TEMPERATURES: [f64; 2] = [0.2, 0.3];
pub const RETRY_TEMPERATURE: f64 = 0.3;
pub const ACCEPT_TOKEN: &str = "CORRECT";
pub const PREVIEW_ROWS: usize = 20;
pub const PREVIEW_CELL_CHARS: usize = 200;

pub const INITIAL_REQUEST: &str =
    "Write one SQLite query that answers the question. Reply with the SQL only.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// A text-generation model. Implementations must be safe to call from many
/// question pipelines at once.
pub trait GenerationBackend: Send + Sync {
    fn complete(&self, system: &str, conversation: &[Message], temperature: f64) -> Result<String>;
    fn identity(&self) -> String;
}

/// System prompt: analysis, instructions, question and evidence, in that order.
pub fn assemble_prompt(analysis: &str, instructions: &str, question: &str, evidence: &str) -> Result<String> {
    if question.trim().is_empty() {
        return Err(Error::InvalidArgument("question is empty".into()));
    }
    if analysis.trim().is_empty() || instructions.trim().is_empty() {
        return Err(Error::InvalidArgument(
            "analysis and instructions must be non-empty".into(),
        ));
    }
    let evidence = if evidence.trim().is_empty() { "(none)" } else { evidence.trim_end() };
    Ok(format!(
        "## Database Analysis\n\n{}\n\n## Instructions\n\n{}\n\n## Question\n\n{}\n\n## Evidence\n\n{}\n",
        analysis.trim_end(),
        instructions.trim_end(),
        question.trim(),
        evidence
    ))
}

/// Recovers the question from a prompt built by [`assemble_prompt`].
pub fn prompt_question(system: &str) -> Option<&str> {
    let start = system.rfind("## Question\n\n")? + "## Question\n\n".len();
    let rest = &system[start..];
    let end = rest.find("\n\n## Evidence").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

/// Strips surrounding code fences and a leading language tag.
pub fn sanitize_sql(raw: &str) -> Result<String> {
    let mut text = raw.trim();
    if let Some(rest) = text.strip_prefix("```") {
        // Drop the rest of the opening fence line, which holds any language tag.
        text = match rest.find('\n') {
            Some(i) => &rest[i + 1..],
            None => rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric()),
        };
        text = text.trim_end();
        if let Some(inner) = text.strip_suffix("```") {
            text = inner;
        }
        text = text.trim();
    }
    let first_line = text.lines().next().unwrap_or("").trim();
    if first_line.eq_ignore_ascii_case("sql") || first_line.eq_ignore_ascii_case("sqlite") {
        text = text[text.find('\n').map_or(text.len(), |i| i + 1)..].trim();
    }
    if text.is_empty() {
        return Err(Error::EmptyOutput);
    }
    Ok(text.to_string())
}

fn is_accept(reply: &str) -> bool {
    reply.split_whitespace().next() == Some(ACCEPT_TOKEN)
}

fn truncate_chars(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

/// Bounded text rendering of an execution result for the model to review.
pub fn result_preview(result: &std::result::Result<ResultTable, crate::eval::ExecError>) -> String {
    let table = match result {
        Err(e) => return format!("ERROR ({e})"),
        Ok(t) => t,
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} row(s){}; columns: {}",
        table.row_count(),
        if table.truncated { " (truncated)" } else { "" },
        table.columns.join(", ")
    );
    for row in table.rows.iter().take(PREVIEW_ROWS) {
        let cells: Vec<String> = row
            .iter()
            .map(|c| truncate_chars(&c.to_string(), PREVIEW_CELL_CHARS))
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    if table.row_count() > PREVIEW_ROWS {
        let _ = writeln!(out, "... {} more row(s)", table.row_count() - PREVIEW_ROWS);
    }
    out
}

pub fn verification_message(question: &str, sql: &str, preview: &str) -> String {
    format!(
        "Question: {question}\n\nExecuted SQL:\n{sql}\n\nExecution result:\n{}\n\n\
         If this query answers the question correctly, reply with {ACCEPT_TOKEN}. \
         Otherwise reply with an improved SQL query only.",
        preview.trim_end()
    )
}

/// Fixed alert text for the extra retry after an error or empty result.
pub fn alert_message(question: &str, sql: Option<&str>, problem: &str) -> String {
    format!(
        "ALERT: {problem}.\n\nQuestion: {question}\n\nSQL:\n{}\n\n\
         Reply with a corrected SQL query only.",
        sql.unwrap_or("(none)")
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// The initial generation.
    Generated,
    AcceptedCorrect,
    Revised,
    /// A revision in the last verification round.
    Exhausted,
    ErrorRetry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub temperature: f64,
    /// The current SQL after this attempt.
    pub sql: Option<String>,
    /// Summary of the execution the model was shown, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<String>,
    pub verdict: Verdict,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationTranscript {
    pub attempts: Vec<Attempt>,
    pub final_sql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl VerificationTranscript {
    pub fn temperatures(&self) -> Vec<f64> {
        self.attempts.iter().map(|a| a.temperature).collect()
    }

    pub fn prompt_tokens(&self) -> usize {
        self.attempts.iter().map(|a| a.prompt_tokens).sum()
    }

    pub fn completion_tokens(&self) -> usize {
        self.attempts.iter().map(|a| a.completion_tokens).sum()
    }
}

fn prompt_size(system: &str, conversation: &[Message]) -> usize {
    estimate_tokens(system) + conversation.iter().map(|m| estimate_tokens(&m.content)).sum::<usize>()
}

/// Generates SQL for one question and lets the model check it against its
/// own execution result for up to `max_rounds` rounds.
pub fn generate_with_verification(
    backend: &dyn GenerationBackend,
    system: &str,
    question: &str,
    db_path: &Path,
    executor: &dyn SqlExecutor,
    max_rounds: u32,
) -> VerificationTranscript {
    let mut transcript = VerificationTranscript::default();
    let mut conversation = vec![Message::user(INITIAL_REQUEST)];

    let call = |conversation: &mut Vec<Message>, temperature: f64| -> Result<(String, usize, usize)> {
        let prompt_tokens = prompt_size(system, conversation);
        let reply = backend.complete(system, conversation, temperature)?;
        let completion_tokens = estimate_tokens(&reply);
        conversation.push(Message::assistant(reply.clone()));
        Ok((reply, prompt_tokens, completion_tokens))
    };

    let (reply, pt, ct) = match call(&mut conversation, INITIAL_TEMPERATURE) {
        Ok(r) => r,
        Err(e) => {
            transcript.error = Some(e.to_string());
            return transcript;
        }
    };
    let mut current = sanitize_sql(&reply).ok();
    transcript.attempts.push(Attempt {
        temperature: INITIAL_TEMPERATURE,
        sql: current.clone(),
        execution: None,
        verdict: Verdict::Generated,
        prompt_tokens: pt,
        completion_tokens: ct,
    });

    let mut last_result = None;
    if let Some(sql) = &current {
        last_result = Some(executor.execute(db_path, sql));
    }
    for round in 1..=max_rounds {
        let (Some(sql), Some(result)) = (current.clone(), last_result.as_ref()) else {
            break;
        };
        let temperature = ROUND_TEMPERATURES[(round as usize - 1).min(ROUND_TEMPERATURES.len() - 1)];
        let preview = result_preview(result);
        conversation.push(Message::user(verification_message(question, &sql, &preview)));
        let (reply, pt, ct) = match call(&mut conversation, temperature) {
            Ok(r) => r,
            Err(e) => {
                transcript.error = Some(e.to_string());
                return transcript;
            }
        };
        if is_accept(&reply) {
            transcript.attempts.push(Attempt {
                temperature,
                sql: Some(sql),
                execution: Some(preview),
                verdict: Verdict::AcceptedCorrect,
                prompt_tokens: pt,
                completion_tokens: ct,
            });
            break;
        }
        if let Ok(revised) = sanitize_sql(&reply) {
            last_result = Some(executor.execute(db_path, &revised));
            current = Some(revised);
        }
        transcript.attempts.push(Attempt {
            temperature,
            sql: current.clone(),
            execution: Some(preview),
            verdict: if round == max_rounds { Verdict::Exhausted } else { Verdict::Revised },
            prompt_tokens: pt,
            completion_tokens: ct,
        });
    }

    let problem = match (&current, &last_result) {
        (None, _) => Some("the previous reply contained no SQL query".to_string()),
        (Some(_), Some(Err(e))) => Some(format!("the query failed with {e}")),
        (Some(_), Some(Ok(t))) if t.rows.is_empty() => Some("the query returned an empty result".to_string()),
        _ => None,
    };
    if let Some(problem) = problem {
        conversation.push(Message::user(alert_message(question, current.as_deref(), &problem)));
        match call(&mut conversation, RETRY_TEMPERATURE) {
            Ok((reply, pt, ct)) => {
                if !is_accept(&reply) {
                    if let Ok(sql) = sanitize_sql(&reply) {
                        current = Some(sql);
                    }
                }
                transcript.attempts.push(Attempt {
                    temperature: RETRY_TEMPERATURE,
                    sql: current.clone(),
                    execution: last_result.as_ref().map(result_preview),
                    verdict: Verdict::ErrorRetry,
                    prompt_tokens: pt,
                    completion_tokens: ct,
                });
            }
            Err(e) => {
                transcript.error = Some(e.to_string());
                return transcript;
            }
        }
    }

    match current {
        Some(sql) => transcript.final_sql = Some(sql),
        None => transcript.error = Some(Error::EmptyOutput.to_string()),
    }
    transcript
}
