//! Runs an agent's analysis tool as an isolated child process.
//!
//! The package is copied into a scratch directory next to a copy of the
//! database named `database.sqlite`; the tool command runs there under
//! `sh -c` and must write the package's `tool_output_file`. Any failure
//! falls back to the naive DDL extractor.

use std::fs;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::naive::extract_naive_schema;
use crate::error::{Error, IoContext, Result};
use crate::registry::{AgentPackage, ExecutionMode, TOOL_OUTPUT_DIR};

pub const DEFAULT_TOOL_TIMEOUT: Duration = Duration::from_secs(300);
pub const TOOL_DATABASE_NAME: &str = "database.sqlite";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum FallbackReason {
    Spawn(String),
    ExitStatus(String),
    Timeout(u64),
    MissingOutput(String),
}

impl std::fmt::Display for FallbackReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FallbackReason::Spawn(e) => write!(f, "tool failed to start: {e}"),
            FallbackReason::ExitStatus(s) => write!(f, "tool exited with {s}"),
            FallbackReason::Timeout(ms) => write!(f, "tool timed out after {ms} ms"),
            FallbackReason::MissingOutput(p) => write!(f, "tool did not write {p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRun {
    pub text: String,
    pub fallback: Option<FallbackReason>,
    pub elapsed_ms: u64,
}

fn copy_package(src: &Path, dst: &Path) -> Result<()> {
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
            fs::copy(entry.path(), &target).at(&target)?;
        }
    }
    Ok(())
}

fn kill_group(pid: u32) {
    // The child leads its own process group; take down anything it spawned.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

enum Outcome {
    Exited(ExitStatus),
    TimedOut,
}

fn run_with_timeout(mut cmd: Command, timeout: Duration) -> std::io::Result<Outcome> {
    let mut child = cmd.process_group(0).spawn()?;
    let start = Instant::now();
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(Outcome::Exited(status));
        }
        if start.elapsed() >= timeout {
            kill_group(child.id());
            let _ = child.kill();
            let _ = child.wait();
            return Ok(Outcome::TimedOut);
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// Executes the package's tool against `db_path`, falling back to the naive
/// extractor on spawn failure, non-zero exit, timeout, or missing output.
pub fn run_agent_tool(pkg: &AgentPackage, db_path: &Path, timeout: Duration) -> Result<ToolRun> {
    if pkg.execution_mode != ExecutionMode::ToolOnly {
        return Err(Error::InvalidArgument(format!(
            "agent {} does not use tool-only execution",
            pkg.id
        )));
    }
    let start = Instant::now();
    let attempt = || -> Result<std::result::Result<String, FallbackReason>> {
        let work = tempfile::Builder::new()
            .prefix("sqlevo-tool-")
            .tempdir()
            .map_err(|e| Error::Io {
                path: std::env::temp_dir(),
                source: e,
            })?;
        copy_package(&pkg.root_dir, work.path())?;
        let output_dir = work.path().join(TOOL_OUTPUT_DIR);
        fs::create_dir_all(&output_dir).at(&output_dir)?;
        let db_copy = work.path().join(TOOL_DATABASE_NAME);
        fs::copy(db_path, &db_copy).at(&db_copy)?;
        let log_path = work.path().join(".tool.log");
        let log = fs::File::create(&log_path).at(&log_path)?;
        let log_err = log.try_clone().at(&log_path)?;

        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(&pkg.tool_command)
            .current_dir(work.path())
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log_err);
        let outcome = match run_with_timeout(cmd, timeout) {
            Ok(o) => o,
            Err(e) => return Ok(Err(FallbackReason::Spawn(e.to_string()))),
        };
        match outcome {
            Outcome::TimedOut => {
                return Ok(Err(FallbackReason::Timeout(timeout.as_millis() as u64)))
            }
            Outcome::Exited(status) if !status.success() => {
                return Ok(Err(FallbackReason::ExitStatus(status.to_string())))
            }
            Outcome::Exited(_) => {}
        }
        let out = work.path().join(&pkg.tool_output_file);
        match fs::read(&out) {
            Ok(bytes) => Ok(Ok(String::from_utf8_lossy(&bytes).into_owned())),
            Err(_) => Ok(Err(FallbackReason::MissingOutput(pkg.tool_output_file.clone()))),
        }
    };

    let result = attempt()?;
    let (text, fallback) = match result {
        Ok(text) => (text, None),
        Err(reason) => {
            tracing::warn!(agent = %pkg.id, db = %db_path.display(), %reason, "analysis tool fell back");
            let text = extract_naive_schema(db_path).map_err(|e| Error::Analysis {
                path: db_path.to_path_buf(),
                message: format!("tool failed ({reason}) and fallback failed: {e}"),
            })?;
            (text, Some(reason))
        }
    };
    Ok(ToolRun {
        text,
        fallback,
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}

/// Analysis text an agent contributes for one database.
pub fn agent_analysis(pkg: &AgentPackage, db_path: &Path, timeout: Duration) -> Result<ToolRun> {
    match pkg.execution_mode {
        ExecutionMode::ToolOnly => run_agent_tool(pkg, db_path, timeout),
        ExecutionMode::FallbackNaive => Ok(ToolRun {
            text: extract_naive_schema(db_path)?,
            fallback: None,
            elapsed_ms: 0,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{load_package, MANIFEST_FILE};

    fn package(command: &str, output: &str, files: &[(&str, &str)]) -> (tempfile::TempDir, AgentPackage) {
        let dir = tempfile::tempdir().unwrap();
        let manifest = format!(
            "---\nname: t\nexecution_mode: tool_only\ntool_command: {command}\ntool_output_file: {output}\n---\n"
        );
        fs::write(dir.path().join(MANIFEST_FILE), manifest).unwrap();
        fs::write(dir.path().join("eval_instructions.md"), "i").unwrap();
        for (path, body) in files {
            let p = dir.path().join(path);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, body).unwrap();
        }
        let pkg = load_package(dir.path()).unwrap();
        (dir, pkg)
    }

    fn db() -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.sqlite");
        rusqlite::Connection::open(&path)
            .unwrap()
            .execute_batch("CREATE TABLE t (a INTEGER);")
            .unwrap();
        (dir, path)
    }

    #[test]
    fn tool_output_is_returned() {
        let (_p, pkg) = package(
            "sh tools/run.sh",
            "tool_output/out.txt",
            &[("tools/run.sh", "test -f database.sqlite && echo hello > tool_output/out.txt\n")],
        );
        let (_d, path) = db();
        let run = run_agent_tool(&pkg, &path, Duration::from_secs(10)).unwrap();
        assert_eq!(run.text, "hello\n");
        assert_eq!(run.fallback, None);
    }

    #[test]
    fn nonzero_exit_falls_back() {
        let (_p, pkg) = package("exit 3", "tool_output/out.txt", &[]);
        let (_d, path) = db();
        let run = run_agent_tool(&pkg, &path, Duration::from_secs(10)).unwrap();
        assert_eq!(run.text, extract_naive_schema(&path).unwrap());
        assert!(matches!(run.fallback, Some(FallbackReason::ExitStatus(_))));
    }

    #[test]
    fn missing_output_falls_back() {
        let (_p, pkg) = package("true", "tool_output/out.txt", &[]);
        let (_d, path) = db();
        let run = run_agent_tool(&pkg, &path, Duration::from_secs(10)).unwrap();
        assert!(matches!(run.fallback, Some(FallbackReason::MissingOutput(_))));
    }

    #[test]
    fn timeout_kills_and_falls_back() {
        let (_p, pkg) = package("sleep 5; echo late > tool_output/out.txt", "tool_output/out.txt", &[]);
        let (_d, path) = db();
        let start = Instant::now();
        let run = run_agent_tool(&pkg, &path, Duration::from_millis(200)).unwrap();
        assert!(start.elapsed() < Duration::from_secs(3));
        assert_eq!(run.fallback, Some(FallbackReason::Timeout(200)));
        assert_eq!(run.text, extract_naive_schema(&path).unwrap());
    }

    #[test]
    fn fallback_failure_is_an_error() {
        let (_p, pkg) = package("exit 1", "tool_output/out.txt", &[]);
        let dir = tempfile::tempdir().unwrap();
        let bogus = dir.path().join("bogus.sqlite");
        fs::write(&bogus, "not sqlite, definitely not a database header......").unwrap();
        assert!(matches!(
            run_agent_tool(&pkg, &bogus, Duration::from_secs(5)),
            Err(Error::Analysis { .. })
        ));
    }
}
