use std::path::Path;
use std::process::{Command, Output};

fn sqlevo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqlevo")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sqlevo(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_resume_and_leaderboard() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    ok(&["toy-data", s(&data)]);
    let evo = format!("scripted:{}", s(&data.join("evolution_fixture.json")));
    let gen = format!("scripted:{}", s(&data.join("generation_fixture.json")));

    let stdout = ok(&[
        "run", "--data-root", s(&data), "--output-dir", s(&out), "--iterations", "2", "--seed", "4",
        "--gen-backend", &gen, "--evo-backend", &evo, "--workers", "2", "--deep-focus-k", "1",
    ]);
    assert!(stdout.contains("iteration 2 [evolve]"));
    let stdout = ok(&["resume", "--output-dir", s(&out), "--iterations", "3"]);
    assert!(stdout.contains("iteration 3"));
    let board = ok(&["leaderboard", "--output-dir", s(&out)]);
    assert!(board.starts_with("# Leaderboard"));
    assert!(board.contains("After iteration 3."));
    assert!(board.contains("| naive |"));

    // A second start over the same directory is refused.
    let again = sqlevo(&["run", "--data-root", s(&data), "--output-dir", s(&out), "--iterations", "1"]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("conflict"));
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["toy-data", s(&data)]);
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!("data_root = {:?}\niterations = 5\nrun_seed = 9\nworkers = 1\n", s(&data)),
    )
    .unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&["run", "--config", s(&config), "--output-dir", s(&out), "--iterations", "1"]);
    assert!(stdout.contains("iteration 1 [none]: naive 30/30"));
    assert!(!stdout.contains("iteration 2"));
}

#[test]
fn evaluate_analyze_and_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["toy-data", s(&data)]);
    let agent = dir.path().join("naive");
    let run = dir.path().join("r");
    ok(&["run", "--data-root", s(&data), "--output-dir", s(&run), "--iterations", "1"]);
    std::fs::rename(run.join("agents/naive"), &agent).unwrap();

    let json = dir.path().join("eval.json");
    let stdout = ok(&["evaluate", "--agent", s(&agent), "--data-root", s(&data), "--db", "school", "--json", s(&json)]);
    assert_eq!(stdout.trim(), "naive: 10/10 (100.00%)");
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(eval["outcomes"].as_array().unwrap().len(), 10);

    let analysis = ok(&["analyze", s(&data.join("library/library.sqlite"))]);
    assert!(analysis.contains("Small"));
    assert_eq!(analysis.matches("\n## ").count(), 10);

    let sim = ok(&["simulate", "--agent", "a=0.9", "--agent", "b=0.1", "--iterations", "50", "--no-evolution"]);
    let first = sim.lines().next().unwrap();
    assert!(first.starts_with("a "), "{sim}");
    assert!(sim.contains("kendall tau: 1.000"));

    let bad = sqlevo(&["simulate", "--agent", "a=1.5", "--agent", "b=0.1"]);
    assert!(!bad.status.success());
}
