use std::time::Duration;

use rusqlite::Connection;
use sqlevo_core::analyzer::{
    agent_analysis, analyze, classify_size, extract_naive_schema, profile_database, SizeTier, DEFAULT_TOKEN_BUDGET,
    NAIVE_SCHEMA_QUERY, SECTION_TITLES,
};
use sqlevo_core::scheduler::database_file;
use sqlevo_core::toy::{write_baseline_package, write_toy_dataset, write_wide_database};
use sqlevo_core::Error;

const TOYS: [&str; 3] = ["library", "school", "shop"];

fn direct_query(db: &std::path::Path) -> String {
    let conn = Connection::open(db).unwrap();
    let mut stmt = conn.prepare(NAIVE_SCHEMA_QUERY).unwrap();
    let rows: Vec<String> = stmt.query_map([], |r| r.get(0)).unwrap().map(Result::unwrap).collect();
    rows.join("\n")
}

#[test]
fn toy_databases_are_small_with_all_sections() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(dir.path()).unwrap();
    for db in TOYS {
        let a = analyze(&database_file(dir.path(), db), DEFAULT_TOKEN_BUDGET).unwrap();
        assert_eq!(a.tier, SizeTier::Small);
        assert_eq!(a.applied_tier, SizeTier::Small);
        assert_eq!(a.sections.len(), 10);
        for title in SECTION_TITLES {
            assert!(a.text.contains(title), "{db} lacks {title}");
        }
        assert_eq!(a, analyze(&database_file(dir.path(), db), DEFAULT_TOKEN_BUDGET).unwrap());
    }
}

#[test]
fn naive_extractor_matches_query_and_baseline_tool() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(dir.path()).unwrap();
    let pkg = write_baseline_package(&dir.path().join("naive")).unwrap();
    for db in TOYS {
        let path = database_file(dir.path(), db);
        let ours = extract_naive_schema(&path).unwrap();
        assert_eq!(ours, direct_query(&path));
        let run = agent_analysis(&pkg, &path, Duration::from_secs(60)).unwrap();
        assert!(run.fallback.is_none(), "{:?}", run.fallback);
        assert_eq!(run.text, ours);
    }
}

#[test]
fn orphans_match_a_brute_force_count() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(dir.path()).unwrap();
    for db in TOYS {
        let path = database_file(dir.path(), db);
        let conn = Connection::open(&path).unwrap();
        let profile = profile_database(&path).unwrap();
        for fk in profile.foreign_keys() {
            if fk.columns.len() != 1 || !fk.ref_table_exists {
                continue;
            }
            let (c, rt, rc) = (&fk.columns[0], &fk.ref_table, &fk.ref_columns[0]);
            let sql = format!(
                "SELECT COUNT(*) FROM \"{t}\" x WHERE x.\"{c}\" IS NOT NULL \
                 AND NOT EXISTS (SELECT 1 FROM \"{rt}\" p WHERE p.\"{rc}\" = x.\"{c}\")",
                t = fk.table
            );
            let expected: i64 = conn.query_row(&sql, [], |r| r.get(0)).unwrap();
            assert_eq!(fk.orphans as i64, expected, "{}", fk.describe());
        }
    }
    let library = profile_database(&database_file(dir.path(), "library")).unwrap();
    assert!(library.foreign_keys().any(|fk| fk.orphans > 0));
}

#[test]
fn five_hundred_columns_degrade_to_ultra_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.sqlite");
    write_wide_database(&path, 5, 100).unwrap();
    let started = std::time::Instant::now();
    let a = analyze(&path, DEFAULT_TOKEN_BUDGET).unwrap();
    assert!(started.elapsed() < Duration::from_secs(10));
    assert_eq!(a.stats.total_columns, 500);
    assert_eq!(a.tier, SizeTier::Ultra);
    assert_eq!(a.applied_tier, SizeTier::Ultra);
    assert!(a.token_estimate <= DEFAULT_TOKEN_BUDGET);
    assert_eq!(a.token_estimate, a.text.len().div_ceil(4));
    assert_eq!(a.sections.len(), 10);
}

#[test]
fn tight_budgets_degrade_then_fail() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(dir.path()).unwrap();
    let path = database_file(dir.path(), "school");
    let full = analyze(&path, DEFAULT_TOKEN_BUDGET).unwrap();
    let squeezed = analyze(&path, full.token_estimate - 1).unwrap();
    assert_eq!(squeezed.tier, SizeTier::Small);
    assert!(squeezed.applied_tier > SizeTier::Small);
    assert!(squeezed.token_estimate < full.token_estimate);
    assert!(matches!(analyze(&path, 10), Err(Error::Budget { .. })));
}

#[test]
fn empty_and_missing_databases() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.sqlite");
    Connection::open(&path).unwrap().execute_batch("PRAGMA user_version = 1").unwrap();
    let a = analyze(&path, DEFAULT_TOKEN_BUDGET).unwrap();
    assert_eq!(a.tier, SizeTier::Small);
    assert_eq!(a.stats.table_count, 0);
    assert_eq!(a.sections.len(), 10);
    assert_eq!(extract_naive_schema(&path).unwrap(), "");
    assert!(matches!(analyze(&dir.path().join("nope.sqlite"), 1000), Err(Error::Analysis { .. })));
}

#[test]
fn tier_boundaries() {
    for (n, tier) in [
        (0, SizeTier::Small),
        (150, SizeTier::Small),
        (151, SizeTier::Medium),
        (300, SizeTier::Medium),
        (301, SizeTier::Large),
        (400, SizeTier::Large),
        (401, SizeTier::Ultra),
    ] {
        assert_eq!(classify_size(n).unwrap(), tier, "{n}");
    }
    assert!(classify_size(-1).is_err());
}
