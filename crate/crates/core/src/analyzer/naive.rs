use std::path::Path;

use rusqlite::{Connection, OpenFlags};

use crate::error::{Error, Result};

/// The query the baseline agent's tool runs; kept for parity checks.
pub const NAIVE_SCHEMA_QUERY: &str = "SELECT sql || ';' FROM sqlite_master \
     WHERE sql IS NOT NULL ORDER BY tbl_name, type DESC, name";

pub(crate) fn open_read_only(db_path: &Path) -> Result<Connection> {
    if !db_path.is_file() {
        return Err(Error::Analysis {
            path: db_path.to_path_buf(),
            message: "no such database file".into(),
        });
    }
    Connection::open_with_flags(
        db_path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(|e| analysis_error(db_path, e))
}

pub(crate) fn analysis_error(db_path: &Path, e: rusqlite::Error) -> Error {
    Error::Analysis {
        path: db_path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Raw DDL for every schema object, one statement per line group, each
/// terminated by `;`, ordered by table name, object type descending, then
/// object name.
pub fn extract_naive_schema(db_path: &Path) -> Result<String> {
    let conn = open_read_only(db_path)?;
    let mut stmt = conn
        .prepare("SELECT type, name, tbl_name, sql FROM sqlite_master WHERE sql IS NOT NULL")
        .map_err(|e| analysis_error(db_path, e))?;
    let mut objects: Vec<(String, String, String, String)> = stmt
        .query_map([], |row| Ok((row.get(0)?, row.get(1)?, row.get(2)?, row.get(3)?)))
        .and_then(|rows| rows.collect())
        .map_err(|e| analysis_error(db_path, e))?;
    // Byte-wise string order matches SQLite's BINARY collation.
    objects.sort_by(|a, b| {
        a.2.cmp(&b.2)
            .then_with(|| b.0.cmp(&a.0))
            .then_with(|| a.1.cmp(&b.1))
    });
    Ok(objects
        .into_iter()
        .map(|(_, _, _, sql)| sql + ";")
        .collect::<Vec<_>>()
        .join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query_route(path: &Path) -> String {
        let conn = Connection::open(path).unwrap();
        let mut stmt = conn.prepare(NAIVE_SCHEMA_QUERY).unwrap();
        let rows: Vec<String> = stmt
            .query_map([], |r| r.get(0))
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        rows.join("\n")
    }

    fn db(statements: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sqlite");
        Connection::open(&path).unwrap().execute_batch(statements).unwrap();
        (dir, path)
    }

    #[test]
    fn single_table() {
        let (_d, p) = db("CREATE TABLE t (a INTEGER, b TEXT);");
        assert_eq!(
            extract_naive_schema(&p).unwrap(),
            "CREATE TABLE t (a INTEGER, b TEXT);"
        );
    }

    #[test]
    fn table_with_index_and_view_matches_query() {
        let (_d, p) = db("CREATE TABLE zeta (id INTEGER PRIMARY KEY, v TEXT);
             CREATE INDEX idx_zeta_v ON zeta(v);
             CREATE TABLE alpha (id INTEGER PRIMARY KEY, z INTEGER REFERENCES zeta(id));
             CREATE VIEW beta AS SELECT * FROM alpha;
             CREATE TRIGGER trg AFTER INSERT ON alpha BEGIN SELECT 1; END;
             CREATE TABLE Upper (x);");
        let out = extract_naive_schema(&p).unwrap();
        assert_eq!(out, query_route(&p));
        let lines: Vec<&str> = out.lines().collect();
        // Within "zeta" the table precedes its index (type DESC).
        let t = lines.iter().position(|l| l.starts_with("CREATE TABLE zeta")).unwrap();
        let i = lines.iter().position(|l| l.starts_with("CREATE INDEX")).unwrap();
        assert!(t < i);
    }

    #[test]
    fn empty_database() {
        let (_d, p) = db("");
        assert_eq!(extract_naive_schema(&p).unwrap(), "");
    }

    #[test]
    fn unreadable_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.sqlite");
        std::fs::write(&p, b"this is not a database at all, just text padding...").unwrap();
        assert!(matches!(extract_naive_schema(&p), Err(Error::Analysis { .. })));
        assert!(matches!(
            extract_naive_schema(&dir.path().join("missing.sqlite")),
            Err(Error::Analysis { .. })
        ));
    }
}
