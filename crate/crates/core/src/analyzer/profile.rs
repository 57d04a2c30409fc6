//! Facts gathered from a database once, at the deepest level any tier needs.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use rusqlite::types::ValueRef;
use rusqlite::Connection;

use super::naive::{analysis_error, open_read_only};
use crate::error::Result;

/// A text column with at most this many distinct non-null values is categorical.
pub const CATEGORICAL_THRESHOLD: usize = 20;
const MAX_SAMPLES: usize = 10;
const FORMAT_SAMPLE: usize = 100;
const FORMAT_MATCH_RATIO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectedFormat {
    IsoDate,
    IsoDateTime,
    UsDate,
    Currency,
    Code { length: usize },
    NumericText,
}

impl DetectedFormat {
    pub fn describe(&self) -> String {
        match self {
            DetectedFormat::IsoDate => "date (YYYY-MM-DD)".into(),
            DetectedFormat::IsoDateTime => "datetime (YYYY-MM-DD HH:MM[:SS])".into(),
            DetectedFormat::UsDate => "date (MM/DD/YYYY)".into(),
            DetectedFormat::Currency => "currency amount stored as text".into(),
            DetectedFormat::Code { length } => format!("code ({length} uppercase alphanumerics)"),
            DetectedFormat::NumericText => "numbers stored as text".into(),
        }
    }

    pub fn is_temporal(&self) -> bool {
        matches!(
            self,
            DetectedFormat::IsoDate | DetectedFormat::IsoDateTime | DetectedFormat::UsDate
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnProfile {
    pub name: String,
    pub declared_type: String,
    pub not_null: bool,
    pub primary_key: bool,
    pub null_count: u64,
    pub distinct_count: u64,
    pub numeric_count: u64,
    pub text_count: u64,
    /// Rendered min/max, present when every non-null value is numeric.
    pub numeric_range: Option<(String, String)>,
    /// First distinct non-null values in ascending order, rendered.
    pub samples: Vec<String>,
    /// Every distinct value of a categorical text column, ascending, verbatim.
    pub categorical_values: Option<Vec<String>>,
    pub format: Option<DetectedFormat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForeignKeyProfile {
    pub table: String,
    pub columns: Vec<String>,
    pub ref_table: String,
    pub ref_columns: Vec<String>,
    pub ref_table_exists: bool,
    /// Referencing columns are unique over rows where they are non-null.
    pub one_to_one: bool,
    /// Rows whose referencing columns contain a NULL.
    pub null_rows: u64,
    /// Non-null references with no matching parent row.
    pub orphans: u64,
}

impl ForeignKeyProfile {
    pub fn is_self_reference(&self) -> bool {
        self.table == self.ref_table
    }

    pub fn describe(&self) -> String {
        format!(
            "{}({}) -> {}({})",
            self.table,
            self.columns.join(", "),
            self.ref_table,
            self.ref_columns.join(", ")
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableProfile {
    pub name: String,
    pub row_count: u64,
    pub columns: Vec<ColumnProfile>,
    pub foreign_keys: Vec<ForeignKeyProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatabaseProfile {
    pub db_id: String,
    /// Output of the naive extractor.
    pub ddl: String,
    /// Base tables in name order.
    pub tables: Vec<TableProfile>,
}

impl DatabaseProfile {
    pub fn total_columns(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    pub fn foreign_key_count(&self) -> usize {
        self.tables.iter().map(|t| t.foreign_keys.len()).sum()
    }

    pub fn columns(&self) -> impl Iterator<Item = (&TableProfile, &ColumnProfile)> {
        self.tables
            .iter()
            .flat_map(|t| t.columns.iter().map(move |c| (t, c)))
    }

    pub fn foreign_keys(&self) -> impl Iterator<Item = &ForeignKeyProfile> {
        self.tables.iter().flat_map(|t| t.foreign_keys.iter())
    }
}

pub(crate) fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Renders a value for display; text values come out as SQL literals.
pub(crate) fn render_value(value: ValueRef<'_>, max_chars: usize) -> String {
    match value {
        ValueRef::Null => "NULL".into(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(r) => r.to_string(),
        ValueRef::Text(t) => {
            let s = String::from_utf8_lossy(t);
            let mut shown: String = s.chars().take(max_chars).collect();
            if shown.len() < s.len() {
                shown.push_str("...");
            }
            format!("'{}'", shown.replace('\'', "''"))
        }
        ValueRef::Blob(b) => format!("<blob {} bytes>", b.len()),
    }
}

fn patterns() -> &'static [(DetectedFormat, Regex); 5] {
    static PATTERNS: OnceLock<[(DetectedFormat, Regex); 5]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        let re = |p: &str| Regex::new(p).expect("static pattern");
        [
            (DetectedFormat::IsoDate, re(r"^\d{4}-\d{2}-\d{2}$")),
            (
                DetectedFormat::IsoDateTime,
                re(r"^\d{4}-\d{2}-\d{2}[ T]\d{2}:\d{2}(:\d{2}(\.\d+)?)?(Z|[+-]\d{2}:?\d{2})?$"),
            ),
            (DetectedFormat::UsDate, re(r"^\d{1,2}/\d{1,2}/\d{4}$")),
            (
                DetectedFormat::Currency,
                re(r"^(-?[$€£¥]\s?-?\d{1,3}(,?\d{3})*(\.\d+)?|-?\d+\.\d{2})$"),
            ),
            (
                DetectedFormat::NumericText,
                re(r"^-?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$"),
            ),
        ]
    })
}

fn code_pattern() -> &'static Regex {
    static CODE: OnceLock<Regex> = OnceLock::new();
    CODE.get_or_init(|| Regex::new(r"^[A-Z0-9]{2,12}$").expect("static pattern"))
}

fn share(values: &[String], pred: impl Fn(&str) -> bool) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| pred(v)).count() as f64 / values.len() as f64
}

/// Classifies a text column from a sample of its distinct values.
pub(crate) fn detect_format(values: &[String]) -> Option<DetectedFormat> {
    if values.is_empty() {
        return None;
    }
    let [iso, iso_dt, us, currency, numeric] = patterns();
    // A column mixing plain dates and datetimes is still temporal.
    let date_share = share(values, |v| iso.1.is_match(v) || iso_dt.1.is_match(v));
    if date_share >= FORMAT_MATCH_RATIO {
        let plain = share(values, |v| iso.1.is_match(v));
        return Some(if plain >= share(values, |v| iso_dt.1.is_match(v)) {
            DetectedFormat::IsoDate
        } else {
            DetectedFormat::IsoDateTime
        });
    }
    if share(values, |v| us.1.is_match(v)) >= FORMAT_MATCH_RATIO {
        return Some(DetectedFormat::UsDate);
    }
    if share(values, |v| currency.1.is_match(v)) >= FORMAT_MATCH_RATIO
        && values.iter().any(|v| !numeric.1.is_match(v) || v.contains('.'))
    {
        return Some(DetectedFormat::Currency);
    }
    if share(values, |v| numeric.1.is_match(v)) >= FORMAT_MATCH_RATIO {
        return Some(DetectedFormat::NumericText);
    }
    let codes: Vec<&String> = values
        .iter()
        .filter(|v| code_pattern().is_match(v) && v.chars().any(|c| c.is_ascii_uppercase()))
        .collect();
    if codes.len() as f64 / values.len() as f64 >= FORMAT_MATCH_RATIO {
        let length = codes[0].len();
        if codes.iter().all(|c| c.len() == length) {
            return Some(DetectedFormat::Code { length });
        }
    }
    None
}

struct RawColumn {
    name: String,
    declared_type: String,
    not_null: bool,
    pk_order: i64,
}

fn table_columns(conn: &Connection, table: &str) -> rusqlite::Result<Vec<RawColumn>> {
    let mut stmt = conn.prepare(&format!("PRAGMA table_info({})", quote_ident(table)))?;
    let rows = stmt.query_map([], |r| {
        Ok(RawColumn {
            name: r.get(1)?,
            declared_type: r.get::<_, Option<String>>(2)?.unwrap_or_default(),
            not_null: r.get::<_, i64>(3)? != 0,
            pk_order: r.get(5)?,
        })
    })?;
    rows.collect()
}

fn count(conn: &Connection, sql: &str) -> rusqlite::Result<u64> {
    conn.query_row(sql, [], |r| r.get::<_, i64>(0))
        .map(|n| n.max(0) as u64)
}

fn text_list(conn: &Connection, sql: &str) -> rusqlite::Result<Vec<String>> {
    let mut stmt = conn.prepare(sql)?;
    let rows = stmt.query_map([], |r| r.get::<_, String>(0))?;
    rows.collect()
}

fn profile_column(
    conn: &Connection,
    table: &str,
    row_count: u64,
    raw: RawColumn,
) -> rusqlite::Result<ColumnProfile> {
    let t = quote_ident(table);
    let c = quote_ident(&raw.name);
    let (non_null, distinct, numeric, text): (i64, i64, i64, i64) = conn.query_row(
        &format!(
            "SELECT COUNT({c}), COUNT(DISTINCT {c}), \
             COALESCE(SUM(typeof({c}) IN ('integer', 'real')), 0), \
             COALESCE(SUM(typeof({c}) = 'text'), 0) FROM {t}"
        ),
        [],
        |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)),
    )?;
    let non_null = non_null.max(0) as u64;

    let numeric_range = if non_null > 0 && numeric as u64 == non_null {
        conn.query_row(&format!("SELECT MIN({c}), MAX({c}) FROM {t}"), [], |r| {
            Ok((
                render_value(r.get_ref(0)?, 40),
                render_value(r.get_ref(1)?, 40),
            ))
        })
        .map(Some)?
    } else {
        None
    };

    let mut stmt = conn.prepare(&format!(
        "SELECT DISTINCT {c} FROM {t} WHERE {c} IS NOT NULL ORDER BY {c} LIMIT {MAX_SAMPLES}"
    ))?;
    let samples = stmt
        .query_map([], |r| Ok(render_value(r.get_ref(0)?, 80)))?
        .collect::<rusqlite::Result<Vec<_>>>()?;

    let all_text = non_null > 0 && text as u64 == non_null;
    let categorical_values = if all_text && (distinct as usize) <= CATEGORICAL_THRESHOLD {
        Some(text_list(
            conn,
            &format!("SELECT DISTINCT {c} FROM {t} WHERE {c} IS NOT NULL ORDER BY {c}"),
        )?)
    } else {
        None
    };

    let format = if text > 0 {
        let values = text_list(
            conn,
            &format!(
                "SELECT DISTINCT {c} FROM {t} WHERE typeof({c}) = 'text' \
                 ORDER BY {c} LIMIT {FORMAT_SAMPLE}"
            ),
        )?;
        detect_format(&values)
    } else {
        None
    };

    Ok(ColumnProfile {
        name: raw.name,
        declared_type: raw.declared_type,
        not_null: raw.not_null,
        primary_key: raw.pk_order > 0,
        null_count: row_count.saturating_sub(non_null),
        distinct_count: distinct.max(0) as u64,
        numeric_count: numeric.max(0) as u64,
        text_count: text.max(0) as u64,
        numeric_range,
        samples,
        categorical_values,
        format,
    })
}

fn primary_key_columns(conn: &Connection, table: &str) -> rusqlite::Result<Vec<String>> {
    let mut cols: Vec<RawColumn> = table_columns(conn, table)?
        .into_iter()
        .filter(|c| c.pk_order > 0)
        .collect();
    cols.sort_by_key(|c| c.pk_order);
    Ok(cols.into_iter().map(|c| c.name).collect())
}

fn profile_foreign_keys(
    conn: &Connection,
    table: &str,
    tables: &[String],
) -> rusqlite::Result<Vec<ForeignKeyProfile>> {
    let mut stmt = conn.prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(table)))?;
    // (id, seq, table, from, to)
    let mut rows: Vec<(i64, i64, String, String, Option<String>)> = stmt
        .query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?)))?
        .collect::<rusqlite::Result<_>>()?;
    rows.sort_by_key(|r| (r.0, r.1));

    let mut fks = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let id = rows[i].0;
        let group: Vec<_> = rows[i..].iter().take_while(|r| r.0 == id).cloned().collect();
        i += group.len();
        let ref_table = group[0].2.clone();
        let ref_table_exists = tables.iter().any(|t| t.eq_ignore_ascii_case(&ref_table));
        let columns: Vec<String> = group.iter().map(|r| r.3.clone()).collect();
        let mut ref_columns: Vec<String> = group.iter().filter_map(|r| r.4.clone()).collect();
        if ref_columns.len() != columns.len() && ref_table_exists {
            ref_columns = primary_key_columns(conn, &ref_table)?;
        }

        let t = quote_ident(table);
        let child_cols: Vec<String> = columns.iter().map(|c| format!("c.{}", quote_ident(c))).collect();
        let all_present = child_cols
            .iter()
            .map(|c| format!("{c} IS NOT NULL"))
            .collect::<Vec<_>>()
            .join(" AND ");
        let total = count(conn, &format!("SELECT COUNT(*) FROM {t} c"))?;
        let present = count(conn, &format!("SELECT COUNT(*) FROM {t} c WHERE {all_present}"))?;
        let distinct = count(
            conn,
            &format!(
                "SELECT COUNT(*) FROM (SELECT DISTINCT {} FROM {t} c WHERE {all_present})",
                child_cols.join(", ")
            ),
        )?;
        let orphans = if ref_table_exists && ref_columns.len() == columns.len() {
            let join = child_cols
                .iter()
                .zip(&ref_columns)
                .map(|(c, p)| format!("p.{} = {c}", quote_ident(p)))
                .collect::<Vec<_>>()
                .join(" AND ");
            count(
                conn,
                &format!(
                    "SELECT COUNT(*) FROM {t} c WHERE {all_present} AND NOT EXISTS \
                     (SELECT 1 FROM {} p WHERE {join})",
                    quote_ident(&ref_table)
                ),
            )?
        } else {
            present
        };
        fks.push(ForeignKeyProfile {
            table: table.to_string(),
            columns,
            ref_table,
            ref_columns,
            ref_table_exists,
            one_to_one: distinct == present,
            null_rows: total - present,
            orphans,
        });
    }
    Ok(fks)
}

/// Profiles every base table of the database at `db_path`.
pub fn profile_database(db_path: &Path) -> Result<DatabaseProfile> {
    let conn = open_read_only(db_path)?;
    let db_id = db_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let inner = || -> rusqlite::Result<Vec<TableProfile>> {
        let tables = text_list(
            &conn,
            "SELECT name FROM sqlite_master WHERE type = 'table' \
             AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY name",
        )?;
        let mut out = Vec::with_capacity(tables.len());
        for name in &tables {
            let row_count = count(&conn, &format!("SELECT COUNT(*) FROM {}", quote_ident(name)))?;
            let columns = table_columns(&conn, name)?
                .into_iter()
                .map(|raw| profile_column(&conn, name, row_count, raw))
                .collect::<rusqlite::Result<Vec<_>>>()?;
            let foreign_keys = profile_foreign_keys(&conn, name, &tables)?;
            out.push(TableProfile {
                name: name.clone(),
                row_count,
                columns,
                foreign_keys,
            });
        }
        Ok(out)
    };
    let tables = inner().map_err(|e| analysis_error(db_path, e))?;
    let ddl = super::extract_naive_schema(db_path)?;
    Ok(DatabaseProfile { db_id, ddl, tables })
}
