//! Deterministic, size-adaptive database analysis.
//!
//! [`analyze`] profiles an SQLite file once and renders a ten-section report
//! whose depth depends on the total number of base-table columns. When the
//! rendered report would exceed the token budget, it is re-rendered at the
//! next coarser tier until it fits or no coarser tier remains.

mod naive;
mod profile;
mod render;
mod tool;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use naive::{extract_naive_schema, NAIVE_SCHEMA_QUERY};
pub use profile::{
    profile_database, ColumnProfile, DatabaseProfile, DetectedFormat, ForeignKeyProfile,
    TableProfile, CATEGORICAL_THRESHOLD,
};
pub use tool::{agent_analysis, run_agent_tool, FallbackReason, ToolRun, DEFAULT_TOOL_TIMEOUT};

pub const DEFAULT_TOKEN_BUDGET: usize = 150_000;

pub const SECTION_TITLES: [&str; 10] = [
    "Schema DDL",
    "Table Overview",
    "Column Analysis",
    "Foreign Key Relationships",
    "Enumerated Values",
    "Numeric Ranges",
    "Detected Formats",
    "Semantic Patterns",
    "Cross-Table Validation",
    "Query Guidance",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeTier {
    Small,
    Medium,
    Large,
    Ultra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticLevel {
    Full,
    Essential,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossTableLevel {
    Full,
    Critical,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub samples_per_column: usize,
    /// `None` lists every categorical value.
    pub enum_value_limit: Option<usize>,
    pub semantic_patterns: SemanticLevel,
    pub cross_table_validation: CrossTableLevel,
}

impl SizeTier {
    pub const ALL: [SizeTier; 4] = [
        SizeTier::Small,
        SizeTier::Medium,
        SizeTier::Large,
        SizeTier::Ultra,
    ];

    pub fn config(self) -> FeatureConfig {
        use CrossTableLevel as C;
        use SemanticLevel as S;
        let (samples, limit, semantic, cross) = match self {
            SizeTier::Small => (10, None, S::Full, C::Full),
            SizeTier::Medium => (5, Some(15), S::Essential, C::Critical),
            SizeTier::Large => (3, Some(5), S::Skip, C::Skip),
            SizeTier::Ultra => (1, Some(0), S::Skip, C::Skip),
        };
        FeatureConfig {
            samples_per_column: samples,
            enum_value_limit: limit,
            semantic_patterns: semantic,
            cross_table_validation: cross,
        }
    }

    /// The next coarser tier, if any.
    pub fn degrade(self) -> Option<SizeTier> {
        match self {
            SizeTier::Small => Some(SizeTier::Medium),
            SizeTier::Medium => Some(SizeTier::Large),
            SizeTier::Large => Some(SizeTier::Ultra),
            SizeTier::Ultra => None,
        }
    }
}

impl fmt::Display for SizeTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Tier for a database with `total_columns` base-table columns.
pub fn classify_size(total_columns: i64) -> Result<SizeTier> {
    match total_columns {
        n if n < 0 => Err(Error::InvalidArgument(format!(
            "column count cannot be negative: {n}"
        ))),
        0..=150 => Ok(SizeTier::Small),
        151..=300 => Ok(SizeTier::Medium),
        301..=400 => Ok(SizeTier::Large),
        _ => Ok(SizeTier::Ultra),
    }
}

/// Four bytes per token, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub number: usize,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisStats {
    pub table_count: usize,
    pub total_columns: usize,
    pub row_counts: Vec<(String, u64)>,
    pub foreign_key_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseAnalysis {
    pub db_id: String,
    /// Tier implied by the column count.
    pub tier: SizeTier,
    /// Tier whose feature set was rendered after any budget degradation.
    pub applied_tier: SizeTier,
    pub sections: Vec<Section>,
    pub token_estimate: usize,
    pub stats: AnalysisStats,
    pub text: String,
}

/// Analyzes the database at `db_path` into the ten-section report.
pub fn analyze(db_path: &Path, budget_tokens: usize) -> Result<DatabaseAnalysis> {
    let profile = profile_database(db_path)?;
    analyze_profile(&profile, budget_tokens)
}

pub fn analyze_profile(profile: &DatabaseProfile, budget_tokens: usize) -> Result<DatabaseAnalysis> {
    let tier = classify_size(profile.total_columns() as i64)?;
    let mut applied = tier;
    loop {
        let sections = render::sections(profile, applied);
        let text = render::document(profile, tier, applied, &sections);
        let token_estimate = estimate_tokens(&text);
        if token_estimate <= budget_tokens {
            return Ok(DatabaseAnalysis {
                db_id: profile.db_id.clone(),
                tier,
                applied_tier: applied,
                sections,
                token_estimate,
                stats: AnalysisStats {
                    table_count: profile.tables.len(),
                    total_columns: profile.total_columns(),
                    row_counts: profile
                        .tables
                        .iter()
                        .map(|t| (t.name.clone(), t.row_count))
                        .collect(),
                    foreign_key_count: profile.foreign_key_count(),
                },
                text,
            });
        }
        match applied.degrade() {
            Some(next) => applied = next,
            None => {
                let largest = sections
                    .iter()
                    .max_by_key(|s| s.body.len())
                    .map(|s| format!("{}. {}", s.number, s.title))
                    .unwrap_or_default();
                return Err(Error::Budget {
                    budget: budget_tokens,
                    estimate: token_estimate,
                    section: largest,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tier_boundaries() {
        let cases = [
            (0, SizeTier::Small),
            (150, SizeTier::Small),
            (151, SizeTier::Medium),
            (300, SizeTier::Medium),
            (301, SizeTier::Large),
            (400, SizeTier::Large),
            (401, SizeTier::Ultra),
        ];
        for (n, tier) in cases {
            assert_eq!(classify_size(n).unwrap(), tier, "{n} columns");
        }
        assert!(matches!(classify_size(-1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn feature_matrix() {
        let rows: Vec<_> = SizeTier::ALL
            .iter()
            .map(|t| {
                let c = t.config();
                (
                    c.samples_per_column,
                    c.enum_value_limit,
                    c.semantic_patterns,
                    c.cross_table_validation,
                )
            })
            .collect();
        use CrossTableLevel as C;
        use SemanticLevel as S;
        assert_eq!(
            rows,
            [
                (10, None, S::Full, C::Full),
                (5, Some(15), S::Essential, C::Critical),
                (3, Some(5), S::Skip, C::Skip),
                (1, Some(0), S::Skip, C::Skip),
            ]
        );
    }

    #[test]
    fn tiers_never_increase_depth() {
        let mut prev = SizeTier::Small.config();
        for n in 0..600 {
            let c = classify_size(n).unwrap().config();
            assert!(c.samples_per_column <= prev.samples_per_column);
            let lim = |l: Option<usize>| l.unwrap_or(usize::MAX);
            assert!(lim(c.enum_value_limit) <= lim(prev.enum_value_limit));
            prev = c;
        }
    }

    #[test]
    fn token_estimator() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens(&"x".repeat(400)), 100);
        assert_eq!(estimate_tokens("abcde"), 2);
    }
}
