//! Tier-dependent rendering of a [`DatabaseProfile`].

use std::fmt::Write;

use super::profile::{ColumnProfile, DatabaseProfile, DetectedFormat, TableProfile};
use super::{CrossTableLevel, FeatureConfig, Section, SemanticLevel, SizeTier, SECTION_TITLES};

const NONE: &str = "none";
const GUIDANCE_EXAMPLES: usize = 25;

const UNIT_SUFFIXES: [(&str, &str); 22] = [
    ("_kg", "kilograms"),
    ("_g", "grams"),
    ("_lbs", "pounds"),
    ("_km", "kilometres"),
    ("_cm", "centimetres"),
    ("_mm", "millimetres"),
    ("_mi", "miles"),
    ("_mph", "miles per hour"),
    ("_kmh", "kilometres per hour"),
    ("_usd", "US dollars"),
    ("_eur", "euros"),
    ("_gbp", "pounds sterling"),
    ("_pct", "percent"),
    ("_percent", "percent"),
    ("_sec", "seconds"),
    ("_secs", "seconds"),
    ("_seconds", "seconds"),
    ("_ms", "milliseconds"),
    ("_min", "minutes"),
    ("_minutes", "minutes"),
    ("_hours", "hours"),
    ("_days", "days"),
];

fn omitted(tier: SizeTier) -> String {
    format!("omitted at this tier ({tier})")
}

fn or_none(lines: Vec<String>) -> String {
    if lines.is_empty() {
        NONE.to_string()
    } else {
        lines.join("\n")
    }
}

pub(super) fn document(
    profile: &DatabaseProfile,
    tier: SizeTier,
    applied: SizeTier,
    sections: &[Section],
) -> String {
    let mut out = format!("# Database Analysis: {}\n\n", profile.db_id);
    let _ = writeln!(
        out,
        "Size tier: {tier} ({} columns across {} tables); detail level: {applied}",
        profile.total_columns(),
        profile.tables.len()
    );
    for s in sections {
        let _ = write!(out, "\n## {}. {}\n\n{}\n", s.number, s.title, s.body);
    }
    out
}

pub(super) fn sections(profile: &DatabaseProfile, tier: SizeTier) -> Vec<Section> {
    let config = tier.config();
    let bodies = [
        schema_ddl(profile),
        table_overview(profile),
        column_analysis(profile, &config),
        foreign_keys(profile),
        enumerated_values(profile, &config, tier),
        numeric_ranges(profile),
        detected_formats(profile),
        semantic_patterns(profile, &config, tier),
        cross_table(profile, &config, tier),
        query_guidance(profile),
    ];
    bodies
        .into_iter()
        .zip(SECTION_TITLES)
        .enumerate()
        .map(|(i, (body, title))| Section {
            number: i + 1,
            title: title.to_string(),
            body,
        })
        .collect()
}

fn schema_ddl(p: &DatabaseProfile) -> String {
    if p.ddl.is_empty() {
        NONE.into()
    } else {
        format!("```sql\n{}\n```", p.ddl)
    }
}

fn table_overview(p: &DatabaseProfile) -> String {
    or_none(
        p.tables
            .iter()
            .map(|t| {
                format!(
                    "- {}: {} rows, {} columns",
                    t.name,
                    t.row_count,
                    t.columns.len()
                )
            })
            .collect(),
    )
}

fn column_line(t: &TableProfile, c: &ColumnProfile, samples: usize) -> String {
    let mut line = format!(
        "- {}.{}: {}",
        t.name,
        c.name,
        if c.declared_type.is_empty() {
            "(untyped)"
        } else {
            &c.declared_type
        }
    );
    if c.primary_key {
        line.push_str(", primary key");
    }
    if c.not_null {
        line.push_str(", not null");
    }
    if t.row_count == 0 {
        line.push_str("; empty table");
        return line;
    }
    let _ = write!(
        line,
        "; nulls {:.1}%; {} distinct",
        100.0 * c.null_count as f64 / t.row_count as f64,
        c.distinct_count
    );
    if samples > 0 && !c.samples.is_empty() {
        let shown: Vec<&str> = c.samples.iter().take(samples).map(String::as_str).collect();
        let _ = write!(line, "; samples: {}", shown.join(", "));
    }
    line
}

fn column_analysis(p: &DatabaseProfile, config: &FeatureConfig) -> String {
    or_none(
        p.columns()
            .map(|(t, c)| column_line(t, c, config.samples_per_column))
            .collect(),
    )
}

fn foreign_keys(p: &DatabaseProfile) -> String {
    or_none(
        p.foreign_keys()
            .map(|fk| {
                let mut line = format!(
                    "- {}: {}",
                    fk.describe(),
                    if fk.one_to_one {
                        "one-to-one"
                    } else {
                        "one-to-many"
                    }
                );
                if !fk.ref_table_exists {
                    line.push_str(" (referenced table missing)");
                }
                line
            })
            .collect(),
    )
}

fn sql_literal(v: &str) -> String {
    format!("'{}'", v.replace('\'', "''"))
}

fn enumerated_values(p: &DatabaseProfile, config: &FeatureConfig, tier: SizeTier) -> String {
    if config.enum_value_limit == Some(0) {
        return omitted(tier);
    }
    let limit = config.enum_value_limit.unwrap_or(usize::MAX);
    or_none(
        p.columns()
            .filter_map(|(t, c)| {
                let values = c.categorical_values.as_ref()?;
                let shown: Vec<String> = values.iter().take(limit).map(|v| sql_literal(v)).collect();
                let mut line = format!(
                    "- {}.{} ({} distinct): {}",
                    t.name,
                    c.name,
                    values.len(),
                    shown.join(", ")
                );
                if values.len() > shown.len() {
                    let _ = write!(line, ", ... (+{} more)", values.len() - shown.len());
                }
                Some(line)
            })
            .collect(),
    )
}

fn numeric_ranges(p: &DatabaseProfile) -> String {
    or_none(
        p.columns()
            .filter_map(|(t, c)| {
                let (min, max) = c.numeric_range.as_ref()?;
                Some(format!("- {}.{}: {min} .. {max}", t.name, c.name))
            })
            .collect(),
    )
}

fn detected_formats(p: &DatabaseProfile) -> String {
    or_none(
        p.columns()
            .filter_map(|(t, c)| {
                let f = c.format.as_ref()?;
                Some(format!("- {}.{}: {}", t.name, c.name, f.describe()))
            })
            .collect(),
    )
}

fn is_temporal_column(c: &ColumnProfile) -> bool {
    if c.format.as_ref().is_some_and(DetectedFormat::is_temporal) {
        return true;
    }
    let ty = c.declared_type.to_ascii_uppercase();
    if ty.contains("DATE") || ty.contains("TIME") {
        return true;
    }
    let name = c.name.to_ascii_lowercase();
    c.numeric_range.is_some() && (name == "year" || name.ends_with("_year"))
}

fn unit_hint(name: &str) -> Option<String> {
    let lower = name.to_ascii_lowercase();
    if let (Some(open), Some(close)) = (lower.rfind('('), lower.rfind(')')) {
        if open < close && close == lower.len() - 1 {
            let unit = name[open + 1..close].trim();
            if !unit.is_empty() {
                return Some(unit.to_string());
            }
        }
    }
    UNIT_SUFFIXES
        .iter()
        .find(|(suffix, _)| lower.ends_with(suffix) && lower.len() > suffix.len())
        .map(|(_, unit)| unit.to_string())
}

fn semantic_patterns(p: &DatabaseProfile, config: &FeatureConfig, tier: SizeTier) -> String {
    if config.semantic_patterns == SemanticLevel::Skip {
        return omitted(tier);
    }
    let mut lines: Vec<String> = p
        .foreign_keys()
        .filter(|fk| fk.is_self_reference())
        .map(|fk| format!("- hierarchy: {} (self-reference)", fk.describe()))
        .collect();
    if config.semantic_patterns == SemanticLevel::Full {
        for (t, c) in p.columns() {
            if is_temporal_column(c) {
                lines.push(format!(
                    "- temporal sequence: {}.{} can order or bucket rows in time",
                    t.name, c.name
                ));
            }
        }
        for (t, c) in p.columns() {
            if let Some(unit) = unit_hint(&c.name) {
                lines.push(format!("- unit: {}.{} is measured in {unit}", t.name, c.name));
            }
        }
    }
    or_none(lines)
}

fn cross_table(p: &DatabaseProfile, config: &FeatureConfig, tier: SizeTier) -> String {
    let lines: Vec<String> = match config.cross_table_validation {
        CrossTableLevel::Skip => return omitted(tier),
        CrossTableLevel::Full => p
            .foreign_keys()
            .map(|fk| format!("- {}: {} orphaned rows", fk.describe(), fk.orphans))
            .collect(),
        CrossTableLevel::Critical => p
            .foreign_keys()
            .filter(|fk| fk.orphans > 0)
            .map(|fk| format!("- {}: {} orphaned rows", fk.describe(), fk.orphans))
            .collect(),
    };
    if lines.is_empty() && p.foreign_key_count() > 0 {
        return "no orphaned foreign keys".into();
    }
    or_none(lines)
}

fn needs_quoting(name: &str) -> bool {
    name.is_empty()
        || name.starts_with(|c: char| c.is_ascii_digit())
        || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

struct Trigger {
    advice: &'static str,
    examples: Vec<String>,
}

fn query_guidance(p: &DatabaseProfile) -> String {
    if p.tables.is_empty() {
        return NONE.into();
    }
    let mut triggers = vec![
        Trigger {
            advice: "Text comparisons with = are case-sensitive; copy these values exactly as listed in the enumerated values:",
            examples: p
                .columns()
                .filter(|(_, c)| {
                    c.categorical_values
                        .as_ref()
                        .is_some_and(|vs| vs.iter().any(|v| v.chars().any(char::is_uppercase)))
                })
                .map(|(t, c)| format!("{}.{}", t.name, c.name))
                .collect(),
        },
        Trigger {
            advice: "Nullable foreign keys; an INNER JOIN drops rows where these are NULL:",
            examples: p
                .foreign_keys()
                .filter(|fk| fk.null_rows > 0)
                .map(|fk| format!("{}({})", fk.table, fk.columns.join(", ")))
                .collect(),
        },
        Trigger {
            advice: "Orphaned references; use LEFT JOIN when those rows must be kept:",
            examples: p
                .foreign_keys()
                .filter(|fk| fk.orphans > 0)
                .map(|fk| format!("{} ({} rows)", fk.describe(), fk.orphans))
                .collect(),
        },
        Trigger {
            advice: "Identifiers that must be quoted with double quotes or backticks:",
            examples: p
                .tables
                .iter()
                .filter(|t| needs_quoting(&t.name))
                .map(|t| format!("\"{}\"", t.name))
                .chain(
                    p.columns()
                        .filter(|(_, c)| needs_quoting(&c.name))
                        .map(|(t, c)| format!("{}.\"{}\"", t.name, c.name)),
                )
                .collect(),
        },
        Trigger {
            advice: "Dates stored as TEXT; filter with strftime() or substr() on the stored format:",
            examples: p
                .columns()
                .filter(|(_, c)| c.format.as_ref().is_some_and(DetectedFormat::is_temporal))
                .map(|(t, c)| format!("{}.{}", t.name, c.name))
                .collect(),
        },
        Trigger {
            advice: "Numbers stored as TEXT; CAST(... AS REAL) before arithmetic, ordering or comparison:",
            examples: p
                .columns()
                .filter(|(_, c)| {
                    matches!(
                        c.format,
                        Some(DetectedFormat::NumericText) | Some(DetectedFormat::Currency)
                    )
                })
                .map(|(t, c)| format!("{}.{}", t.name, c.name))
                .collect(),
        },
    ];
    if p.columns().any(|(_, c)| c.numeric_count > 0) {
        triggers.push(Trigger {
            advice: "Integer division truncates; multiply by 1.0 or CAST to REAL when computing ratios or percentages.",
            examples: Vec::new(),
        });
    }
    let lines: Vec<String> = triggers
        .into_iter()
        .filter(|t| t.advice.ends_with('.') || !t.examples.is_empty())
        .map(|t| {
            if t.examples.is_empty() {
                return format!("- {}", t.advice);
            }
            let shown: Vec<&str> = t
                .examples
                .iter()
                .take(GUIDANCE_EXAMPLES)
                .map(String::as_str)
                .collect();
            let mut line = format!("- {} {}", t.advice, shown.join(", "));
            if t.examples.len() > shown.len() {
                let _ = write!(line, " (and {} more)", t.examples.len() - shown.len());
            }
            line
        })
        .collect();
    if lines.is_empty() {
        "No specific pitfalls detected.".into()
    } else {
        lines.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_hints() {
        assert_eq!(unit_hint("weight_kg").as_deref(), Some("kilograms"));
        assert_eq!(unit_hint("Height (cm)").as_deref(), Some("cm"));
        assert_eq!(unit_hint("name"), None);
        assert_eq!(unit_hint("_kg"), None);
    }

    #[test]
    fn quoting_rules() {
        assert!(needs_quoting("First Name"));
        assert!(needs_quoting("1st"));
        assert!(needs_quoting("a-b"));
        assert!(!needs_quoting("first_name"));
    }
}
