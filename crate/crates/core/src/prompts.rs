//! Prompt templates. The text lives in `prompts/*.txt`; every system prompt
//! starts with a `[phase: ...]` marker so replay fixtures can match on it.

use crate::db::Dialect;

pub const SUMMARIZE: &str = include_str!("../prompts/summarize.txt");
pub const ROUTE: &str = include_str!("../prompts/route.txt");
pub const PLAN: &str = include_str!("../prompts/plan.txt");
pub const PLAN_REVIEW: &str = include_str!("../prompts/plan_review.txt");
pub const PLAN_REFINE: &str = include_str!("../prompts/plan_refine.txt");
pub const SYNTHESIZE: &str = include_str!("../prompts/synthesize.txt");
pub const REVIEW_OUTPUT: &str = include_str!("../prompts/review_output.txt");
pub const REPAIR: &str = include_str!("../prompts/repair.txt");
pub const BACKTRACK: &str = include_str!("../prompts/backtrack.txt");
pub const TRANSPILE: &str = include_str!("../prompts/transpile.txt");

/// Header of the prior-plan section in diversity-enforced batch prompts.
pub const PRIOR_PLANS_HEADER: &str = "## Previously generated plans";

/// Replaces `{{key}}` placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

pub fn dialect_name(d: Dialect) -> &'static str {
    match d {
        Dialect::Sqlite => "SQLite",
        Dialect::SnowflakeLike => "Snowflake",
    }
}

pub struct TranspileRule {
    pub title: &'static str,
    pub body: &'static str,
    pub warehouse_only: bool,
}

pub const TRANSPILE_RULES: [TranspileRule; 6] = [
    TranspileRule {
        title: "Runtime Type Preservation",
        body: "When the Python code branches on runtime types (isinstance checks against str, dict, list, tuple), \
the SQL must reproduce that branching. Apply string functions only to values that are strings at runtime.",
        warehouse_only: false,
    },
    TranspileRule {
        title: "VARIANT Column Unnesting",
        body: "A Python helper that takes one column value, returns an empty list for null or missing input, \
parses the value with json.loads, turns a JSON array or object into a list and is applied row by row \
(Series.apply, map or similar) is unnesting a VARIANT column. Translate it to \
(LATERAL) FLATTEN(input => COLUMN | PARSE_JSON(COLUMN)).",
        warehouse_only: true,
    },
    TranspileRule {
        title: "Identifier vs. String Distinction",
        body: "Keep quoted identifiers, string literals and regular expressions clearly apart: double quotes name \
columns and tables, single quotes delimit strings and patterns.",
        warehouse_only: false,
    },
    TranspileRule {
        title: "Regex Semantics Alignment",
        body: "Python's str.contains(REGEX, case=...) searches anywhere in the string, so translate it as \
REGEXP_LIKE(str, '.*' || REGEX || '.*', flags). You must prepend and append '.*' to the pattern. \
With case=False use the flags 'is', not 'i' alone.",
        warehouse_only: false,
    },
    TranspileRule {
        title: "VARIANT Data Access Paths",
        body: "When reading VARIANT columns whose values are JSON objects, write the full path to the value: \
single-quoted keys for case-sensitive access (\"col\":'KeyName'), chained keys for nesting \
(\"col\":'Outer':'Inner'), zero-based indices for arrays (\"col\"[0]) and GET_PATH(\"col\", 'dynamic_key') \
for keys computed at runtime. Never stop at the base column name.",
        warehouse_only: true,
    },
    TranspileRule {
        title: "JSON String Columns",
        body: "Columns holding JSON text must go through PARSE_JSON() first; then access values as described \
under VARIANT Data Access Paths.",
        warehouse_only: true,
    },
];

/// The numbered rule list for a dialect. Warehouse-only rules are dropped
/// for plain SQL engines.
pub fn transpile_rules(dialect: Dialect) -> String {
    TRANSPILE_RULES
        .iter()
        .filter(|r| dialect == Dialect::SnowflakeLike || !r.warehouse_only)
        .enumerate()
        .map(|(i, r)| format!("{}. {}. {}", i + 1, r.title, r.body))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_system_prompt_has_a_phase_marker() {
        for p in [SUMMARIZE, ROUTE, PLAN, PLAN_REVIEW, PLAN_REFINE, SYNTHESIZE, REVIEW_OUTPUT, REPAIR, BACKTRACK, TRANSPILE] {
            assert!(p.starts_with("[phase: "), "{p}");
        }
    }

    #[test]
    fn placeholders_render() {
        assert_eq!(render("a {{x}} b {{x}}", &[("x", "1")]), "a 1 b 1");
    }

    #[test]
    fn variant_rules_only_for_warehouse() {
        let lite = transpile_rules(Dialect::Sqlite);
        assert!(lite.contains("Runtime Type Preservation"));
        assert!(lite.contains("Identifier vs. String Distinction"));
        assert!(lite.contains("prepend and append '.*'"));
        assert!(lite.contains("'is'"));
        assert!(!lite.contains("VARIANT"));
        let snow = transpile_rules(Dialect::SnowflakeLike);
        assert_eq!(snow.lines().count(), 6);
        assert!(snow.contains("VARIANT Column Unnesting"));
        assert!(snow.contains("VARIANT Data Access Paths"));
        assert!(snow.contains("FLATTEN(input => COLUMN | PARSE_JSON(COLUMN))"));
    }
}
