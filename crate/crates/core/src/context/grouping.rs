//! Folding date-partitioned table families (`EVENTS_20240101`, `EVENTS_20240102`, ...)
//! into one logical group.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::db::SchemaSnapshot;

/// A table-name suffix recognised as a time partition. The regex must have
/// two captures: the family prefix and the suffix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixPattern {
    pub label: String,
    pub regex: String,
}

impl SuffixPattern {
    pub fn new(label: &str, regex: &str) -> SuffixPattern {
        SuffixPattern { label: label.into(), regex: regex.into() }
    }

    /// `_YYYYMMDD`, `_YYYY_MM`, `_YYYYMM`, tried in that order.
    pub fn defaults() -> Vec<SuffixPattern> {
        vec![
            SuffixPattern::new("_YYYYMMDD", r"^(.+)_((?:19|20)\d{2}(?:0[1-9]|1[0-2])(?:0[1-9]|[12]\d|3[01]))$"),
            SuffixPattern::new("_YYYY_MM", r"^(.+)_((?:19|20)\d{2}_(?:0[1-9]|1[0-2]))$"),
            SuffixPattern::new("_YYYYMM", r"^(.+)_((?:19|20)\d{2}(?:0[1-9]|1[0-2]))$"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableGroup {
    /// Family prefix, e.g. `GA_SESSION`.
    pub group_name: String,
    pub schema: String,
    /// Qualified member names, sorted.
    pub member_tables: Vec<String>,
    pub suffix_pattern: String,
    /// Suffixes in member order.
    pub suffixes: Vec<String>,
    /// Lexicographically smallest member.
    pub representative: String,
}

impl TableGroup {
    /// `GA_SESSION_* (2 tables: 20240101…20240202)`
    pub fn render(&self) -> String {
        let first = self.suffixes.first().map(String::as_str).unwrap_or("");
        let last = self.suffixes.last().map(String::as_str).unwrap_or("");
        format!("{}_* ({} tables: {first}…{last})", self.group_name, self.member_tables.len())
    }
}

/// Tags grouped tables in a copy of the snapshot and returns the groups.
///
/// Members must share the schema, the prefix, the suffix pattern and the
/// column signature; a family needs at least two members. When a prefix
/// splits into several signature clusters only the largest is grouped.
/// Invalid regexes are skipped with a warning.
pub fn group_time_suffix_tables(snapshot: &SchemaSnapshot, patterns: &[SuffixPattern]) -> (SchemaSnapshot, Vec<TableGroup>) {
    let compiled: Vec<(String, Regex)> = patterns
        .iter()
        .filter_map(|p| match Regex::new(&p.regex) {
            Ok(re) if re.captures_len() >= 3 => Some((p.label.clone(), re)),
            Ok(_) => {
                tracing::warn!("suffix pattern {} needs two capture groups; skipped", p.label);
                None
            }
            Err(e) => {
                tracing::warn!("suffix pattern {} is not a valid regex: {e}", p.label);
                None
            }
        })
        .collect();

    let mut out = snapshot.clone();
    let mut groups = Vec::new();
    for schema in &mut out.schemas {
        // (prefix, label) -> [(table index, suffix)]
        let mut families: BTreeMap<(String, String), Vec<(usize, String)>> = BTreeMap::new();
        for (i, t) in schema.tables.iter().enumerate() {
            for (label, re) in &compiled {
                if let Some(c) = re.captures(&t.name) {
                    families.entry((c[1].to_string(), label.clone())).or_default().push((i, c[2].to_string()));
                    break;
                }
            }
        }
        for ((prefix, label), members) in families {
            let mut clusters: Vec<(Vec<(String, String)>, Vec<(usize, String)>)> = Vec::new();
            for (i, suffix) in members {
                let sig = schema.tables[i].signature();
                match clusters.iter_mut().find(|(s, _)| *s == sig) {
                    Some((_, m)) => m.push((i, suffix)),
                    None => clusters.push((sig, vec![(i, suffix)])),
                }
            }
            let Some((_, mut best)) = clusters.into_iter().reduce(|a, b| if b.1.len() > a.1.len() { b } else { a })
            else {
                continue;
            };
            if best.len() < 2 {
                continue;
            }
            // the same prefix under two suffix styles: first style wins
            if groups.iter().any(|g: &TableGroup| g.group_name == prefix && g.schema == schema.name) {
                continue;
            }
            best.sort_by(|a, b| schema.tables[a.0].qualified_name.cmp(&schema.tables[b.0].qualified_name));
            for (i, _) in &best {
                schema.tables[*i].group_tag = Some(prefix.clone());
            }
            let member_tables: Vec<String> = best.iter().map(|(i, _)| schema.tables[*i].qualified_name.clone()).collect();
            groups.push(TableGroup {
                group_name: prefix,
                schema: schema.name.clone(),
                representative: member_tables[0].clone(),
                member_tables,
                suffix_pattern: label,
                suffixes: best.into_iter().map(|(_, s)| s).collect(),
            });
        }
    }
    (out, groups)
}
