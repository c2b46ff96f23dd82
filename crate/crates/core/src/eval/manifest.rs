//! JSON-lines benchmark manifests with CSV gold results.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::db::ResultTable;
use crate::table_csv;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest line {line}: {message}")]
    Line { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldAnswer {
    pub result: ResultTable,
    /// Lowercased qualified table names.
    pub tables: BTreeSet<String>,
    pub order_sensitive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkItem {
    pub id: String,
    pub question: String,
    pub db: PathBuf,
    /// Extra databases attached under a schema name.
    pub attach: BTreeMap<String, PathBuf>,
    pub external_docs: Vec<PathBuf>,
    pub golds: Vec<GoldAnswer>,
    pub dataset: String,
    /// Replay script for offline runs.
    pub script: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGold {
    result: PathBuf,
    #[serde(default)]
    tables: Vec<String>,
    #[serde(default)]
    order_sensitive: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    id: String,
    question: String,
    db: PathBuf,
    #[serde(default)]
    attach: BTreeMap<String, PathBuf>,
    #[serde(default)]
    external_docs: Vec<PathBuf>,
    golds: Vec<RawGold>,
    #[serde(default)]
    dataset: Option<String>,
    #[serde(default)]
    script: Option<PathBuf>,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Parses manifest text; relative paths are taken from `base`. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<BenchmarkItem>, ManifestError> {
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| ManifestError::Line { line: line_no, message };
        let raw: RawItem = serde_json::from_str(trimmed).map_err(|e| err(e.to_string()))?;
        if raw.golds.is_empty() {
            return Err(err(format!("item {} has no gold answer", raw.id)));
        }
        let mut golds = Vec::with_capacity(raw.golds.len());
        for g in raw.golds {
            let path = resolve(base, g.result);
            let result = table_csv::read_file(&path).map_err(|e| err(format!("gold {}: {e}", path.display())))?;
            golds.push(GoldAnswer {
                result,
                tables: g.tables.iter().map(|t| t.to_lowercase()).collect(),
                order_sensitive: g.order_sensitive,
            });
        }
        items.push(BenchmarkItem {
            id: raw.id,
            question: raw.question,
            db: resolve(base, raw.db),
            attach: raw.attach.into_iter().map(|(k, v)| (k, resolve(base, v))).collect(),
            external_docs: raw.external_docs.into_iter().map(|p| resolve(base, p)).collect(),
            golds,
            dataset: raw.dataset.unwrap_or_else(|| "default".into()),
            script: raw.script.map(|p| resolve(base, p)),
        });
    }
    Ok(items)
}

pub fn load_manifest(path: &Path) -> Result<Vec<BenchmarkItem>, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.to_path_buf(), source })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::db::Cell;

    #[test]
    fn parses_items_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("g1.csv"), "n,name\n3,x\n").unwrap();
        let text = r#"
# comment
{"id":"q1","question":"How many?","db":"a.db","golds":[{"result":"g1.csv","tables":["Main.T"]}],"dataset":"lite"}
"#;
        let items = parse_manifest(text, dir.path()).unwrap();
        assert_eq!(items.len(), 1);
        let it = &items[0];
        assert_eq!(it.db, dir.path().join("a.db"));
        assert_eq!(it.dataset, "lite");
        assert_eq!(it.golds[0].tables, BTreeSet::from(["main.t".to_string()]));
        assert_eq!(it.golds[0].result.rows, vec![vec![Cell::Integer(3), Cell::Text("x".into())]]);
    }

    #[test]
    fn rejects_items_without_golds() {
        let e = parse_manifest(r#"{"id":"q","question":"?","db":"a.db","golds":[]}"#, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("line 1"));
    }

    #[test]
    fn missing_gold_file_is_reported() {
        let text = r#"{"id":"q","question":"?","db":"a.db","golds":[{"result":"nope.csv"}]}"#;
        assert!(parse_manifest(text, Path::new("/nonexistent")).is_err());
    }
}
