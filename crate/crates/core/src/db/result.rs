//! Execution results: the tagged cell model and the tabular result type.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A single value in a result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    pub fn is_null(&self) -> bool {
        matches!(self, Cell::Null)
    }

    /// Text rendering used by keyword search and prompt tables. Numbers are
    /// rendered decimally, blobs as `x'..'` hex.
    pub fn render(&self) -> String {
        match self {
            Cell::Null => "NULL".to_string(),
            Cell::Integer(i) => i.to_string(),
            Cell::Real(r) => format_real(*r),
            Cell::Text(s) => s.clone(),
            Cell::Blob(b) => format!("x'{}'", hex::encode(b)),
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Cell::Null => Value::Null,
            Cell::Integer(i) => Value::from(*i),
            Cell::Real(r) => serde_json::Number::from_f64(*r)
                .map(Value::Number)
                .unwrap_or_else(|| Value::String(format_real(*r))),
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Blob(b) => serde_json::json!({ "blob": hex::encode(b) }),
        }
    }

    /// Inverse of [`Cell::to_json`]; booleans map to integers 0/1.
    pub fn from_json(value: &Value) -> Result<Cell, String> {
        Ok(match value {
            Value::Null => Cell::Null,
            Value::Bool(b) => Cell::Integer(i64::from(*b)),
            Value::Number(n) => match n.as_i64() {
                Some(i) => Cell::Integer(i),
                None => Cell::Real(n.as_f64().ok_or("unrepresentable number")?),
            },
            Value::String(s) => Cell::Text(s.clone()),
            Value::Object(map) if map.len() == 1 && map.contains_key("blob") => {
                let hex_str = map["blob"].as_str().ok_or("blob must be a hex string")?;
                Cell::Blob(hex::decode(hex_str).map_err(|e| e.to_string())?)
            }
            other => return Err(format!("unsupported cell value: {other}")),
        })
    }
}

impl From<Cell> for Value {
    fn from(cell: Cell) -> Value {
        cell.to_json()
    }
}

impl TryFrom<Value> for Cell {
    type Error = String;

    fn try_from(value: Value) -> Result<Self, Self::Error> {
        Cell::from_json(&value)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Integer(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn format_real(r: f64) -> String {
    if r.is_finite() && r.fract() == 0.0 && r.abs() < 1e15 {
        format!("{r:.1}")
    } else {
        r.to_string()
    }
}

/// Tabular output of a query or program.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default)]
    pub row_count_before_truncation: usize,
}

impl ResultTable {
    /// Builds an untruncated table. Panics if a row's arity differs from the
    /// column count.
    pub fn new(column_names: Vec<String>, rows: Vec<Vec<Cell>>) -> Self {
        let width = column_names.len();
        assert!(
            rows.iter().all(|r| r.len() == width),
            "row arity must match column count"
        );
        let n = rows.len();
        ResultTable {
            column_names,
            rows,
            truncated: false,
            row_count_before_truncation: n,
        }
    }

    /// Checks the arity and truncation invariants.
    pub fn validate(&self) -> Result<(), String> {
        let width = self.column_names.len();
        if let Some((i, row)) = self.rows.iter().enumerate().find(|(_, r)| r.len() != width) {
            return Err(format!(
                "row {i} has {} cells, expected {width}",
                row.len()
            ));
        }
        if self.truncated && self.row_count_before_truncation < self.rows.len() {
            return Err("truncated table reports fewer rows than it holds".into());
        }
        Ok(())
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// Renders an aligned plain-text table. At most `max_rows` rows are shown.
    pub fn render_text(&self, max_rows: usize) -> String {
        let shown = self.rows.len().min(max_rows);
        let rendered: Vec<Vec<String>> = self.rows[..shown]
            .iter()
            .map(|r| r.iter().map(|c| c.render().replace('\n', "\\n")).collect())
            .collect();
        let mut widths: Vec<usize> = self.column_names.iter().map(|c| c.chars().count()).collect();
        for row in &rendered {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
                .trim_end()
                .to_string()
        };
        let mut out = String::new();
        out.push_str(&line(&self.column_names));
        out.push('\n');
        out.push_str(
            &widths
                .iter()
                .map(|w| "-".repeat(*w))
                .collect::<Vec<_>>()
                .join("-+-"),
        );
        out.push('\n');
        for row in &rendered {
            out.push_str(&line(row));
            out.push('\n');
        }
        let total = if self.truncated {
            self.row_count_before_truncation
        } else {
            self.rows.len()
        };
        if total > shown {
            out.push_str(&format!("... ({shown} of {total} rows shown)\n"));
        } else {
            out.push_str(&format!("({total} rows)\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_keeps_cell_kinds() {
        let cells = vec![
            Cell::Null,
            Cell::Integer(-4),
            Cell::Real(2.5),
            Cell::Text("MS-01".into()),
            Cell::Blob(vec![0, 255]),
        ];
        for c in cells {
            assert_eq!(Cell::from_json(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn render_marks_truncation() {
        let mut t = ResultTable::new(
            vec!["x".into()],
            (0..5).map(|i| vec![Cell::Integer(i)]).collect(),
        );
        t.truncated = true;
        t.row_count_before_truncation = 50;
        let text = t.render_text(2);
        assert!(text.contains("2 of 50 rows shown"), "{text}");
    }

    #[test]
    fn validate_rejects_ragged_rows() {
        let t = ResultTable {
            column_names: vec!["a".into(), "b".into()],
            rows: vec![vec![Cell::Null]],
            truncated: false,
            row_count_before_truncation: 1,
        };
        assert!(t.validate().is_err());
    }
}
