//! CSV ⇄ [`ResultTable`] with typed cell inference.
//!
//! Each cell is inferred on its own: empty → NULL, then integer, then real,
//! then text. A header row is required.

use std::io::Read;
use std::path::Path;

use crate::db::{Cell, ResultTable};

pub fn infer_cell(raw: &str) -> Cell {
    if raw.is_empty() {
        return Cell::Null;
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Cell::Integer(i);
    }
    // Rust accepts "inf"/"nan" spellings; keep those as text.
    if raw.bytes().any(|b| b.is_ascii_digit()) {
        if let Ok(r) = raw.parse::<f64>() {
            if r.is_finite() {
                return Cell::Real(r);
            }
        }
    }
    Cell::Text(raw.to_string())
}

pub fn parse_typed<R: Read>(reader: R) -> Result<ResultTable, String> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let headers = rdr.headers().map_err(|e| format!("missing CSV header: {e}"))?.clone();
    let column_names: Vec<String> = headers.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        rows.push(rec.iter().map(infer_cell).collect());
    }
    Ok(ResultTable::new(column_names, rows))
}

pub fn read_file(path: &Path) -> Result<ResultTable, String> {
    let f = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_typed(f).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn to_csv(table: &ResultTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&table.column_names).expect("in-memory write");
    for row in &table.rows {
        let fields: Vec<String> = row
            .iter()
            .map(|c| match c {
                Cell::Null => String::new(),
                other => other.render(),
            })
            .collect();
        w.write_record(&fields).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8 csv")
}
