//! Comparison-normal form for execution results.
//!
//! Two results are equivalent exactly when their canonical forms are equal.
//! Reals are snapped to a significant-digit grid derived from the relative
//! tolerance, so the relation stays transitive (a pairwise tolerance check
//! would not be).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::result::{Cell, ResultTable};

/// Numeric tolerance used when normalizing reals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumTolerance {
    pub relative: f64,
    pub absolute_floor: f64,
}

impl Default for NumTolerance {
    fn default() -> Self {
        NumTolerance {
            relative: 1e-6,
            absolute_floor: 1e-9,
        }
    }
}

impl NumTolerance {
    /// Finest grid on which a relative deviation of `relative` cannot move a
    /// value with one digit fewer across a rounding boundary: 5 digits for 1e-6.
    pub fn significant_digits(&self) -> usize {
        if self.relative <= 0.0 {
            return 17;
        }
        (1.0 - (20.0 * self.relative).log10()).floor().clamp(1.0, 17.0) as usize
    }
}

/// A normalized cell. Integers and reals share one numeric domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NormCell {
    Null,
    /// Canonical decimal rendering plus its value (for ordering).
    Number { repr: String, value: f64 },
    Text(String),
    Blob(Vec<u8>),
}

impl NormCell {
    fn rank(&self) -> u8 {
        match self {
            NormCell::Null => 0,
            NormCell::Number { .. } => 1,
            NormCell::Text(_) => 2,
            NormCell::Blob(_) => 3,
        }
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (NormCell::Number { repr: a, value: x }, NormCell::Number { repr: b, value: y }) => {
                x.total_cmp(y).then_with(|| a.cmp(b))
            }
            (NormCell::Text(a), NormCell::Text(b)) => a.cmp(b),
            (NormCell::Blob(a), NormCell::Blob(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }

    fn to_cell(&self) -> Cell {
        match self {
            NormCell::Null => Cell::Null,
            NormCell::Number { repr, value } => match repr.parse::<i64>() {
                Ok(i) => Cell::Integer(i),
                Err(_) => Cell::Real(*value),
            },
            NormCell::Text(s) => Cell::Text(s.clone()),
            NormCell::Blob(b) => Cell::Blob(b.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalResult {
    pub digest: String,
    pub column_names: Vec<String>,
    pub normalized_rows: Vec<Vec<NormCell>>,
    pub order_sensitive: bool,
}

impl CanonicalResult {
    /// Materializes the normal form back into a table; canonicalizing that
    /// table again yields the same digest.
    pub fn to_table(&self) -> ResultTable {
        ResultTable::new(
            self.column_names.clone(),
            self.normalized_rows
                .iter()
                .map(|r| r.iter().map(NormCell::to_cell).collect())
                .collect(),
        )
    }

    /// Content equality (ignores the order flag, like the digest).
    pub fn same_content(&self, other: &CanonicalResult) -> bool {
        self.column_names == other.column_names && self.normalized_rows == other.normalized_rows
    }
}

fn normalize_real(x: f64, tol: NumTolerance) -> NormCell {
    if x.is_nan() {
        return NormCell::Number { repr: "nan".into(), value: f64::NAN };
    }
    if x.is_infinite() {
        let repr = if x > 0.0 { "inf" } else { "-inf" };
        return NormCell::Number { repr: repr.into(), value: x };
    }
    if x.abs() < tol.absolute_floor {
        return integer_cell(0);
    }
    // Integral reals are snapped too: 71999928.0 and 72000000.0 differ by 1e-6.
    let digits = tol.significant_digits();
    let snapped: f64 = format!("{:.*e}", digits - 1, x)
        .parse()
        .expect("formatted float parses");
    if snapped.fract() == 0.0 && snapped.abs() < 9.0e15 {
        return integer_cell(snapped as i64);
    }
    NormCell::Number {
        repr: format!("{:.*e}", digits - 1, snapped),
        value: snapped,
    }
}

fn integer_cell(i: i64) -> NormCell {
    NormCell::Number { repr: i.to_string(), value: i as f64 }
}

pub fn normalize_cell(cell: &Cell, tol: NumTolerance) -> NormCell {
    match cell {
        Cell::Null => NormCell::Null,
        Cell::Integer(i) => integer_cell(*i),
        Cell::Real(r) => normalize_real(*r, tol),
        Cell::Text(s) => NormCell::Text(s.trim_end().to_string()),
        Cell::Blob(b) => NormCell::Blob(b.clone()),
    }
}

fn compare_rows(a: &[NormCell], b: &[NormCell]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.total_cmp(y);
        if o != Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

fn digest_of(columns: &[String], rows: &[Vec<NormCell>]) -> String {
    let mut h = Sha256::new();
    let mut field = |tag: u8, bytes: &[u8]| {
        h.update([tag]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(b'C', &(columns.len() as u64).to_le_bytes());
    for c in columns {
        field(b'c', c.as_bytes());
    }
    field(b'R', &(rows.len() as u64).to_le_bytes());
    for row in rows {
        field(b'r', &(row.len() as u64).to_le_bytes());
        for cell in row {
            match cell {
                NormCell::Null => field(b'0', &[]),
                NormCell::Number { repr, .. } => field(b'n', repr.as_bytes()),
                NormCell::Text(s) => field(b't', s.as_bytes()),
                NormCell::Blob(b) => field(b'b', b),
            }
        }
    }
    hex::encode(h.finalize())
}

/// Normalizes a result: trailing whitespace trimmed from text, reals snapped
/// to the tolerance grid, column names lowercased, rows sorted (NULLs first)
/// unless the result is order sensitive.
pub fn canonicalize(table: &ResultTable, order_sensitive: bool, tol: NumTolerance) -> CanonicalResult {
    let column_names: Vec<String> = table.column_names.iter().map(|c| c.to_lowercase()).collect();
    let mut rows: Vec<Vec<NormCell>> = table
        .rows
        .iter()
        .map(|r| r.iter().map(|c| normalize_cell(c, tol)).collect())
        .collect();
    if !order_sensitive {
        rows.sort_by(|a, b| compare_rows(a, b));
    }
    CanonicalResult {
        digest: digest_of(&column_names, &rows),
        column_names,
        normalized_rows: rows,
        order_sensitive,
    }
}

pub fn results_equivalent(a: &ResultTable, b: &ResultTable, order_sensitive: bool, tol: NumTolerance) -> bool {
    canonicalize(a, order_sensitive, tol).same_content(&canonicalize(b, order_sensitive, tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: Vec<Vec<Cell>>) -> ResultTable {
        let width = rows.first().map_or(1, |r| r.len());
        ResultTable::new((0..width).map(|i| format!("c{i}")).collect(), rows)
    }

    #[test]
    fn empty_table_has_stable_digest() {
        let a = canonicalize(&ResultTable::default(), false, NumTolerance::default());
        let b = canonicalize(&ResultTable::default(), false, NumTolerance::default());
        assert_eq!(a.digest, b.digest);
        assert!(a.normalized_rows.is_empty());
    }

    #[test]
    fn permutation_ignored_when_unordered() {
        let a = t(vec![vec!["a".into()], vec!["b".into()]]);
        let b = t(vec![vec!["b".into()], vec!["a".into()]]);
        let tol = NumTolerance::default();
        assert_eq!(canonicalize(&a, false, tol).digest, canonicalize(&b, false, tol).digest);
        assert_ne!(canonicalize(&a, true, tol).digest, canonicalize(&b, true, tol).digest);
    }

    #[test]
    fn tiny_real_difference_collapses() {
        let tol = NumTolerance::default();
        let a = t(vec![vec![Cell::Real(0.3000000001)]]);
        let b = t(vec![vec![Cell::Real(0.3)]]);
        assert_eq!(canonicalize(&a, false, tol).digest, canonicalize(&b, false, tol).digest);
    }

    #[test]
    fn integer_and_integral_real_agree() {
        let tol = NumTolerance::default();
        assert!(results_equivalent(
            &t(vec![vec![Cell::Integer(3)]]),
            &t(vec![vec![Cell::Real(3.0)]]),
            false,
            tol
        ));
        assert!(results_equivalent(
            &t(vec![vec![Cell::Integer(3)]]),
            &t(vec![vec![Cell::Real(2.9999999999)]]),
            false,
            tol
        ));
    }

    #[test]
    fn single_cell_change_breaks_equivalence() {
        let tol = NumTolerance::default();
        let a = t(vec![vec![Cell::Real(1.5), "x".into()]]);
        let b = t(vec![vec![Cell::Real(1.5015), "x".into()]]);
        assert!(!results_equivalent(&a, &b, false, tol));
    }

    #[test]
    fn text_trailing_space_and_column_case() {
        let tol = NumTolerance::default();
        let a = ResultTable::new(vec!["Name".into()], vec![vec!["MS-01  ".into()]]);
        let b = ResultTable::new(vec!["NAME".into()], vec![vec!["MS-01".into()]]);
        assert!(results_equivalent(&a, &b, false, tol));
        let c = ResultTable::new(vec!["NAME".into()], vec![vec![" MS-01".into()]]);
        assert!(!results_equivalent(&a, &c, false, tol));
    }

    #[test]
    fn column_order_matters() {
        let tol = NumTolerance::default();
        let a = ResultTable::new(vec!["a".into(), "b".into()], vec![vec![1.into(), 2.into()]]);
        let b = ResultTable::new(vec!["b".into(), "a".into()], vec![vec![2.into(), 1.into()]]);
        assert!(!results_equivalent(&a, &b, false, tol));
    }

    #[test]
    fn nulls_sort_first_and_blobs_exact() {
        let tol = NumTolerance::default();
        let a = t(vec![vec![1.into()], vec![Cell::Null]]);
        let c = canonicalize(&a, false, tol);
        assert_eq!(c.normalized_rows[0][0], NormCell::Null);
        let b1 = t(vec![vec![Cell::Blob(vec![1, 2])]]);
        let b2 = t(vec![vec![Cell::Blob(vec![1, 3])]]);
        assert!(!results_equivalent(&b1, &b2, false, tol));
    }

    #[test]
    fn below_floor_is_zero() {
        let tol = NumTolerance::default();
        assert!(results_equivalent(
            &t(vec![vec![Cell::Real(1e-12)]]),
            &t(vec![vec![Cell::Integer(0)]]),
            false,
            tol
        ));
    }

    #[test]
    fn idempotent_on_mixed_table() {
        let tol = NumTolerance::default();
        let a = t(vec![
            vec![Cell::Real(0.123456789), Cell::Text("z ".into())],
            vec![Cell::Null, Cell::Blob(vec![9])],
        ]);
        let once = canonicalize(&a, false, tol);
        let twice = canonicalize(&once.to_table(), false, tol);
        assert_eq!(once.digest, twice.digest);
    }
}
