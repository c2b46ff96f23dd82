//! Table-level schema linking: a token scanner over FROM/JOIN clauses.
//!
//! Known limits: table-valued functions are skipped, `FROM` inside
//! `EXTRACT(.. FROM ..)`-style calls is ignored, and a CTE that shadows a
//! real table name hides that table everywhere in the statement.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::sqltok::{tokenize, Token};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning(pub String);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    /// Lowercased, dot-joined names.
    pub tables: BTreeSet<String>,
    pub warnings: Vec<ParseWarning>,
}

const CLAUSE_WORDS: &[&str] = &[
    "where", "join", "left", "right", "inner", "outer", "full", "cross", "natural", "on", "using", "group", "order",
    "limit", "offset", "union", "except", "intersect", "minus", "having", "window", "qualify", "select", "lateral",
    "pivot", "unpivot", "sample", "tablesample", "fetch", "for", "returning", "set", "values",
];

/// Calls whose argument syntax uses FROM without naming a table.
const FROM_FUNCTIONS: &[&str] = &["extract", "substring", "trim", "overlay", "position", "date_part"];

fn is_clause_word(t: &Token) -> bool {
    matches!(t, Token::Word(w) if CLAUSE_WORDS.iter().any(|k| w.eq_ignore_ascii_case(k)))
}

fn is_name(t: Option<&Token>) -> bool {
    match t {
        Some(Token::Quoted(_)) => true,
        Some(w @ Token::Word(_)) => !is_clause_word(w),
        _ => false,
    }
}

/// Reads `a.b.c` starting at `i`; returns the parts and the next index.
fn qualified_name(tokens: &[Token], mut i: usize) -> (Vec<String>, usize) {
    let mut parts = Vec::new();
    while let Some(name) = tokens.get(i).and_then(Token::ident) {
        parts.push(name.to_lowercase());
        i += 1;
        if tokens.get(i).is_some_and(|t| t.is_symbol('.')) && tokens.get(i + 1).and_then(Token::ident).is_some() {
            i += 1;
        } else {
            break;
        }
    }
    (parts, i)
}

fn cte_names(tokens: &[Token]) -> BTreeSet<String> {
    let mut names = BTreeSet::new();
    for i in 1..tokens.len() {
        let prev = &tokens[i - 1];
        let opens_cte = prev.is_keyword("with") || prev.is_keyword("recursive") || prev.is_symbol(',');
        let Some(name) = tokens[i].ident().filter(|_| opens_cte && !tokens[i].is_keyword("recursive")) else {
            continue;
        };
        let mut j = i + 1;
        if tokens.get(j).is_some_and(|t| t.is_symbol('(')) {
            // Column list: `name (a, b) AS (...)`.
            while j < tokens.len() && !tokens[j].is_symbol(')') {
                j += 1;
            }
            j += 1;
        }
        if tokens.get(j).is_some_and(|t| t.is_keyword("as")) && tokens.get(j + 1).is_some_and(|t| t.is_symbol('(')) {
            names.insert(name.to_lowercase());
        }
    }
    names
}

/// Tables referenced after FROM/JOIN anywhere in the statement, subqueries
/// and CTE bodies included, CTE names excluded.
pub fn extract_tables(sql: &str) -> Extraction {
    let scan = tokenize(sql);
    let tokens = scan.tokens;
    let ctes = cte_names(&tokens);
    let mut out = Extraction { warnings: scan.warnings.into_iter().map(ParseWarning).collect(), ..Default::default() };
    // Per open parenthesis: whether it belongs to a FROM-syntax function.
    let mut parens: Vec<bool> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        if tok.is_symbol('(') {
            let func = i > 0 && FROM_FUNCTIONS.iter().any(|f| tokens[i - 1].is_keyword(f));
            parens.push(func);
        } else if tok.is_symbol(')') {
            if parens.pop().is_none() {
                out.warnings.push(ParseWarning(format!("unbalanced ')' at token {i}")));
            }
        } else if (tok.is_keyword("from") && !parens.last().copied().unwrap_or(false)) || tok.is_keyword("join") {
            i = read_table_list(&tokens, i + 1, &ctes, &mut out.tables);
            continue;
        }
        i += 1;
    }
    if !parens.is_empty() {
        out.warnings.push(ParseWarning(format!("{} unclosed '('", parens.len())));
    }
    out
}

/// Reads `t [AS] alias, t2 ...` after FROM/JOIN. Stops before anything else.
fn read_table_list(tokens: &[Token], mut i: usize, ctes: &BTreeSet<String>, found: &mut BTreeSet<String>) -> usize {
    loop {
        if !is_name(tokens.get(i)) {
            return i;
        }
        let (parts, next) = qualified_name(tokens, i);
        i = next;
        if tokens.get(i).is_some_and(|t| t.is_symbol('(')) {
            // Table function such as FLATTEN(...): scanned normally afterwards.
            return i;
        }
        let name = parts.join(".");
        if !(parts.len() == 1 && ctes.contains(&name)) {
            found.insert(name);
        }
        if tokens.get(i).is_some_and(|t| t.is_keyword("as")) {
            i += 1;
        }
        if is_name(tokens.get(i)) && !tokens.get(i + 1).is_some_and(|t| t.is_symbol('.')) {
            i += 1;
        }
        if tokens.get(i).is_some_and(|t| t.is_symbol(',')) && is_name(tokens.get(i + 1)) {
            i += 1;
        } else {
            return i;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const ZERO: Prf = Prf { precision: 0.0, recall: 0.0, f1: 0.0 };
}

/// Set precision/recall/F1 over normalized names. Empty prediction scores 0.
pub fn schema_linking_prf(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> Prf {
    if pred.is_empty() || gold.is_empty() {
        return Prf::ZERO;
    }
    let norm = |s: &BTreeSet<String>| s.iter().map(|t| t.to_lowercase()).collect::<BTreeSet<_>>();
    let (p, g) = (norm(pred), norm(gold));
    let hit = p.intersection(&g).count() as f64;
    let precision = hit / p.len() as f64;
    let recall = hit / g.len() as f64;
    let f1 = if hit == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Prf { precision, recall, f1 }
}

/// Rewrites each predicted name to the gold name it abbreviates, when exactly
/// one gold name ends with it (`tbl` → `db.sch.tbl`).
pub fn qualify_against(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> BTreeSet<String> {
    pred.iter()
        .map(|p| {
            let p = p.to_lowercase();
            let suffix = format!(".{p}");
            let mut hits = gold.iter().map(|g| g.to_lowercase()).filter(|g| *g == p || g.ends_with(&suffix));
            match (hits.next(), hits.next()) {
                (Some(g), None) => g,
                _ => p,
            }
        })
        .collect()
}
