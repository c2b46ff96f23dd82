//! A small, dialect-tolerant SQL token scanner.
//!
//! This is not a grammar. It knows about string literals, quoted identifiers
//! (`"x"`, `` `x` ``, `[x]`), comments and punctuation, which is enough for
//! table extraction and top-level `ORDER BY` detection.

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    /// Bare word: keyword or unquoted identifier, original case kept.
    Word(String),
    /// Quoted identifier with the quotes removed.
    Quoted(String),
    /// Single-quoted string literal (contents only).
    Str(String),
    Number(String),
    Symbol(char),
}

impl Token {
    pub fn is_keyword(&self, kw: &str) -> bool {
        matches!(self, Token::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    pub fn is_symbol(&self, c: char) -> bool {
        matches!(self, Token::Symbol(s) if *s == c)
    }

    /// Identifier text for words and quoted identifiers.
    pub fn ident(&self) -> Option<&str> {
        match self {
            Token::Word(w) | Token::Quoted(w) => Some(w),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Scan {
    pub tokens: Vec<Token>,
    /// Problems found while scanning (for example an unterminated quote).
    pub warnings: Vec<String>,
}

pub fn tokenize(sql: &str) -> Scan {
    let chars: Vec<char> = sql.chars().collect();
    let mut scan = Scan::default();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'-') {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            i += 2;
            while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            if i >= chars.len() {
                scan.warnings.push("unterminated block comment".into());
            }
            i += 2;
        } else if c == '\'' || c == '"' || c == '`' || c == '[' {
            let close = if c == '[' { ']' } else { c };
            let (text, next, closed) = read_quoted(&chars, i + 1, close);
            if !closed {
                scan.warnings.push(format!("unbalanced quote {c} at offset {i}"));
            }
            scan.tokens.push(if c == '\'' {
                Token::Str(text)
            } else {
                Token::Quoted(text)
            });
            i = next;
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '.') {
                i += 1;
            }
            scan.tokens.push(Token::Number(chars[start..i].iter().collect()));
        } else if c.is_alphanumeric() || c == '_' || c == '$' || c == '@' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || matches!(chars[i], '_' | '$' | '@')) {
                i += 1;
            }
            scan.tokens.push(Token::Word(chars[start..i].iter().collect()));
        } else {
            scan.tokens.push(Token::Symbol(c));
            i += 1;
        }
    }
    scan
}

/// Reads until `close`, treating a doubled `close` as an escaped quote.
fn read_quoted(chars: &[char], mut i: usize, close: char) -> (String, usize, bool) {
    let mut out = String::new();
    while i < chars.len() {
        if chars[i] == close {
            if close != ']' && chars.get(i + 1) == Some(&close) {
                out.push(close);
                i += 2;
                continue;
            }
            return (out, i + 1, true);
        }
        out.push(chars[i]);
        i += 1;
    }
    (out, i, false)
}

/// True when the statement has an `ORDER BY` outside every parenthesis,
/// i.e. the final result ordering is part of the answer.
pub fn has_top_level_order_by(sql: &str) -> bool {
    let tokens = tokenize(sql).tokens;
    let mut depth = 0i32;
    for (i, tok) in tokens.iter().enumerate() {
        match tok {
            Token::Symbol('(') => depth += 1,
            Token::Symbol(')') => depth -= 1,
            _ if depth == 0 && tok.is_keyword("order") => {
                if tokens.get(i + 1).is_some_and(|t| t.is_keyword("by")) {
                    return true;
                }
            }
            _ => {}
        }
    }
    false
}

/// Quotes an identifier for SQLite.
pub fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}
