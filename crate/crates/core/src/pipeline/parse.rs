//! Extraction of plans, programs and verdicts from model text.

use std::sync::LazyLock;

use regex::Regex;

use super::{Language, ReviewVerdict, VerdictKind};

static PLAN_BLOCK: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?is)<plan(?:\s+language\s*=\s*["']?([A-Za-z|]+)["']?)?\s*>(.*?)</plan>"#).unwrap()
});
static FENCE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)```[ \t]*([A-Za-z0-9_+-]*)[^\n]*\n(.*?)```").unwrap());

fn language_tag(tag: &str) -> Option<Language> {
    match tag.trim().to_ascii_lowercase().as_str() {
        "sql" | "sqlite" | "snowflake" => Some(Language::Sql),
        "python" | "py" | "python3" => Some(Language::Python),
        _ => None,
    }
}

/// Every `<plan>` block, in order. Empty narratives are skipped.
pub fn parse_plans(text: &str) -> Vec<(Option<Language>, String)> {
    PLAN_BLOCK
        .captures_iter(text)
        .filter_map(|c| {
            let body = c[2].trim().to_string();
            if body.is_empty() {
                return None;
            }
            Some((c.get(1).and_then(|m| language_tag(m.as_str())), body))
        })
        .collect()
}

fn looks_like_sql(body: &str) -> bool {
    let first = body.trim_start().split_whitespace().next().unwrap_or("").to_ascii_uppercase();
    matches!(first.as_str(), "SELECT" | "WITH" | "(SELECT")
}

/// The last fenced program. Untagged fences count as SQL only when they
/// start like a query.
pub fn parse_program(text: &str) -> Option<(Language, String)> {
    FENCE
        .captures_iter(text)
        .filter_map(|c| {
            let body = c[2].trim().to_string();
            if body.is_empty() {
                return None;
            }
            let tag = &c[1];
            let lang = if tag.is_empty() { looks_like_sql(&body).then_some(Language::Sql) } else { language_tag(tag) };
            lang.map(|l| (l, body))
        })
        .last()
}

fn verdict_word(text: &str) -> Option<(String, usize)> {
    for (i, line) in text.lines().enumerate() {
        let l = line.trim().trim_start_matches(['*', '#', ' ']).trim_end_matches('*');
        if l.len() >= 8 && l[..8].eq_ignore_ascii_case("VERDICT:") {
            let word = l[8..].trim().trim_matches(|c: char| c == '*' || c == '`').to_ascii_uppercase();
            let word = word.split_whitespace().next().unwrap_or("").to_string();
            return Some((word, i));
        }
    }
    None
}

fn reason(text: &str, verdict_line: usize) -> String {
    for line in text.lines() {
        let l = line.trim();
        if l.len() >= 7 && l[..7].eq_ignore_ascii_case("REASON:") {
            return l[7..].trim().to_string();
        }
    }
    // otherwise everything after the verdict line
    text.lines().skip(verdict_line + 1).collect::<Vec<_>>().join("\n").trim().to_string()
}

/// `VERDICT: OK|CODE_ERROR|PLAN_ERROR` plus `REASON:`. `None` when unparseable.
pub fn parse_verdict(text: &str) -> Option<ReviewVerdict> {
    let (word, line) = verdict_word(text)?;
    let kind = match word.as_str() {
        "OK" => VerdictKind::Ok,
        "CODE_ERROR" => VerdictKind::CodeError,
        "PLAN_ERROR" => VerdictKind::PlanError,
        _ => return None,
    };
    if kind == VerdictKind::Ok {
        return Some(ReviewVerdict::ok());
    }
    Some(ReviewVerdict::new(kind, reason(text, line)))
}

/// `VERDICT: OK|REVISE`: `Some(None)` for OK, `Some(Some(issues))` for REVISE.
pub fn parse_plan_review(text: &str) -> Option<Option<String>> {
    let (word, line) = verdict_word(text)?;
    match word.as_str() {
        "OK" => Some(None),
        "REVISE" => {
            let issues = reason(text, line);
            Some(Some(if issues.is_empty() { "(no details given)".into() } else { issues }))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_with_and_without_language() {
        let text = "intro\n<plan language=\"SQL\">use A</plan>\n<plan>use B</plan><PLAN language='python'>\nloop\n</PLAN><plan> </plan>";
        let plans = parse_plans(text);
        assert_eq!(
            plans,
            vec![
                (Some(Language::Sql), "use A".into()),
                (None, "use B".into()),
                (Some(Language::Python), "loop".into())
            ]
        );
    }

    #[test]
    fn last_tagged_fence_wins() {
        let text = "try\n```sql\nSELECT 1\n```\nfinal:\n```python\nanswer = [[1]]\n```";
        assert_eq!(parse_program(text), Some((Language::Python, "answer = [[1]]".into())));
        assert_eq!(parse_program("```\nselect 2\n```"), Some((Language::Sql, "select 2".into())));
        assert_eq!(parse_program("```\nprint(1)\n```"), None);
        assert_eq!(parse_program("no code here"), None);
    }

    #[test]
    fn verdicts() {
        assert_eq!(parse_verdict("VERDICT: OK\nREASON: fine"), Some(ReviewVerdict::ok()));
        let v = parse_verdict("Looks off.\n**VERDICT: PLAN_ERROR**\nREASON: wrong tables").unwrap();
        assert_eq!(v, ReviewVerdict::new(VerdictKind::PlanError, "wrong tables"));
        let v = parse_verdict("VERDICT: CODE_ERROR").unwrap();
        assert!(!v.message.is_empty());
        assert_eq!(parse_verdict("I think it's fine"), None);
        assert_eq!(parse_verdict("VERDICT: MAYBE"), None);
    }

    #[test]
    fn plan_review_verdicts() {
        assert_eq!(parse_plan_review("VERDICT: OK"), Some(None));
        assert_eq!(parse_plan_review("VERDICT: REVISE\nno table X"), Some(Some("no table X".into())));
        assert_eq!(parse_plan_review("sure"), None);
    }
}
