use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Candidate, Language};
use crate::db::{canonicalize, NumTolerance, ResultTable};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceClass {
    pub digest: String,
    /// Candidate ids, by ascending index.
    pub members: Vec<String>,
    pub size: usize,
    pub has_sql: bool,
    #[serde(skip)]
    pub member_indices: Vec<usize>,
}

impl EquivalenceClass {
    fn lowest_index(&self) -> usize {
        self.member_indices.iter().copied().min().unwrap_or(usize::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    /// Ranked: larger first, then classes with a SQL member, then the lowest member index.
    pub classes: Vec<EquivalenceClass>,
    /// Index into `classes`; `None` when no candidate succeeded.
    pub winner: Option<usize>,
    pub final_sql: Option<String>,
    #[serde(skip)]
    pub final_result: Option<ResultTable>,
    pub transpiled: bool,
    /// Original winner when the answer fell back to a SQL class.
    pub fallback_from: Option<usize>,
}

impl VoteOutcome {
    pub fn winner_class(&self) -> Option<&EquivalenceClass> {
        self.winner.map(|w| &self.classes[w])
    }

    /// Winner with only Python members: the final SQL still has to be produced.
    pub fn needs_transpile(&self) -> bool {
        self.winner_class().is_some_and(|c| !c.has_sql)
    }

    /// Best-ranked class other than the winner that contains SQL.
    pub fn fallback_class(&self) -> Option<usize> {
        self.classes.iter().enumerate().position(|(i, c)| Some(i) != self.winner && c.has_sql)
    }
}

/// Groups succeeded candidates by canonical output (as multisets) and picks
/// the largest class. Ties go to a class with a SQL member, then to the
/// class holding the lowest candidate index.
pub fn majority_vote(candidates: &[Candidate], tol: NumTolerance) -> VoteOutcome {
    let mut classes: Vec<EquivalenceClass> = Vec::new();
    let mut by_digest: HashMap<String, usize> = HashMap::new();
    let mut ordered: Vec<&Candidate> = candidates.iter().collect();
    ordered.sort_by_key(|c| c.index);
    for c in ordered {
        let Some(t) = c.table() else { continue };
        let digest = canonicalize(t, false, tol).digest;
        let slot = *by_digest.entry(digest.clone()).or_insert_with(|| {
            classes.push(EquivalenceClass { digest, members: vec![], size: 0, has_sql: false, member_indices: vec![] });
            classes.len() - 1
        });
        let class = &mut classes[slot];
        class.members.push(c.id.clone());
        class.member_indices.push(c.index);
        class.size += 1;
        class.has_sql |= c.language() == Some(Language::Sql);
    }
    classes.sort_by(|a, b| {
        b.size
            .cmp(&a.size)
            .then(b.has_sql.cmp(&a.has_sql))
            .then(a.lowest_index().cmp(&b.lowest_index()))
    });
    let winner = (!classes.is_empty()).then_some(0);
    let mut out = VoteOutcome { classes, winner, final_sql: None, final_result: None, transpiled: false, fallback_from: None };
    if let Some(w) = out.winner {
        out.final_result = representative(candidates, &out.classes[w], None).and_then(|c| c.table().cloned());
        if out.classes[w].has_sql {
            out.final_sql = sql_member(candidates, &out.classes[w]);
        }
    }
    out
}

/// Lowest-index member, optionally restricted to one language.
pub(crate) fn representative<'a>(
    candidates: &'a [Candidate],
    class: &EquivalenceClass,
    language: Option<Language>,
) -> Option<&'a Candidate> {
    candidates
        .iter()
        .filter(|c| class.member_indices.contains(&c.index))
        .filter(|c| language.is_none() || c.language() == language)
        .min_by_key(|c| c.index)
}

pub(crate) fn sql_member(candidates: &[Candidate], class: &EquivalenceClass) -> Option<String> {
    representative(candidates, class, Some(Language::Sql)).and_then(|c| c.program.as_ref().map(|p| p.source.clone()))
}
