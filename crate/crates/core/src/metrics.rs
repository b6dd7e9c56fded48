//! Answer-string recall, graded nDCG and micro/macro aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::{RankedList, Run};

/// Lowercase, with every whitespace run collapsed to one space.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Passage texts pre-normalized for answer matching.
#[derive(Clone, Debug)]
pub struct AnswerMatcher {
    passages: Vec<String>,
}

impl AnswerMatcher {
    pub fn new<S: AsRef<str>>(texts: &[S]) -> Self {
        Self {
            passages: texts.iter().map(|t| normalize_text(t.as_ref())).collect(),
        }
    }

    /// True if passage `id` contains any of `answers` (already normalized).
    pub fn contains_any(&self, id: usize, answers: &[String]) -> bool {
        self.passages.get(id).is_some_and(|p| {
            answers
                .iter()
                .any(|a| !a.is_empty() && p.contains(a.as_str()))
        })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

/// Gold answer strings per query id.
#[derive(Clone, Debug, Default)]
pub struct AnswerSet {
    answers: BTreeMap<String, Vec<String>>,
}

impl AnswerSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<S: AsRef<str>>(&mut self, qid: impl Into<String>, answers: &[S]) {
        self.answers.insert(
            qid.into(),
            answers.iter().map(|a| normalize_text(a.as_ref())).collect(),
        );
    }

    pub fn get(&self, qid: &str) -> Option<&[String]> {
        self.answers.get(qid).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.answers.iter().map(|(q, a)| (q.as_str(), a.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

/// 1.0 if any of the top `k` passages contains an answer string.
pub fn recall_hit(list: &RankedList, answers: &[String], matcher: &AnswerMatcher, k: usize) -> f64 {
    let hit = list
        .hits()
        .iter()
        .take(k)
        .any(|h| matcher.contains_any(h.passage, answers));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Per-query R@k over every query with gold answers; a query absent from
/// the run scores 0. Run queries without answers are skipped with a warning.
pub fn recall_at_k(
    run: &Run,
    answers: &AnswerSet,
    matcher: &AnswerMatcher,
    k: usize,
) -> BTreeMap<String, f64> {
    assert!(k >= 1, "k must be at least 1");
    let empty = RankedList::default();
    let mut out = BTreeMap::new();
    for (qid, a) in answers.iter() {
        if a.is_empty() {
            warn!("query {qid} has no gold answers; excluded from R@{k}");
            continue;
        }
        out.insert(
            qid.to_string(),
            recall_hit(run.get(qid).unwrap_or(&empty), a, matcher, k),
        );
    }
    for qid in run.lists.keys() {
        if answers.get(qid).is_none() {
            warn!("query {qid} has no gold answers; excluded from R@{k}");
        }
    }
    out
}

/// Graded relevance per query, with optional group labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QrelSet {
    pub grades: BTreeMap<String, BTreeMap<usize, u32>>,
    pub groups: BTreeMap<String, String>,
}

impl QrelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: impl Into<String>, passage: usize, grade: u32) {
        self.grades
            .entry(qid.into())
            .or_default()
            .insert(passage, grade);
    }

    /// `qid 0 docid grade` per line.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut q = QrelSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message,
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(err(format!("expected 4 columns, found {}", cols.len())));
            }
            let doc = cols[2]
                .parse()
                .map_err(|_| err(format!("bad docid '{}'", cols[2])))?;
            let grade = cols[3]
                .parse()
                .map_err(|_| err(format!("bad grade '{}'", cols[3])))?;
            q.insert(cols[0], doc, grade);
        }
        Ok(q)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

/// nDCG@k with gain `2^rel − 1` and discount `log₂(rank + 1)`.
pub fn ndcg(list: &RankedList, grades: &BTreeMap<usize, u32>, k: usize) -> f64 {
    let dcg: f64 = list
        .hits()
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, h)| gain(grades.get(&h.passage).copied().unwrap_or(0)) / (i as f64 + 2.0).log2())
        .sum();
    let mut ideal: Vec<u32> = grades.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / (i as f64 + 2.0).log2())
        .sum();
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

/// Per-query nDCG@k over every query in `qrels`; a query absent from the
/// run scores 0.
pub fn ndcg_at_k(run: &Run, qrels: &QrelSet, k: usize) -> BTreeMap<String, f64> {
    assert!(k >= 1, "k must be at least 1");
    let empty = RankedList::default();
    qrels
        .grades
        .iter()
        .map(|(qid, grades)| (qid.clone(), ndcg(run.get(qid).unwrap_or(&empty), grades, k)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Micro,
    Macro,
}

/// Micro: mean over queries. Macro: mean over the per-group means.
pub fn aggregate(
    scores: &BTreeMap<String, f64>,
    groups: Option<&BTreeMap<String, String>>,
    mode: Aggregation,
) -> Result<f64> {
    if scores.is_empty() {
        return Ok(0.0);
    }
    match mode {
        Aggregation::Micro => Ok(scores.values().sum::<f64>() / scores.len() as f64),
        Aggregation::Macro => {
            let groups = groups
                .filter(|g| !g.is_empty())
                .ok_or_else(|| Error::Input("macro aggregation needs group labels".into()))?;
            let mut per: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            for (qid, s) in scores {
                let g = groups
                    .get(qid)
                    .ok_or_else(|| Error::Input(format!("query {qid} has no group label")))?;
                let e = per.entry(g.as_str()).or_default();
                e.0 += s;
                e.1 += 1;
            }
            Ok(per.values().map(|(s, n)| s / *n as f64).sum::<f64>() / per.len() as f64)
        }
    }
}

/// Summary written by the `eval` command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    /// `"R@5"` → micro mean, and so on.
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub macro_metrics: BTreeMap<String, f64>,
}
