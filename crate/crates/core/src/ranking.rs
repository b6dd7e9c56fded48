//! Ranked retrieval results and the TREC run format.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub passage: usize,
    pub score: f64,
}

/// Descending score, ascending passage id on ties. Adding `0.0` folds `-0.0`
/// into `+0.0` so signed zeros tie.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    (b.score + 0.0)
        .total_cmp(&(a.score + 0.0))
        .then_with(|| a.passage.cmp(&b.passage))
}

/// Hits of one query ordered by `(score desc, id asc)`, ids unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    hits: Vec<Hit>,
}

impl RankedList {
    /// Sorts `hits` into rank order. Duplicate ids are rejected.
    pub fn from_hits(mut hits: Vec<Hit>) -> Result<Self> {
        hits.sort_by(rank_order);
        let mut seen = std::collections::HashSet::with_capacity(hits.len());
        if let Some(dup) = hits.iter().find(|h| !seen.insert(h.passage)) {
            return Err(Error::Input(format!(
                "passage {} ranked twice",
                dup.passage
            )));
        }
        Ok(Self { hits })
    }

    /// Keeps the best `k` of `hits` without sorting all of them.
    pub fn top_k(mut hits: Vec<Hit>, k: usize) -> Self {
        if k < hits.len() {
            hits.select_nth_unstable_by(k, rank_order);
            hits.truncate(k);
        }
        hits.sort_by(rank_order);
        Self { hits }
    }

    pub fn hits(&self) -> &[Hit] {
        &self.hits
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.hits.iter().map(|h| h.passage)
    }

    pub fn truncate(&mut self, k: usize) {
        self.hits.truncate(k);
    }
}

/// Ranked lists keyed by query id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Run {
    pub lists: BTreeMap<String, RankedList>,
}

impl Run {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: impl Into<String>, list: RankedList) {
        self.lists.insert(qid.into(), list);
    }

    pub fn get(&self, qid: &str) -> Option<&RankedList> {
        self.lists.get(qid)
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// `qid Q0 docid rank score tag`, one line per hit, ranks from 1.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (qid, list) in &self.lists {
            for (rank, hit) in list.hits().iter().enumerate() {
                writeln!(
                    out,
                    "{qid} Q0 {} {} {} {tag}",
                    hit.passage,
                    rank + 1,
                    hit.score
                )
                .expect("writing to a String");
            }
        }
        out
    }

    pub fn parse_trec(text: &str, origin: &Path) -> Result<Self> {
        let mut hits: BTreeMap<String, Vec<(usize, Hit)>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message,
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 6 {
                return Err(parse_err(format!(
                    "expected 6 columns, found {}",
                    cols.len()
                )));
            }
            let passage = cols[2]
                .parse()
                .map_err(|_| parse_err(format!("bad docid '{}'", cols[2])))?;
            let rank: usize = cols[3]
                .parse()
                .map_err(|_| parse_err(format!("bad rank '{}'", cols[3])))?;
            let score: f64 = cols[4]
                .parse()
                .map_err(|_| parse_err(format!("bad score '{}'", cols[4])))?;
            hits.entry(cols[0].to_string())
                .or_default()
                .push((rank, Hit { passage, score }));
        }
        let mut run = Run::new();
        for (qid, mut list) in hits {
            list.sort_by_key(|(rank, _)| *rank);
            let ranked = RankedList::from_hits(list.into_iter().map(|(_, h)| h).collect())?;
            run.insert(qid, ranked);
        }
        Ok(run)
    }

    pub fn write_trec(&self, path: &Path, tag: &str) -> Result<()> {
        fs::write(path, self.to_trec(tag)).map_err(|e| Error::io(path, e))
    }

    pub fn read_trec(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_trec(&text, path)
    }
}
