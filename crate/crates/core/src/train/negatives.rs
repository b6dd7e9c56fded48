//! Training examples and negative-set construction.

use std::collections::BTreeSet;

use crate::bm25::InvertedIndex;
use crate::error::{Error, Result};
use crate::metrics::{normalize_text, AnswerMatcher};

/// One question with its training positive and explicit negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub qid: String,
    pub question: Vec<u32>,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl TrainExample {
    pub fn new(
        qid: impl Into<String>,
        question: Vec<u32>,
        positive: usize,
        negatives: Vec<usize>,
    ) -> Self {
        let negatives = negatives.into_iter().filter(|&n| n != positive).collect();
        Self {
            qid: qid.into(),
            question,
            positive,
            negatives,
        }
    }

    pub fn validate(&self, num_passages: usize) -> Result<()> {
        if let Some(bad) = std::iter::once(self.positive)
            .chain(self.negatives.iter().copied())
            .find(|&p| p >= num_passages)
        {
            return Err(Error::Input(format!(
                "example {} references passage {bad} outside a corpus of {num_passages}",
                self.qid
            )));
        }
        if self.negatives.contains(&self.positive) {
            return Err(Error::Input(format!(
                "example {} lists its positive as a negative",
                self.qid
            )));
        }
        Ok(())
    }
}

/// Per-example negatives: the first `cap` explicit negatives plus every
/// other positive in the batch, deduplicated, in first-seen order. Any
/// passage that is this example's positive never appears.
pub fn in_batch_negatives(batch: &[TrainExample], cap: Option<usize>) -> Vec<Vec<usize>> {
    batch
        .iter()
        .map(|ex| {
            let explicit = ex.negatives.iter().copied().take(cap.unwrap_or(usize::MAX));
            let in_batch = batch.iter().map(|o| o.positive);
            let mut seen = BTreeSet::new();
            explicit
                .chain(in_batch)
                .filter(|&p| p != ex.positive && seen.insert(p))
                .collect()
        })
        .collect()
}

/// Top `count` BM25 passages for `question` that are not gold and do not
/// contain any answer string.
pub fn bm25_negatives(
    index: &InvertedIndex,
    matcher: &AnswerMatcher,
    question: &str,
    answers: &[String],
    gold: &[usize],
    count: usize,
    depth: usize,
) -> Vec<usize> {
    let answers: Vec<String> = answers.iter().map(|a| normalize_text(a)).collect();
    index
        .search(question, depth)
        .ids()
        .filter(|p| !gold.contains(p) && !matcher.contains_any(*p, &answers))
        .take(count)
        .collect()
}
