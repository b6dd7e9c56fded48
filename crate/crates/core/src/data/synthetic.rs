//! A generated retrieval task with a controllable lexical-overlap dial.
//!
//! Passage `i` holds a unique entity token `entNNNN` (the answer), a set of
//! keywords `kwNN` that no other passage has in the same combination, and
//! filler tokens `filNN` shared across the corpus. A question names its
//! passage's keywords; each keyword is kept verbatim with probability
//! `overlap` and otherwise replaced by its fixed paraphrase `synNN`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::corpus::{CorpusRecord, DatasetRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_passages: usize,
    pub num_train: usize,
    pub num_dev: usize,
    /// Probability that a question keeps a keyword verbatim.
    pub overlap: f64,
    pub num_keywords: usize,
    pub keywords_per_passage: usize,
    pub num_fillers: usize,
    pub fillers_per_passage: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_passages: 256,
            num_train: 128,
            num_dev: 32,
            overlap: 0.5,
            num_keywords: 16,
            keywords_per_passage: 3,
            num_fillers: 32,
            fillers_per_passage: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub corpus: Vec<CorpusRecord>,
    pub train: Vec<DatasetRecord>,
    pub dev: Vec<DatasetRecord>,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        let questions = self.num_train + self.num_dev;
        if questions > self.num_passages {
            return bad(format!(
                "{questions} questions need at least as many passages, got {}",
                self.num_passages
            ));
        }
        if self.num_passages == 0 || self.num_passages > 10_000 {
            return bad(format!(
                "num_passages must be in 1..=10000, got {}",
                self.num_passages
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap must be in [0, 1], got {}", self.overlap));
        }
        if self.keywords_per_passage == 0
            || self.keywords_per_passage > self.num_keywords
            || self.num_keywords > 100
        {
            return bad("need 1 <= keywords_per_passage <= num_keywords <= 100".into());
        }
        if binomial(self.num_keywords, self.keywords_per_passage) < self.num_passages as f64 {
            return bad(format!(
                "{} keywords taken {} at a time cannot label {} passages uniquely",
                self.num_keywords, self.keywords_per_passage, self.num_passages
            ));
        }
        if (self.fillers_per_passage > 0 && self.num_fillers == 0) || self.num_fillers > 100 {
            return bad("need num_fillers in 1..=100 when passages carry fillers".into());
        }
        Ok(())
    }
}

/// Deterministic under `config.seed`.
pub fn make_synthetic_task(config: &SyntheticConfig) -> Result<SyntheticTask> {
    config.validate()?;
    let mut rng = Rng::new(config.seed, 0);

    let mut seen = HashSet::new();
    let mut signatures = Vec::with_capacity(config.num_passages);
    while signatures.len() < config.num_passages {
        let mut sig = rng.sample_distinct(config.num_keywords, config.keywords_per_passage);
        sig.sort_unstable();
        if seen.insert(sig.clone()) {
            signatures.push(sig);
        }
    }

    let corpus = signatures
        .iter()
        .enumerate()
        .map(|(id, sig)| {
            let mut words = vec![format!("ent{id:04}")];
            words.extend(sig.iter().map(|k| format!("kw{k:02}")));
            words.extend(
                (0..config.fillers_per_passage)
                    .map(|_| format!("fil{:02}", rng.below(config.num_fillers))),
            );
            rng.shuffle(&mut words);
            CorpusRecord {
                id,
                title: String::new(),
                text: words.join(" "),
            }
        })
        .collect();

    let chosen = rng.sample_distinct(config.num_passages, config.num_train + config.num_dev);
    let mut records: Vec<DatasetRecord> = chosen
        .iter()
        .enumerate()
        .map(|(n, &pid)| {
            let mut paraphrased = 0;
            let mut words: Vec<String> = signatures[pid]
                .iter()
                .map(|k| {
                    if rng.bernoulli(config.overlap) {
                        format!("kw{k:02}")
                    } else {
                        paraphrased += 1;
                        format!("syn{k:02}")
                    }
                })
                .collect();
            rng.shuffle(&mut words);
            let split = if n < config.num_train { "train" } else { "dev" };
            DatasetRecord {
                id: format!("{split}-{n:04}"),
                question: format!("what {}", words.join(" ")),
                answers: vec![format!("ent{pid:04}")],
                positive_passage_ids: vec![pid],
                negative_passage_ids: None,
                group: Some(format!("para{paraphrased}")),
            }
        })
        .collect();
    let dev = records.split_off(config.num_train);
    Ok(SyntheticTask {
        corpus,
        train: records,
        dev,
    })
}
