//! Glue between data files, the encoder, the indexes and the metrics.

use log::warn;

use crate::bm25::InvertedIndex;
use crate::data::{CorpusRecord, DatasetRecord};
use crate::dense::{embed_corpus, DenseIndex};
use crate::encoder::{EncoderConfig, TaserEncoder, Vocab};
use crate::error::Result;
use crate::metrics::{aggregate, recall_at_k, Aggregation, AnswerMatcher, AnswerSet};
use crate::ranking::Run;
use crate::rng::Rng;
use crate::routing::InputKind;
use crate::train::{bm25_negatives, train, MiningQuery, TrainConfig, TrainExample, TrainReport};

/// RNG stream reserved for parameter initialization.
pub const INIT_STREAM: u64 = u64::MAX;

/// Vocabulary over every passage and every question.
pub fn build_vocab(corpus: &[CorpusRecord], datasets: &[&[DatasetRecord]]) -> Vocab {
    let passages: Vec<String> = corpus.iter().map(CorpusRecord::full_text).collect();
    let questions = datasets
        .iter()
        .flat_map(|d| d.iter().map(|r| r.question.as_str()));
    Vocab::build(passages.iter().map(String::as_str).chain(questions))
}

pub fn passage_texts(corpus: &[CorpusRecord]) -> Vec<String> {
    corpus.iter().map(CorpusRecord::full_text).collect()
}

pub fn tokenize_corpus(vocab: &Vocab, corpus: &[CorpusRecord], max_len: usize) -> Vec<Vec<u32>> {
    corpus
        .iter()
        .map(|r| vocab.encode(&r.full_text(), max_len))
        .collect()
}

/// One example per record with a positive; the first positive trains, the
/// others are never used as negatives.
pub fn train_examples(
    records: &[DatasetRecord],
    vocab: &Vocab,
    max_len: usize,
) -> Vec<TrainExample> {
    records
        .iter()
        .filter_map(|r| {
            let Some(&positive) = r.positive_passage_ids.first() else {
                warn!("question {} has no positive passage; skipped", r.id);
                return None;
            };
            let negatives = r
                .negative_passage_ids
                .iter()
                .flatten()
                .copied()
                .filter(|p| !r.positive_passage_ids.contains(p))
                .collect();
            Some(TrainExample::new(
                r.id.clone(),
                vocab.encode(&r.question, max_len),
                positive,
                negatives,
            ))
        })
        .collect()
}

/// The top BM25 passage without an answer string, per record.
pub fn attach_bm25_negatives(
    records: &[DatasetRecord],
    index: &InvertedIndex,
    matcher: &AnswerMatcher,
    count: usize,
) -> Vec<DatasetRecord> {
    records
        .iter()
        .map(|r| {
            let negs = bm25_negatives(
                index,
                matcher,
                &r.question,
                &r.answers,
                &r.positive_passage_ids,
                count,
                100,
            );
            DatasetRecord {
                negative_passage_ids: Some(negs),
                ..r.clone()
            }
        })
        .collect()
}

/// Replaces (or, with `combine`, extends) each record's negatives with
/// mined ones; records without a mined set keep theirs.
pub fn attach_mined_negatives(
    records: &[DatasetRecord],
    mined: &[Option<Vec<usize>>],
    combine: bool,
) -> Vec<DatasetRecord> {
    records
        .iter()
        .zip(mined)
        .map(|(r, m)| {
            let Some(m) = m else { return r.clone() };
            let mut negs = m.clone();
            if combine {
                for &p in r.negative_passage_ids.iter().flatten() {
                    if !negs.contains(&p) {
                        negs.push(p);
                    }
                }
            }
            DatasetRecord {
                negative_passage_ids: Some(negs),
                ..r.clone()
            }
        })
        .collect()
}

pub fn mining_queries<'a>(
    records: &'a [DatasetRecord],
    questions: &'a [Vec<u32>],
) -> Vec<MiningQuery<'a>> {
    records
        .iter()
        .zip(questions)
        .map(|(r, q)| MiningQuery {
            qid: &r.id,
            question: q,
            gold: &r.positive_passage_ids,
        })
        .collect()
}

pub fn answer_set(records: &[DatasetRecord]) -> AnswerSet {
    let mut a = AnswerSet::new();
    for r in records {
        a.insert(r.id.clone(), &r.answers);
    }
    a
}

pub fn tokenize_questions(
    records: &[DatasetRecord],
    vocab: &Vocab,
    max_len: usize,
) -> Vec<Vec<u32>> {
    records
        .iter()
        .map(|r| vocab.encode(&r.question, max_len))
        .collect()
}

pub fn dense_run(
    encoder: &TaserEncoder,
    index: &DenseIndex,
    records: &[DatasetRecord],
    questions: &[Vec<u32>],
    k: usize,
) -> Result<Run> {
    let mut run = Run::new();
    for (r, q) in records.iter().zip(questions) {
        let v = encoder.embed(q, InputKind::Question)?;
        run.insert(r.id.clone(), index.top_k(&v, k)?);
    }
    Ok(run)
}

pub fn bm25_run(index: &InvertedIndex, records: &[DatasetRecord], k: usize) -> Run {
    let mut run = Run::new();
    for r in records {
        run.insert(r.id.clone(), index.search(&r.question, k));
    }
    run
}

/// Micro-averaged R@k.
pub fn mean_recall(run: &Run, answers: &AnswerSet, matcher: &AnswerMatcher, k: usize) -> f64 {
    aggregate(
        &recall_at_k(run, answers, matcher, k),
        None,
        Aggregation::Micro,
    )
    .expect("micro never fails")
}

/// Dense dev R@k of an encoder, re-embedding the corpus each call.
pub struct DevEvaluator<'a> {
    pub passages: &'a [Vec<u32>],
    pub records: &'a [DatasetRecord],
    pub questions: Vec<Vec<u32>>,
    pub answers: AnswerSet,
    pub matcher: &'a AnswerMatcher,
    pub k: usize,
}

impl<'a> DevEvaluator<'a> {
    pub fn new(
        passages: &'a [Vec<u32>],
        records: &'a [DatasetRecord],
        vocab: &Vocab,
        max_len: usize,
        matcher: &'a AnswerMatcher,
        k: usize,
    ) -> Self {
        Self {
            passages,
            records,
            questions: tokenize_questions(records, vocab, max_len),
            answers: answer_set(records),
            matcher,
            k,
        }
    }

    pub fn evaluate(&self, encoder: &TaserEncoder) -> Result<f64> {
        let index = embed_corpus(encoder, self.passages, 1)?;
        let run = dense_run(encoder, &index, self.records, &self.questions, self.k)?;
        Ok(mean_recall(&run, &self.answers, self.matcher, self.k))
    }
}

/// Trains a freshly initialized encoder.
pub fn train_fresh(
    config: &EncoderConfig,
    examples: &[TrainExample],
    passages: &[Vec<u32>],
    train_config: &TrainConfig,
    dev: &DevEvaluator<'_>,
) -> Result<(TaserEncoder, TrainReport)> {
    let mut init = Rng::new(train_config.seed, INIT_STREAM);
    let mut encoder = TaserEncoder::new(config.clone(), &mut init)?;
    let report = train(&mut encoder, examples, passages, train_config, &mut |e| {
        dev.evaluate(e)
    })?;
    Ok((encoder, report))
}

/// Continues training from `start`, as the second mining round does.
pub fn train_from(
    start: &TaserEncoder,
    examples: &[TrainExample],
    passages: &[Vec<u32>],
    train_config: &TrainConfig,
    dev: &DevEvaluator<'_>,
) -> Result<(TaserEncoder, TrainReport)> {
    let mut encoder = start.clone();
    let report = train(&mut encoder, examples, passages, train_config, &mut |e| {
        dev.evaluate(e)
    })?;
    Ok((encoder, report))
}
