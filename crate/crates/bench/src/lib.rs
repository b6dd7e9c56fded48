//! Deterministic fixtures shared by the benchmarks.

use taser_core::bm25::{Bm25Params, InvertedIndex};
use taser_core::data::{make_synthetic_task, SyntheticConfig, SyntheticTask};
use taser_core::dense::DenseIndex;
use taser_core::pipeline::{build_vocab, tokenize_corpus, INIT_STREAM};
use taser_core::{EncoderConfig, Rng, RoutingKind, TaserEncoder, Tensor, Vocab};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed, 0);
    let data = (0..rows * cols)
        .map(|_| rng.uniform() * 2.0 - 1.0)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// `n` random unit-scale rows of width `dim`.
pub fn dense_index(n: usize, dim: usize, seed: u64) -> DenseIndex {
    let m = random_matrix(n, dim, seed);
    let rows = (0..n).map(|i| m.row(i).to_vec()).collect();
    DenseIndex::from_rows(rows, "bench").expect("rectangular rows")
}

pub struct Fixture {
    pub task: SyntheticTask,
    pub vocab: Vocab,
    pub passages: Vec<Vec<u32>>,
    pub bm25: InvertedIndex,
}

/// A synthetic task of `num_passages` passages with its indexes.
pub fn fixture(num_passages: usize) -> Fixture {
    let task = make_synthetic_task(&SyntheticConfig {
        num_passages,
        num_train: num_passages / 2,
        num_dev: num_passages / 8,
        num_keywords: 32,
        seed: 1,
        ..Default::default()
    })
    .expect("valid synthetic config");
    let vocab = build_vocab(&task.corpus, &[&task.train, &task.dev]);
    let passages = tokenize_corpus(&vocab, &task.corpus, 32);
    let texts: Vec<String> = task.corpus.iter().map(|r| r.full_text()).collect();
    let bm25 = InvertedIndex::build(&texts, Bm25Params::default()).expect("non-empty corpus");
    Fixture {
        task,
        vocab,
        passages,
        bm25,
    }
}

pub fn toy_encoder(vocab_size: usize, routing: RoutingKind) -> TaserEncoder {
    TaserEncoder::new(
        EncoderConfig::toy(vocab_size, routing),
        &mut Rng::new(0, INIT_STREAM),
    )
    .expect("valid toy config")
}
