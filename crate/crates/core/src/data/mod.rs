//! Corpus and dataset files, and the synthetic task generator.

pub mod corpus;
pub mod synthetic;

pub use corpus::{
    load_corpus, load_dataset, validate_corpus, validate_dataset, write_corpus, write_dataset,
    CorpusRecord, DatasetRecord,
};
pub use synthetic::{make_synthetic_task, SyntheticConfig, SyntheticTask};
