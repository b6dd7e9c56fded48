//! Dense passage retrieval with one encoder that interleaves shared blocks
//! with blocks holding one expert FFN per input kind.
//!
//! The crate bundles a small reverse-mode autodiff engine, the encoder and
//! its routing mechanisms, contrastive training with hard-negative mining,
//! BM25, exact dense and hybrid search, and retrieval metrics.

pub mod bm25;
pub mod config;
pub mod data;
pub mod dense;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gumbel;
pub mod hybrid;
pub mod metrics;
pub mod pipeline;
pub mod ranking;
pub mod rng;
pub mod routing;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use encoder::{EncoderConfig, RoutingKind, TaserEncoder, Vocab};
pub use error::{Error, Result};
pub use gumbel::Mode;
pub use ranking::{Hit, RankedList, Run};
pub use rng::Rng;
pub use routing::InputKind;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainExample};
