//! The encoder: configuration, block layout, parameters, forward pass,
//! parameter counting and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod count;
pub mod layout;
pub mod model;
pub mod params;
pub mod tokenizer;

pub use checkpoint::{fingerprint, load_checkpoint, save_checkpoint};
pub use config::{EncoderConfig, RoutingKind};
pub use count::{count_bi_encoder_params, count_params};
pub use layout::{build_layout, BlockKind, BlockLayout};
pub use model::{EncodeOutput, Encoded, TaserEncoder};
pub use params::{collect_grads, Binder, ParamId, ParamSet};
pub use tokenizer::Vocab;
