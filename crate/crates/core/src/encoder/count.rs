//! Closed-form learnable-parameter totals.

use crate::encoder::config::{EncoderConfig, RoutingKind};
use crate::encoder::layout::build_layout;

/// Exact parameter count of one single encoder built from `config`.
pub fn count_params(config: &EncoderConfig) -> u64 {
    let d = config.d_model as u64;
    let m = config.ffn_inner as u64;
    let experts = config.num_experts as u64;

    let embeddings =
        (config.vocab_size + config.max_positions + config.type_vocab_size) as u64 * d + 2 * d;
    let attention = 4 * (d * d + d);
    let norms = 2 * (2 * d);
    let ffn = (d * m + m) + (m * d + d);
    let router = if config.routing.has_router() {
        d * experts + experts
    } else {
        0
    };

    let layout = build_layout(config.num_blocks, config.interleave_period);
    let specialized = layout.num_specialized() as u64;
    let shared = layout.len() as u64 - specialized;
    let specialized_ffn = if experts > 1 {
        experts * ffn + router
    } else {
        ffn
    };

    let blocks =
        shared * (attention + norms + ffn) + specialized * (attention + norms + specialized_ffn);
    let pooler = if config.include_pooler { d * d + d } else { 0 };
    embeddings + blocks + pooler
}

/// Two independent single-FFN encoders, one per input kind.
pub fn count_bi_encoder_params(config: &EncoderConfig) -> u64 {
    2 * count_params(&config.clone().with_routing(RoutingKind::Shared, 1))
}
