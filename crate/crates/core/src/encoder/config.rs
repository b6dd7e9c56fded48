use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingKind {
    /// One FFN everywhere; specialized blocks degenerate to shared ones.
    Shared,
    /// Question tokens use expert 0, passage tokens expert 1.
    Det,
    /// Learned router on the CLS position; one expert per sequence.
    Seq,
    /// Learned router applied independently to every token.
    Tok,
}

impl RoutingKind {
    pub fn has_router(self) -> bool {
        matches!(self, RoutingKind::Seq | RoutingKind::Tok)
    }

    pub fn name(self) -> &'static str {
        match self {
            RoutingKind::Shared => "shared",
            RoutingKind::Det => "det",
            RoutingKind::Seq => "seq",
            RoutingKind::Tok => "tok",
        }
    }
}

impl std::str::FromStr for RoutingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shared" => Ok(RoutingKind::Shared),
            "det" | "det-r" => Ok(RoutingKind::Det),
            "seq" | "seq-r" => Ok(RoutingKind::Seq),
            "tok" | "tok-r" => Ok(RoutingKind::Tok),
            other => Err(Error::Parameter(format!("unknown routing kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub d_model: usize,
    pub ffn_inner: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Shared blocks between consecutive specialized blocks.
    pub interleave_period: usize,
    pub num_experts: usize,
    pub routing: RoutingKind,
    pub include_pooler: bool,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_temperature")]
    pub router_temperature: f64,
}

fn default_ln_eps() -> f64 {
    1e-12
}

fn default_temperature() -> f64 {
    crate::gumbel::DEFAULT_TEMPERATURE
}

impl EncoderConfig {
    /// BERT-base dimensions with the given routing.
    pub fn bert_base(routing: RoutingKind, num_experts: usize) -> Self {
        Self {
            vocab_size: 30522,
            max_positions: 512,
            type_vocab_size: 2,
            d_model: 768,
            ffn_inner: 3072,
            num_heads: 12,
            num_blocks: 12,
            interleave_period: 2,
            num_experts,
            routing,
            include_pooler: true,
            layer_norm_eps: default_ln_eps(),
            router_temperature: default_temperature(),
        }
    }

    /// Desk-scale model used by the synthetic experiments.
    pub fn toy(vocab_size: usize, routing: RoutingKind) -> Self {
        Self {
            vocab_size,
            max_positions: 32,
            type_vocab_size: 2,
            d_model: 32,
            ffn_inner: 64,
            num_heads: 4,
            num_blocks: 6,
            interleave_period: 2,
            num_experts: default_experts(routing),
            routing,
            include_pooler: false,
            layer_norm_eps: default_ln_eps(),
            router_temperature: default_temperature(),
        }
    }

    pub fn with_routing(mut self, routing: RoutingKind, num_experts: usize) -> Self {
        self.routing = routing;
        self.num_experts = num_experts;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("type_vocab_size", self.type_vocab_size),
            ("d_model", self.d_model),
            ("ffn_inner", self.ffn_inner),
            ("num_heads", self.num_heads),
            ("num_blocks", self.num_blocks),
            ("interleave_period", self.interleave_period),
            ("num_experts", self.num_experts),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Parameter(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        match (self.routing, self.num_experts) {
            (RoutingKind::Shared, 1) | (RoutingKind::Det, 2) => {}
            (RoutingKind::Shared, n) => {
                return Err(Error::Parameter(format!(
                    "shared routing needs 1 expert, got {n}"
                )))
            }
            (RoutingKind::Det, n) => {
                return Err(Error::Parameter(format!(
                    "det routing needs 2 experts, got {n}"
                )))
            }
            _ => {}
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps < 0.0 {
            return Err(Error::Parameter(
                "layer_norm_eps must be non-negative".into(),
            ));
        }
        if self.router_temperature.is_nan() || self.router_temperature <= 0.0 {
            return Err(Error::Parameter(
                "router_temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn default_experts(routing: RoutingKind) -> usize {
    match routing {
        RoutingKind::Shared => 1,
        _ => 2,
    }
}
