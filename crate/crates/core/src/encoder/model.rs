//! The single shared encoder with interleaved specialized blocks.
//!
//! Blocks are post-layer-norm: `H₁ = LN(H + MHA(H))`, `H₂ = LN(H₁ + FFN(H₁))`.
//! In a specialized block the FFN sub-layer is one of several experts,
//! chosen per sequence or per token by the configured routing. The
//! sequence embedding is the top block's output at the CLS position.

use crate::encoder::config::{EncoderConfig, RoutingKind};
use crate::encoder::layout::{build_layout, BlockKind};
use crate::encoder::params::{Binder, ParamId, ParamSet};
use crate::encoder::tokenizer::CLS;
use crate::error::{Error, Result};
use crate::gumbel::Mode;
use crate::rng::Rng;
use crate::routing::{
    self, route_det, BlockRouting, BoundRouter, InputKind, RoutingLogits, RoutingRecord,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Affine map `x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// `W₂·max(0, W₁·h + b₁) + b₂`.
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub inner: Linear,
    pub outer: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct Router {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Single(Ffn),
    Experts {
        experts: Vec<Ffn>,
        router: Option<Router>,
    },
}

impl FeedForward {
    pub fn experts(&self) -> &[Ffn] {
        match self {
            FeedForward::Single(f) => std::slice::from_ref(f),
            FeedForward::Experts { experts, .. } => experts,
        }
    }

    pub fn router(&self) -> Option<Router> {
        match self {
            FeedForward::Single(_) => None,
            FeedForward::Experts { router, .. } => *router,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub kind: BlockKind,
    pub attention: Attention,
    pub attention_norm: Norm,
    pub ffn: FeedForward,
    pub ffn_norm: Norm,
}

#[derive(Clone, Debug)]
pub struct TaserEncoder {
    config: EncoderConfig,
    params: ParamSet,
    token_embedding: ParamId,
    position_embedding: ParamId,
    type_embedding: ParamId,
    embedding_norm: Norm,
    blocks: Vec<Block>,
    pooler: Option<Linear>,
}

/// Output of a tracked forward pass.
#[derive(Clone, Debug)]
pub struct EncodeOutput {
    /// `[1, d]` CLS vector of the top block.
    pub cls: Var,
    pub routing: RoutingRecord,
}

/// Output of an untracked [`TaserEncoder::encode`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub vector: Vec<f64>,
    pub routing: Vec<RoutingLogits>,
}

struct Init<'a> {
    params: &'a mut ParamSet,
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.truncated_normal(INIT_STD))
            .collect();
        self.params.add(
            name,
            Tensor::new(shape.to_vec(), data).expect("valid init shape"),
        )
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::ones(shape))
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            weight: self.normal(format!("{prefix}.weight"), &[d_in, d_out]),
            bias: self.zeros(format!("{prefix}.bias"), &[d_out]),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.ones(format!("{prefix}.gain"), &[d]),
            bias: self.zeros(format!("{prefix}.bias"), &[d]),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, m: usize) -> Ffn {
        Ffn {
            inner: self.linear(&format!("{prefix}.inner"), d, m),
            outer: self.linear(&format!("{prefix}.outer"), m, d),
        }
    }
}

impl TaserEncoder {
    /// Fresh encoder: truncated-normal weights, zero biases, unit LN gains.
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let m = config.ffn_inner;
        let mut params = ParamSet::new();
        let mut init = Init {
            params: &mut params,
            rng,
        };

        let token_embedding = init.normal("embeddings.token".into(), &[config.vocab_size, d]);
        let position_embedding =
            init.normal("embeddings.position".into(), &[config.max_positions, d]);
        let type_embedding = init.normal("embeddings.type".into(), &[config.type_vocab_size, d]);
        let embedding_norm = init.norm("embeddings.norm", d);

        let layout = build_layout(config.num_blocks, config.interleave_period);
        let mut blocks = Vec::with_capacity(layout.len());
        for (i, &kind) in layout.blocks().iter().enumerate() {
            let p = format!("blocks.{i}");
            let attention = Attention {
                query: init.linear(&format!("{p}.attention.query"), d, d),
                key: init.linear(&format!("{p}.attention.key"), d, d),
                value: init.linear(&format!("{p}.attention.value"), d, d),
                output: init.linear(&format!("{p}.attention.output"), d, d),
            };
            let attention_norm = init.norm(&format!("{p}.attention_norm"), d);
            let ffn = match kind {
                BlockKind::Specialized if config.num_experts > 1 => {
                    let experts = (0..config.num_experts)
                        .map(|e| init.ffn(&format!("{p}.ffn.experts.{e}"), d, m))
                        .collect();
                    let router = config.routing.has_router().then(|| Router {
                        weight: init
                            .normal(format!("{p}.ffn.router.weight"), &[d, config.num_experts]),
                        bias: init.zeros(format!("{p}.ffn.router.bias"), &[config.num_experts]),
                    });
                    FeedForward::Experts { experts, router }
                }
                _ => FeedForward::Single(init.ffn(&format!("{p}.ffn"), d, m)),
            };
            let ffn_norm = init.norm(&format!("{p}.ffn_norm"), d);
            blocks.push(Block {
                kind,
                attention,
                attention_norm,
                ffn,
                ffn_norm,
            });
        }
        let pooler = config.include_pooler.then(|| init.linear("pooler", d, d));

        Ok(Self {
            config,
            params,
            token_embedding,
            position_embedding,
            type_embedding,
            embedding_norm,
            blocks,
            pooler,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn pooler(&self) -> Option<Linear> {
        self.pooler
    }

    fn check_input(&self, ids: &[u32]) -> Result<()> {
        if ids.first() != Some(&CLS) {
            return Err(Error::Input(
                "sequence must start with the [CLS] token".into(),
            ));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_positions {}",
                ids.len(),
                self.config.max_positions
            )));
        }
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Forward pass on `tape`. Returns the CLS vector and the router logits
    /// of every specialized block (empty unless routing is learned).
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        ids: &[u32],
        kind: InputKind,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<EncodeOutput> {
        self.check_input(ids)?;
        let n = ids.len();
        let tokens: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..n).collect();

        let tok_table = binder.var(tape, self.token_embedding);
        let pos_table = binder.var(tape, self.position_embedding);
        let type_table = binder.var(tape, self.type_embedding);
        let tok = tape.gather_rows(tok_table, &tokens)?;
        let pos = tape.gather_rows(pos_table, &positions)?;
        let typ = tape.gather_rows(type_table, &vec![0; n])?;
        let h = tape.add(tok, pos)?;
        let h = tape.add(h, typ)?;
        let mut h = self.layer_norm(tape, binder, h, self.embedding_norm)?;

        let mut record = RoutingRecord::default();
        for (i, block) in self.blocks.iter().enumerate() {
            h = self.block_forward(tape, binder, block, i, h, kind, mode, rng, &mut record)?;
        }
        let cls = tape.gather_rows(h, &[0])?;
        Ok(EncodeOutput {
            cls,
            routing: record,
        })
    }

    /// Untracked forward pass returning the `[d]` CLS vector.
    pub fn encode(
        &self,
        ids: &[u32],
        kind: InputKind,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Encoded> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let out = self.forward(&mut tape, &mut binder, ids, kind, mode, rng)?;
        Ok(Encoded {
            vector: tape.value(out.cls).data().to_vec(),
            routing: out
                .routing
                .blocks
                .iter()
                .map(|b| RoutingLogits {
                    block: b.block,
                    logits: tape.value(b.logits).clone(),
                })
                .collect(),
        })
    }

    /// Deterministic eval-mode embedding.
    pub fn embed(&self, ids: &[u32], kind: InputKind) -> Result<Vec<f64>> {
        let mut rng = Rng::new(0, 0);
        Ok(self.encode(ids, kind, Mode::Eval, &mut rng)?.vector)
    }

    fn linear(&self, tape: &mut Tape, binder: &mut Binder<'_>, x: Var, l: Linear) -> Result<Var> {
        let w = binder.var(tape, l.weight);
        let b = binder.var(tape, l.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn layer_norm(&self, tape: &mut Tape, binder: &mut Binder<'_>, x: Var, n: Norm) -> Result<Var> {
        let g = binder.var(tape, n.gain);
        let b = binder.var(tape, n.bias);
        tape.layer_norm(x, g, b, self.config.layer_norm_eps)
    }

    pub fn ffn_forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        ffn: Ffn,
        h: Var,
    ) -> Result<Var> {
        let z = self.linear(tape, binder, h, ffn.inner)?;
        let z = tape.relu(z);
        self.linear(tape, binder, z, ffn.outer)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        att: Attention,
        h: Var,
    ) -> Result<Var> {
        let q = self.linear(tape, binder, h, att.query)?;
        let k = self.linear(tape, binder, h, att.key)?;
        let v = self.linear(tape, binder, h, att.value)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for head in 0..self.config.num_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores, 1);
            heads.push(tape.matmul(weights, vh)?);
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.linear(tape, binder, ctx, att.output)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        block: &Block,
        index: usize,
        h: Var,
        kind: InputKind,
        mode: Mode,
        rng: &mut Rng,
        record: &mut RoutingRecord,
    ) -> Result<Var> {
        let a = self.attention(tape, binder, block.attention, h)?;
        let h1 = tape.add(h, a)?;
        let h1 = self.layer_norm(tape, binder, h1, block.attention_norm)?;

        let f = match &block.ffn {
            FeedForward::Single(ffn) => self.ffn_forward(tape, binder, *ffn, h1)?,
            FeedForward::Experts { experts, router } => match (self.config.routing, router) {
                (RoutingKind::Det, _) | (_, None) => {
                    self.ffn_forward(tape, binder, experts[route_det(kind)], h1)?
                }
                (routing_kind, Some(router)) => {
                    let bound = BoundRouter {
                        weight: binder.var(tape, router.weight),
                        bias: binder.var(tape, router.bias),
                    };
                    let temperature = self.config.router_temperature;
                    let routed = if routing_kind == RoutingKind::Seq {
                        let cls = tape.gather_rows(h1, &[0])?;
                        let r = routing::route_seq(tape, bound, cls, temperature, mode, rng)?;
                        let rows = vec![0; tape.value(h1).rows()];
                        let expanded = tape.gather_rows(r.selection, &rows)?;
                        (expanded, r.logits)
                    } else {
                        let r = routing::route_tok(tape, bound, h1, temperature, mode, rng)?;
                        (r.selection, r.logits)
                    };
                    record.blocks.push(BlockRouting {
                        block: index,
                        logits: routed.1,
                    });
                    self.mix_experts(tape, binder, experts, h1, routed.0)?
                }
            },
        };
        let h2 = tape.add(h1, f)?;
        self.layer_norm(tape, binder, h2, block.ffn_norm)
    }

    /// `Σ_e selection[:, e] ⊙ FFN_e(h)`. Untracked passes skip experts that
    /// no row selected; their contribution is exactly zero.
    fn mix_experts(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        experts: &[Ffn],
        h: Var,
        selection: Var,
    ) -> Result<Var> {
        let mut out: Option<Var> = None;
        for (e, ffn) in experts.iter().enumerate() {
            let sel = tape.value(selection);
            let used = (0..sel.rows()).any(|r| sel.row(r)[e] != 0.0);
            if !binder.tracking() && !used {
                continue;
            }
            let y = self.ffn_forward(tape, binder, *ffn, h)?;
            let w = tape.slice_cols(selection, e, 1)?;
            let y = tape.scale_rows(y, w)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, y)?,
                None => y,
            });
        }
        out.ok_or_else(|| Error::Contract("no expert selected".into()))
    }
}
