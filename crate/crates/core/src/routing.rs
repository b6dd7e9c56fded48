//! Expert selection for specialized blocks.
//!
//! Det-R picks the expert from the input kind alone. Seq-R and Tok-R use a
//! linear router `u·A + c` followed by a hard Gumbel-Softmax: Seq-R routes
//! the whole sequence from the CLS position, Tok-R routes every token on
//! its own. The noise-free router logits are kept so that the entropy
//! regularizer can be computed after the forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gumbel::{gumbel_softmax_hard, Mode};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputKind {
    Question,
    Passage,
}

/// Question → expert 0 (Q-FFN), passage → expert 1 (P-FFN).
pub fn route_det(kind: InputKind) -> usize {
    match kind {
        InputKind::Question => 0,
        InputKind::Passage => 1,
    }
}

/// Router weights bound on a tape: `weight` is `[d, I]`, `bias` is `[I]`.
#[derive(Clone, Copy, Debug)]
pub struct BoundRouter {
    pub weight: Var,
    pub bias: Var,
}

impl BoundRouter {
    pub fn num_experts(&self, tape: &Tape) -> usize {
        tape.value(self.bias).len()
    }

    /// Pre-noise logits for every row of `u` (`[n, d]` → `[n, I]`).
    pub fn logits(&self, tape: &mut Tape, u: Var) -> Result<Var> {
        let z = tape.matmul(u, self.weight)?;
        tape.add_bias(z, self.bias)
    }
}

/// The selection made by one router call.
#[derive(Clone, Copy, Debug)]
pub struct Routed {
    /// One-hot selection, one row per routed unit.
    pub selection: Var,
    /// Noise-free logits `u·A + c`, same shape as `selection`.
    pub logits: Var,
}

/// Routes a sequence from its CLS FFN input `h_cls` (`[1, d]`).
pub fn route_seq(
    tape: &mut Tape,
    router: BoundRouter,
    h_cls: Var,
    temperature: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Routed> {
    if tape.value(h_cls).rows() != 1 {
        return Err(Error::dim("route_seq", tape.value(h_cls).shape(), &[1, 0]));
    }
    let logits = router.logits(tape, h_cls)?;
    let selection = gumbel_softmax_hard(tape, logits, temperature, rng, mode)?;
    Ok(Routed { selection, logits })
}

/// Routes every row of `h` (`[n, d]`) independently; each row draws its own
/// noise from `rng`.
pub fn route_tok(
    tape: &mut Tape,
    router: BoundRouter,
    h: Var,
    temperature: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Routed> {
    let logits = router.logits(tape, h)?;
    let selection = gumbel_softmax_hard(tape, logits, temperature, rng, mode)?;
    Ok(Routed { selection, logits })
}

/// Router logits of one specialized block for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct BlockRouting {
    pub block: usize,
    pub logits: Var,
}

/// Every router decision made during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct RoutingRecord {
    pub blocks: Vec<BlockRouting>,
}

impl RoutingRecord {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Routed units across all blocks (rows of every logits tensor).
    pub fn units(&self, tape: &Tape) -> usize {
        self.blocks
            .iter()
            .map(|b| tape.value(b.logits).rows())
            .sum()
    }
}

/// Sum of per-unit entropies `-Σ P(i) ln P(i)` with `P = softmax(logits)`,
/// and the number of units summed.
pub fn entropy_sum(tape: &mut Tape, records: &[BlockRouting]) -> Result<(Var, usize)> {
    if records.is_empty() {
        return Err(Error::Contract("entropy of an empty routing record".into()));
    }
    let mut terms = Vec::with_capacity(records.len());
    let mut units = 0;
    for r in records {
        let axis = tape.value(r.logits).shape().len() - 1;
        units += tape.value(r.logits).rows();
        let p = tape.softmax(r.logits, axis);
        let log_p = tape.log_softmax(r.logits, axis);
        let plogp = tape.mul(p, log_p)?;
        terms.push(tape.sum(plogp));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok((tape.scale(total, -1.0), units))
}

/// Mean routing entropy over every routed unit in `records`.
pub fn entropy_regularizer(tape: &mut Tape, records: &[BlockRouting]) -> Result<Var> {
    let (sum, units) = entropy_sum(tape, records)?;
    Ok(tape.scale(sum, 1.0 / units as f64))
}

/// Value-only entropy of `softmax(logits)`, natural log.
pub fn entropy_of_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits
        .iter()
        .map(|l| {
            let p = (l - max).exp() / z;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// Noise-free logits of one block, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingLogits {
    pub block: usize,
    pub logits: Tensor,
}
