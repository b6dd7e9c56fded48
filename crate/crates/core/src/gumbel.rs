//! Hard Gumbel-Softmax with the straight-through estimator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Stochastic routing: Gumbel noise is added to the logits.
    Train,
    /// Deterministic argmax routing; the rng is never touched.
    Eval,
}

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One-hot sample per row of `logits` (`[I]` or `[n, I]`).
///
/// The forward value is exactly one-hot. Gradients flow through
/// `softmax((logits + g) / temperature)`, with `g` zero in eval mode.
pub fn gumbel_softmax_hard(
    tape: &mut Tape,
    logits: Var,
    temperature: f64,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let shape = tape.value(logits).shape().to_vec();
    let width = *shape.last().expect("non-empty shape");
    let axis = shape.len() - 1;

    let perturbed = match mode {
        Mode::Train => {
            let noise: Vec<f64> = (0..tape.value(logits).len())
                .map(|_| rng.gumbel())
                .collect();
            let noise = tape.constant(Tensor::new(shape.clone(), noise)?);
            tape.add(logits, noise)?
        }
        Mode::Eval => logits,
    };
    let scaled = if temperature == 1.0 {
        perturbed
    } else {
        tape.scale(perturbed, 1.0 / temperature)
    };
    let soft = tape.softmax(scaled, axis);

    let y = tape.value(scaled);
    let mut hard = vec![0.0; y.len()];
    for r in 0..y.rows() {
        hard[r * width + argmax(y.row(r))] = 1.0;
    }
    tape.straight_through(Tensor::new(shape, hard)?, soft)
}
