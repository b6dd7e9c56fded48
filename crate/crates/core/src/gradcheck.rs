//! Central finite-difference gradient checking.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`,
/// where `numeric` is the central difference with step `eps` and `analytic`
/// comes from [`Tape::backward`]. `f` must return a scalar.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = f(&mut tape, xv);
        tape.backward(y)
            .expect("f must return a scalar on the tape");
        tape.grad(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    };

    let eval = |probe: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.constant(probe.clone());
        let y = f(&mut tape, xv);
        tape.value(y).item()
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
