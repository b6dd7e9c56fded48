//! Similarity, the contrastive objective and the joint loss.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::dot;

/// `qᵀp`.
pub fn sim(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::dim("sim", &[q.len()], &[p.len()]));
    }
    Ok(dot(q, p))
}

/// `−log softmax(s)[0]` over `s = [qᵀp⁺, qᵀp₁, …]`, on the tape.
///
/// `q`, `positive` and every negative are `[1, d]`.
pub fn contrastive_loss(tape: &mut Tape, q: Var, positive: Var, negatives: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(negatives.len() + 1);
    rows.push(positive);
    rows.extend_from_slice(negatives);
    let cands = if rows.len() == 1 {
        positive
    } else {
        tape.concat_rows(&rows)?
    };
    let ct = tape.transpose(cands)?;
    let scores = tape.matmul(q, ct)?;
    let log_p = tape.log_softmax(scores, 1);
    let first = tape.pick(log_p, 0)?;
    Ok(tape.scale(first, -1.0))
}

/// Value-only form of [`contrastive_loss`] over similarity scores.
pub fn contrastive_loss_value(positive: f64, negatives: &[f64]) -> f64 {
    let max = negatives.iter().copied().fold(positive, f64::max);
    let lse = max
        + ((positive - max).exp() + negatives.iter().map(|s| (s - max).exp()).sum::<f64>()).ln();
    lse - positive
}

/// `L_sim + β · L_ent`; without a routing term the result is `L_sim`.
pub fn joint_loss(tape: &mut Tape, l_sim: Var, l_ent: Option<Var>, beta: f64) -> Result<Var> {
    match l_ent {
        Some(e) if beta != 0.0 => {
            let weighted = tape.scale(e, beta);
            tape.add(l_sim, weighted)
        }
        _ => Ok(l_sim),
    }
}

pub fn joint_loss_value(l_sim: f64, l_ent: f64, beta: f64) -> f64 {
    l_sim + beta * l_ent
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn row(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(Tensor::new(vec![1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn sim_examples() {
        assert_eq!(sim(&[1.0, 2.0, 3.0], &[1.0, 0.0, 1.0]).unwrap(), 4.0);
        assert_eq!(sim(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            sim(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn loss_examples() {
        let mut t = Tape::new();
        let q = row(&mut t, &[1.0, 0.5]);
        let p = row(&mut t, &[0.3, -2.0]);
        let l = contrastive_loss(&mut t, q, p, &[]).unwrap();
        assert_eq!(t.value(l).item(), 0.0);

        let l = contrastive_loss(&mut t, q, p, &[p]).unwrap();
        assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let q = row(&mut t, &[1.0, 1.0]);
        let p = row(&mut t, &[2.0, 0.0]);
        let n = row(&mut t, &[0.0, 0.0]);
        let l = contrastive_loss(&mut t, q, p, &[n]).unwrap();
        assert!((t.value(l).item() - 0.126_928).abs() < 1e-6);
        assert!((t.value(l).item() - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
        assert!((contrastive_loss_value(2.0, &[0.0]) - t.value(l).item()).abs() < 1e-15);
        assert_eq!(contrastive_loss_value(3.0, &[]), 0.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn joint_examples() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::scalar(0.5));
        let e = t.leaf(Tensor::scalar(0.693147));
        let j = joint_loss(&mut t, s, Some(e), 0.01).unwrap();
        assert!((t.value(j).item() - 0.50693147).abs() < 1e-12);
        let j0 = joint_loss(&mut t, s, Some(e), 0.0).unwrap();
        assert_eq!(t.value(j0).item(), 0.5);
        let jd = joint_loss(&mut t, s, None, 0.01).unwrap();
        assert_eq!(t.value(jd).item(), 0.5);
        assert!((joint_loss_value(0.5, 0.693147, 0.01) - 0.50693147).abs() < 1e-15);
    }
}
