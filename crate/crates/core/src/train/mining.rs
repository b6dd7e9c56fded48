//! Dense hard-negative mining.

use log::warn;

use crate::dense::DenseIndex;
use crate::encoder::TaserEncoder;
use crate::error::Result;
use crate::routing::InputKind;

/// A question to mine for: its token ids and every gold passage.
#[derive(Clone, Copy, Debug)]
pub struct MiningQuery<'a> {
    pub qid: &'a str,
    pub question: &'a [u32],
    pub gold: &'a [usize],
}

/// For each query, the dense top-`top_n` passages after removing its gold
/// passages, in score order. Queries without gold passages yield `None`.
pub fn mine_hard_negatives(
    encoder: &TaserEncoder,
    index: &DenseIndex,
    queries: &[MiningQuery<'_>],
    top_n: usize,
) -> Result<Vec<Option<Vec<usize>>>> {
    index.check_fingerprint(encoder)?;
    queries
        .iter()
        .map(|q| {
            if q.gold.is_empty() {
                warn!("question {} has no positive passage; not mined", q.qid);
                return Ok(None);
            }
            let v = encoder.embed(q.question, InputKind::Question)?;
            let list = index.top_k(&v, top_n + q.gold.len())?;
            Ok(Some(
                list.ids()
                    .filter(|p| !q.gold.contains(p))
                    .take(top_n)
                    .collect(),
            ))
        })
        .collect()
}
