//! Passage embedding matrix and exact inner-product top-k search.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::encoder::{fingerprint, TaserEncoder};
use crate::error::{Error, Result};
use crate::ranking::{Hit, RankedList};
use crate::routing::InputKind;
use crate::tensor::dot;

/// Row `i` is the embedding of passage `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    vectors: Vec<f64>,
    fingerprint: String,
}

impl DenseIndex {
    pub fn from_rows(rows: Vec<Vec<f64>>, fingerprint: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Input(
                "dense index needs at least one non-empty row".into(),
            ));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::dim("dense index row", &[rows[bad].len()], &[dim]));
        }
        Ok(Self {
            dim,
            vectors: rows.concat(),
            fingerprint: fingerprint.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn check_fingerprint(&self, encoder: &TaserEncoder) -> Result<()> {
        let enc = fingerprint(encoder);
        if enc != self.fingerprint {
            return Err(Error::Fingerprint {
                index: self.fingerprint.clone(),
                encoder: enc,
            });
        }
        Ok(())
    }

    /// Exact top `k` by inner product, ties by ascending id.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<RankedList> {
        if query.len() != self.dim {
            return Err(Error::dim("dense_topk", &[query.len()], &[self.dim]));
        }
        let hits = (0..self.len())
            .map(|i| Hit {
                passage: i,
                score: dot(query, self.row(i)),
            })
            .collect();
        Ok(RankedList::top_k(hits, k))
    }

    /// Layout: magic `b"TSRDNS\x00\x01"`, u32 fingerprint length, fingerprint
    /// bytes, u64 rows, u64 dim, then rows·dim little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + self.vectors.len() * 8);
        buf.extend_from_slice(DENSE_MAGIC);
        buf.extend_from_slice(&(self.fingerprint.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.fingerprint.as_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.vectors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = || Error::Input(format!("{}: malformed dense index", path.display()));
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        if take(8)? != DENSE_MAGIC {
            return Err(bad());
        }
        let flen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let fingerprint = String::from_utf8(take(flen)?.to_vec()).map_err(|_| bad())?;
        let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(bad());
        }
        let raw = take(rows * dim * 8)?;
        let vectors = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            dim,
            vectors,
            fingerprint,
        })
    }
}

const DENSE_MAGIC: &[u8; 8] = b"TSRDNS\x00\x01";

/// Embeds every passage as [`InputKind::Passage`] in eval mode.
///
/// `workers > 1` spreads passages over a dedicated thread pool; rows are
/// written by id, so the result does not depend on scheduling.
pub fn embed_corpus(
    encoder: &TaserEncoder,
    passages: &[Vec<u32>],
    workers: usize,
) -> Result<DenseIndex> {
    let embed_one = |(i, ids): (usize, &Vec<u32>)| {
        encoder
            .embed(ids, InputKind::Passage)
            .map_err(|e| Error::Input(format!("passage {i}: {e}")))
    };
    let rows: Vec<Vec<f64>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
        pool.install(|| {
            passages
                .par_iter()
                .enumerate()
                .map(embed_one)
                .collect::<Result<_>>()
        })?
    } else {
        passages
            .iter()
            .enumerate()
            .map(embed_one)
            .collect::<Result<_>>()?
    };
    DenseIndex::from_rows(rows, fingerprint(encoder))
}

/// Exact top-k of `query` over `index`.
pub fn dense_topk(index: &DenseIndex, query: &[f64], k: usize) -> Result<RankedList> {
    index.top_k(query, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(rows: Vec<Vec<f64>>) -> DenseIndex {
        DenseIndex::from_rows(rows, "fp").unwrap()
    }

    #[test]
    fn zero_query_ranks_by_id() {
        let idx = index(vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 9.0]]);
        let r = idx.top_k(&[0.0, 0.0], 3).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(r.hits().iter().all(|h| h.score == 0.0));
    }

    #[test]
    fn inner_product_not_nearest_neighbour() {
        let idx = index(vec![vec![1.0, 0.0], vec![10.0, 0.0]]);
        let r = idx.top_k(idx.row(0), 2).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn dimension_mismatch() {
        let idx = index(vec![vec![1.0, 0.0]]);
        assert!(matches!(idx.top_k(&[1.0], 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn save_load_roundtrip() {
        let idx = index(vec![vec![0.1, -2.5, 3.25], vec![1e-300, 7.0, f64::MAX]]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dense.idx");
        idx.save(&p).unwrap();
        assert_eq!(DenseIndex::load(&p).unwrap(), idx);
    }
}
