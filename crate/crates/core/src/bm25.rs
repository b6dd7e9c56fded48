//! Lucene-style BM25 over an in-memory inverted index.
//!
//! `score(q, p) = Σ_{t ∈ unique(q)} idf(t) · tf / (tf + k1 · (1 − b + b · len / avgdl))`
//! with `idf(t) = ln(1 + (N − n_t + 0.5) / (n_t + 0.5))`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::{Hit, RankedList};

/// Lowercases and splits on anything that is not alphanumeric.
pub fn analyze(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Posting {
    pub passage: u32,
    pub tf: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    lengths: Vec<u32>,
    avg_len: f64,
    params: Bm25Params,
}

impl InvertedIndex {
    /// Indexes `texts`; passage ids are positions in the slice.
    pub fn build<S: AsRef<str>>(texts: &[S], params: Bm25Params) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Input("cannot index an empty corpus".into()));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut lengths = Vec::with_capacity(texts.len());
        for (id, text) in texts.iter().enumerate() {
            let terms = analyze(text.as_ref());
            lengths.push(terms.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    passage: id as u32,
                    tf: count,
                });
            }
        }
        let avg_len = lengths.iter().map(|&l| l as f64).sum::<f64>() / lengths.len() as f64;
        Ok(Self {
            postings,
            lengths,
            avg_len,
            params,
        })
    }

    pub fn num_passages(&self) -> usize {
        self.lengths.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len_of(&self, passage: usize) -> Option<u32> {
        self.lengths.get(passage).copied()
    }

    /// Postings of `term`, sorted by passage id; empty if unseen.
    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_passages() as f64;
        let df = self.postings(term).len() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = k1 * (1.0 - b + b * len as f64 / self.avg_len);
        idf * tf / (tf + norm)
    }

    /// BM25 of one passage. Repeated query terms count once.
    pub fn score(&self, query: &[String], passage: usize) -> Result<f64> {
        let len = self
            .len_of(passage)
            .ok_or_else(|| Error::Input(format!("passage {passage} is not indexed")))?;
        let mut total = 0.0;
        for term in unique(query) {
            let list = self.postings(term);
            if let Ok(pos) = list.binary_search_by_key(&(passage as u32), |p| p.passage) {
                total += self.term_weight(self.idf(term), list[pos].tf, len);
            }
        }
        Ok(total)
    }

    /// Top `k` passages that share at least one term with the query.
    pub fn top_k(&self, query: &[String], k: usize) -> RankedList {
        let mut acc = vec![0.0; self.num_passages()];
        let mut touched = vec![false; self.num_passages()];
        for term in unique(query) {
            let idf = self.idf(term);
            for p in self.postings(term) {
                let id = p.passage as usize;
                acc[id] += self.term_weight(idf, p.tf, self.lengths[id]);
                touched[id] = true;
            }
        }
        let hits = (0..acc.len())
            .filter(|&i| touched[i])
            .map(|i| Hit {
                passage: i,
                score: acc[i],
            })
            .collect();
        RankedList::top_k(hits, k)
    }

    pub fn search(&self, text: &str, k: usize) -> RankedList {
        self.top_k(&analyze(text), k)
    }

    /// Binary layout, all integers little-endian:
    ///
    /// ```text
    /// magic  b"TSRBM25\x01"
    /// u64 N | f64 avgdl | f64 k1 | f64 b | u64 term count
    /// N × u32 passage length
    /// per term, in byte order: u32 byte len, UTF-8 bytes,
    ///                          u32 posting count, count × (u32 passage, u32 tf)
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.num_passages() as u64).to_le_bytes())?;
        w.write_all(&self.avg_len.to_le_bytes())?;
        w.write_all(&self.params.k1.to_le_bytes())?;
        w.write_all(&self.params.b.to_le_bytes())?;
        w.write_all(&(self.postings.len() as u64).to_le_bytes())?;
        for &l in &self.lengths {
            w.write_all(&l.to_le_bytes())?;
        }
        for (term, list) in &self.postings {
            w.write_all(&(term.len() as u32).to_le_bytes())?;
            w.write_all(term.as_bytes())?;
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for p in list {
                w.write_all(&p.passage.to_le_bytes())?;
                w.write_all(&p.tf.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("malformed BM25 index: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut rd = Reader(r);
        let n = rd.u64().map_err(|_| bad("truncated header"))? as usize;
        let avg_len = rd.f64().map_err(|_| bad("truncated header"))?;
        let k1 = rd.f64().map_err(|_| bad("truncated header"))?;
        let b = rd.f64().map_err(|_| bad("truncated header"))?;
        let terms = rd.u64().map_err(|_| bad("truncated header"))? as usize;
        let mut lengths = Vec::with_capacity(n);
        for _ in 0..n {
            lengths.push(rd.u32().map_err(|_| bad("truncated lengths"))?);
        }
        let mut postings = BTreeMap::new();
        for _ in 0..terms {
            let len = rd.u32().map_err(|_| bad("truncated term"))? as usize;
            let mut bytes = vec![0u8; len];
            rd.0.read_exact(&mut bytes)
                .map_err(|_| bad("truncated term"))?;
            let term = String::from_utf8(bytes).map_err(|_| bad("term is not UTF-8"))?;
            let count = rd.u32().map_err(|_| bad("truncated postings"))? as usize;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let passage = rd.u32().map_err(|_| bad("truncated postings"))?;
                let tf = rd.u32().map_err(|_| bad("truncated postings"))?;
                if passage as usize >= n {
                    return Err(bad("posting beyond corpus"));
                }
                list.push(Posting { passage, tf });
            }
            postings.insert(term, list);
        }
        Ok(Self {
            postings,
            lengths,
            avg_len,
            params: Bm25Params { k1, b },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

const MAGIC: &[u8; 8] = b"TSRBM25\x01";

struct Reader<'a, R>(&'a mut R);

impl<R: Read> Reader<'_, R> {
    fn u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

fn unique(query: &[String]) -> impl Iterator<Item = &str> {
    let mut seen = HashSet::new();
    query
        .iter()
        .map(String::as_str)
        .filter(move |t| seen.insert(*t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Bm25Params {
        Bm25Params::default()
    }

    #[test]
    fn analyzer_examples() {
        assert_eq!(
            analyze("The quick-brown FOX"),
            vec!["the", "quick", "brown", "fox"]
        );
        assert!(analyze("").is_empty());
        assert_eq!(analyze("a a a"), vec!["a", "a", "a"]);
    }

    #[test]
    fn single_document_postings() {
        let idx = InvertedIndex::build(&["a b a"], params()).unwrap();
        assert_eq!(idx.postings("a"), &[Posting { passage: 0, tf: 2 }]);
        assert_eq!(idx.postings("b"), &[Posting { passage: 0, tf: 1 }]);
        assert_eq!(idx.avg_len(), 3.0);
        assert!(idx.postings("zzz").is_empty());
        assert_eq!(InvertedIndex::build(&["a b a"], params()).unwrap(), idx);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            InvertedIndex::build(&empty, params()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn hand_evaluated_score() {
        let idx = InvertedIndex::build(&["x"], params()).unwrap();
        let q = analyze("x");
        // idf = ln(4/3), tf part = 1 / 1.9
        let expected = (4.0f64 / 3.0).ln() / 1.9;
        let s = idx.score(&q, 0).unwrap();
        assert!((s - expected).abs() < 1e-15);
        assert!((s - 0.151_412).abs() < 1e-6);
        assert_eq!(idx.score(&analyze("x x"), 0).unwrap(), s);
        assert_eq!(idx.score(&analyze("y"), 0).unwrap(), 0.0);
        assert!(matches!(idx.score(&q, 1), Err(Error::Input(_))));
    }

    #[test]
    fn top_k_behaviour() {
        let idx = InvertedIndex::build(&["a b", "b c", "c d", "e"], params()).unwrap();
        let all = idx.search("b c", 10);
        assert_eq!(all.len(), 3);
        assert!(idx.search("zzz qqq", 5).is_empty());
        assert_eq!(idx.search("b c", 1).len(), 1);
    }

    #[test]
    fn persistence_roundtrip() {
        let idx =
            InvertedIndex::build(&["alpha beta beta", "gamma", "beta delta"], params()).unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        let back = InvertedIndex::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, idx);
        buf[0] = b'X';
        assert!(InvertedIndex::read_from(&mut buf.as_slice()).is_err());
    }
}
