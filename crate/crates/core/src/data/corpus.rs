//! Line-delimited JSON corpora and QA datasets.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: usize,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl CorpusRecord {
    /// Title and text joined by a space; the text alone if untitled.
    pub fn full_text(&self) -> String {
        if self.title.trim().is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    pub positive_passage_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_passage_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

fn parse_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push((n + 1, rec));
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Checks that ids are exactly `0..n` in file order and texts are non-empty.
pub fn validate_corpus(records: &[CorpusRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    for (i, r) in records.iter().enumerate() {
        if r.id != i {
            return Err(Error::Input(format!(
                "corpus ids must be dense from 0 in file order: record {i} has id {}",
                r.id
            )));
        }
        if r.text.trim().is_empty() {
            return Err(Error::Input(format!("passage {} has empty text", r.id)));
        }
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let lines: Vec<(usize, CorpusRecord)> = parse_lines(path)?;
    let records: Vec<CorpusRecord> = lines.into_iter().map(|(_, r)| r).collect();
    validate_corpus(&records)?;
    Ok(records)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    write_lines(path, records)
}

/// Checks id uniqueness, non-empty answers and that every referenced
/// passage exists.
pub fn validate_dataset(records: &[DatasetRecord], num_passages: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Input(format!("duplicate question id {}", r.id)));
        }
        if r.answers.iter().all(|a| a.trim().is_empty()) {
            return Err(Error::Input(format!("question {} has no answers", r.id)));
        }
        let refs = r
            .positive_passage_ids
            .iter()
            .chain(r.negative_passage_ids.iter().flatten());
        if let Some(bad) = refs.copied().find(|&p| p >= num_passages) {
            return Err(Error::Input(format!(
                "question {} references passage {bad}, beyond a corpus of {num_passages}",
                r.id
            )));
        }
    }
    Ok(())
}

pub fn load_dataset(path: &Path, num_passages: usize) -> Result<Vec<DatasetRecord>> {
    let lines: Vec<(usize, DatasetRecord)> = parse_lines(path)?;
    let records: Vec<DatasetRecord> = lines.into_iter().map(|(_, r)| r).collect();
    validate_dataset(&records, num_passages)?;
    Ok(records)
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    write_lines(path, records)
}
