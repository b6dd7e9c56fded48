//! Encoder checkpoints: config, optional vocabulary and named parameters
//! in one JSON document. Floats round-trip bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::config::EncoderConfig;
use crate::encoder::model::TaserEncoder;
use crate::encoder::tokenizer::Vocab;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: EncoderConfig,
    vocab: Option<Vocab>,
    params: Vec<NamedTensor>,
}

const FORMAT: &str = "taser-checkpoint/1";

pub fn save_checkpoint(path: &Path, encoder: &TaserEncoder, vocab: Option<&Vocab>) -> Result<()> {
    let params = encoder.params();
    let file = CheckpointFile {
        format: FORMAT.into(),
        config: encoder.config().clone(),
        vocab: vocab.cloned(),
        params: params
            .ids()
            .map(|id| NamedTensor {
                name: params.name(id).to_string(),
                shape: params.value(id).shape().to_vec(),
                data: params.value(id).data().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&file)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TaserEncoder, Option<Vocab>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format != FORMAT {
        return Err(Error::Input(format!(
            "{}: unsupported checkpoint format '{}'",
            path.display(),
            file.format
        )));
    }
    let mut encoder = TaserEncoder::new(file.config, &mut Rng::new(0, 0))?;
    let named = file
        .params
        .into_iter()
        .map(|t| Ok((t.name, Tensor::new(t.shape, t.data)?)))
        .collect::<Result<Vec<_>>>()?;
    encoder.params_mut().load_values(named)?;
    let vocab = file.vocab.map(|mut v| {
        v.reindex();
        v
    });
    Ok((encoder, vocab))
}

/// Hex SHA-256 over the config and every parameter's name and bytes.
pub fn fingerprint(encoder: &TaserEncoder) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(encoder.config()).expect("config serializes"));
    let params = encoder.params();
    for id in params.ids() {
        h.update(params.name(id).as_bytes());
        for v in params.value(id).data() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
