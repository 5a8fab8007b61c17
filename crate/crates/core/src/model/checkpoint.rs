//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header (config, vocab,
//! parameter names and shapes), then every parameter's values as f64 LE in
//! header order. Output is a pure function of the model, so identical models
//! serialize to identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClsHeadSpec, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::text::Vocab;

const MAGIC: &[u8; 8] = b"MTDCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    // non-reserved tokens in id order
    vocab: Vec<String>,
    params: Vec<(String, Vec<usize>)>,
}

/// A model together with the vocabulary it was trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn to_bytes(model: &Model, vocab: &Vocab) -> Result<Vec<u8>> {
        if vocab.len() != model.config().vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: model.config().clone(),
            vocab: vocab.tokens().to_vec(),
            params: model
                .params()
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params().numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in model.params().iter() {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let total: usize = header.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if bytes.len() - body != total * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes of parameter data, found {}",
                total * 8,
                bytes.len() - body
            )));
        }
        let mut values = bytes[body..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut store = ParamStore::new();
        for (name, shape) in header.params {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        let vocab = Vocab::from_tokens(header.vocab)?;
        let model = Model::from_params(header.config, store)?;
        if vocab.len() != model.config().vocab_size {
            return Err(bad("vocabulary size disagrees with the model config"));
        }
        Ok(Self { model, vocab })
    }

    /// Fails unless the stored heads are exactly `expected`, in order.
    pub fn expect_heads(&self, expected: &[ClsHeadSpec]) -> Result<()> {
        let stored = &self.model.config().cls_heads;
        if stored.as_slice() != expected {
            let show = |h: &[ClsHeadSpec]| {
                h.iter()
                    .map(|h| format!("{}:{}", h.name, h.num_labels))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            return Err(Error::Checkpoint(format!(
                "checkpoint heads [{}] do not match configured heads [{}]",
                show(stored),
                show(expected)
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, vocab: &Vocab) -> Result<()> {
    let path = path.as_ref();
    let bytes = Checkpoint::to_bytes(model, vocab)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Model, Vocab) {
        let vocab = Vocab::build(["a b c d e f g h"], 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 8,
            max_len: 8,
            dropout: 0.0,
            cls_heads: vec![ClsHeadSpec::new("E6", 6)],
        };
        (Model::init(cfg, 9).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, vocab) = setup();
        let bytes = Checkpoint::to_bytes(&model, &vocab).unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.params(), model.params());
        assert_eq!(back.model.config(), model.config());
        assert_eq!(back.vocab, vocab);
        assert_eq!(Checkpoint::to_bytes(&back.model, &back.vocab).unwrap(), bytes);
    }

    #[test]
    fn head_mismatch_is_rejected() {
        let (model, vocab) = setup();
        let ck = Checkpoint::from_bytes(&Checkpoint::to_bytes(&model, &vocab).unwrap()).unwrap();
        assert!(ck.expect_heads(&[ClsHeadSpec::new("E6", 6)]).is_ok());
        assert!(matches!(
            ck.expect_heads(&[ClsHeadSpec::new("E6", 6), ClsHeadSpec::new("E2", 2)]),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (model, vocab) = setup();
        let bytes = Checkpoint::to_bytes(&model, &vocab).unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
