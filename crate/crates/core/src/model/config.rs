use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::DEFAULT_MAX_LEN;

/// One classification head: task name and label count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClsHeadSpec {
    pub name: String,
    pub num_labels: usize,
}

impl ClsHeadSpec {
    pub fn new(name: impl Into<String>, num_labels: usize) -> Self {
        Self {
            name: name.into(),
            num_labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::layers")]
    pub n_enc_layers: usize,
    #[serde(default = "defaults::layers")]
    pub n_dec_layers: usize,
    #[serde(default = "defaults::d_ff")]
    pub d_ff: usize,
    #[serde(default = "defaults::max_len")]
    pub max_len: usize,
    #[serde(default = "defaults::dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub cls_heads: Vec<ClsHeadSpec>,
}

mod defaults {
    pub fn d_model() -> usize {
        128
    }
    pub fn n_heads() -> usize {
        4
    }
    pub fn layers() -> usize {
        2
    }
    pub fn d_ff() -> usize {
        512
    }
    pub fn max_len() -> usize {
        super::DEFAULT_MAX_LEN
    }
    pub fn dropout() -> f64 {
        0.1
    }
}

impl ModelConfig {
    /// Desk-scale defaults: 128 wide, 4 heads, 2+2 layers, 512 FFN.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: defaults::d_model(),
            n_heads: defaults::n_heads(),
            n_enc_layers: defaults::layers(),
            n_dec_layers: defaults::layers(),
            d_ff: defaults::d_ff(),
            max_len: defaults::max_len(),
            dropout: defaults::dropout(),
            cls_heads: Vec::new(),
        }
    }

    pub fn with_head(mut self, name: impl Into<String>, num_labels: usize) -> Self {
        self.cls_heads.push(ClsHeadSpec::new(name, num_labels));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 5 {
            return fail(format!(
                "vocab_size {} leaves no room beyond reserved tokens",
                self.vocab_size
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.max_len < 2 {
            return fail(format!("d_ff {} / max_len {} too small", self.d_ff, self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for (i, head) in self.cls_heads.iter().enumerate() {
            if head.num_labels < 2 {
                return fail(format!("head `{}` needs at least two labels", head.name));
            }
            if self.cls_heads[..i].iter().any(|h| h.name == head.name) {
                return fail(format!("duplicate classification head `{}`", head.name));
            }
        }
        Ok(())
    }

    pub fn head(&self, name: &str) -> Option<&ClsHeadSpec> {
        self.cls_heads.iter().find(|h| h.name == name)
    }
}
