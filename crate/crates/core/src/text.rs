//! Word-level vocabulary, tokenization and sequence preparation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const DEFAULT_MAX_LEN: usize = 64;

/// Lowercases `text` and splits it on whitespace, emitting every
/// non-alphanumeric character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from `corpus` lines, keeping tokens seen at least
    /// `min_count` times. Ids follow descending frequency, ties broken
    /// lexicographically.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for tok in tokenize(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_count.max(1) && !RESERVED_TOKENS.contains(&tok.as_str()))
            .collect();
        // BTreeMap order is lexicographic, so a stable sort by count keeps ties ordered.
        ranked.sort_by_key(|&(_, n)| std::cmp::Reverse(n));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Vocabulary from an ordered list of non-reserved tokens.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, tok) in all.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[RESERVED_TOKENS.len()..]
    }

    /// Tokenizes `text` and encodes it with a trailing EOS, truncating to
    /// `max_len` while keeping EOS last.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSeq> {
        if max_len < 2 {
            return Err(Error::InvalidArgument(format!(
                "max_len must be at least 2, got {max_len}"
            )));
        }
        let mut ids: Vec<TokenId> = tokenize(text).iter().map(|t| self.id(t)).collect();
        ids.truncate(max_len - 1);
        ids.push(EOS);
        Ok(TokenSeq {
            ids,
            role: SeqRole::Utterance,
        })
    }

    /// Tokens for `ids`, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[UNK as usize]).to_string())
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }

    /// Text form: the four reserved tokens, then one token per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for tok in &self.tokens {
            s.push_str(tok);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        for (i, expected) in RESERVED_TOKENS.iter().enumerate() {
            match lines.next() {
                Some(l) if l == *expected => {}
                other => {
                    return Err(Error::Data(format!(
                        "vocabulary header line {} should be {expected:?}, found {other:?}",
                        i + 1
                    )))
                }
            }
        }
        Self::from_tokens(lines.map(str::to_string))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqRole {
    Utterance,
    Response,
    DecoderInput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub role: SeqRole,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>, role: SeqRole) -> Self {
        Self { ids, role }
    }

    pub fn with_role(mut self, role: SeqRole) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[BOS] + ids[..n-1]`: the decoder input for teacher forcing.
pub fn shift_right(target: &TokenSeq) -> Result<TokenSeq> {
    if target.role == SeqRole::DecoderInput {
        return Err(Error::InvalidArgument("sequence is already a decoder input".into()));
    }
    if target.ids.is_empty() {
        return Err(Error::InvalidArgument("cannot shift an empty sequence".into()));
    }
    let mut ids = Vec::with_capacity(target.ids.len());
    ids.push(BOS);
    ids.extend_from_slice(&target.ids[..target.ids.len() - 1]);
    Ok(TokenSeq {
        ids,
        role: SeqRole::DecoderInput,
    })
}

/// Right-padded batch of token ids with a real-token mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new([self.rows, self.cols], self.ids.iter().map(|&i| i as f64).collect()).expect("rows·cols ids")
    }
}

/// Pads to the longest sequence with [`PAD`], which doubles as the loss
/// ignore index.
pub fn pad_batch(seqs: &[TokenSeq]) -> Result<PaddedBatch> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("cannot pad an empty batch".into()));
    }
    let cols = seqs.iter().map(TokenSeq::len).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len() * cols);
    let mut mask = Vec::with_capacity(seqs.len() * cols);
    for s in seqs {
        ids.extend_from_slice(&s.ids);
        ids.extend(std::iter::repeat_n(PAD, cols - s.len()));
        mask.extend(std::iter::repeat_n(true, s.len()));
        mask.extend(std::iter::repeat_n(false, cols - s.len()));
    }
    Ok(PaddedBatch {
        rows: seqs.len(),
        cols,
        ids,
        mask,
        lengths: seqs.iter().map(TokenSeq::len).collect(),
    })
}
