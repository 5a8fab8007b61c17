//! Shared transformer encoder-decoder with one tied LM head and one
//! classification head per task.
//!
//! Blocks are pre-norm. The token embedding is shared by encoder, decoder and
//! the LM head; one learned positional table serves both stacks. A
//! classification head reads the decoder state at the last real position of
//! the right-shifted utterance.

mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ClsHeadSpec, ModelConfig};

use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, Graph, ParamId, ParamStore, Tensor, Var};
use crate::text::{pad_batch, shift_right, PaddedBatch, SeqRole, TokenId, TokenSeq};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attention,
    ln_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    tokens: ParamId,
    positions: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    lm_bias: ParamId,
    cls: Vec<(String, Linear)>,
}

/// Registers parameters in a fixed order, or looks them up by name when
/// rebuilding the layout for a loaded store.
#[allow(clippy::large_enum_variant)]
enum Builder<'a> {
    Init { store: &'a mut ParamStore, rng: ChaCha8Rng },
    Lookup(&'a ParamStore),
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl Builder<'_> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        match self {
            Builder::Init { store, rng } => {
                let n: usize = shape.iter().product();
                let values = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                        (0..n).map(|_| dist.sample(rng)).collect()
                    }
                };
                store.insert(name, Tensor::new(shape.to_vec(), values)?)
            }
            Builder::Lookup(store) => {
                let id = store
                    .id(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
                if store.get(id).shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        store.get(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<Linear> {
        Ok(Linear {
            w: self.param(&format!("{name}.weight"), &[fan_in, fan_out], init)?,
            b: self.param(&format!("{name}.bias"), &[fan_out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.param(&format!("{name}.gamma"), &[d], Init::Ones)?,
            beta: self.param(&format!("{name}.beta"), &[d], Init::Zeros)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        let init = Init::Normal(1.0 / (d as f64).sqrt());
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d, init)?,
            k: self.linear(&format!("{name}.k"), d, d, init)?,
            v: self.linear(&format!("{name}.v"), d, d, init)?,
            o: self.linear(&format!("{name}.o"), d, d, init)?,
        })
    }

    fn layout(&mut self, cfg: &ModelConfig) -> Result<Layout> {
        let d = cfg.d_model;
        let emb = Init::Normal(1.0 / (d as f64).sqrt());
        let ff_in = Init::Normal(1.0 / (d as f64).sqrt());
        let ff_out = Init::Normal(1.0 / (cfg.d_ff as f64).sqrt());
        let tokens = self.param("embed.tokens", &[cfg.vocab_size, d], emb)?;
        let positions = self.param("embed.positions", &[cfg.max_len, d], emb)?;
        let mut encoder = Vec::with_capacity(cfg.n_enc_layers);
        for l in 0..cfg.n_enc_layers {
            let p = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                ln_attn: self.norm(&format!("{p}.ln_attn"), d)?,
                attn: self.attention(&format!("{p}.attn"), d)?,
                ln_ff: self.norm(&format!("{p}.ln_ff"), d)?,
                ff_in: self.linear(&format!("{p}.ff_in"), d, cfg.d_ff, ff_in)?,
                ff_out: self.linear(&format!("{p}.ff_out"), cfg.d_ff, d, ff_out)?,
            });
        }
        let enc_norm = self.norm("encoder.ln_final", d)?;
        let mut decoder = Vec::with_capacity(cfg.n_dec_layers);
        for l in 0..cfg.n_dec_layers {
            let p = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                ln_self: self.norm(&format!("{p}.ln_self"), d)?,
                self_attn: self.attention(&format!("{p}.self_attn"), d)?,
                ln_cross: self.norm(&format!("{p}.ln_cross"), d)?,
                cross_attn: self.attention(&format!("{p}.cross_attn"), d)?,
                ln_ff: self.norm(&format!("{p}.ln_ff"), d)?,
                ff_in: self.linear(&format!("{p}.ff_in"), d, cfg.d_ff, ff_in)?,
                ff_out: self.linear(&format!("{p}.ff_out"), cfg.d_ff, d, ff_out)?,
            });
        }
        let dec_norm = self.norm("decoder.ln_final", d)?;
        let lm_bias = self.param("lm_head.bias", &[cfg.vocab_size], Init::Zeros)?;
        let mut cls = Vec::with_capacity(cfg.cls_heads.len());
        for head in &cfg.cls_heads {
            // Zero weights: an untrained head scores every label equally.
            let lin = self.linear(&format!("cls.{}", head.name), d, head.num_labels, Init::Zeros)?;
            cls.push((head.name.clone(), lin));
        }
        Ok(Layout {
            tokens,
            positions,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            lm_bias,
            cls,
        })
    }
}

/// Encoder output for one or more utterances, detached from any graph.
#[derive(Debug, Clone)]
pub struct EncoderMemory {
    values: Tensor,
    mask: Vec<bool>,
    rows: usize,
    len: usize,
}

/// Model configuration, parameters and the handles that address them.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Seeded initialization: scaled-normal weights, zero biases, unit
    /// layer-norm gains, zero classification heads.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = Builder::Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
        .layout(&config)?;
        Ok(Self { config, params, layout })
    }

    /// Reassembles a model from stored parameters; every expected parameter
    /// must exist with the expected shape and nothing else may be present.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Builder::Lookup(&params).layout(&config)?;
        let expected = Self::init(config.clone(), 0)?.params.len();
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, architecture defines {expected}",
                params.len()
            )));
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_names(&self) -> Vec<String> {
        self.layout.cls.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn head_param_ids(&self, task: &str) -> Option<[ParamId; 2]> {
        self.layout.cls.iter().find(|(n, _)| n == task).map(|(_, l)| [l.w, l.b])
    }

    fn head(&self, task: &str) -> Result<Linear> {
        self.layout
            .cls
            .iter()
            .find(|(n, _)| n == task)
            .map(|(_, l)| *l)
            .ok_or_else(|| Error::UnknownTask {
                name: task.to_string(),
                registered: self.head_names(),
            })
    }

    fn lin(&self, g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
        let w = g.param(l.w);
        let b = g.param(l.b);
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Result<Var> {
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn drop(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng {
            Some(rng) => g.dropout(x, self.config.dropout, rng),
            None => Ok(x),
        }
    }

    fn attend(&self, g: &mut Graph, query: Var, kv: Var, a: &Attention, mask: &AttentionMask) -> Result<Var> {
        let q = self.lin(g, query, a.q)?;
        let k = self.lin(g, kv, a.k)?;
        let v = self.lin(g, kv, a.v)?;
        let ctx = g.attention(q, k, v, self.config.n_heads, mask)?;
        self.lin(g, ctx, a.o)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ff_in: Linear, ff_out: Linear) -> Result<Var> {
        let h = self.lin(g, x, ff_in)?;
        let h = g.gelu(h);
        self.lin(g, h, ff_out)
    }

    fn embed(&self, g: &mut Graph, batch: &PaddedBatch, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        if batch.cols > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_len {}",
                batch.cols, self.config.max_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside a vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = g.param(self.layout.tokens);
        let tok = g.embedding(table, &batch.ids)?;
        let positions: Vec<u32> = (0..batch.rows).flat_map(|_| 0..batch.cols as u32).collect();
        let pos_table = g.param(self.layout.positions);
        let pos = g.embedding(pos_table, &positions)?;
        let x = g.add(tok, pos)?;
        self.drop(g, x, rng)
    }

    /// Runs the encoder; output rows are `[batch·len, d_model]`.
    pub fn encode(&self, g: &mut Graph, enc: &PaddedBatch, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let mask = AttentionMask::new(enc.rows, enc.cols, enc.cols, &enc.mask, false)?;
        let mut x = self.embed(g, enc, rng.as_deref_mut())?;
        for layer in &self.layout.encoder {
            let h = self.norm(g, x, layer.ln_attn)?;
            let h = self.attend(g, h, h, &layer.attn, &mask)?;
            let h = self.drop(g, h, rng.as_deref_mut())?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.ln_ff)?;
            let h = self.feed_forward(g, h, layer.ff_in, layer.ff_out)?;
            let h = self.drop(g, h, rng.as_deref_mut())?;
            x = g.add(x, h)?;
        }
        self.norm(g, x, self.layout.enc_norm)
    }

    /// Runs the decoder against `memory`; output rows are `[batch·len, d_model]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        memory: Var,
        memory_mask: &[bool],
        memory_len: usize,
        dec: &PaddedBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let self_mask = AttentionMask::new(dec.rows, dec.cols, dec.cols, &dec.mask, true)?;
        let cross_mask = AttentionMask::new(dec.rows, dec.cols, memory_len, memory_mask, false)?;
        let mut x = self.embed(g, dec, rng.as_deref_mut())?;
        for layer in &self.layout.decoder {
            let h = self.norm(g, x, layer.ln_self)?;
            let h = self.attend(g, h, h, &layer.self_attn, &self_mask)?;
            let h = self.drop(g, h, rng.as_deref_mut())?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.ln_cross)?;
            let h = self.attend(g, h, memory, &layer.cross_attn, &cross_mask)?;
            let h = self.drop(g, h, rng.as_deref_mut())?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, layer.ln_ff)?;
            let h = self.feed_forward(g, h, layer.ff_in, layer.ff_out)?;
            let h = self.drop(g, h, rng.as_deref_mut())?;
            x = g.add(x, h)?;
        }
        self.norm(g, x, self.layout.dec_norm)
    }

    fn lm_logits(&self, g: &mut Graph, hidden: Var, rows: usize, cols: usize) -> Result<Var> {
        let table = g.param(self.layout.tokens);
        let logits = g.matmul_t(hidden, table)?;
        let bias = g.param(self.layout.lm_bias);
        let logits = g.add_bias(logits, bias)?;
        g.reshape(logits, [rows, cols, self.config.vocab_size])
    }

    /// Next-token logits `[B, T, V]` for utterances `enc` and right-shifted
    /// responses `dec`.
    pub fn forward_generation(
        &self,
        g: &mut Graph,
        enc: &PaddedBatch,
        dec: &PaddedBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if enc.rows != dec.rows {
            return Err(Error::Shape(format!(
                "{} utterances but {} decoder inputs",
                enc.rows, dec.rows
            )));
        }
        let memory = self.encode(g, enc, rng.as_deref_mut())?;
        let hidden = self.decode(g, memory, &enc.mask, enc.cols, dec, rng)?;
        self.lm_logits(g, hidden, dec.rows, dec.cols)
    }

    /// Class logits `[B, C]` for `task`. The decoder reads the right-shifted
    /// utterance and the head sees its last real position.
    pub fn forward_classification(
        &self,
        g: &mut Graph,
        enc: &PaddedBatch,
        task: &str,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let head = self.head(task)?;
        let shifted: Vec<TokenSeq> = (0..enc.rows)
            .map(|r| {
                let ids = enc.row(r)[..enc.lengths[r]].to_vec();
                shift_right(&TokenSeq::new(ids, SeqRole::Utterance))
            })
            .collect::<Result<_>>()?;
        let dec = pad_batch(&shifted)?;
        let memory = self.encode(g, enc, rng.as_deref_mut())?;
        let hidden = self.decode(g, memory, &enc.mask, enc.cols, &dec, rng)?;
        let last: Vec<usize> = dec
            .lengths
            .iter()
            .enumerate()
            .map(|(r, &len)| r * dec.cols + len - 1)
            .collect();
        let pooled = g.gather_rows(hidden, &last)?;
        self.lin(g, pooled, head)
    }

    /// Encodes one utterance for repeated decoding.
    pub fn encoder_memory(&self, utterance: &TokenSeq) -> Result<EncoderMemory> {
        let enc = pad_batch(std::slice::from_ref(utterance))?;
        let mut g = Graph::new(&self.params);
        let memory = self.encode(&mut g, &enc, None)?;
        Ok(EncoderMemory {
            values: g.tensor(memory),
            mask: enc.mask,
            rows: 1,
            len: enc.cols,
        })
    }

    /// Log-probabilities of the next token after each prefix (each starting
    /// with BOS), decoded against the same encoder memory.
    pub fn next_token_log_probs(&self, memory: &EncoderMemory, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        if memory.rows != 1 {
            return Err(Error::Shape(
                "next-token scoring expects a single-utterance memory".into(),
            ));
        }
        let seqs: Vec<TokenSeq> = prefixes
            .iter()
            .map(|p| TokenSeq::new(p.to_vec(), SeqRole::DecoderInput))
            .collect();
        let dec = pad_batch(&seqs)?;
        let d = self.config.d_model;
        let mut tiled = Vec::with_capacity(dec.rows * memory.len * d);
        let mut mask = Vec::with_capacity(dec.rows * memory.len);
        for _ in 0..dec.rows {
            tiled.extend_from_slice(memory.values.values());
            mask.extend_from_slice(&memory.mask);
        }
        let mut g = Graph::new(&self.params);
        let mem = g.constant(Tensor::new([dec.rows * memory.len, d], tiled)?);
        let hidden = self.decode(&mut g, mem, &mask, memory.len, &dec, None)?;
        let last: Vec<usize> = dec
            .lengths
            .iter()
            .enumerate()
            .map(|(r, &len)| r * dec.cols + len - 1)
            .collect();
        let pooled = g.gather_rows(hidden, &last)?;
        let table = g.param(self.layout.tokens);
        let logits = g.matmul_t(pooled, table)?;
        let bias = g.param(self.layout.lm_bias);
        let logits = g.add_bias(logits, bias)?;
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(dec.rows);
        for row in g.value(logits).chunks(v) {
            let mut lp = vec![0.0; v];
            crate::numerics::kernels::log_softmax_into(row, &mut lp);
            out.push(lp);
        }
        Ok(out)
    }
}
