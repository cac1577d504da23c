//! Transformer encoder over the concatenated dialog history.
//!
//! A `[POOL]` token is prepended; its final row is the pooled history
//! representation. Blocks are post-norm: attention, residual, layer norm,
//! feed-forward, residual, layer norm.

use serde::{Deserialize, Serialize};

use crate::dsa::attention;
use crate::nn::{embed_with_positions, Builder, FeedForward, LayerNorm, Linear};
use crate::numerics::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::vocab::{POOL, SYS, USR};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// 3 layers, width 64, 4 heads of 16, feed-forward 256, 512 positions.
    pub fn standard(vocab_size: usize) -> Self {
        Self {
            layers: 3,
            model_dim: 64,
            heads: 4,
            head_dim: 16,
            ffn_dim: 256,
            max_len: 512,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads * self.head_dim != self.model_dim {
            return Err(Error::Config(format!(
                "encoder heads ({}) x head_dim ({}) must equal model_dim ({})",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        if self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config("encoder max_len and vocab_size must be positive".into()));
        }
        Ok(())
    }
}

/// Pooled vector and per-token rows (row 0 is the pooling token).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedHistory {
    pub pooled: Tensor,
    pub tokens: Tensor,
}

#[derive(Clone, Debug)]
struct Block {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    embed: ParamId,
    blocks: Vec<Block>,
}

/// Prepends `[POOL]` and keeps at most `max_len` ids, dropping the oldest.
pub fn pooled_input(tokens: &[usize], max_len: usize) -> Vec<usize> {
    let keep = max_len.saturating_sub(1);
    let start = tokens.len().saturating_sub(keep);
    std::iter::once(POOL).chain(tokens[start..].iter().copied()).collect()
}

/// Joins turns as `[USR] .. [SYS] ..` token ids, oldest first.
pub fn history_ids<'a>(turns: impl IntoIterator<Item = (bool, &'a [usize])>) -> Vec<usize> {
    let mut ids = Vec::new();
    for (is_user, toks) in turns {
        ids.push(if is_user { USR } else { SYS });
        ids.extend_from_slice(toks);
    }
    ids
}

impl Encoder {
    pub fn build(cfg: &EncoderConfig, prefix: &str, b: &mut Builder) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let inner = cfg.heads * cfg.head_dim;
        let embed = b.param(&format!("{prefix}.embed"), &[cfg.vocab_size, d], Init::Normal(0.02))?;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.block{l}");
                Ok(Block {
                    wq: b.linear(&format!("{p}.wq"), d, inner, false)?,
                    wk: b.linear(&format!("{p}.wk"), d, inner, false)?,
                    wv: b.linear(&format!("{p}.wv"), d, inner, false)?,
                    wo: b.linear(&format!("{p}.wo"), inner, d, true)?,
                    norm1: b.layer_norm(&format!("{p}.norm1"), d)?,
                    ffn: b.feed_forward(&format!("{p}.ffn"), d, cfg.ffn_dim)?,
                    norm2: b.layer_norm(&format!("{p}.norm2"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Encodes raw history ids; returns `(pooled 1 x D, tokens m x D)`.
    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<(Var, Var)> {
        let ids = pooled_input(tokens, self.cfg.max_len);
        let d = self.cfg.model_dim;
        let mut x = embed_with_positions(tape, self.embed, &ids, d)?;
        for block in &self.blocks {
            let q = block.wq.forward(tape, x)?;
            let k = block.wk.forward(tape, x)?;
            let v = block.wv.forward(tape, x)?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let off = h * self.cfg.head_dim;
                let qh = tape.slice_cols(q, off, self.cfg.head_dim)?;
                let kh = tape.slice_cols(k, off, self.cfg.head_dim)?;
                let vh = tape.slice_cols(v, off, self.cfg.head_dim)?;
                heads.push(attention(tape, qh, kh, vh, None)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let att = block.wo.forward(tape, cat)?;
            let res = tape.add(x, att)?;
            let h = block.norm1.forward(tape, res)?;
            let f = block.ffn.forward(tape, h)?;
            let res = tape.add(h, f)?;
            x = block.norm2.forward(tape, res)?;
        }
        let pooled = tape.slice_rows(x, 0, 1)?;
        Ok((pooled, x))
    }

    pub fn encode_history(&self, store: &ParamStore, tokens: &[usize]) -> Result<EncodedHistory> {
        let mut tape = Tape::inference(store);
        let (pooled, rows) = self.forward(&mut tape, tokens)?;
        Ok(EncodedHistory {
            pooled: tape.tensor(pooled),
            tokens: tape.tensor(rows),
        })
    }
}
