use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Ctx, LayerNorm, Linear};
use crate::tensor::{ParamStore, Var};
use crate::{Error, Result};

/// Where the positional encoding enters each encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncodingMode {
    /// Added to the block input before the pre-norm, so queries, keys and
    /// values all see it; also added to the MLP branch input.
    #[default]
    BlockInput,
    /// Added after the pre-norm to queries and keys only.
    QueryKey,
}

/// Multi-head scaled dot-product self-attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Attention output and the `[heads, L, L]` weights that produced it.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            dim,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Self-attention where queries and keys come from `qk` and values from
    /// `value`; both `[L, dim]`.
    pub fn forward(&self, cx: &mut Ctx, qk: Var, value: Var) -> Result<AttentionOutput> {
        let shape = cx.tape.shape(qk).to_vec();
        if shape.len() != 2 || shape[1] != self.dim || cx.tape.shape(value) != shape {
            return Err(Error::Contract(format!(
                "attention expects [L, {}] inputs, got {shape:?} and {:?}",
                self.dim,
                cx.tape.shape(value)
            )));
        }
        let len = shape[0];
        if len == 0 {
            return Err(Error::Contract("attention over an empty sequence".into()));
        }
        let (h, d) = (self.heads, self.head_dim());

        let q = self.q.forward(cx, qk)?;
        let k = self.k.forward(cx, qk)?;
        let v = self.v.forward(cx, value)?;
        let t = &mut cx.tape;
        let q = t.reshape(q, &[len, h, d])?;
        let q = t.permute(q, &[1, 0, 2])?; // [h, L, d]
        let k = t.reshape(k, &[len, h, d])?;
        let kt = t.permute(k, &[1, 2, 0])?; // [h, d, L]
        let v = t.reshape(v, &[len, h, d])?;
        let v = t.permute(v, &[1, 0, 2])?;

        let logits = t.matmul(q, kt)?;
        let logits = t.scale(logits, 1.0 / (d as f64).sqrt());
        let weights = t.softmax(logits, 2)?;
        let mixed = t.matmul(weights, v)?; // [h, L, d]
        let mixed = t.permute(mixed, &[1, 0, 2])?;
        let mixed = t.reshape(mixed, &[len, self.dim])?;
        let out = self.out.forward(cx, mixed)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Pre-norm Transformer encoder block: attention and a two-layer gelu MLP,
/// each wrapped in a residual connection with dropout on its output.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
    pub pos_mode: PosEncodingMode,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        dropout: f64,
        pos_mode: PosEncodingMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, mlp_hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_hidden, dim, rng),
            dropout,
            pos_mode,
        })
    }

    /// Returns the block output and its attention weights.
    pub fn forward(&self, cx: &mut Ctx, seq: Var, pos: Var) -> Result<(Var, Var)> {
        if cx.tape.shape(seq) != cx.tape.shape(pos) {
            return Err(Error::Contract(format!(
                "sequence {:?} and positional encoding {:?} differ in shape",
                cx.tape.shape(seq),
                cx.tape.shape(pos)
            )));
        }
        let (attn, mlp_in) = match self.pos_mode {
            PosEncodingMode::BlockInput => {
                let u = cx.tape.add(seq, pos)?;
                let n = self.norm_attn.forward(cx, u)?;
                let attn = self.attn.forward(cx, n, n)?;
                (attn, None)
            }
            PosEncodingMode::QueryKey => {
                let n = self.norm_attn.forward(cx, seq)?;
                let qk = cx.tape.add(n, pos)?;
                (self.attn.forward(cx, qk, n)?, Some(()))
            }
        };
        let dropped = cx.dropout(attn.out, self.dropout);
        let a = cx.tape.add(seq, dropped)?;

        let branch_in = match mlp_in {
            None => cx.tape.add(a, pos)?,
            Some(()) => a,
        };
        let n = self.norm_mlp.forward(cx, branch_in)?;
        let h = self.fc1.forward(cx, n)?;
        let h = cx.tape.gelu(h);
        let h = self.fc2.forward(cx, h)?;
        let h = cx.dropout(h, self.dropout);
        Ok((cx.tape.add(a, h)?, attn.weights))
    }
}

/// Stack of encoder blocks followed by a final LayerNorm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
}

/// Encoder output `[L, dim]` plus one `[heads, L, L]` weight tensor per block.
pub struct EncoderOutput {
    pub out: Var,
    pub attention: Vec<Var>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        blocks: usize,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        dropout: f64,
        pos_mode: PosEncodingMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        let blocks = (0..blocks)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("{name}.block{i}"),
                    dim,
                    heads,
                    mlp_hidden,
                    dropout,
                    pos_mode,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), dim),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, seq: Var, pos: Var) -> Result<EncoderOutput> {
        let mut x = seq;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, w) = block.forward(cx, x, pos)?;
            x = y;
            attention.push(w);
        }
        let out = self.final_norm.forward(cx, x)?;
        Ok(EncoderOutput { out, attention })
    }
}
