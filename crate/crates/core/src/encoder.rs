//! Sequence embedding and the causal self-attention branch.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, feed_forward, parameters, FeedForward, FeedForwardVars};
use crate::tensor::{IdTensor, Tensor};

/// Item and position tables plus the embedding layer norm. Row 0 of
/// `item_table` is the padding item and is kept at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub item_table: Tensor,
    pub position_table: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

parameters!(EmbeddingBlock => EmbeddingVars { item_table, position_table, ln_gain, ln_bias });

impl EmbeddingBlock {
    /// `item_count` excludes the padding row.
    pub fn new<R: Rng + ?Sized>(item_count: usize, max_len: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let mut block = Self {
            item_table: Tensor::randn(&[item_count + 1, dim], std, rng),
            position_table: Tensor::randn(&[max_len, dim], std, rng),
            ln_gain: Tensor::ones(&[dim]),
            ln_bias: Tensor::zeros(&[dim]),
        };
        block.zero_padding_row();
        block
    }

    pub fn zero_padding_row(&mut self) {
        let dim = self.item_table.shape()[1];
        self.item_table.data_mut()[..dim].fill(0.0);
    }

    pub fn item_count(&self) -> usize {
        self.item_table.shape()[0] - 1
    }
}

/// `dropout(LN(item_table[ids] + position_table))` for a `B × L` id batch.
pub fn embed_sequence<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &EmbeddingVars,
    ids: &IdTensor,
    eps: f64,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if ids.shape().len() != 2 || ids.shape()[1] != g.shape(p.position_table)[0] {
        return Err(Error::Dimension(format!(
            "id batch {:?} does not match {} positions",
            ids.shape(),
            g.shape(p.position_table)[0]
        )));
    }
    let items = g.embedding(p.item_table, ids)?;
    let summed = g.add(items, p.position_table)?;
    let normed = g.layer_norm(summed, p.ln_gain, p.ln_bias, eps)?;
    dropout(g, normed, dropout_rate, training, rng)
}

/// Query/key/value/output projections, all `D × D` without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

parameters!(Attention => AttentionVars { wq, wk, wv, wo });

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub attention: Attention,
    pub ffn: FeedForward,
    pub num_heads: usize,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, ff_dim: usize, std: f64, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            attention: Attention {
                wq: Tensor::randn(&[dim, dim], std, rng),
                wk: Tensor::randn(&[dim, dim], std, rng),
                wv: Tensor::randn(&[dim, dim], std, rng),
                wo: Tensor::randn(&[dim, dim], std, rng),
            },
            ffn: FeedForward::new(dim, ff_dim, std, rng),
            num_heads: heads,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionBlockVars {
    pub attention: AttentionVars,
    pub ffn: FeedForwardVars,
    pub num_heads: usize,
}

const MASKED: f64 = -1e30;

/// Additive mask of shape `B × 1 × L × L`. Query `t` may attend to key `s`
/// iff `s ≤ t` and `s` is a real item; a padded query attends only to itself
/// so that its softmax row stays well defined.
pub fn attention_mask(pad_mask: &[bool], batch: usize, len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[batch, 1, len, len]);
    for b in 0..batch {
        for t in 0..len {
            for s in 0..len {
                let allowed = s <= t && (pad_mask[b * len + s] || s == t);
                if !allowed {
                    m.set(&[b, 0, t, s], MASKED);
                }
            }
        }
    }
    m
}

/// Output of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub output: Var,
    /// Softmax weights, `B × H × L × L`.
    pub weights: Var,
}

/// One causal multi-head attention layer followed by the feed-forward block
/// applied to `attention(x) + x`.
#[allow(clippy::too_many_arguments)]
pub fn attention_layer<R: Rng + ?Sized>(
    g: &mut Graph,
    p: &AttentionBlockVars,
    x: Var,
    pad_mask: &[bool],
    eps: f64,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<AttentionOutput> {
    let shape = g.shape(x).to_vec();
    let [b, l, d] = shape[..] else {
        return Err(Error::Dimension(format!("attention input must be B×L×D, got {shape:?}")));
    };
    if pad_mask.len() != b * l {
        return Err(Error::Dimension(format!(
            "pad mask has {} entries for a {b}×{l} batch",
            pad_mask.len()
        )));
    }
    let h = p.num_heads;
    let dh = d / h;
    let split = |g: &mut Graph, w: Var| -> Result<Var> {
        let y = g.matmul(x, w)?;
        let y = g.reshape(y, &[b, l, h, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split(g, p.attention.wq)?;
    let k = split(g, p.attention.wk)?;
    let v = split(g, p.attention.wv)?;
    let kt = g.transpose_last(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let mask = g.constant(attention_mask(pad_mask, b, l));
    let scores = g.add(scores, mask)?;
    let weights = g.softmax(scores, 3)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, l, d])?;
    let ctx = g.matmul(ctx, p.attention.wo)?;
    let ctx = dropout(g, ctx, dropout_rate, training, rng)?;
    let with_input = g.add(ctx, x)?;
    let output = feed_forward(g, &p.ffn, with_input, None, eps, dropout_rate, training, rng)?;
    Ok(AttentionOutput { output, weights })
}

/// Stacked attention layers over the sequence embedding.
#[allow(clippy::too_many_arguments)]
pub fn self_attention_branch<R: Rng + ?Sized>(
    g: &mut Graph,
    layers: &[AttentionBlockVars],
    e: Var,
    pad_mask: &[bool],
    eps: f64,
    dropout_rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let mut x = e;
    for layer in layers {
        x = attention_layer(g, layer, x, pad_mask, eps, dropout_rate, training, rng)?.output;
    }
    Ok(x)
}

impl AttentionBlock {
    pub fn bind(&self, g: &mut Graph) -> AttentionBlockVars {
        AttentionBlockVars {
            attention: self.attention.bind(g),
            ffn: self.ffn.bind(g),
            num_heads: self.num_heads,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.attention.tensors();
        t.extend(self.ffn.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.attention.tensors_mut();
        t.extend(self.ffn.tensors_mut());
        t
    }

    pub fn param_names() -> Vec<String> {
        Attention::PARAM_NAMES
            .iter()
            .map(|n| format!("attention.{n}"))
            .chain(FeedForward::PARAM_NAMES.iter().map(|n| format!("ffn.{n}")))
            .collect()
    }
}

impl AttentionBlockVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.attention.all();
        v.extend(self.ffn.all());
        v
    }
}
