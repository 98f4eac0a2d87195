//! The full recommender: embedding, attention branch, frequency branch,
//! gated merge, scoring, and the training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::{AblationSpec, ModelConfig};
use crate::data::Batch;
use crate::encoder::{
    embed_sequence, self_attention_branch, AttentionBlock, AttentionBlockVars, EmbeddingBlock,
    EmbeddingVars,
};
use crate::error::{Error, Result};
use crate::freqnet::{freqnet_forward, gated_residual_merge, FreqNetBlock, FreqNetSettings, FreqNetVars};
use crate::loss::{cross_entropy, frequency_loss, total_loss};
use crate::tensor::{IdTensor, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FreqRec {
    pub config: ModelConfig,
    pub embedding: EmbeddingBlock,
    pub layers: Vec<AttentionBlock>,
    pub freqnet: FreqNetBlock,
}

#[derive(Debug, Clone)]
pub struct FreqRecVars {
    pub embedding: EmbeddingVars,
    pub layers: Vec<AttentionBlockVars>,
    pub freqnet: FreqNetVars,
}

impl FreqRecVars {
    /// Handles in the same order as [`FreqRec::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.embedding.all();
        for l in &self.layers {
            v.extend(l.all());
        }
        v.extend(self.freqnet.all());
        v
    }
}

/// Intermediate nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub embedded: Var,
    pub x_sa: Option<Var>,
    pub x_f: Option<Var>,
    pub x_out: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub ce: Option<Var>,
    pub lf: Option<Var>,
    pub total: Var,
}

impl FreqRec {
    /// Fresh model for `item_count` items, initialised from `config.seed`.
    pub fn new(config: ModelConfig, item_count: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(config, item_count, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: ModelConfig, item_count: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if item_count == 0 {
            return Err(Error::Config("item count must be positive".into()));
        }
        let c = &config;
        let embedding = EmbeddingBlock::new(item_count, c.max_len, c.dim, c.init_std, rng);
        let layers = (0..c.num_layers)
            .map(|_| AttentionBlock::new(c.dim, c.num_heads, c.ff_dim, c.init_std, rng))
            .collect();
        let freqnet = FreqNetBlock::new(c.dim, c.ff_dim, c.init_std, rng);
        Ok(Self {
            config,
            embedding,
            layers,
            freqnet,
        })
    }

    pub fn item_count(&self) -> usize {
        self.embedding.item_count()
    }

    pub fn bind(&self, g: &mut Graph) -> FreqRecVars {
        FreqRecVars {
            embedding: self.embedding.bind(g),
            layers: self.layers.iter().map(|l| l.bind(g)).collect(),
            freqnet: self.freqnet.bind(g),
        }
    }

    /// Binds all parameters as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> FreqRecVars {
        FreqRecVars {
            embedding: self.embedding.bind_frozen(g),
            layers: self
                .layers
                .iter()
                .map(|l| AttentionBlockVars {
                    attention: l.attention.bind_frozen(g),
                    ffn: l.ffn.bind_frozen(g),
                    num_heads: l.num_heads,
                })
                .collect(),
            freqnet: self.freqnet.bind_frozen(g),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.embedding.tensors();
        for l in &self.layers {
            t.extend(l.tensors());
        }
        t.extend(self.freqnet.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.embedding.tensors_mut();
        for l in &mut self.layers {
            t.extend(l.tensors_mut());
        }
        t.extend(self.freqnet.tensors_mut());
        t
    }

    /// Dotted names aligned with [`Self::tensors`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = EmbeddingBlock::PARAM_NAMES
            .iter()
            .map(|n| format!("embedding.{n}"))
            .collect();
        for i in 0..self.layers.len() {
            names.extend(AttentionBlock::param_names().into_iter().map(|n| format!("layers.{i}.{n}")));
        }
        names.extend(FreqNetBlock::param_names().into_iter().map(|n| format!("freqnet.{n}")));
        names
    }

    pub fn freqnet_settings(&self, ablation: &AblationSpec) -> FreqNetSettings {
        let c = &self.config;
        FreqNetSettings {
            fusion: c.fusion,
            gamma: c.gamma,
            activation: c.activation,
            dropout_rate: c.dropout_rate,
            layer_norm_eps: c.layer_norm_eps,
            disable_gsa: ablation.disable_gsa,
            disable_lsr: ablation.disable_lsr,
        }
    }

    /// Forward pass from a `B × L` batch of left-padded item ids to `X_out`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &FreqRecVars,
        input_ids: &IdTensor,
        ablation: &AblationSpec,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        ablation.validate()?;
        let c = &self.config;
        let pad_mask: Vec<bool> = input_ids.data().iter().map(|&i| i != 0).collect();
        let e = embed_sequence(
            g,
            &vars.embedding,
            input_ids,
            c.layer_norm_eps,
            c.dropout_rate,
            training,
            rng,
        )?;
        let x_sa = if ablation.disable_sa {
            None
        } else {
            Some(self_attention_branch(
                g,
                &vars.layers,
                e,
                &pad_mask,
                c.layer_norm_eps,
                c.dropout_rate,
                training,
                rng,
            )?)
        };
        let settings = self.freqnet_settings(ablation);
        let x_f = Some(freqnet_forward(g, &vars.freqnet, e, &settings, training, rng)?.x_f);
        let x_out = gated_residual_merge(
            g,
            x_sa,
            x_f,
            c.alpha,
            vars.freqnet.out_ln_gain,
            vars.freqnet.out_ln_bias,
            c.layer_norm_eps,
            c.dropout_rate,
            training,
            rng,
        )?;
        Ok(ForwardOutput {
            embedded: e,
            x_sa,
            x_f,
            x_out,
        })
    }

    /// Training objective for `x_out` against the batch targets.
    pub fn loss(
        &self,
        g: &mut Graph,
        vars: &FreqRecVars,
        x_out: Var,
        batch: &Batch,
        ablation: &AblationSpec,
    ) -> Result<LossParts> {
        let beta = ablation.effective_beta(self.config.beta);
        let table = vars.embedding.item_table;
        let ce = if beta > 0.0 {
            Some(cross_entropy(g, x_out, table, &batch.target_ids, &batch.valid_mask)?)
        } else {
            None
        };
        let lf = if beta < 1.0 {
            let source = if self.config.detach_target {
                g.constant(g.value(table).clone())
            } else {
                table
            };
            let target = g.embedding(source, &batch.target_ids)?;
            Some(frequency_loss(g, x_out, target, self.config.distance)?)
        } else {
            None
        };
        let total = match (ce, lf) {
            (Some(ce), Some(lf)) => total_loss(g, ce, lf, beta)?,
            (Some(ce), None) => ce,
            (None, Some(lf)) => lf,
            (None, None) => unreachable!("beta lies in [0, 1]"),
        };
        Ok(LossParts { ce, lf, total })
    }

    /// Scores of every item at the last position of each row, in eval mode.
    /// Entry `[b][i]` scores item id `i`; index 0 (padding) is `-inf`.
    pub fn score_last(&self, input_ids: &IdTensor, ablation: &AblationSpec) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        // eval mode draws no random numbers
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &vars, input_ids, ablation, false, &mut rng)?;
        let x = g.value(out.x_out);
        let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let table = self.embedding.item_table.data();
        let items = self.item_count();
        let mut scores = Vec::with_capacity(b);
        for row in 0..b {
            let h = &x.data()[(row * l + l - 1) * d..(row * l + l) * d];
            let mut s = vec![f64::NEG_INFINITY; items + 1];
            for (item, slot) in s.iter_mut().enumerate().skip(1) {
                let e = &table[item * d..(item + 1) * d];
                *slot = h.iter().zip(e).map(|(a, b)| a * b).sum();
            }
            scores.push(s);
        }
        Ok(scores)
    }

    /// Copies parameter values from `other`, which must share the layout.
    pub fn load_parameters(&mut self, other: &FreqRec) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}
