//! Small LLaMA-style decoders: configuration, weights, and the block and
//! model forward passes recorded on the autodiff [`Graph`].

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::graph::{AttnShape, Graph, Var};
use crate::quant::fake_quant_activations;
use crate::tensor::Tensor;

pub use data::{patterned_corpus, TokenDataset};
pub use eval::{perplexity, uniform_perplexity};
pub use train::{train_toy, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub seq_len: usize,
    pub rope: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { vocab_size: 256, d_model: 64, n_heads: 4, n_blocks: 2, mlp_hidden: 172, seq_len: 256, rope: false }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("mlp_hidden", self.mlp_hidden),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(arg_err!("{name} must be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(arg_err!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.rope && !(self.d_model / self.n_heads).is_multiple_of(2) {
            return Err(arg_err!("rope needs an even head dimension"));
        }
        if self.vocab_size > u16::MAX as usize + 1 {
            return Err(arg_err!("vocab_size {} exceeds the u16 token range", self.vocab_size));
        }
        Ok(())
    }
}

/// The seven linear projections of a decoder block, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "q_proj",
            Proj::K => "k_proj",
            Proj::V => "v_proj",
            Proj::O => "o_proj",
            Proj::Gate => "gate_proj",
            Proj::Up => "up_proj",
            Proj::Down => "down_proj",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// `[out_features, in_features]`
    pub fn shape(self, cfg: &DecoderConfig) -> [usize; 2] {
        let (d, h) = (cfg.d_model, cfg.mlp_hidden);
        match self {
            Proj::Q | Proj::K | Proj::V | Proj::O => [d, d],
            Proj::Gate | Proj::Up => [h, d],
            Proj::Down => [d, h],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    /// Indexed by [`Proj::index`].
    pub linears: [Tensor; 7],
}

impl BlockWeights {
    /// Unit norms and all-zero projections: the block reduces to the identity.
    pub fn zeros(cfg: &DecoderConfig) -> Self {
        Self {
            attn_norm: Tensor::full([cfg.d_model], 1.0),
            mlp_norm: Tensor::full([cfg.d_model], 1.0),
            linears: Proj::ALL.map(|p| Tensor::zeros(p.shape(cfg))),
        }
    }

    pub fn linear(&self, p: Proj) -> &Tensor {
        &self.linears[p.index()]
    }

    pub fn linear_mut(&mut self, p: Proj) -> &mut Tensor {
        &mut self.linears[p.index()]
    }

    fn check(&self, cfg: &DecoderConfig) -> Result<()> {
        for p in Proj::ALL {
            if self.linear(p).shape() != p.shape(cfg) {
                return Err(dim_err!(
                    "{} has shape {:?}, expected {:?}",
                    p.name(),
                    self.linear(p).shape(),
                    p.shape(cfg)
                ));
            }
        }
        if self.attn_norm.shape() != [cfg.d_model] || self.mlp_norm.shape() != [cfg.d_model] {
            return Err(dim_err!("norm weights must have shape [{}]", cfg.d_model));
        }
        Ok(())
    }
}

/// Graph handles for one block's weights.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub mlp_norm: Var,
    pub linears: [Var; 7],
}

impl BlockVars {
    pub fn constants(g: &mut Graph, w: &BlockWeights) -> Self {
        Self {
            attn_norm: g.constant(w.attn_norm.clone()),
            mlp_norm: g.constant(w.mlp_norm.clone()),
            linears: Proj::ALL.map(|p| g.constant(w.linear(p).clone())),
        }
    }
}

fn act_quant(g: &mut Graph, x: Var, bits: Option<u8>) -> Result<Var> {
    match bits {
        None => Ok(x),
        Some(b) => {
            let q = fake_quant_activations(g.value(x), b)?;
            g.straight_through(x, q)
        }
    }
}

/// Records one pre-norm decoder block on `x` (`[batch·seq × d_model]`).
/// With `act_bits`, every linear input is fake-quantized per token with a
/// straight-through gradient.
pub fn block_forward_graph(
    g: &mut Graph,
    cfg: &DecoderConfig,
    w: &BlockVars,
    x: Var,
    batch: usize,
    act_bits: Option<u8>,
) -> Result<Var> {
    let (rows, d) = g.value(x).as_matrix();
    if d != cfg.d_model || batch == 0 || rows % batch != 0 {
        return Err(dim_err!("block input [{rows} × {d}] does not fit batch {batch}, d_model {}", cfg.d_model));
    }
    let shape = AttnShape { batch, seq: rows / batch, heads: cfg.n_heads };
    let l = |p: Proj| w.linears[p.index()];

    let h = g.rmsnorm(x, w.attn_norm)?;
    let h = act_quant(g, h, act_bits)?;
    let mut q = g.linear(h, l(Proj::Q))?;
    let mut k = g.linear(h, l(Proj::K))?;
    let v = g.linear(h, l(Proj::V))?;
    if cfg.rope {
        q = g.rope(q, shape)?;
        k = g.rope(k, shape)?;
    }
    let a = g.causal_attention(q, k, v, shape)?;
    let a = act_quant(g, a, act_bits)?;
    let o = g.linear(a, l(Proj::O))?;
    let x1 = g.add(x, o)?;

    let h2 = g.rmsnorm(x1, w.mlp_norm)?;
    let h2 = act_quant(g, h2, act_bits)?;
    let gate = g.linear(h2, l(Proj::Gate))?;
    let up = g.linear(h2, l(Proj::Up))?;
    let gate = g.silu(gate);
    let m = g.mul(gate, up)?;
    let m = act_quant(g, m, act_bits)?;
    let down = g.linear(m, l(Proj::Down))?;
    g.add(x1, down)
}

/// Block forward on `[batch × seq × d_model]` without gradients.
pub fn block_forward(w: &BlockWeights, cfg: &DecoderConfig, x: &Tensor, act_bits: Option<u8>) -> Result<Tensor> {
    let [batch, seq, d] = match x.shape() {
        [b, s, d] => [*b, *s, *d],
        s => return Err(dim_err!("block input must be [batch × seq × d_model], got {s:?}")),
    };
    if d != cfg.d_model {
        return Err(dim_err!("block input width {d}, model width {}", cfg.d_model));
    }
    w.check(cfg)?;
    let mut g = Graph::new();
    let vars = BlockVars::constants(&mut g, w);
    let xv = g.constant(x.clone().reshape([batch * seq, d])?);
    let y = block_forward_graph(&mut g, cfg, &vars, xv, batch, act_bits)?;
    g.value(y).clone().reshape([batch, seq, d])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: DecoderConfig,
    pub tok_emb: Tensor,
    /// Learned absolute positions; absent when rotary embeddings are on.
    pub pos_emb: Option<Tensor>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

/// Graph handles for a whole model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Option<Var>,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl ModelVars {
    /// Handles in [`Model::named_tensors`] order.
    pub fn flatten(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb];
        out.extend(self.pos_emb);
        for b in &self.blocks {
            out.push(b.attn_norm);
            out.extend(b.linears);
            out.push(b.mlp_norm);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }
}

impl Model {
    /// Seeded random initialization. Projections use `N(0, 1/fan_in)`, with
    /// the residual-writing projections further scaled by `1/sqrt(2B)`.
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: [usize; 2], std: f32| -> Tensor {
            let dist = Normal::new(0.0f32, std).expect("positive std");
            let data = (0..shape[0] * shape[1]).map(|_| dist.sample(&mut rng)).collect();
            Tensor::new(shape, data).expect("shape matches data")
        };
        let d = config.d_model;
        let tok_emb = normal([config.vocab_size, d], 0.02);
        let pos_emb = (!config.rope).then(|| normal([config.seq_len, d], 0.02));
        let resid = 1.0 / (2.0 * config.n_blocks as f32).sqrt();
        let blocks = (0..config.n_blocks)
            .map(|_| {
                let mut b = BlockWeights::zeros(&config);
                for p in Proj::ALL {
                    let shape = p.shape(&config);
                    let mut std = 1.0 / (shape[1] as f32).sqrt();
                    if matches!(p, Proj::O | Proj::Down) {
                        std *= resid;
                    }
                    *b.linear_mut(p) = normal(shape, std);
                }
                b
            })
            .collect();
        let lm_head = normal([config.vocab_size, d], 1.0 / (d as f32).sqrt());
        Ok(Self { config, tok_emb, pos_emb, blocks, final_norm: Tensor::full([d], 1.0), lm_head })
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        if let Some(p) = &self.pos_emb {
            out.push(("pos_emb".to_string(), p));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), &b.attn_norm));
            for p in Proj::ALL {
                out.push((linear_name(i, p), b.linear(p)));
            }
            out.push((format!("blocks.{i}.mlp_norm"), &b.mlp_norm));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable tensors in [`Model::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb];
        if let Some(p) = &mut self.pos_emb {
            out.push(p);
        }
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm);
            out.extend(b.linears.iter_mut());
            out.push(&mut b.mlp_norm);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Rebuilds a model from named tensors, e.g. as read from a checkpoint.
    pub fn from_named(config: DecoderConfig, mut get: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut template = Self::zeros(config);
        let names: Vec<String> = template.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(template.tensors_mut()) {
            let t = get(name)?;
            if t.shape() != slot.shape() {
                return Err(dim_err!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()));
            }
            *slot = t;
        }
        Ok(template)
    }

    fn zeros(config: DecoderConfig) -> Self {
        let d = config.d_model;
        Self {
            config,
            tok_emb: Tensor::zeros([config.vocab_size, d]),
            pos_emb: (!config.rope).then(|| Tensor::zeros([config.seq_len, d])),
            blocks: (0..config.n_blocks).map(|_| BlockWeights::zeros(&config)).collect(),
            final_norm: Tensor::full([d], 1.0),
            lm_head: Tensor::zeros([config.vocab_size, d]),
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn vars(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = self.pos_emb.as_ref().map(&mut leaf);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                attn_norm: leaf(&b.attn_norm),
                linears: Proj::ALL.map(|p| leaf(b.linear(p))),
                mlp_norm: leaf(&b.mlp_norm),
            })
            .collect();
        let final_norm = leaf(&self.final_norm);
        let lm_head = leaf(&self.lm_head);
        ModelVars { tok_emb, pos_emb, blocks, final_norm, lm_head }
    }

    fn check_tokens(&self, tokens: &[u16], batch: usize) -> Result<usize> {
        if batch == 0 || !tokens.len().is_multiple_of(batch) {
            return Err(dim_err!("{} tokens do not split into {batch} sequences", tokens.len()));
        }
        let seq = tokens.len() / batch;
        if seq == 0 || seq > self.config.seq_len {
            return Err(dim_err!("sequence length {seq} outside 1..={}", self.config.seq_len));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(arg_err!("token {t} outside vocab {}", self.config.vocab_size));
        }
        Ok(seq)
    }

    /// Token plus position embeddings for `batch` equal-length sequences.
    pub fn embed_graph(&self, g: &mut Graph, vars: &ModelVars, tokens: &[u16], batch: usize) -> Result<Var> {
        let seq = self.check_tokens(tokens, batch)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = g.gather(vars.tok_emb, &ids)?;
        match vars.pos_emb {
            Some(pe) => {
                let pos: Vec<usize> = (0..tokens.len()).map(|i| i % seq).collect();
                let p = g.gather(pe, &pos)?;
                g.add(x, p)
            }
            None => Ok(x),
        }
    }

    /// Final norm and LM head applied to the residual stream.
    pub fn head_graph(&self, g: &mut Graph, vars: &ModelVars, x: Var) -> Result<Var> {
        let h = g.rmsnorm(x, vars.final_norm)?;
        g.linear(h, vars.lm_head)
    }

    /// Logits `[batch·seq × vocab]`.
    pub fn logits_graph(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        tokens: &[u16],
        batch: usize,
        act_bits: Option<u8>,
    ) -> Result<Var> {
        let mut x = self.embed_graph(g, vars, tokens, batch)?;
        for b in &vars.blocks {
            x = block_forward_graph(g, &self.config, b, x, batch, act_bits)?;
        }
        self.head_graph(g, vars, x)
    }

    /// Embedding outputs as `[batch × seq × d_model]`.
    pub fn embed(&self, tokens: &[u16], batch: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.vars(&mut g, false);
        let x = self.embed_graph(&mut g, &vars, tokens, batch)?;
        let seq = tokens.len() / batch;
        g.value(x).clone().reshape([batch, seq, self.config.d_model])
    }

    pub fn logits(&self, tokens: &[u16], batch: usize, act_bits: Option<u8>) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.vars(&mut g, false);
        let l = self.logits_graph(&mut g, &vars, tokens, batch, act_bits)?;
        Ok(g.value(l).clone())
    }
}

pub fn linear_name(block: usize, p: Proj) -> String {
    format!("blocks.{block}.{}", p.name())
}
