//! LLaMA-style decoder-only transformer.
//!
//! Each block computes
//!
//! ```text
//! x'  = x  + Attn(RMSNorm(x)) · W_O
//! x'' = x' + (silu(u · W_1) ⊙ (u · W_2)) · W_3      where u = RMSNorm(x')
//! ```
//!
//! so a block whose `W_O` and `W_3` are all zero returns its input exactly.
//! Attention is causal, multi-head, with rotary position embeddings on the
//! queries and keys.

mod checkpoint;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, FORMAT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::surgery::TrainabilityMask;
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Gemma-2 style extra RMSNorm on the FFN branch output.
    #[serde(default)]
    pub post_ffn_norm: bool,
}

fn default_rms_eps() -> f64 {
    1e-5
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(GraftError::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(GraftError::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(GraftError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(GraftError::Config(format!(
                "head dimension {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if !(self.rms_eps > 0.0) || !(self.rope_base > 1.0) {
            return Err(GraftError::Config(
                "rms_eps must be > 0 and rope_base > 1".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters in one decoder block.
    pub fn block_params(&self) -> usize {
        let d = self.d_model;
        let norms = if self.post_ffn_norm { 3 } else { 2 };
        4 * d * d + 3 * d * self.d_ff + norms * d
    }

    /// Closed-form total parameter count for `n_blocks` blocks.
    pub fn total_params(&self, n_blocks: usize) -> usize {
        2 * self.vocab_size * self.d_model + self.d_model + n_blocks * self.block_params()
    }
}

/// One transformer layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    /// Gate projection, fed through SiLU.
    pub w_1: Tensor,
    /// Linear projection multiplied into the gate.
    pub w_2: Tensor,
    /// Final FFN projection back to `d_model`.
    pub w_3: Tensor,
    pub attn_norm: Tensor,
    pub ffn_norm: Tensor,
    pub post_ffn_norm: Option<Tensor>,
}

impl DecoderBlock {
    fn random(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        DecoderBlock {
            w_q: normal_tensor(&[d, d], rng),
            w_k: normal_tensor(&[d, d], rng),
            w_v: normal_tensor(&[d, d], rng),
            w_o: normal_tensor(&[d, d], rng),
            w_1: normal_tensor(&[d, f], rng),
            w_2: normal_tensor(&[d, f], rng),
            w_3: normal_tensor(&[f, d], rng),
            attn_norm: Tensor::full([d], 1.0),
            ffn_norm: Tensor::full([d], 1.0),
            post_ffn_norm: cfg.post_ffn_norm.then(|| Tensor::full([d], 1.0)),
        }
    }

    /// Named tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w_1", &self.w_1),
            ("w_2", &self.w_2),
            ("w_3", &self.w_3),
            ("attn_norm", &self.attn_norm),
            ("ffn_norm", &self.ffn_norm),
        ];
        if let Some(t) = &self.post_ffn_norm {
            out.push(("post_ffn_norm", t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("w_1", &mut self.w_1),
            ("w_2", &mut self.w_2),
            ("w_3", &mut self.w_3),
            ("attn_norm", &mut self.attn_norm),
            ("ffn_norm", &mut self.ffn_norm),
        ];
        if let Some(t) = &mut self.post_ffn_norm {
            out.push(("post_ffn_norm", t));
        }
        out
    }

    /// True when `W_O` and `W_3` are identically zero.
    pub fn is_identity(&self) -> bool {
        self.w_o.data().iter().all(|v| *v == 0.0) && self.w_3.data().iter().all(|v| *v == 0.0)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0f32, 0.02).unwrap();
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `[vocab × d_model]`
    pub token_embedding: Tensor,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: Tensor,
    /// `[d_model × vocab]`, untied from the embedding.
    pub lm_head: Tensor,
}

/// Tape handles for one block's parameters.
pub struct BlockVars {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    w_1: Var,
    w_2: Var,
    w_3: Var,
    attn_norm: Var,
    ffn_norm: Var,
    post_ffn_norm: Option<Var>,
}

impl BlockVars {
    fn bind(tape: &mut Tape, b: &DecoderBlock) -> Self {
        BlockVars {
            w_q: tape.leaf(&b.w_q),
            w_k: tape.leaf(&b.w_k),
            w_v: tape.leaf(&b.w_v),
            w_o: tape.leaf(&b.w_o),
            w_1: tape.leaf(&b.w_1),
            w_2: tape.leaf(&b.w_2),
            w_3: tape.leaf(&b.w_3),
            attn_norm: tape.leaf(&b.attn_norm),
            ffn_norm: tape.leaf(&b.ffn_norm),
            post_ffn_norm: b.post_ffn_norm.as_ref().map(|t| tape.leaf(t)),
        }
    }

    fn all(&self) -> Vec<Var> {
        let mut v = vec![
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.w_1,
            self.w_2,
            self.w_3,
            self.attn_norm,
            self.ffn_norm,
        ];
        v.extend(self.post_ffn_norm);
        v
    }
}

/// Tape handles for every model parameter, in [`Model::params`] order.
pub struct ModelVars {
    pub embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embedding];
        for b in &self.blocks {
            v.extend(b.all());
        }
        v.push(self.final_norm);
        v.push(self.lm_head);
        v
    }
}

/// Total / trainable / frozen parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
}

/// Runs one decoder block on a tape.
///
/// `x` is `[rows × d_model]` made of consecutive sequences of `seq_len` rows.
pub fn block_forward_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    block: &BlockVars,
    x: Var,
    positions: &[usize],
    seq_len: usize,
) -> Result<Var> {
    let eps = cfg.rms_eps as f32;
    let h = tape.rms_norm(x, block.attn_norm, eps)?;
    let q = tape.matmul(h, block.w_q)?;
    let k = tape.matmul(h, block.w_k)?;
    let v = tape.matmul(h, block.w_v)?;
    let q = tape.rope(q, positions, cfg.n_heads, cfg.rope_base)?;
    let k = tape.rope(k, positions, cfg.n_heads, cfg.rope_base)?;
    let attn = tape.causal_attention(q, k, v, cfg.n_heads, seq_len)?;
    let attn = tape.matmul(attn, block.w_o)?;
    let x1 = tape.add(x, attn)?;

    let u = tape.rms_norm(x1, block.ffn_norm, eps)?;
    let gate = tape.matmul(u, block.w_1)?;
    let gate = tape.silu(gate);
    let up = tape.matmul(u, block.w_2)?;
    let hidden = tape.mul(gate, up)?;
    let mut ffn = tape.matmul(hidden, block.w_3)?;
    if let Some(g) = block.post_ffn_norm {
        ffn = tape.rms_norm(ffn, g, eps)?;
    }
    tape.add(x1, ffn)
}

/// Single-block forward over one sequence `x[t × d_model]`.
pub fn block_forward(
    cfg: &ModelConfig,
    block: &DecoderBlock,
    x: &Tensor,
    positions: &[usize],
) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    if d != cfg.d_model {
        return Err(GraftError::Shape(format!(
            "block input has {d} features, model has {}",
            cfg.d_model
        )));
    }
    if t > cfg.max_seq_len {
        return Err(GraftError::Contract(format!(
            "sequence of {t} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let mut tape = Tape::new();
    let vars = BlockVars::bind(&mut tape, block);
    let xv = tape.leaf(x);
    let y = block_forward_on_tape(&mut tape, cfg, &vars, xv, positions, t)?;
    Ok(tape.to_tensor(y))
}

impl Model {
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = (config.vocab_size, config.d_model);
        let token_embedding = normal_tensor(&[v, d], &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| DecoderBlock::random(&config, &mut rng))
            .collect();
        let lm_head = normal_tensor(&[d, v], &mut rng);
        Ok(Model {
            final_norm: Tensor::full([d], 1.0),
            config,
            token_embedding,
            blocks,
            lm_head,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.blocks.len() != cfg.n_layers {
            return Err(GraftError::Contract(format!(
                "model has {} blocks but config says {}",
                self.blocks.len(),
                cfg.n_layers
            )));
        }
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let mut expect: Vec<(String, Vec<usize>)> = vec![("token_embedding".into(), vec![v, d])];
        for i in 0..self.blocks.len() {
            for (name, shape) in [
                ("w_q", vec![d, d]),
                ("w_k", vec![d, d]),
                ("w_v", vec![d, d]),
                ("w_o", vec![d, d]),
                ("w_1", vec![d, f]),
                ("w_2", vec![d, f]),
                ("w_3", vec![f, d]),
                ("attn_norm", vec![d]),
                ("ffn_norm", vec![d]),
            ] {
                expect.push((format!("blocks.{i}.{name}"), shape));
            }
            if cfg.post_ffn_norm {
                expect.push((format!("blocks.{i}.post_ffn_norm"), vec![d]));
            }
        }
        expect.push(("final_norm".into(), vec![d]));
        expect.push(("lm_head".into(), vec![d, v]));
        let actual = self.params();
        if actual.len() != expect.len() {
            return Err(GraftError::Contract(format!(
                "model has {} tensors, topology needs {}",
                actual.len(),
                expect.len()
            )));
        }
        for ((name, t), (ename, eshape)) in actual.iter().zip(&expect) {
            if name != ename || t.shape() != eshape.as_slice() {
                return Err(GraftError::Contract(format!(
                    "tensor {name} {:?} does not match expected {ename} {eshape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Named parameters in canonical (checkpoint) order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("token_embedding".to_string(), &mut self.token_embedding)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.tensors_mut() {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            embedding: tape.leaf(&self.token_embedding),
            blocks: self.blocks.iter().map(|b| BlockVars::bind(tape, b)).collect(),
            final_norm: tape.leaf(&self.final_norm),
            lm_head: tape.leaf(&self.lm_head),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(GraftError::Index(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits `[rows × vocab]` for `tokens`, a concatenation of sequences of
    /// `seq_len` tokens each.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        tokens: &[usize],
        seq_len: usize,
    ) -> Result<Var> {
        if seq_len == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(seq_len) {
            return Err(GraftError::Shape(format!(
                "{} tokens do not form whole sequences of length {seq_len}",
                tokens.len()
            )));
        }
        if seq_len > self.config.max_seq_len {
            return Err(GraftError::Contract(format!(
                "sequence of {seq_len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        self.check_tokens(tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq_len).collect();
        let mut x = tape.embedding(vars.embedding, tokens)?;
        for b in &vars.blocks {
            x = block_forward_on_tape(tape, &self.config, b, x, &positions, seq_len)?;
        }
        let h = tape.rms_norm(x, vars.final_norm, self.config.rms_eps as f32)?;
        tape.matmul(h, vars.lm_head)
    }

    /// Next-token logits `[t × vocab]` for one sequence.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let logits = self.forward_on_tape(&mut tape, &vars, &ids, ids.len())?;
        Ok(tape.to_tensor(logits))
    }

    /// Adds tape gradients into each grad-requiring parameter's buffer.
    pub fn accumulate_grads(&mut self, vars: &ModelVars, grads: &Gradients) -> Result<()> {
        for ((_, t), v) in self.params_mut().into_iter().zip(vars.all()) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Extends `prompt` by `n_new` argmax tokens, ties going to the lowest id.
    pub fn greedy_generate(&self, prompt: &[TokenId], n_new: usize) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(GraftError::Contract("greedy_generate needs a nonempty prompt".into()));
        }
        if prompt.len() + n_new > self.config.max_seq_len {
            return Err(GraftError::Contract(format!(
                "prompt of {} plus {n_new} new tokens exceeds max_seq_len {}",
                prompt.len(),
                self.config.max_seq_len
            )));
        }
        let mut out = prompt.to_vec();
        for _ in 0..n_new {
            let logits = self.forward(&out)?;
            let last = logits.row(out.len() - 1);
            let mut best = 0usize;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            out.push(best as TokenId);
        }
        Ok(out)
    }

    /// Parameter counts, optionally split by a trainability mask.
    pub fn count_params(&self, mask: Option<&TrainabilityMask>) -> Result<ParamCounts> {
        let total = self.num_params();
        let Some(mask) = mask else {
            return Ok(ParamCounts {
                total,
                trainable: total,
                frozen: 0,
            });
        };
        mask.check_topology(self)?;
        let d = self.config.d_model;
        let vocab = self.config.vocab_size;
        let mut trainable = 0;
        trainable += mask.embedding.trainable_rows(vocab) * d;
        for (b, &on) in self.blocks.iter().zip(&mask.blocks) {
            if on {
                trainable += b.num_params();
            }
        }
        if mask.final_norm {
            trainable += d;
        }
        trainable += mask.lm_head.trainable_rows(vocab) * d;
        Ok(ParamCounts {
            total,
            trainable,
            frozen: total - trainable,
        })
    }
}
