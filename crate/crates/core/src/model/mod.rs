//! PaLM-style parallel-block causal decoder.
//!
//! Each block reads one pre-LayerNorm of the residual stream into a fused
//! projection that produces Q, K, V and both SwiGLU halves; queries and keys
//! get an extra per-head LayerNorm; attention and FFN outputs are
//! concatenated and mapped back by a single fused output projection:
//!
//! ```text
//! h = LN(x)
//! [q | k | v | u | g] = h · W_in + b_in
//! x' = x + [Attn(LN_q(q), LN_k(k), v) | silu(u) ⊙ g] · W_out + b_out
//! ```

mod config;

pub use config::{default_d_ff, param_count, ModelConfig, ParamCount};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Tensor names inside a block, in storage order.
pub const BLOCK_PARTS: [&str; 10] = [
    "ln.gain",
    "ln.bias",
    "fused_in.weight",
    "fused_in.bias",
    "q_ln.gain",
    "q_ln.bias",
    "k_ln.gain",
    "k_ln.bias",
    "fused_out.weight",
    "fused_out.bias",
];

/// True for biases and normalization gains, which are excluded from weight decay.
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with("ln.gain")
}

/// Decoder-layer index encoded in a `layers.<i>.<part>` name.
pub fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<T: Real = f32> {
    pub ln_gain: Tensor<T>,
    pub ln_bias: Tensor<T>,
    pub fused_in_weight: Tensor<T>,
    pub fused_in_bias: Tensor<T>,
    pub q_ln_gain: Tensor<T>,
    pub q_ln_bias: Tensor<T>,
    pub k_ln_gain: Tensor<T>,
    pub k_ln_bias: Tensor<T>,
    pub fused_out_weight: Tensor<T>,
    pub fused_out_bias: Tensor<T>,
}

impl<T: Real> DecoderBlock<T> {
    fn init(cfg: &ModelConfig, normal: &mut impl FnMut(&[usize]) -> Tensor<T>) -> Self {
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        Self {
            ln_gain: Tensor::full(&[d], T::one()),
            ln_bias: Tensor::zeros(&[d]),
            fused_in_weight: normal(&[d, cfg.fused_in_width()]),
            fused_in_bias: Tensor::zeros(&[cfg.fused_in_width()]),
            q_ln_gain: Tensor::full(&[dh], T::one()),
            q_ln_bias: Tensor::zeros(&[dh]),
            k_ln_gain: Tensor::full(&[dh], T::one()),
            k_ln_bias: Tensor::zeros(&[dh]),
            fused_out_weight: normal(&[cfg.fused_out_width(), d]),
            fused_out_bias: Tensor::zeros(&[d]),
        }
    }

    fn shapes(cfg: &ModelConfig) -> [Vec<usize>; 10] {
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        [
            vec![d],
            vec![d],
            vec![d, cfg.fused_in_width()],
            vec![cfg.fused_in_width()],
            vec![dh],
            vec![dh],
            vec![dh],
            vec![dh],
            vec![cfg.fused_out_width(), d],
            vec![d],
        ]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 10] {
        [
            &self.ln_gain,
            &self.ln_bias,
            &self.fused_in_weight,
            &self.fused_in_bias,
            &self.q_ln_gain,
            &self.q_ln_bias,
            &self.k_ln_gain,
            &self.k_ln_bias,
            &self.fused_out_weight,
            &self.fused_out_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 10] {
        [
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.fused_in_weight,
            &mut self.fused_in_bias,
            &mut self.q_ln_gain,
            &mut self.q_ln_bias,
            &mut self.k_ln_gain,
            &mut self.k_ln_bias,
            &mut self.fused_out_weight,
            &mut self.fused_out_bias,
        ]
    }

    fn from_parts(mut parts: Vec<Tensor<T>>) -> Self {
        let mut next = || parts.remove(0);
        Self {
            ln_gain: next(),
            ln_bias: next(),
            fused_in_weight: next(),
            fused_in_bias: next(),
            q_ln_gain: next(),
            q_ln_bias: next(),
            k_ln_gain: next(),
            k_ln_bias: next(),
            fused_out_weight: next(),
            fused_out_bias: next(),
        }
    }

    pub fn cast<U: Real>(&self) -> DecoderBlock<U> {
        DecoderBlock::from_parts(self.tensors().iter().map(|t| t.cast()).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CausalLM<T: Real = f32> {
    config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<DecoderBlock<T>>,
    pub final_ln_gain: Tensor<T>,
    pub final_ln_bias: Tensor<T>,
    /// Separate output matrix; `None` when tied to `tok_emb`.
    pub lm_head: Option<Tensor<T>>,
    pub lm_head_bias: Tensor<T>,
}

/// Which parameters are recorded as trainable leaves when binding to a graph.
#[derive(Clone, Copy, Debug)]
pub enum Trainable<'a> {
    All,
    /// Everything except the listed layer positions.
    ExceptLayers(&'a [usize]),
    None,
}

impl Trainable<'_> {
    fn layer(&self, i: usize) -> bool {
        match self {
            Trainable::All => true,
            Trainable::ExceptLayers(frozen) => !frozen.contains(&i),
            Trainable::None => false,
        }
    }

    fn shared(&self) -> bool {
        !matches!(self, Trainable::None)
    }
}

pub struct BlockVars {
    pub parts: [Var; 10],
}

/// Graph handles for every model parameter.
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BlockVars>,
    pub final_ln_gain: Var,
    pub final_ln_bias: Var,
    pub lm_head: Option<Var>,
    pub lm_head_bias: Var,
}

impl ModelVars {
    /// `(name, var)` pairs in the same order as [`CausalLM::named_params`].
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut out = vec![("tok_emb".to_string(), self.tok_emb), ("pos_emb".to_string(), self.pos_emb)];
        for (i, b) in self.layers.iter().enumerate() {
            for (part, v) in BLOCK_PARTS.iter().zip(b.parts) {
                out.push((format!("layers.{i}.{part}"), v));
            }
        }
        out.push(("final_ln.gain".into(), self.final_ln_gain));
        out.push(("final_ln.bias".into(), self.final_ln_bias));
        if let Some(h) = self.lm_head {
            out.push(("lm_head.weight".into(), h));
        }
        out.push(("lm_head.bias".into(), self.lm_head_bias));
        out
    }
}

impl<T: Real> CausalLM<T> {
    /// Fresh model: N(0, 0.02) for embeddings and projections, ones for norm
    /// gains, zeros for every bias.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut normal = |shape: &[usize]| Tensor::from_fn(shape, |_| T::from_f64(dist.sample(&mut rng)));
        let (d, v) = (config.d_model, config.vocab_size);
        let tok_emb = normal(&[v, d]);
        let pos_emb = normal(&[config.context_len, d]);
        let layers = (0..config.n_layers).map(|_| DecoderBlock::init(config, &mut normal)).collect();
        let lm_head = (!config.tie_embeddings).then(|| normal(&[v, d]));
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_ln_gain: Tensor::full(&[d], T::one()),
            final_ln_bias: Tensor::zeros(&[d]),
            lm_head,
            lm_head_bias: Tensor::zeros(&[v]),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total parameters actually allocated.
    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.layers.iter().enumerate() {
            for (part, t) in BLOCK_PARTS.iter().zip(b.tensors()) {
                out.push((format!("layers.{i}.{part}"), t));
            }
        }
        out.push(("final_ln.gain".into(), &self.final_ln_gain));
        out.push(("final_ln.bias".into(), &self.final_ln_bias));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head.weight".into(), h));
        }
        out.push(("lm_head.bias".into(), &self.lm_head_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &mut self.tok_emb), ("pos_emb".to_string(), &mut self.pos_emb)];
        for (i, b) in self.layers.iter_mut().enumerate() {
            for (part, t) in BLOCK_PARTS.iter().zip(b.tensors_mut()) {
                out.push((format!("layers.{i}.{part}"), t));
            }
        }
        out.push(("final_ln.gain".into(), &mut self.final_ln_gain));
        out.push(("final_ln.bias".into(), &mut self.final_ln_bias));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head.weight".into(), h));
        }
        out.push(("lm_head.bias".into(), &mut self.lm_head_bias));
        out
    }

    /// Rebuilds a model from named tensors. `config.n_layers` decides how many
    /// `layers.<i>.*` groups are read; shapes are checked against the config.
    pub fn from_named(config: &ModelConfig, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor<T>> {
            let t = tensors.remove(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let (d, v) = (config.d_model, config.vocab_size);
        let tok_emb = take("tok_emb".into(), vec![v, d])?;
        let pos_emb = take("pos_emb".into(), vec![config.context_len, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let parts = BLOCK_PARTS
                .iter()
                .zip(DecoderBlock::<T>::shapes(config))
                .map(|(part, shape)| take(format!("layers.{i}.{part}"), shape))
                .collect::<Result<Vec<_>>>()?;
            layers.push(DecoderBlock::from_parts(parts));
        }
        let final_ln_gain = take("final_ln.gain".into(), vec![d])?;
        let final_ln_bias = take("final_ln.bias".into(), vec![d])?;
        let lm_head = if config.tie_embeddings { None } else { Some(take("lm_head.weight".into(), vec![v, d])?) };
        let lm_head_bias = take("lm_head.bias".into(), vec![v])?;
        if let Some(extra) = tensors.keys().find(|k| !k.starts_with("optim.")) {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(Self { config: config.clone(), tok_emb, pos_emb, layers, final_ln_gain, final_ln_bias, lm_head, lm_head_bias })
    }

    /// Replaces the decoder stack, keeping `config.n_layers` in sync.
    pub fn set_layers(&mut self, layers: Vec<DecoderBlock<T>>) {
        self.config.n_layers = layers.len();
        self.layers = layers;
    }

    pub fn cast<U: Real>(&self) -> CausalLM<U> {
        CausalLM {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self.layers.iter().map(|b| b.cast()).collect(),
            final_ln_gain: self.final_ln_gain.cast(),
            final_ln_bias: self.final_ln_bias.cast(),
            lm_head: self.lm_head.as_ref().map(|t| t.cast()),
            lm_head_bias: self.lm_head_bias.cast(),
        }
    }

    /// Records every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: Trainable<'_>) -> ModelVars {
        let shared = trainable.shared();
        let mut leaf = |t: &Tensor<T>, grad: bool| g.leaf(t.clone(), grad);
        let tok_emb = leaf(&self.tok_emb, shared);
        let pos_emb = leaf(&self.pos_emb, shared);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let grad = trainable.layer(i);
                BlockVars { parts: b.tensors().map(|t| leaf(t, grad)) }
            })
            .collect();
        let final_ln_gain = leaf(&self.final_ln_gain, shared);
        let final_ln_bias = leaf(&self.final_ln_bias, shared);
        let lm_head = self.lm_head.as_ref().map(|t| leaf(t, shared));
        let lm_head_bias = leaf(&self.lm_head_bias, shared);
        ModelVars { tok_emb, pos_emb, layers, final_ln_gain, final_ln_bias, lm_head, lm_head_bias }
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<()> {
        if seq == 0 || batch == 0 || tokens.len() != batch * seq {
            return Err(Error::Usage(format!("{} tokens for batch {batch} × seq {seq}", tokens.len())));
        }
        if seq > self.config.context_len {
            return Err(crate::tensor::TensorError::Dimension {
                op: "forward",
                detail: format!("sequence length {seq} exceeds context length {}", self.config.context_len),
            }
            .into());
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(crate::tensor::TensorError::Index {
                op: "forward",
                detail: format!("token id {bad} >= vocab size {}", self.config.vocab_size),
            }
            .into());
        }
        Ok(())
    }

    /// Logits `[batch·seq, vocab]` for row-major `tokens [batch, seq]`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &ModelVars, tokens: &[usize], batch: usize, seq: usize) -> Result<Var> {
        self.check_tokens(tokens, batch, seq)?;
        let cfg = &self.config;
        let (d, n, heads, dh) = (cfg.d_model, batch * seq, cfg.n_heads, cfg.head_dim());
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = g.gather(vars.tok_emb, tokens)?;
        let pos = g.gather(vars.pos_emb, &positions)?;
        let mut x = g.add(tok, pos)?;
        for bv in &vars.layers {
            let [ln_g, ln_b, w_in, b_in, qg, qb, kg, kb, w_out, b_out] = bv.parts;
            let h = g.layer_norm(x, ln_g, ln_b, LN_EPS)?;
            let f = g.matmul(h, w_in)?;
            let f = g.add_row(f, b_in)?;
            let q = head_norm(g, f, 0, qg, qb, n, heads, dh)?;
            let k = head_norm(g, f, d, kg, kb, n, heads, dh)?;
            let v = g.slice_cols(f, 2 * d, 3 * d)?;
            let attn = g.causal_attention(q, k, v, batch, seq, heads)?;
            let ffn_in = g.slice_cols(f, 3 * d, 3 * d + 2 * cfg.d_ff)?;
            let ffn = g.swiglu(ffn_in)?;
            let cat = g.concat_cols(attn, ffn)?;
            let out = g.matmul(cat, w_out)?;
            let out = g.add_row(out, b_out)?;
            x = g.add(x, out)?;
        }
        let x = g.layer_norm(x, vars.final_ln_gain, vars.final_ln_bias, LN_EPS)?;
        let logits = g.matmul_bt(x, vars.lm_head.unwrap_or(vars.tok_emb))?;
        Ok(g.add_row(logits, vars.lm_head_bias)?)
    }

    /// Gradient-free logits, shaped `[batch, seq, vocab]`.
    pub fn forward_logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Trainable::None);
        let logits = self.forward(&mut g, &vars, tokens, batch, seq)?;
        Ok(g.value(logits).clone().reshape(&[batch, seq, self.config.vocab_size])?)
    }

    /// Mean next-token cross entropy on a teacher-forcing batch
    /// `[batch, seq + 1]`: inputs are the first `seq` ids of each row,
    /// targets the last `seq`.
    pub fn lm_loss_on(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        rows: &[usize],
        batch: usize,
        ignore_index: Option<usize>,
    ) -> Result<(Var, Var)> {
        let (inputs, targets, seq) = split_teacher_forcing(rows, batch)?;
        let logits = self.forward(g, vars, &inputs, batch, seq)?;
        let loss = g.cross_entropy(logits, &targets, ignore_index)?;
        Ok((loss, logits))
    }

    /// Gradient-free LM loss; `exp` of this is the perplexity.
    pub fn lm_loss(&self, rows: &[usize], batch: usize, ignore_index: Option<usize>) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Trainable::None);
        let (loss, _) = self.lm_loss_on(&mut g, &vars, rows, batch, ignore_index)?;
        Ok(g.value(loss).item().as_f64())
    }
}

/// Per-head LayerNorm of the `d`-wide slice starting at column `start`.
#[allow(clippy::too_many_arguments)]
fn head_norm<T: Real>(
    g: &mut Graph<T>,
    fused: Var,
    start: usize,
    gain: Var,
    bias: Var,
    n: usize,
    heads: usize,
    dh: usize,
) -> Result<Var> {
    let d = heads * dh;
    let t = g.slice_cols(fused, start, start + d)?;
    let t = g.reshape(t, &[n * heads, dh])?;
    let t = g.layer_norm(t, gain, bias, LN_EPS)?;
    Ok(g.reshape(t, &[n, d])?)
}

/// Splits `[batch, seq+1]` rows into `(inputs, targets, seq)`.
pub fn split_teacher_forcing(rows: &[usize], batch: usize) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    if batch == 0 || !rows.len().is_multiple_of(batch) || rows.len() / batch < 2 {
        return Err(Error::Usage(format!("{} ids do not form {batch} rows of length >= 2", rows.len())));
    }
    let width = rows.len() / batch;
    let mut inputs = Vec::with_capacity(batch * (width - 1));
    let mut targets = Vec::with_capacity(batch * (width - 1));
    for row in rows.chunks(width) {
        inputs.extend_from_slice(&row[..width - 1]);
        targets.extend_from_slice(&row[1..]);
    }
    Ok((inputs, targets, width - 1))
}
