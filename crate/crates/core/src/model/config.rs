use crate::error::{Error, Result};

/// Architecture of a parallel-block decoder-only language model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Maximum number of context tokens the model attends over.
    pub context_len: usize,
    pub tie_embeddings: bool,
}

/// SwiGLU hidden width: `8/3 · d_model` rounded to a multiple of 8.
pub fn default_d_ff(d_model: usize) -> usize {
    let raw = (8.0 * d_model as f64 / 3.0).round();
    (((raw / 8.0).round() as usize) * 8).max(8)
}

impl ModelConfig {
    pub fn new(d_model: usize, n_heads: usize, n_layers: usize, vocab_size: usize, context_len: usize) -> Self {
        Self {
            d_model,
            n_heads,
            n_layers,
            d_ff: default_d_ff(d_model),
            vocab_size,
            context_len,
            tie_embeddings: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Output width of the fused input projection: Q, K, V and both SwiGLU halves.
    pub fn fused_in_width(&self) -> usize {
        3 * self.d_model + 2 * self.d_ff
    }

    /// Input width of the fused output projection: attention output ⊕ FFN output.
    pub fn fused_out_width(&self) -> usize {
        self.d_model + self.d_ff
    }

    /// Every violated constraint, or `Ok` when the config is usable.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                errs.push(format!("model.{name} must be positive"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            errs.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len < 2 {
            errs.push(format!("model.context_len ({}) must be at least 2", self.context_len));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn param_count(&self) -> ParamCount {
        param_count(self)
    }
}

/// Closed-form parameter totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Parameters owned by one decoder block.
    pub per_layer: usize,
    /// Everything outside the decoder blocks (embeddings, final norm, head).
    pub non_layer: usize,
}

pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let d = cfg.d_model;
    let w_in = cfg.fused_in_width();
    let per_layer = 2 * d // pre-LN
        + d * w_in + w_in // fused in
        + 4 * cfg.head_dim() // q/k norms
        + cfg.fused_out_width() * d + d; // fused out
    let head = if cfg.tie_embeddings { 0 } else { cfg.vocab_size * d };
    let non_layer = cfg.vocab_size * d + cfg.context_len * d + 2 * d + head + cfg.vocab_size;
    ParamCount { total: non_layer + cfg.n_layers * per_layer, per_layer, non_layer }
}
