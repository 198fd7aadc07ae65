//! Encoder-decoder transformer whose cross-attention reads a caller-supplied
//! memory with a per-query column mask, so each target step can see its own
//! key/value sequence.

mod model;
mod pe;

pub use model::{
    dot_product_attention, head_average, Arch, AttentionStep, AttentionTrace, AttnParams, DecoderLayer, EncoderLayer,
    FfnParams, Forward, Layout, LinearParams, NormParams, PaddedIds, Seq2Seq, StepOutput,
};
pub use pe::{positional_encoding, PeTable};

use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("position {pos} outside positional table of {max} rows")]
    PositionOutOfRange { pos: usize, max: usize },
    #[error("empty source sequence")]
    EmptySource,
    #[error("empty key sequence for cross-attention")]
    EmptyContext,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ffn: usize,
    /// Rows of the positional table; also the longest admissible sequence.
    pub max_positions: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout: f64,
    pub unidirectional_encoder: bool,
    /// Classes of the full-sentence length predictor; class `c` is length
    /// `c + 1`.
    pub length_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ffn: 128,
            max_positions: 256,
            src_vocab: 0,
            tgt_vocab: 0,
            dropout: 0.1,
            unidirectional_encoder: true,
            length_classes: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model must be even, got {}", self.d_model));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 || self.d_ffn == 0 {
            return fail("layer counts and d_ffn must be positive".into());
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return fail("vocabularies must hold the four reserved ids plus one token".into());
        }
        if self.max_positions == 0 || self.length_classes == 0 {
            return fail("max_positions and length_classes must be positive".into());
        }
        if self.length_classes > self.max_positions {
            return fail(format!(
                "length_classes {} exceeds max_positions {}",
                self.length_classes, self.max_positions
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Flat `key = value` lines, the inverse of [`ModelConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        format!(
            "d_model = {}\nn_heads = {}\nn_enc_layers = {}\nn_dec_layers = {}\nd_ffn = {}\n\
             max_positions = {}\nsrc_vocab = {}\ntgt_vocab = {}\ndropout = {}\n\
             unidirectional_encoder = {}\nlength_classes = {}\n",
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ffn,
            self.max_positions,
            self.src_vocab,
            self.tgt_vocab,
            self.dropout,
            self.unidirectional_encoder,
            self.length_classes
        )
    }

    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("malformed line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |_| ModelError::Config(format!("bad value for {k}: {v:?}"));
            match k {
                "d_model" => cfg.d_model = v.parse().map_err(bad)?,
                "n_heads" => cfg.n_heads = v.parse().map_err(bad)?,
                "n_enc_layers" => cfg.n_enc_layers = v.parse().map_err(bad)?,
                "n_dec_layers" => cfg.n_dec_layers = v.parse().map_err(bad)?,
                "d_ffn" => cfg.d_ffn = v.parse().map_err(bad)?,
                "max_positions" => cfg.max_positions = v.parse().map_err(bad)?,
                "src_vocab" => cfg.src_vocab = v.parse().map_err(bad)?,
                "tgt_vocab" => cfg.tgt_vocab = v.parse().map_err(bad)?,
                "dropout" => {
                    cfg.dropout = v
                        .parse()
                        .map_err(|_| ModelError::Config(format!("bad value for {k}: {v:?}")))?
                }
                "unidirectional_encoder" => {
                    cfg.unidirectional_encoder = v
                        .parse()
                        .map_err(|_| ModelError::Config(format!("bad value for {k}: {v:?}")))?
                }
                "length_classes" => cfg.length_classes = v.parse().map_err(bad)?,
                other => return Err(ModelError::Config(format!("unknown model key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
