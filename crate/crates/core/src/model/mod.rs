//! A small pre-layer-norm encoder-decoder transformer with a pluggable
//! cross-attention source.

mod checkpoint;
mod decoder;
mod encoder;
pub(crate) mod layers;
mod optim;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decoder::{
    decode_step, forward_logits, greedy_generate, teacher_forced_loss, CrossAttentionProvider, DecodeSession,
    LossAndGrads, Selection,
};
pub use encoder::{encode_window, encode_window_cached, encode_window_backward, EncoderCache};
pub use optim::Adam;
pub use weights::{
    AttentionWeights, DecoderLayer, EncoderLayer, FeedForwardWeights, HeadProjection, LayerNormWeights, ModelWeights,
};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Maximum encoder/decoder positions (W).
    pub window: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 64,
            vocab_size: 128,
            window: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        if self.n_heads == 0 {
            0
        } else {
            self.d_model / self.n_heads
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.window < 4 || self.window % 4 != 0 {
            return Err(Error::Config(format!(
                "window must be at least 4 and divisible by 4, got {}",
                self.window
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!("vocab_size must be at least 4, got {}", self.vocab_size)));
        }
        if self.n_dec_layers == 0 || self.n_enc_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Vocab {
                id,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }
}
