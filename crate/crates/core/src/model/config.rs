use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Kernel width of the convolutional feed-forward inside FFT blocks.
    pub conv_kernel: usize,
    /// Channel count between the two feed-forward convolutions.
    pub conv_hidden: usize,
    pub n_encoder_blocks: usize,
    pub n_generator_blocks: usize,
    pub n_decoder_blocks: usize,
    pub n_mel_bins: usize,
    pub max_frames: usize,
    /// `true`: pitch joins the query of the first excitation block.
    /// `false`: the "without Q" ablation, where the excitation stack reads `h + p`.
    pub extended_query: bool,
    pub predictor_kernel: usize,
    pub predictor_hidden: usize,
    pub pitch_embed_kernel: usize,
    pub layer_norm_eps: f64,
    /// Dropout probability after attention and feed-forward sublayers.
    /// Only active when a forward pass is given a dropout seed.
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 17,
            n_speakers: 1,
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            conv_kernel: 3,
            conv_hidden: 16,
            n_encoder_blocks: 6,
            n_generator_blocks: 4,
            n_decoder_blocks: 2,
            n_mel_bins: 16,
            max_frames: 1024,
            extended_query: true,
            predictor_kernel: 3,
            predictor_hidden: 16,
            pitch_embed_kernel: 3,
            layer_norm_eps: 1e-5,
            dropout: 0.0,
            init_seed: 1234,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 5,
            n_speakers: 2,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            conv_hidden: 8,
            predictor_hidden: 8,
            n_mel_bins: 4,
            max_frames: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("n_speakers", self.n_speakers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("conv_hidden", self.conv_hidden),
            ("n_mel_bins", self.n_mel_bins),
            ("max_frames", self.max_frames),
            ("predictor_hidden", self.predictor_hidden),
            ("n_generator_blocks", self.n_generator_blocks),
            ("n_decoder_blocks", self.n_decoder_blocks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model ({}) must equal n_heads ({}) × head_dim ({})",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        for (name, k) in [
            ("conv_kernel", self.conv_kernel),
            ("predictor_kernel", self.predictor_kernel),
            ("pitch_embed_kernel", self.pitch_embed_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}
