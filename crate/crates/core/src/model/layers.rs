//! Building blocks shared by every stack of the network.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::weights::{
    AttentionWeights, Bound, ConvWeights, FftBlockWeights, LinearWeights, ModelWeights,
    NormWeights, PredictorWeights,
};
use crate::error::{shape_mismatch, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Sinusoidal table: `pe[t, 2i] = sin(t / 10000^(2i/D))`,
/// `pe[t, 2i+1] = cos(t / 10000^(2i/D))`.
pub fn positional_encoding(t_len: usize, d: usize, max_frames: usize) -> Result<Tensor> {
    if t_len > max_frames {
        return Err(Error::Capacity {
            requested: t_len,
            max: max_frames,
        });
    }
    let mut data = vec![0.0; t_len * d];
    for t in 0..t_len {
        for j in 0..d {
            let pair = (j / 2 * 2) as f64;
            let angle = t as f64 / 10000f64.powf(pair / d as f64);
            data[t * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t_len, d], data)
}

/// A forward-pass view over bound weights.
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub weights: &'a ModelWeights,
    pub params: &'a Bound,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Net<'a> {
    pub fn new(cfg: &'a ModelConfig, weights: &'a ModelWeights, params: &'a Bound) -> Self {
        Self {
            cfg,
            weights,
            params,
            dropout_rng: None,
        }
    }

    /// Enables inverted dropout with masks drawn from `seed`.
    pub fn with_dropout(mut self, seed: Option<u64>) -> Self {
        self.dropout_rng = seed
            .filter(|_| self.cfg.dropout > 0.0)
            .map(ChaCha8Rng::seed_from_u64);
        self
    }

    pub fn linear(&self, tape: &mut Tape, x: Var, w: &LinearWeights) -> Result<Var> {
        tape.linear(x, self.params[w.w], self.params[w.b])
    }

    pub fn conv(&self, tape: &mut Tape, x: Var, w: &ConvWeights) -> Result<Var> {
        tape.conv1d(x, self.params[w.kernel], self.params[w.bias])
    }

    pub fn norm(&self, tape: &mut Tape, x: Var, w: &NormWeights) -> Result<Var> {
        tape.layer_norm(
            x,
            self.params[w.gain],
            self.params[w.bias],
            self.cfg.layer_norm_eps,
        )
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        let p = self.cfg.dropout;
        let keep = 1.0 / (1.0 - p);
        let shape = tape.shape(x).to_vec();
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }

    /// Scaled dot-product self-attention over all heads.
    ///
    /// Keys and values always come from `x`. The query reads `x + addend`
    /// when an addend is given, otherwise `x`.
    pub fn multi_head_self_attention(
        &self,
        tape: &mut Tape,
        x: Var,
        w: &AttentionWeights,
        pitch_addend: Option<Var>,
    ) -> Result<Var> {
        let query_in = match pitch_addend {
            Some(p) => {
                if tape.shape(p) != tape.shape(x) {
                    return Err(shape_mismatch(
                        "attention addend",
                        tape.shape(x),
                        tape.shape(p),
                    ));
                }
                tape.add(x, p)?
            }
            None => x,
        };
        let pm = self.params;
        let q = tape.linear(query_in, pm[w.w_q], pm[w.b_q])?;
        let k = tape.matmul(x, pm[w.w_k])?;
        let v = tape.linear(x, pm[w.w_v], pm[w.b_v])?;
        let d = self.cfg.head_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = tape.slice_cols(q, h * d, d)?;
            let kh = tape.slice_cols(k, h * d, d)?;
            let vh = tape.slice_cols(v, h * d, d)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        tape.linear(cat, pm[w.w_o], pm[w.b_o])
    }

    /// Post-norm FFT block: attention and convolutional feed-forward
    /// sublayers, each with a residual connection and layer norm.
    pub fn fft_block(
        &mut self,
        tape: &mut Tape,
        x: Var,
        w: &FftBlockWeights,
        pitch_addend: Option<Var>,
    ) -> Result<Var> {
        let a = self.multi_head_self_attention(tape, x, &w.attn, pitch_addend)?;
        let a = self.dropout(tape, a)?;
        let r = tape.add(x, a)?;
        let y = self.norm(tape, r, &w.norm1)?;
        let c = self.conv(tape, y, &w.conv1)?;
        let c = tape.relu(c)?;
        let c = self.conv(tape, c, &w.conv2)?;
        let c = self.dropout(tape, c)?;
        let r = tape.add(y, c)?;
        self.norm(tape, r, &w.norm2)
    }

    pub fn fft_stack(
        &mut self,
        tape: &mut Tape,
        mut x: Var,
        blocks: &[FftBlockWeights],
        first_addend: Option<Var>,
    ) -> Result<Var> {
        for (i, b) in blocks.iter().enumerate() {
            x = self.fft_block(tape, x, b, if i == 0 { first_addend } else { None })?;
        }
        Ok(x)
    }

    /// Two ReLU convolutions with layer norm, then a scalar projection per
    /// position. Returns `[N, 1]`.
    pub fn predictor(&self, tape: &mut Tape, x: Var, w: &PredictorWeights) -> Result<Var> {
        let h = self.conv(tape, x, &w.conv1)?;
        let h = tape.relu(h)?;
        let h = self.norm(tape, h, &w.norm1)?;
        let h = self.conv(tape, h, &w.conv2)?;
        let h = tape.relu(h)?;
        let h = self.norm(tape, h, &w.norm2)?;
        self.linear(tape, h, &w.proj)
    }
}
