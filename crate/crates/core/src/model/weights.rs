//! Named parameter storage and the typed layout of the network's weights.

use std::ops::Index;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on the tape. With `trainable`, gradients are
    /// tracked.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Tape handles for every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles already recorded on a tape, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub w_q: ParamId,
    pub b_q: ParamId,
    /// Keys carry no bias: it would shift every score in a row equally and
    /// cancel in the softmax.
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

#[derive(Clone, Debug)]
pub struct NormWeights {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ConvWeights {
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct LinearWeights {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct FftBlockWeights {
    pub attn: AttentionWeights,
    pub norm1: NormWeights,
    pub conv1: ConvWeights,
    pub conv2: ConvWeights,
    pub norm2: NormWeights,
}

#[derive(Clone, Debug)]
pub struct PredictorWeights {
    pub conv1: ConvWeights,
    pub norm1: NormWeights,
    pub conv2: ConvWeights,
    pub norm2: NormWeights,
    pub proj: LinearWeights,
}

/// Per-speaker pitch statistics (Hz) used for standardization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for PitchStats {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl PitchStats {
    /// Voiced values map to z-scores; unvoiced (0 Hz) stays 0.
    pub fn standardize(&self, hz: f64) -> f64 {
        if hz > 0.0 {
            (hz - self.mean) / self.std
        } else {
            0.0
        }
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        (z * self.std + self.mean).max(0.0)
    }
}

/// All learnable parameters plus the non-trainable pitch statistics.
#[derive(Clone, Debug)]
pub struct ModelWeights {
    pub store: ParamStore,
    pub phoneme_embedding: ParamId,
    pub speaker_embedding: ParamId,
    pub encoder: Vec<FftBlockWeights>,
    pub duration_predictor: PredictorWeights,
    pub pitch_predictor: PredictorWeights,
    pub pitch_embedding: ConvWeights,
    pub formant: Vec<FftBlockWeights>,
    pub excitation: Vec<FftBlockWeights>,
    pub decoder: Vec<FftBlockWeights>,
    /// Shared by the formant and excitation projections.
    pub fc1: LinearWeights,
    pub fc2: LinearWeights,
    pub fc3: LinearWeights,
    pub pitch_stats: Vec<PitchStats>,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape and data agree");
        self.store.add(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> LinearWeights {
        LinearWeights {
            w: self.uniform(format!("{name}.w"), &[d_in, d_out], d_in),
            b: self.uniform(format!("{name}.b"), &[d_out], d_in),
        }
    }

    fn conv(&mut self, name: &str, k: usize, c_in: usize, c_out: usize) -> ConvWeights {
        ConvWeights {
            kernel: self.uniform(format!("{name}.kernel"), &[k, c_in, c_out], k * c_in),
            bias: self.uniform(format!("{name}.bias"), &[c_out], k * c_in),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormWeights {
        NormWeights {
            gain: self.constant(format!("{name}.gain"), &[d], 1.0),
            bias: self.constant(format!("{name}.bias"), &[d], 0.0),
        }
    }

    fn attention(&mut self, name: &str, d: usize, inner: usize) -> AttentionWeights {
        let q = self.linear(&format!("{name}.q"), d, inner);
        let w_k = self.uniform(format!("{name}.k.w"), &[d, inner], d);
        let v = self.linear(&format!("{name}.v"), d, inner);
        let o = self.linear(&format!("{name}.o"), inner, d);
        AttentionWeights {
            w_q: q.w,
            b_q: q.b,
            w_k,
            w_v: v.w,
            b_v: v.b,
            w_o: o.w,
            b_o: o.b,
        }
    }

    fn fft_block(&mut self, name: &str, cfg: &ModelConfig) -> FftBlockWeights {
        let d = cfg.d_model;
        FftBlockWeights {
            attn: self.attention(&format!("{name}.attn"), d, cfg.n_heads * cfg.head_dim),
            norm1: self.norm(&format!("{name}.norm1"), d),
            conv1: self.conv(
                &format!("{name}.conv1"),
                cfg.conv_kernel,
                d,
                cfg.conv_hidden,
            ),
            conv2: self.conv(
                &format!("{name}.conv2"),
                cfg.conv_kernel,
                cfg.conv_hidden,
                d,
            ),
            norm2: self.norm(&format!("{name}.norm2"), d),
        }
    }

    fn stack(&mut self, name: &str, n: usize, cfg: &ModelConfig) -> Vec<FftBlockWeights> {
        (0..n)
            .map(|i| self.fft_block(&format!("{name}.{i}"), cfg))
            .collect()
    }

    fn predictor(&mut self, name: &str, cfg: &ModelConfig) -> PredictorWeights {
        let (k, d, h) = (cfg.predictor_kernel, cfg.d_model, cfg.predictor_hidden);
        PredictorWeights {
            conv1: self.conv(&format!("{name}.conv1"), k, d, h),
            norm1: self.norm(&format!("{name}.norm1"), h),
            conv2: self.conv(&format!("{name}.conv2"), k, h, h),
            norm2: self.norm(&format!("{name}.norm2"), h),
            proj: self.linear(&format!("{name}.proj"), h, 1),
        }
    }
}

impl ModelWeights {
    /// Fresh weights drawn from `cfg.init_seed`: uniform in ±1/√fan_in,
    /// layer-norm gains at 1 and biases at 0.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut b = Builder {
            store: ParamStore::default(),
            rng: &mut rng,
        };
        let d = cfg.d_model;
        let phoneme_embedding = b.uniform("phoneme_embedding".into(), &[cfg.vocab_size, d], 1);
        let speaker_embedding = b.uniform("speaker_embedding".into(), &[cfg.n_speakers, d], 1);
        let encoder = b.stack("encoder", cfg.n_encoder_blocks, cfg);
        let duration_predictor = b.predictor("duration_predictor", cfg);
        let pitch_predictor = b.predictor("pitch_predictor", cfg);
        let pitch_embedding = b.conv("pitch_embedding", cfg.pitch_embed_kernel, 1, d);
        let formant = b.stack("formant", cfg.n_generator_blocks, cfg);
        let excitation = b.stack("excitation", cfg.n_generator_blocks, cfg);
        let decoder = b.stack("decoder", cfg.n_decoder_blocks, cfg);
        let fc1 = b.linear("fc1", d, cfg.n_mel_bins);
        let fc2 = b.linear("fc2", d, cfg.n_mel_bins);
        let fc3 = b.linear("fc3", d, cfg.n_mel_bins);
        Ok(Self {
            store: b.store,
            phoneme_embedding,
            speaker_embedding,
            encoder,
            duration_predictor,
            pitch_predictor,
            pitch_embedding,
            formant,
            excitation,
            decoder,
            fc1,
            fc2,
            fc3,
            pitch_stats: vec![PitchStats::default(); cfg.n_speakers],
        })
    }

    /// Replaces parameter values by name, checking that every parameter of
    /// the layout is provided with the right shape.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.store.len()];
        for (name, t) in named {
            let i = self
                .store
                .position(&name)
                .ok_or_else(|| Error::Load(format!("unknown parameter `{name}`")))?;
            let slot = &mut self.store.tensors[i];
            if slot.shape() != t.shape() {
                return Err(Error::Load(format!(
                    "parameter `{name}` has shape {:?}, layout expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.with_requires_grad(false);
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Load(format!(
                "parameter `{}` missing",
                self.store.names[i]
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.store.tensors.iter().all(Tensor::is_finite)
    }
}
