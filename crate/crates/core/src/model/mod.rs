//! The decomposed formant/excitation text-to-spectrogram network.
//!
//! Data flow for one utterance:
//!
//! ```text
//! phonemes ─ embed + PE ─ encoder ─┬─ duration predictor
//!                                  ├─ pitch predictor
//!                                  │
//!   pitch (Hz) ─ shift ─ standardize ─ pitch conv ─┐
//!                                  │               │
//!                   + speaker      │     + speaker │
//!                   length-regulate + PE (both streams)
//!                                  │               │
//!                                  h               p
//!              formant stack(h) ───┤               │
//!        excitation stack(h, Q += p in block 0) ───┘
//!                                  │
//!   mel₁ = FC₁(f) + FC₁(e);  s = f + e ─ block ─ FC₂ = mel₂ ─ block ─ FC₃ = mel₃
//! ```

mod config;
mod layers;
mod weights;

pub use config::ModelConfig;
pub use layers::{positional_encoding, Net};
pub use weights::{
    AttentionWeights, Bound, ConvWeights, FftBlockWeights, LinearWeights, ModelWeights,
    NormWeights, ParamId, ParamStore, PitchStats, PredictorWeights,
};

use log::warn;

use crate::control::shift_pitch;
use crate::error::{shape_mismatch, Error, Result};
use crate::spectrogram::MelSpectrogram;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Phoneme-level input to a forward pass. Ground-truth fields are optional
/// and only read when the options ask for them.
#[derive(Clone, Copy, Debug)]
pub struct SynthesisInput<'a> {
    pub phoneme_ids: &'a [usize],
    pub speaker_id: usize,
    pub durations: Option<&'a [usize]>,
    pub pitch_hz: Option<&'a [f64]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    pub use_gt_duration: bool,
    pub use_gt_pitch: bool,
    pub pitch_shift_semitones: f64,
    pub dropout_seed: Option<u64>,
}

impl ForwardOptions {
    pub fn teacher_forced() -> Self {
        Self {
            use_gt_duration: true,
            use_gt_pitch: true,
            ..Self::default()
        }
    }

    pub fn with_shift(mut self, semitones: f64) -> Self {
        self.pitch_shift_semitones = semitones;
        self
    }
}

/// Tape handles for every output of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub mel1: Var,
    pub mel2: Var,
    pub mel3: Var,
    /// `[N, 1]`, log(frames + 1).
    pub log_durations: Var,
    /// `[N, 1]`, speaker-standardized pitch.
    pub pitch: Var,
    pub formant: Var,
    pub excitation: Var,
    /// Durations actually used for length regulation.
    pub durations: Vec<usize>,
    /// Standardized pitch fed to the pitch embedding (after any shift).
    pub pitch_input: Vec<f64>,
    pub speaker_id: usize,
}

/// Owned copy of a forward pass's results.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardValues {
    pub mel1: MelSpectrogram,
    pub mel2: MelSpectrogram,
    pub mel3: MelSpectrogram,
    pub predicted_log_durations: Vec<f64>,
    pub predicted_pitch_std: Vec<f64>,
    pub predicted_pitch_hz: Vec<f64>,
    pub formant_repr: Tensor,
    pub excitation_repr: Tensor,
    pub durations: Vec<usize>,
}

/// Model: configuration plus weights.
#[derive(Clone, Debug)]
pub struct FastPitchFormant {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl FastPitchFormant {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let weights = ModelWeights::init(&config)?;
        Ok(Self { config, weights })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.weights.store.bind(tape, trainable)
    }

    pub fn net<'a>(&'a self, params: &'a Bound) -> Net<'a> {
        Net::new(&self.config, &self.weights, params)
    }

    /// Per-speaker mean/std of voiced phoneme pitch.
    pub fn fit_pitch_stats<'a, I>(&mut self, utterances: I)
    where
        I: IntoIterator<Item = (usize, &'a [f64])>,
    {
        let n = self.config.n_speakers;
        let mut acc = vec![(0usize, 0.0f64, 0.0f64); n];
        for (spk, pitch) in utterances {
            if spk >= n {
                continue;
            }
            for &f in pitch.iter().filter(|&&f| f > 0.0) {
                acc[spk].0 += 1;
                acc[spk].1 += f;
                acc[spk].2 += f * f;
            }
        }
        self.weights.pitch_stats = acc
            .into_iter()
            .map(|(count, sum, sq)| {
                if count == 0 {
                    return PitchStats::default();
                }
                let mean = sum / count as f64;
                let var = (sq / count as f64 - mean * mean).max(0.0);
                let std = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
                PitchStats { mean, std }
            })
            .collect();
    }

    pub fn pitch_stats(&self, speaker_id: usize) -> Result<PitchStats> {
        self.weights
            .pitch_stats
            .get(speaker_id)
            .copied()
            .ok_or(Error::OutOfVocabulary {
                id: speaker_id,
                size: self.config.n_speakers,
            })
    }

    /// Phoneme embedding plus positional encoding through the encoder stack.
    pub fn encode_text(
        &self,
        tape: &mut Tape,
        params: &Bound,
        phoneme_ids: &[usize],
    ) -> Result<Var> {
        encode_text(&mut self.net(params), tape, phoneme_ids)
    }

    /// Returns `(log_durations, standardized_pitch)`, each `[N, 1]`.
    pub fn predict_temporal(
        &self,
        tape: &mut Tape,
        params: &Bound,
        hidden: Var,
    ) -> Result<(Var, Var)> {
        let net = self.net(params);
        let d = net.predictor(tape, hidden, &self.weights.duration_predictor)?;
        let p = net.predictor(tape, hidden, &self.weights.pitch_predictor)?;
        Ok((d, p))
    }

    /// One-channel convolution from standardized pitch to `[N, D]`.
    pub fn pitch_to_embedding(
        &self,
        tape: &mut Tape,
        params: &Bound,
        pitch_std: &[f64],
    ) -> Result<Var> {
        let x = tape.constant(Tensor::new(vec![pitch_std.len(), 1], pitch_std.to_vec())?);
        self.net(params)
            .conv(tape, x, &self.weights.pitch_embedding)
    }

    pub fn run_generators(
        &self,
        tape: &mut Tape,
        params: &Bound,
        h: Var,
        p: Var,
    ) -> Result<(Var, Var)> {
        run_generators(&mut self.net(params), tape, h, p)
    }

    pub fn spectrogram_decoder(
        &self,
        tape: &mut Tape,
        params: &Bound,
        formant: Var,
        excitation: Var,
    ) -> Result<(Var, Var, Var)> {
        spectrogram_decoder(&mut self.net(params), tape, formant, excitation)
    }

    /// All three decoder heads for one representation, with the other
    /// replaced by zeros.
    pub fn decode_single_path_heads(
        &self,
        tape: &mut Tape,
        params: &Bound,
        repr: Var,
    ) -> Result<(Var, Var, Var)> {
        let zeros = tape.constant(Tensor::zeros(tape.shape(repr)));
        self.spectrogram_decoder(tape, params, repr, zeros)
    }

    /// Final-head mel for one representation decoded on its own.
    pub fn decode_single_path(&self, tape: &mut Tape, params: &Bound, repr: Var) -> Result<Var> {
        Ok(self.decode_single_path_heads(tape, params, repr)?.2)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        input: &SynthesisInput<'_>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let n = input.phoneme_ids.len();
        let stats = self.pitch_stats(input.speaker_id)?;
        let mut net = self.net(params).with_dropout(opts.dropout_seed);
        let hidden = encode_text(&mut net, tape, input.phoneme_ids)?;
        let (log_dur, pitch_pred) = self.predict_temporal(tape, params, hidden)?;

        let durations: Vec<i64> = if opts.use_gt_duration {
            let d = input.durations.ok_or_else(|| {
                Error::Input("ground-truth durations requested but absent".into())
            })?;
            check_len("durations", d.len(), n)?;
            d.iter().map(|&v| v as i64).collect()
        } else {
            tape.value(log_dur)
                .data()
                .iter()
                .map(|ld| (ld.exp() - 1.0).round() as i64)
                .collect()
        };

        let pitch_hz: Vec<f64> = if opts.use_gt_pitch {
            let p = input
                .pitch_hz
                .ok_or_else(|| Error::Input("ground-truth pitch requested but absent".into()))?;
            check_len("pitch", p.len(), n)?;
            p.to_vec()
        } else {
            tape.value(pitch_pred)
                .data()
                .iter()
                .map(|&z| stats.destandardize(z))
                .collect()
        };
        let shifted = shift_pitch(&pitch_hz, opts.pitch_shift_semitones)?;
        let pitch_input: Vec<f64> = shifted.iter().map(|&f| stats.standardize(f)).collect();

        let pitch_emb = self.pitch_to_embedding(tape, params, &pitch_input)?;
        let speaker =
            tape.gather_rows(params[self.weights.speaker_embedding], &[input.speaker_id])?;
        let h_ph = tape.add_row(hidden, speaker)?;
        let p_ph = tape.add_row(pitch_emb, speaker)?;

        let (h, used) = length_regulate(tape, h_ph, &durations)?;
        let (p, _) = length_regulate(tape, p_ph, &durations)?;
        let pe = positional_encoding(
            used.iter().sum(),
            self.config.d_model,
            self.config.max_frames,
        )?;
        let pe = tape.constant(pe);
        let h = tape.add(h, pe)?;
        let p = tape.add(p, pe)?;

        let (formant, excitation) = run_generators(&mut net, tape, h, p)?;
        let (mel1, mel2, mel3) = spectrogram_decoder(&mut net, tape, formant, excitation)?;
        Ok(ForwardOutput {
            mel1,
            mel2,
            mel3,
            log_durations: log_dur,
            pitch: pitch_pred,
            formant,
            excitation,
            durations: used,
            pitch_input,
            speaker_id: input.speaker_id,
        })
    }

    pub fn values(&self, tape: &Tape, out: &ForwardOutput) -> Result<ForwardValues> {
        let stats = self.pitch_stats(out.speaker_id)?;
        let pitch_std = tape.value(out.pitch).data().to_vec();
        Ok(ForwardValues {
            mel1: MelSpectrogram::from_tensor(tape.value(out.mel1))?,
            mel2: MelSpectrogram::from_tensor(tape.value(out.mel2))?,
            mel3: MelSpectrogram::from_tensor(tape.value(out.mel3))?,
            predicted_log_durations: tape.value(out.log_durations).data().to_vec(),
            predicted_pitch_hz: pitch_std.iter().map(|&z| stats.destandardize(z)).collect(),
            predicted_pitch_std: pitch_std,
            formant_repr: tape.value(out.formant).clone(),
            excitation_repr: tape.value(out.excitation).clone(),
            durations: out.durations.clone(),
        })
    }

    /// Forward pass without gradient tracking.
    pub fn infer(
        &self,
        input: &SynthesisInput<'_>,
        opts: &ForwardOptions,
    ) -> Result<ForwardValues> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &params, input, opts)?;
        self.values(&tape, &out)
    }

    /// Decodes precomputed formant or excitation frames on their own,
    /// returning the final-head mel.
    pub fn decode_repr(&self, repr: &Tensor) -> Result<MelSpectrogram> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let r = tape.constant(repr.clone());
        let mel = self.decode_single_path(&mut tape, &params, r)?;
        MelSpectrogram::from_tensor(tape.value(mel))
    }
}

/// Phoneme embedding plus positional encoding through the encoder stack.
pub fn encode_text(net: &mut Net<'_>, tape: &mut Tape, phoneme_ids: &[usize]) -> Result<Var> {
    if phoneme_ids.is_empty() {
        return Err(Error::Input("empty phoneme sequence".into()));
    }
    let (cfg, w) = (net.cfg, net.weights);
    let emb = tape.gather_rows(net.params[w.phoneme_embedding], phoneme_ids)?;
    let pe = positional_encoding(phoneme_ids.len(), cfg.d_model, cfg.max_frames)?;
    let pe = tape.constant(pe);
    let x = tape.add(emb, pe)?;
    net.fft_stack(tape, x, &w.encoder, None)
}

fn check_len(what: &str, got: usize, n: usize) -> Result<()> {
    if got != n {
        return Err(Error::Input(format!(
            "{what} has {got} entries for {n} phonemes"
        )));
    }
    Ok(())
}

/// Repeats row `i` of `x` `durations[i]` times. Durations below 1 are
/// clamped to 1. Returns the regulated tensor and the durations used.
pub fn length_regulate(tape: &mut Tape, x: Var, durations: &[i64]) -> Result<(Var, Vec<usize>)> {
    let n = tape.value(x).rows();
    if durations.len() != n {
        return Err(Error::Dimension(format!(
            "length_regulate: {} durations for {n} rows",
            durations.len()
        )));
    }
    let used: Vec<usize> = durations
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d < 1 {
                warn!("duration {d} for phoneme {i} clamped to 1");
                1
            } else {
                d as usize
            }
        })
        .collect();
    let idx: Vec<usize> = used
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect();
    Ok((tape.gather_rows(x, &idx)?, used))
}

/// Formant stack on `h` alone; excitation stack on `h` with `p` in the
/// first block's query, or on `h + p` with a plain query when the extended
/// query is disabled.
pub fn run_generators(net: &mut Net<'_>, tape: &mut Tape, h: Var, p: Var) -> Result<(Var, Var)> {
    if tape.shape(h) != tape.shape(p) {
        return Err(shape_mismatch(
            "run_generators",
            tape.shape(h),
            tape.shape(p),
        ));
    }
    let w = net.weights;
    let formant = net.fft_stack(tape, h, &w.formant, None)?;
    let excitation = if net.cfg.extended_query {
        net.fft_stack(tape, h, &w.excitation, Some(p))?
    } else {
        let hp = tape.add(h, p)?;
        net.fft_stack(tape, hp, &w.excitation, None)?
    };
    Ok((formant, excitation))
}

/// Three-head decoder. `mel₁` sums the shared FC₁ applied to each
/// representation; `mel₂` and `mel₃` come after the first and second halves
/// of the decoder blocks applied to `formant + excitation`.
pub fn spectrogram_decoder(
    net: &mut Net<'_>,
    tape: &mut Tape,
    formant: Var,
    excitation: Var,
) -> Result<(Var, Var, Var)> {
    if tape.shape(formant) != tape.shape(excitation) {
        return Err(shape_mismatch(
            "spectrogram_decoder",
            tape.shape(formant),
            tape.shape(excitation),
        ));
    }
    let w = net.weights;
    let f1 = net.linear(tape, formant, &w.fc1)?;
    let e1 = net.linear(tape, excitation, &w.fc1)?;
    let mel1 = tape.add(f1, e1)?;
    let s = tape.add(formant, excitation)?;
    let split = w.decoder.len().div_ceil(2);
    let s = net.fft_stack(tape, s, &w.decoder[..split], None)?;
    let mel2 = net.linear(tape, s, &w.fc2)?;
    let s = net.fft_stack(tape, s, &w.decoder[split..], None)?;
    let mel3 = net.linear(tape, s, &w.fc3)?;
    Ok((mel1, mel2, mel3))
}
