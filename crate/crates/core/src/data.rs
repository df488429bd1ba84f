//! Synthetic source-filter corpus.
//!
//! Every frame is built additively in the log-mel domain:
//!
//! ```text
//! mel[t] = formant_profile(phoneme) + speaker_offset + excitation_profile(f0)
//! ```
//!
//! The excitation profile is a Gaussian bump centred on
//! `bin(f) = round((M−1)·(ln f − ln f_min)/(ln f_max − ln f_min))`, so pitch
//! maps invertibly (up to one bin) onto a band position. This deliberately
//! matches the decoder's summation assumption: it is a favourable corpus on
//! which the formant/excitation split can be checked, not a model of speech.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::metrics::F0Track;
use crate::model::SynthesisInput;
use crate::spectrogram::MelSpectrogram;

const CORPUS_MAGIC: &[u8; 8] = b"FPFCORP\0";
const CORPUS_VERSION: u32 = 1;
/// Mixed into the seed for profile tables so they do not share a stream
/// with utterance sampling.
const PROFILE_STREAM: u64 = 0x5eed_f11e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_utterances: usize,
    /// Includes the unvoiced id.
    pub vocab_size: usize,
    pub n_speakers: usize,
    pub n_mel_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Phoneme id that is always unvoiced.
    pub unvoiced_id: usize,
    pub unvoiced_prob: f64,
    /// Voiced pitch is drawn this many semitones inside `[f_min, f_max]`, so
    /// shifts up to this size stay on the bin scale.
    pub shift_headroom_semitones: f64,
    /// Largest phoneme-to-phoneme pitch step, in semitones.
    pub pitch_step_semitones: f64,
    pub excitation_amplitude: f64,
    /// Gaussian width of the excitation bump, in bins.
    pub excitation_width: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_utterances: 64,
            vocab_size: 17,
            n_speakers: 1,
            n_mel_bins: 16,
            f_min: 80.0,
            f_max: 400.0,
            min_phonemes: 4,
            max_phonemes: 10,
            min_duration: 2,
            max_duration: 6,
            unvoiced_id: 0,
            unvoiced_prob: 0.15,
            shift_headroom_semitones: 8.0,
            pitch_step_semitones: 2.0,
            excitation_amplitude: 3.0,
            excitation_width: 0.8,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    /// Band of voiced pitch the generator draws from.
    pub fn voiced_range(&self) -> (f64, f64) {
        let k = (self.shift_headroom_semitones / 12.0).exp2();
        (self.f_min * k, self.f_max / k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.n_utterances == 0 {
            return bad("n_utterances", "must be positive".into());
        }
        if self.vocab_size < 2 {
            return bad(
                "vocab_size",
                "needs at least one voiced and one unvoiced id".into(),
            );
        }
        if self.unvoiced_id >= self.vocab_size {
            return bad(
                "unvoiced_id",
                format!("{} outside vocabulary", self.unvoiced_id),
            );
        }
        if self.n_speakers == 0 {
            return bad("n_speakers", "must be positive".into());
        }
        if self.n_mel_bins < 2 {
            return bad("n_mel_bins", "needs at least 2 bins".into());
        }
        if !(self.f_min > 0.0) {
            return bad("f_min", format!("must be positive, got {}", self.f_min));
        }
        if !(self.f_max > self.f_min) {
            return bad(
                "f_max",
                format!("{} must exceed f_min {}", self.f_max, self.f_min),
            );
        }
        if self.min_phonemes == 0 || self.max_phonemes < self.min_phonemes {
            return bad(
                "min_phonemes",
                format!(
                    "range [{}, {}] is empty or zero",
                    self.min_phonemes, self.max_phonemes
                ),
            );
        }
        if self.min_duration == 0 || self.max_duration < self.min_duration {
            return bad(
                "min_duration",
                format!(
                    "range [{}, {}] is empty or zero",
                    self.min_duration, self.max_duration
                ),
            );
        }
        if !(0.0..1.0).contains(&self.unvoiced_prob) {
            return bad(
                "unvoiced_prob",
                format!("{} outside [0, 1)", self.unvoiced_prob),
            );
        }
        let (lo, hi) = self.voiced_range();
        if !(self.shift_headroom_semitones >= 0.0) || lo > hi {
            return bad(
                "shift_headroom_semitones",
                format!("{} leaves no voiced range", self.shift_headroom_semitones),
            );
        }
        if !(self.excitation_amplitude > 0.0) || !(self.excitation_width > 0.0) {
            return bad(
                "excitation_amplitude",
                "amplitude and width must be positive".into(),
            );
        }
        if !(self.pitch_step_semitones >= 0.0) {
            return bad("pitch_step_semitones", "must be non-negative".into());
        }
        Ok(())
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeUtterance {
    pub phoneme_ids: Vec<usize>,
    pub durations_frames: Vec<usize>,
    /// 0 marks an unvoiced phoneme.
    pub phoneme_pitch_hz: Vec<f64>,
    pub speaker_id: usize,
    pub target_mel: MelSpectrogram,
}

impl PhonemeUtterance {
    pub fn n_phonemes(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn n_frames(&self) -> usize {
        self.durations_frames.iter().sum()
    }

    pub fn as_input(&self) -> SynthesisInput<'_> {
        SynthesisInput {
            phoneme_ids: &self.phoneme_ids,
            speaker_id: self.speaker_id,
            durations: Some(&self.durations_frames),
            pitch_hz: Some(&self.phoneme_pitch_hz),
        }
    }

    /// Repeats per-phoneme values over their frames.
    pub fn expand_to_frames(&self, per_phoneme: &[f64]) -> Vec<f64> {
        per_phoneme
            .iter()
            .zip(&self.durations_frames)
            .flat_map(|(&v, &d)| std::iter::repeat_n(v, d))
            .collect()
    }

    pub fn frame_f0(&self) -> F0Track {
        F0Track::from_hz(self.expand_to_frames(&self.phoneme_pitch_hz))
    }

    fn validate(&self) -> Result<()> {
        let n = self.phoneme_ids.len();
        if n == 0 || self.durations_frames.len() != n || self.phoneme_pitch_hz.len() != n {
            return Err(Error::Contract(format!(
                "{} ids, {} durations, {} pitch values",
                n,
                self.durations_frames.len(),
                self.phoneme_pitch_hz.len()
            )));
        }
        if self.target_mel.n_frames() != self.n_frames() {
            return Err(Error::Contract(format!(
                "durations sum to {} but the mel has {} frames",
                self.n_frames(),
                self.target_mel.n_frames()
            )));
        }
        Ok(())
    }
}

/// The fixed formant, speaker and excitation tables implied by a
/// [`CorpusConfig`]. Also serves as the synthetic pitch extractor.
#[derive(Clone, Debug)]
pub struct SourceFilterBank {
    cfg: CorpusConfig,
    formants: Vec<Vec<f64>>,
    speakers: Vec<Vec<f64>>,
}

impl SourceFilterBank {
    pub fn new(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.n_mel_bins;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PROFILE_STREAM);
        let formants = (0..cfg.vocab_size)
            .map(|id| {
                if id == cfg.unvoiced_id {
                    // broadband, rising toward high bins
                    (0..m)
                        .map(|b| -2.0 + 1.5 * b as f64 / (m - 1) as f64)
                        .collect()
                } else {
                    let mut prof = vec![-3.0; m];
                    for _ in 0..2 {
                        let centre = rng.gen_range(0.0..(m - 1) as f64);
                        let amp = rng.gen_range(1.0..3.0);
                        let width = rng.gen_range(1.0..2.5);
                        for (b, v) in prof.iter_mut().enumerate() {
                            *v += amp * gaussian(b as f64, centre, width);
                        }
                    }
                    prof
                }
            })
            .collect();
        let speakers = (0..cfg.n_speakers)
            .map(|_| {
                let level = rng.gen_range(-1.0..1.0);
                let tilt = rng.gen_range(-0.05..0.05);
                (0..m)
                    .map(|b| level + tilt * (b as f64 - m as f64 / 2.0))
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            formants,
            speakers,
        })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.cfg
    }

    pub fn formant_profile(&self, phoneme: usize) -> &[f64] {
        &self.formants[phoneme]
    }

    pub fn speaker_offset(&self, speaker: usize) -> &[f64] {
        &self.speakers[speaker]
    }

    /// Band position of a pitch, clamped to the bin range.
    pub fn bin(&self, hz: f64) -> usize {
        let c = &self.cfg;
        let m1 = (c.n_mel_bins - 1) as f64;
        let x = m1 * (hz.ln() - c.f_min.ln()) / (c.f_max.ln() - c.f_min.ln());
        x.round().clamp(0.0, m1) as usize
    }

    /// Centre frequency of a bin on the log pitch scale.
    pub fn bin_to_hz(&self, bin: usize) -> f64 {
        let c = &self.cfg;
        let frac = bin as f64 / (c.n_mel_bins - 1) as f64;
        (c.f_min.ln() + frac * (c.f_max.ln() - c.f_min.ln())).exp()
    }

    pub fn excitation_profile(&self, hz: f64) -> Vec<f64> {
        let m = self.cfg.n_mel_bins;
        if hz <= 0.0 {
            return vec![0.0; m];
        }
        self.bump(self.bin(hz))
    }

    fn bump(&self, centre: usize) -> Vec<f64> {
        let c = &self.cfg;
        (0..c.n_mel_bins)
            .map(|b| c.excitation_amplitude * gaussian(b as f64, centre as f64, c.excitation_width))
            .collect()
    }

    /// `formant(phoneme) + speaker_offset` first, then the excitation.
    pub fn frame(&self, phoneme: usize, speaker: usize, hz: f64) -> Vec<f64> {
        let exc = self.excitation_profile(hz);
        self.formants[phoneme]
            .iter()
            .zip(&self.speakers[speaker])
            .zip(exc)
            .map(|((f, s), e)| (f + s) + e)
            .collect()
    }

    /// Pitch recovery from a mel built under this bank's conventions.
    ///
    /// For each frame, every (phoneme, speaker) baseline is subtracted and
    /// the residual is fitted either by zero (unvoiced) or by an excitation
    /// bump at its best bin. The lowest-error hypothesis wins; a voiced fit
    /// also needs its peak residual to reach half the bump amplitude.
    pub fn extract_f0(&self, mel: &MelSpectrogram) -> F0Track {
        let bumps: Vec<Vec<f64>> = (0..self.cfg.n_mel_bins).map(|b| self.bump(b)).collect();
        let hz = mel
            .frames()
            .map(|frame| {
                let mut best = (f64::INFINITY, None::<usize>);
                let mut residual = vec![0.0; frame.len()];
                for f in &self.formants {
                    for s in &self.speakers {
                        for (i, r) in residual.iter_mut().enumerate() {
                            *r = frame[i] - f[i] - s[i];
                        }
                        let unvoiced: f64 = residual.iter().map(|r| r * r).sum();
                        if unvoiced < best.0 {
                            best = (unvoiced, None);
                        }
                        for (b, bump) in bumps.iter().enumerate() {
                            if residual[b] < 0.5 * self.cfg.excitation_amplitude {
                                continue;
                            }
                            let err: f64 = residual
                                .iter()
                                .zip(bump)
                                .map(|(r, e)| (r - e).powi(2))
                                .sum();
                            if err < best.0 {
                                best = (err, Some(b));
                            }
                        }
                    }
                }
                best.1.map_or(0.0, |b| self.bin_to_hz(b))
            })
            .collect();
        F0Track::from_hz(hz)
    }
}

fn gaussian(x: f64, centre: f64, width: f64) -> f64 {
    (-(x - centre).powi(2) / (2.0 * width * width)).exp()
}

/// Per phoneme, the mean of voiced frame values in its span; 0 when the
/// whole span is unvoiced.
pub fn average_pitch_per_phoneme(frame_f0: &F0Track, durations: &[usize]) -> Result<Vec<f64>> {
    let total: usize = durations.iter().sum();
    if total != frame_f0.len() {
        return Err(Error::Contract(format!(
            "durations sum to {total} but the track has {} frames",
            frame_f0.len()
        )));
    }
    let mut out = Vec::with_capacity(durations.len());
    let mut start = 0;
    for &d in durations {
        let span = start..start + d;
        let (sum, count) = frame_f0.frame_hz()[span.clone()]
            .iter()
            .zip(&frame_f0.voiced()[span])
            .filter(|(_, &v)| v)
            .fold((0.0, 0usize), |(s, c), (&f, _)| (s + f, c + 1));
        out.push(if count == 0 { 0.0 } else { sum / count as f64 });
        start += d;
    }
    Ok(out)
}

/// Deterministic corpus drawn from `cfg`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<PhonemeUtterance>> {
    let bank = SourceFilterBank::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.voiced_range();
    let voiced_ids: Vec<usize> = (0..cfg.vocab_size)
        .filter(|&i| i != cfg.unvoiced_id)
        .collect();
    (0..cfg.n_utterances)
        .map(|_| {
            let n = rng.gen_range(cfg.min_phonemes..=cfg.max_phonemes);
            let speaker_id = rng.gen_range(0..cfg.n_speakers);
            let mut log_f = rng.gen_range(lo.ln()..=hi.ln());
            let step = cfg.pitch_step_semitones / 12.0 * std::f64::consts::LN_2;
            let mut phoneme_ids = Vec::with_capacity(n);
            let mut durations = Vec::with_capacity(n);
            let mut frame_hz = Vec::new();
            for _ in 0..n {
                let id = if rng.gen::<f64>() < cfg.unvoiced_prob {
                    cfg.unvoiced_id
                } else {
                    voiced_ids[rng.gen_range(0..voiced_ids.len())]
                };
                let d = rng.gen_range(cfg.min_duration..=cfg.max_duration);
                if step > 0.0 {
                    log_f = (log_f + rng.gen_range(-step..=step)).clamp(lo.ln(), hi.ln());
                }
                let f = if id == cfg.unvoiced_id {
                    0.0
                } else {
                    log_f.exp()
                };
                phoneme_ids.push(id);
                durations.push(d);
                frame_hz.extend(std::iter::repeat_n(f, d));
            }
            let track = F0Track::from_hz(frame_hz);
            let phoneme_pitch_hz = average_pitch_per_phoneme(&track, &durations)?;
            let frames: Vec<Vec<f64>> = track
                .frame_hz()
                .iter()
                .zip(
                    phoneme_ids
                        .iter()
                        .zip(&durations)
                        .flat_map(|(&id, &d)| std::iter::repeat_n(id, d)),
                )
                .map(|(&f, id)| bank.frame(id, speaker_id, f))
                .collect();
            Ok(PhonemeUtterance {
                phoneme_ids,
                durations_frames: durations,
                phoneme_pitch_hz,
                speaker_id,
                target_mel: MelSpectrogram::from_frames(&frames)?,
            })
        })
        .collect()
}

/// Seeded shuffle of utterance indices split into `(train, held_out)`; the
/// held-out part has `ceil(fraction · n)` entries.
pub fn split_indices(n: usize, held_out_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((held_out_fraction.clamp(0.0, 1.0) * n as f64).ceil() as usize).min(n);
    let held = idx.split_off(n - k);
    (idx, held)
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    config: CorpusConfig,
    count: usize,
}

pub fn corpus_to_bytes(cfg: &CorpusConfig, corpus: &[PhonemeUtterance]) -> Result<Vec<u8>> {
    let header = serde_json::to_string(&CorpusHeader {
        config: cfg.clone(),
        count: corpus.len(),
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    let mut w = Writer::new(CORPUS_MAGIC, CORPUS_VERSION, &header);
    w.u32(corpus.len() as u32);
    for u in corpus {
        w.u32(u.phoneme_ids.len() as u32);
        for &id in &u.phoneme_ids {
            w.u32(id as u32);
        }
        for &d in &u.durations_frames {
            w.u32(d as u32);
        }
        for &p in &u.phoneme_pitch_hz {
            w.f64(p);
        }
        w.u32(u.speaker_id as u32);
        w.u32(u.target_mel.n_frames() as u32);
        w.u32(u.target_mel.n_bins() as u32);
        for &v in u.target_mel.data() {
            w.f64(v);
        }
    }
    Ok(w.finish())
}

pub fn corpus_from_bytes(bytes: &[u8]) -> Result<(CorpusConfig, Vec<PhonemeUtterance>)> {
    let (mut r, header) = Reader::open(bytes, CORPUS_MAGIC, CORPUS_VERSION)?;
    let header: CorpusHeader =
        serde_json::from_str(&header).map_err(|e| Error::Load(format!("corpus header: {e}")))?;
    let count = r.u32()? as usize;
    if count != header.count {
        return Err(Error::Load(format!(
            "header promises {} utterances, body has {count}",
            header.count
        )));
    }
    let mut corpus = Vec::with_capacity(count);
    for i in 0..count {
        let ctx = |e: Error| Error::Load(format!("utterance record {i}: {e}"));
        let read = |r: &mut Reader<'_>| -> Result<PhonemeUtterance> {
            let n = r.u32()? as usize;
            let phoneme_ids = (0..n)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<_>>()?;
            let durations_frames = (0..n)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<_>>()?;
            let phoneme_pitch_hz = r.f64s(n)?;
            let speaker_id = r.u32()? as usize;
            let frames = r.u32()? as usize;
            let bins = r.u32()? as usize;
            let mel = MelSpectrogram::new(frames, bins, r.f64s(frames * bins)?)?;
            let u = PhonemeUtterance {
                phoneme_ids,
                durations_frames,
                phoneme_pitch_hz,
                speaker_id,
                target_mel: mel,
            };
            u.validate()?;
            Ok(u)
        };
        corpus.push(read(&mut r).map_err(ctx)?);
    }
    r.expect_end()?;
    Ok((header.config, corpus))
}

pub fn save_corpus(cfg: &CorpusConfig, corpus: &[PhonemeUtterance], path: &Path) -> Result<()> {
    std::fs::write(path, corpus_to_bytes(cfg, corpus)?)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<(CorpusConfig, Vec<PhonemeUtterance>)> {
    corpus_from_bytes(&std::fs::read(path)?)
}

/// Human-readable JSON export for inspection.
pub fn corpus_to_json(cfg: &CorpusConfig, corpus: &[PhonemeUtterance]) -> Result<String> {
    #[derive(Serialize)]
    struct Export<'a> {
        config: &'a CorpusConfig,
        utterances: &'a [PhonemeUtterance],
    }
    serde_json::to_string_pretty(&Export {
        config: cfg,
        utterances: corpus,
    })
    .map_err(|e| Error::Config(e.to_string()))
}
