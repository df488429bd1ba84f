//! Semitone pitch shifting and the pitch-shift sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PhonemeUtterance, SourceFilterBank};
use crate::error::{Error, Result};
use crate::metrics::{self, F0Track};
use crate::model::{FastPitchFormant, ForwardOptions, SynthesisInput};
use crate::spectrogram::MelSpectrogram;

/// Shift amounts (semitones) evaluated by default.
pub const DEFAULT_LAMBDAS: [f64; 7] = [-8.0, -6.0, -4.0, 0.0, 4.0, 6.0, 8.0];

/// Uniform utterance-level pitch shift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub lambda: f64,
}

impl ShiftSpec {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::Input(format!("pitch shift {lambda} is not finite")));
        }
        Ok(Self { lambda })
    }

    pub fn ratio(&self) -> f64 {
        semitone_ratio(self.lambda)
    }
}

/// `2^(λ/12)`.
pub fn semitone_ratio(lambda: f64) -> f64 {
    (lambda / 12.0).exp2()
}

/// Multiplies voiced values by `2^(λ/12)`; zeros (unvoiced) stay zero.
pub fn shift_pitch(pitch_hz: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let spec = ShiftSpec::new(lambda)?;
    if let Some((i, f)) = pitch_hz.iter().enumerate().find(|(_, f)| !(**f >= 0.0)) {
        return Err(Error::Input(format!("pitch[{i}] = {f} is negative or NaN")));
    }
    if spec.lambda == 0.0 {
        return Ok(pitch_hz.to_vec());
    }
    let r = spec.ratio();
    Ok(pitch_hz.iter().map(|&f| f * r).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthesisOptions {
    pub lambda: f64,
    pub use_gt_duration: bool,
    pub use_gt_pitch: bool,
}

impl SynthesisOptions {
    pub fn ground_truth(lambda: f64) -> Self {
        Self {
            lambda,
            use_gt_duration: true,
            use_gt_pitch: true,
        }
    }
}

/// Runs the model with the shift applied to the chosen pitch source and
/// returns the final-head mel.
pub fn synthesize(
    model: &FastPitchFormant,
    input: &SynthesisInput<'_>,
    opts: &SynthesisOptions,
) -> Result<MelSpectrogram> {
    let fo = ForwardOptions {
        use_gt_duration: opts.use_gt_duration,
        use_gt_pitch: opts.use_gt_pitch,
        pitch_shift_semitones: opts.lambda,
        dropout_seed: None,
    };
    Ok(model.infer(input, &fo)?.mel3)
}

/// One synthesized utterance at one shift amount.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub utterance: usize,
    pub lambda: f64,
    /// MCD against the same utterance synthesized with λ = 0.
    pub mcd_vs_unshifted: f64,
    /// FFE between the shifted input pitch and pitch extracted from the
    /// output, when an extractor is available.
    pub ffe: Option<f64>,
    /// Mean frame L2 change of the formant path decoded alone.
    pub formant_drift: f64,
    /// Mean frame L2 change of the excitation path decoded alone.
    pub excitation_drift: f64,
    #[serde(skip)]
    pub mel: Option<MelSpectrogram>,
}

/// Per-λ means over the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambda: f64,
    pub ratio: f64,
    pub mean_mcd: f64,
    pub mean_ffe: Option<f64>,
    pub mean_formant_drift: f64,
    pub mean_excitation_drift: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    /// Ordered by utterance, then by position in the λ list.
    pub entries: Vec<SweepEntry>,
    pub summary: Vec<SweepSummary>,
}

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions<'a> {
    pub mcd_order: usize,
    pub keep_mels: bool,
    /// Enables FFE via the synthetic pitch extractor.
    pub extractor: Option<&'a SourceFilterBank>,
}

impl Default for SweepOptions<'_> {
    fn default() -> Self {
        Self {
            mcd_order: metrics::DEFAULT_MCD_ORDER,
            keep_mels: false,
            extractor: None,
        }
    }
}

struct Probe {
    mel: MelSpectrogram,
    formant_mel: MelSpectrogram,
    excitation_mel: MelSpectrogram,
}

fn probe(model: &FastPitchFormant, utt: &PhonemeUtterance, lambda: f64) -> Result<Probe> {
    let v = model.infer(
        &utt.as_input(),
        &ForwardOptions::teacher_forced().with_shift(lambda),
    )?;
    Ok(Probe {
        formant_mel: model.decode_repr(&v.formant_repr)?,
        excitation_mel: model.decode_repr(&v.excitation_repr)?,
        mel: v.mel3,
    })
}

/// Synthesizes every utterance at every λ with ground-truth duration and
/// pitch, and scores each against its unshifted synthesis.
pub fn sweep(
    model: &FastPitchFormant,
    dataset: &[PhonemeUtterance],
    lambdas: &[f64],
    opts: &SweepOptions<'_>,
) -> Result<SweepResult> {
    if lambdas.is_empty() {
        return Err(Error::Input("empty λ list".into()));
    }
    for &l in lambdas {
        ShiftSpec::new(l)?;
    }
    let baselines: Vec<Probe> = dataset
        .par_iter()
        .map(|u| probe(model, u, 0.0))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..dataset.len())
        .flat_map(|u| (0..lambdas.len()).map(move |l| (u, l)))
        .collect();
    let entries: Vec<SweepEntry> = jobs
        .par_iter()
        .map(|&(u, l)| {
            let utt = &dataset[u];
            let lambda = lambdas[l];
            let base = &baselines[u];
            let p = probe(model, utt, lambda)?;
            let ffe = match opts.extractor {
                Some(bank) => {
                    let shifted = shift_pitch(&utt.phoneme_pitch_hz, lambda)?;
                    let reference = F0Track::from_hz(utt.expand_to_frames(&shifted));
                    let extracted = bank.extract_f0(&p.mel);
                    Some(metrics::ffe(&reference, &extracted)?)
                }
                None => None,
            };
            Ok(SweepEntry {
                utterance: u,
                lambda,
                mcd_vs_unshifted: metrics::mcd(&p.mel, &base.mel, opts.mcd_order)?,
                ffe,
                formant_drift: p.formant_mel.mean_frame_l2(&base.formant_mel)?,
                excitation_drift: p.excitation_mel.mean_frame_l2(&base.excitation_mel)?,
                mel: opts.keep_mels.then_some(p.mel),
            })
        })
        .collect::<Result<_>>()?;

    let summary = lambdas
        .iter()
        .map(|&lambda| {
            let rows: Vec<&SweepEntry> = entries.iter().filter(|e| e.lambda == lambda).collect();
            let n = rows.len().max(1) as f64;
            let mean = |f: &dyn Fn(&SweepEntry) -> f64| rows.iter().map(|e| f(e)).sum::<f64>() / n;
            SweepSummary {
                lambda,
                ratio: semitone_ratio(lambda),
                mean_mcd: mean(&|e| e.mcd_vs_unshifted),
                mean_ffe: opts.extractor.map(|_| mean(&|e| e.ffe.unwrap_or(0.0))),
                mean_formant_drift: mean(&|e| e.formant_drift),
                mean_excitation_drift: mean(&|e| e.excitation_drift),
            }
        })
        .collect();
    Ok(SweepResult { entries, summary })
}
