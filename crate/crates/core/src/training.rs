//! Learning objective, Adam, the step-halving schedule and the training loop.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PhonemeUtterance;
use crate::error::{Error, Result};
use crate::model::{FastPitchFormant, ForwardOptions, ForwardOutput, ParamStore, PitchStats};
use crate::spectrogram::MelSpectrogram;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the pitch loss.
    pub alpha: f64,
    /// Weight of the duration loss.
    pub beta: f64,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub halving_interval: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            batch_size: 4,
            initial_lr: 0.005,
            halving_interval: 500,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-6,
            max_iterations: 2000,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, why: &str| Err(Error::Config(format!("{f}: {why}")));
        if !(self.alpha > 0.0) {
            return bad("alpha", "must be positive");
        }
        if !(self.beta > 0.0) {
            return bad("beta", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.initial_lr > 0.0) {
            return bad("initial_lr", "must be positive");
        }
        if self.halving_interval == 0 {
            return bad("halving_interval", "must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Unnormalized squared-error sums for the three mel heads.
    pub spec_losses: [f64; 3],
    pub pitch_loss: f64,
    pub duration_loss: f64,
    pub total: f64,
    /// `T · M` of the utterance; divides the spectral sum.
    pub normalizer: f64,
}

impl LossBreakdown {
    /// The total rebuilt from its parts.
    pub fn recombine(&self, alpha: f64, beta: f64) -> f64 {
        self.spec_losses.iter().sum::<f64>() / self.normalizer
            + alpha * self.pitch_loss
            + beta * self.duration_loss
    }

    /// Normalized spectral term alone.
    pub fn spectral(&self) -> f64 {
        self.spec_losses.iter().sum::<f64>() / self.normalizer
    }

    fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        for (a, b) in self.spec_losses.iter_mut().zip(other.spec_losses) {
            *a += w * b;
        }
        self.pitch_loss += w * other.pitch_loss;
        self.duration_loss += w * other.duration_loss;
        self.total += w * other.total;
        self.normalizer += w * other.normalizer;
    }
}

/// Supervision targets for one utterance.
#[derive(Clone, Debug)]
pub struct LossTarget<'a> {
    pub mel: &'a MelSpectrogram,
    /// `log(frames + 1)` per phoneme.
    pub log_durations: Vec<f64>,
    /// Speaker-standardized pitch per phoneme.
    pub pitch: Vec<f64>,
}

impl<'a> LossTarget<'a> {
    pub fn from_utterance(u: &'a PhonemeUtterance, stats: PitchStats) -> Self {
        Self {
            mel: &u.target_mel,
            log_durations: u
                .durations_frames
                .iter()
                .map(|&d| (d as f64 + 1.0).ln())
                .collect(),
            pitch: u
                .phoneme_pitch_hz
                .iter()
                .map(|&f| stats.standardize(f))
                .collect(),
        }
    }
}

/// Records the objective on the tape and returns its handle with the parts:
/// `(1/TM)·Σᵢ‖mel − melᵢ‖² + α·mean(pitch err²) + β·mean(log-duration err²)`.
pub fn compute_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    target: &LossTarget<'_>,
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let (t, m) = target.mel.shape();
    for mel in [out.mel1, out.mel2, out.mel3] {
        if tape.shape(mel) != [t, m] {
            return Err(Error::Contract(format!(
                "predicted mel {:?} vs target [{t}, {m}]",
                tape.shape(mel)
            )));
        }
    }
    let n = tape.shape(out.log_durations)[0];
    if target.log_durations.len() != n || target.pitch.len() != n {
        return Err(Error::Contract(format!(
            "{n} predicted phonemes vs {} duration and {} pitch targets",
            target.log_durations.len(),
            target.pitch.len()
        )));
    }
    let mel_target = tape.constant(target.mel.to_tensor());
    let mut spec = [0.0; 3];
    let mut spec_vars = Vec::with_capacity(3);
    for (i, mel) in [out.mel1, out.mel2, out.mel3].into_iter().enumerate() {
        let l = tape.sum_squared_error(mel, mel_target)?;
        spec[i] = tape.value(l).data()[0];
        spec_vars.push(l);
    }
    let spec_sum = tape.add(spec_vars[0], spec_vars[1])?;
    let spec_sum = tape.add(spec_sum, spec_vars[2])?;
    let normalizer = (t * m) as f64;
    let spec_term = tape.scale(spec_sum, 1.0 / normalizer)?;

    let col = |v: &[f64]| crate::tensor::Tensor::new(vec![v.len(), 1], v.to_vec());
    let p_target = tape.constant(col(&target.pitch)?);
    let d_target = tape.constant(col(&target.log_durations)?);
    let lp = tape.sum_squared_error(out.pitch, p_target)?;
    let lp = tape.scale(lp, 1.0 / n as f64)?;
    let ld = tape.sum_squared_error(out.log_durations, d_target)?;
    let ld = tape.scale(ld, 1.0 / n as f64)?;
    let wp = tape.scale(lp, cfg.alpha)?;
    let wd = tape.scale(ld, cfg.beta)?;
    let total = tape.add(spec_term, wp)?;
    let total = tape.add(total, wd)?;

    let breakdown = LossBreakdown {
        spec_losses: spec,
        pitch_loss: tape.value(lp).data()[0],
        duration_loss: tape.value(ld).data()[0],
        total: tape.value(total).data()[0],
        normalizer,
    };
    Ok((total, breakdown))
}

/// Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradient buffers for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for (name, g) in store.names().iter().zip(grads) {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} in parameter `{name}` at element {i}",
                g[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((param, g), m), v) in store
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for (((w, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// `initial_lr · 0.5^⌊iteration / halving_interval⌋`.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (iteration / cfg.halving_interval.max(1)) as i32;
    cfg.initial_lr * 0.5f64.powi(halvings)
}

/// Utterance indices for a given iteration. Each epoch is a fresh seeded
/// permutation, so any iteration's batch can be recomputed on resume.
pub fn batch_indices(iteration: usize, n: usize, cfg: &TrainConfig) -> Vec<usize> {
    let bs = cfg.batch_size;
    let start = iteration * bs;
    let mut out = Vec::with_capacity(bs);
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for pos in start..start + bs {
        let e = pos / n;
        if e != epoch {
            epoch = e;
            perm = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(e as u64),
            );
            perm.shuffle(&mut rng);
        }
        out.push(perm[pos % n]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub lr: f64,
    /// Batch mean.
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<IterationRecord>,
}

impl TrainingLog {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss.total).collect()
    }
}

/// Gradients and loss for one teacher-forced utterance.
pub fn utterance_gradients(
    model: &FastPitchFormant,
    utt: &PhonemeUtterance,
    cfg: &TrainConfig,
    dropout_seed: Option<u64>,
) -> Result<(Vec<Vec<f64>>, LossBreakdown)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let opts = ForwardOptions {
        dropout_seed,
        ..ForwardOptions::teacher_forced()
    };
    let out = model.forward(&mut tape, &params, &utt.as_input(), &opts)?;
    let target = LossTarget::from_utterance(utt, model.pitch_stats(utt.speaker_id)?);
    let (loss, breakdown) = compute_loss(&mut tape, &out, &target, cfg)?;
    tape.backward(loss)?;
    let grads = params
        .vars()
        .iter()
        .zip(model.weights.store.tensors())
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();
    Ok((grads, breakdown))
}

/// Trains from `state.step` up to `cfg.max_iterations`. A fresh state
/// (step 0) first fits the per-speaker pitch statistics on `dataset`.
pub fn train(
    model: &mut FastPitchFormant,
    dataset: &[PhonemeUtterance],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<TrainingLog> {
    train_with(model, dataset, cfg, state, |_| {})
}

/// [`train`] with a callback after every iteration.
pub fn train_with<F>(
    model: &mut FastPitchFormant,
    dataset: &[PhonemeUtterance],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    mut on_iteration: F,
) -> Result<TrainingLog>
where
    F: FnMut(&IterationRecord),
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if state.step == 0 {
        model.fit_pitch_stats(
            dataset
                .iter()
                .map(|u| (u.speaker_id, u.phoneme_pitch_hz.as_slice())),
        );
    }
    let mut log = TrainingLog::default();
    let use_dropout = model.config.dropout > 0.0;
    for it in state.step as usize..cfg.max_iterations {
        let lr = lr_at(it, cfg);
        let batch = batch_indices(it, dataset.len(), cfg);
        let w = 1.0 / batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = model
            .weights
            .store
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        let mut mean = LossBreakdown::default();
        for (slot, &u) in batch.iter().enumerate() {
            let seed = use_dropout.then_some(cfg.seed ^ ((it as u64) << 16) ^ slot as u64);
            let (g, b) = utterance_gradients(model, &dataset[u], cfg, seed)?;
            if !b.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at iteration {} (utterance {u})",
                    it + 1
                )));
            }
            for (acc, g) in grads.iter_mut().zip(&g) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += w * v;
                }
            }
            mean.accumulate(&b, w);
        }
        adam_step(&mut model.weights.store, &grads, state, lr, cfg)
            .map_err(|e| Error::Numeric(format!("iteration {}: {e}", it + 1)))?;
        let rec = IterationRecord {
            iteration: it + 1,
            lr,
            loss: mean,
        };
        debug!("iter {} lr {:.5} loss {:.6}", rec.iteration, lr, mean.total);
        on_iteration(&rec);
        log.records.push(rec);
    }
    Ok(log)
}

/// Teacher-forced mean loss over `dataset`, without gradients.
pub fn evaluate(
    model: &FastPitchFormant,
    dataset: &[PhonemeUtterance],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    if dataset.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let w = 1.0 / dataset.len() as f64;
    let mut mean = LossBreakdown::default();
    for u in dataset {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let out = model.forward(
            &mut tape,
            &params,
            &u.as_input(),
            &ForwardOptions::teacher_forced(),
        )?;
        let target = LossTarget::from_utterance(u, model.pitch_stats(u.speaker_id)?);
        let (_, b) = compute_loss(&mut tape, &out, &target, cfg)?;
        mean.accumulate(&b, w);
    }
    Ok(mean)
}
