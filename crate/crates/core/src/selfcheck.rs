//! Gradient-check suite over every differentiable operation and the full
//! model, plus the metric oracles. Backs the `selfcheck` command.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::control::shift_pitch;
use crate::error::Result;
use crate::gradcheck::{grad_check_many, Coords, GradCheckReport, DEFAULT_STEP};
use crate::metrics::{self, Dct, F0Track};
use crate::model::{Bound, FastPitchFormant, ForwardOptions, ModelConfig, SynthesisInput};
use crate::spectrogram::MelSpectrogram;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::{compute_loss, LossTarget, TrainConfig};

#[derive(Clone, Debug)]
pub struct SelfCheckOptions {
    /// Random seeds per gradient check.
    pub seeds: usize,
    pub tolerance: f64,
    /// Sampled coordinates per seed for component checks.
    pub model_coords: usize,
    /// Sampled coordinates per seed for the end-to-end loss check.
    pub end_to_end_coords: usize,
    /// Test hook: scales the matmul input gradient to prove the suite fails.
    pub matmul_grad_fault: Option<f64>,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            seeds: 100,
            tolerance: 1e-4,
            model_coords: 24,
            end_to_end_coords: 64,
            matmul_grad_fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: String,
    /// Max relative error for gradient checks, absolute error for oracles.
    pub error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfCheckReport {
    pub lines: Vec<CheckLine>,
    pub elapsed_secs: f64,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn max_gradient_error(&self) -> f64 {
        self.lines
            .iter()
            .filter(|l| l.name.starts_with("grad "))
            .map(|l| l.error)
            .fold(0.0, f64::max)
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("nonzero shape")
}

/// `Σ w ⊙ out` with fixed random `w`, so every output element contributes
/// with a distinct weight.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random_tensor(&mut rng, tape.shape(out), 1.0);
    let w = tape.constant(w);
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Scalar = Box<dyn Fn(&mut Tape, &[Var], u64) -> Result<Var> + Sync>;

struct OpCheck {
    name: &'static str,
    inputs: Case,
    f: Scalar,
}

fn op(name: &'static str, inputs: Case, f: Scalar) -> OpCheck {
    OpCheck { name, inputs, f }
}

fn shapes(list: &'static [&'static [usize]]) -> Case {
    Box::new(move |rng| list.iter().map(|s| random_tensor(rng, s, 1.0)).collect())
}

fn op_checks() -> Vec<OpCheck> {
    vec![
        op(
            "add",
            shapes(&[&[3, 4], &[3, 4]]),
            Box::new(|t, v, s| {
                let y = t.add(v[0], v[1])?;
                project(t, y, s)
            }),
        ),
        op(
            "sub",
            shapes(&[&[3, 4], &[3, 4]]),
            Box::new(|t, v, s| {
                let y = t.sub(v[0], v[1])?;
                project(t, y, s)
            }),
        ),
        op(
            "mul",
            shapes(&[&[3, 4], &[3, 4]]),
            Box::new(|t, v, s| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, s)
            }),
        ),
        op(
            "scale",
            shapes(&[&[3, 4]]),
            Box::new(|t, v, s| {
                let y = t.scale(v[0], -1.7)?;
                project(t, y, s)
            }),
        ),
        op(
            "add_row",
            shapes(&[&[3, 4], &[1, 4]]),
            Box::new(|t, v, s| {
                let y = t.add_row(v[0], v[1])?;
                project(t, y, s)
            }),
        ),
        op(
            "matmul",
            shapes(&[&[3, 5], &[5, 2]]),
            Box::new(|t, v, s| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, s)
            }),
        ),
        op(
            "transpose",
            shapes(&[&[3, 5]]),
            Box::new(|t, v, s| {
                let y = t.transpose(v[0])?;
                project(t, y, s)
            }),
        ),
        op(
            "relu",
            shapes(&[&[4, 4]]),
            Box::new(|t, v, s| {
                let y = t.relu(v[0])?;
                project(t, y, s)
            }),
        ),
        op(
            "softmax(axis 1)",
            shapes(&[&[3, 5]]),
            Box::new(|t, v, s| {
                let y = t.softmax(v[0], 1)?;
                project(t, y, s)
            }),
        ),
        op(
            "softmax(axis 0)",
            shapes(&[&[3, 5]]),
            Box::new(|t, v, s| {
                let y = t.softmax(v[0], 0)?;
                project(t, y, s)
            }),
        ),
        op(
            "layer_norm",
            Box::new(|rng| {
                vec![
                    random_tensor(rng, &[3, 6], 2.0),
                    random_tensor(rng, &[6], 1.0),
                    random_tensor(rng, &[6], 1.0),
                ]
            }),
            Box::new(|t, v, s| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, s)
            }),
        ),
        op(
            "conv1d",
            shapes(&[&[6, 3], &[3, 3, 2], &[2]]),
            Box::new(|t, v, s| {
                let y = t.conv1d(v[0], v[1], v[2])?;
                project(t, y, s)
            }),
        ),
        op(
            "conv1d(k=5)",
            shapes(&[&[4, 2], &[5, 2, 3], &[3]]),
            Box::new(|t, v, s| {
                let y = t.conv1d(v[0], v[1], v[2])?;
                project(t, y, s)
            }),
        ),
        op(
            "gather_rows",
            shapes(&[&[4, 3]]),
            Box::new(|t, v, s| {
                let y = t.gather_rows(v[0], &[2, 0, 2, 3, 2])?;
                project(t, y, s)
            }),
        ),
        op(
            "slice_cols",
            shapes(&[&[3, 6]]),
            Box::new(|t, v, s| {
                let y = t.slice_cols(v[0], 2, 3)?;
                project(t, y, s)
            }),
        ),
        op(
            "concat_cols",
            shapes(&[&[3, 2], &[3, 4]]),
            Box::new(|t, v, s| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                project(t, y, s)
            }),
        ),
        op("sum", shapes(&[&[3, 4]]), Box::new(|t, v, _| t.sum(v[0]))),
        op(
            "linear",
            shapes(&[&[3, 4], &[4, 2], &[2]]),
            Box::new(|t, v, s| {
                let y = t.linear(v[0], v[1], v[2])?;
                project(t, y, s)
            }),
        ),
        op(
            "sum_squared_error",
            shapes(&[&[3, 4], &[3, 4]]),
            Box::new(|t, v, _| t.sum_squared_error(v[0], v[1])),
        ),
    ]
}

/// Random small utterance for the tiny model.
fn tiny_utterance(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    n: usize,
) -> (Vec<usize>, Vec<usize>, Vec<f64>, usize) {
    let ids = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let durs = (0..n).map(|_| rng.gen_range(1..=3)).collect();
    let pitch = (0..n)
        .map(|_| {
            if rng.gen_bool(0.2) {
                0.0
            } else {
                rng.gen_range(90.0..300.0)
            }
        })
        .collect();
    let spk = rng.gen_range(0..cfg.n_speakers);
    (ids, durs, pitch, spk)
}

fn tiny_model(seed: u64) -> Result<FastPitchFormant> {
    let cfg = ModelConfig {
        init_seed: seed,
        ..ModelConfig::tiny()
    };
    let mut model = FastPitchFormant::new(cfg)?;
    model.fit_pitch_stats([(0, &[120.0, 180.0, 240.0][..]), (1, &[100.0, 150.0][..])]);
    Ok(model)
}

fn bound_from(vars: &[Var]) -> Bound {
    Bound::from_vars(vars.to_vec())
}

/// Finite-difference step for the end-to-end loss. At 1e-5 the roundoff in
/// a loss of order 1 (about 1e-11 per difference) exceeds the 1e-4 budget for
/// weights whose gradient is below 1e-7; at 3e-4 truncation error takes over.
pub const END_TO_END_STEP: f64 = 1e-4;

type ModelScalar =
    fn(&FastPitchFormant, &mut Tape, &[Var], &[Var], &mut ChaCha8Rng, u64) -> Result<Var>;

/// Each closure gets the model (for structure), the tape, data inputs and
/// parameter handles.
fn model_checks() -> Vec<(&'static str, Vec<&'static [usize]>, ModelScalar)> {
    fn mhsa(
        m: &FastPitchFormant,
        t: &mut Tape,
        x: &[Var],
        p: &[Var],
        _: &mut ChaCha8Rng,
        s: u64,
    ) -> Result<Var> {
        let b = bound_from(p);
        let y = m.net(&b).multi_head_self_attention(
            t,
            x[0],
            &m.weights.excitation[0].attn,
            Some(x[1]),
        )?;
        project(t, y, s)
    }
    fn block(
        m: &FastPitchFormant,
        t: &mut Tape,
        x: &[Var],
        p: &[Var],
        _: &mut ChaCha8Rng,
        s: u64,
    ) -> Result<Var> {
        let b = bound_from(p);
        let y = m.net(&b).fft_block(t, x[0], &m.weights.encoder[0], None)?;
        project(t, y, s)
    }
    fn encoder(
        m: &FastPitchFormant,
        t: &mut Tape,
        _: &[Var],
        p: &[Var],
        r: &mut ChaCha8Rng,
        s: u64,
    ) -> Result<Var> {
        let b = bound_from(p);
        let ids: Vec<usize> = (0..3)
            .map(|_| r.gen_range(0..m.config.vocab_size))
            .collect();
        let y = m.encode_text(t, &b, &ids)?;
        project(t, y, s)
    }
    fn predictors(
        m: &FastPitchFormant,
        t: &mut Tape,
        x: &[Var],
        p: &[Var],
        _: &mut ChaCha8Rng,
        s: u64,
    ) -> Result<Var> {
        let b = bound_from(p);
        let (d, q) = m.predict_temporal(t, &b, x[0])?;
        let y = t.concat_cols(&[d, q])?;
        project(t, y, s)
    }
    fn pitch_embedding(
        m: &FastPitchFormant,
        t: &mut Tape,
        _: &[Var],
        p: &[Var],
        r: &mut ChaCha8Rng,
        s: u64,
    ) -> Result<Var> {
        let b = bound_from(p);
        let z: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
        let y = m.pitch_to_embedding(t, &b, &z)?;
        project(t, y, s)
    }
    fn generators(
        m: &FastPitchFormant,
        t: &mut Tape,
        x: &[Var],
        p: &[Var],
        _: &mut ChaCha8Rng,
        s: u64,
    ) -> Result<Var> {
        let b = bound_from(p);
        let (f, e) = m.run_generators(t, &b, x[0], x[1])?;
        let y = t.concat_cols(&[f, e])?;
        project(t, y, s)
    }
    fn decoder(
        m: &FastPitchFormant,
        t: &mut Tape,
        x: &[Var],
        p: &[Var],
        _: &mut ChaCha8Rng,
        s: u64,
    ) -> Result<Var> {
        let b = bound_from(p);
        let (m1, m2, m3) = m.spectrogram_decoder(t, &b, x[0], x[1])?;
        let y = t.concat_cols(&[m1, m2, m3])?;
        project(t, y, s)
    }
    fn end_to_end(
        m: &FastPitchFormant,
        t: &mut Tape,
        _: &[Var],
        p: &[Var],
        r: &mut ChaCha8Rng,
        _: u64,
    ) -> Result<Var> {
        let b = bound_from(p);
        let (ids, durs, pitch, spk) = tiny_utterance(r, &m.config, 3);
        let input = SynthesisInput {
            phoneme_ids: &ids,
            speaker_id: spk,
            durations: Some(&durs),
            pitch_hz: Some(&pitch),
        };
        let out = m.forward(t, &b, &input, &ForwardOptions::teacher_forced())?;
        let frames: usize = durs.iter().sum();
        let mel =
            MelSpectrogram::from_tensor(&random_tensor(r, &[frames, m.config.n_mel_bins], 1.0))?;
        let stats = m.pitch_stats(spk)?;
        let target = LossTarget {
            mel: &mel,
            log_durations: durs.iter().map(|&d| (d as f64 + 1.0).ln()).collect(),
            pitch: shift_pitch(&pitch, 0.0)?
                .iter()
                .map(|&f| stats.standardize(f))
                .collect(),
        };
        Ok(compute_loss(t, &out, &target, &TrainConfig::default())?.0)
    }
    vec![
        (
            "multi_head_self_attention(extended query)",
            vec![&[5, 8], &[5, 8]],
            mhsa,
        ),
        ("fft_block", vec![&[6, 8]], block),
        ("encode_text", vec![], encoder),
        ("predict_temporal", vec![&[4, 8]], predictors),
        ("pitch_to_embedding", vec![], pitch_embedding),
        ("run_generators", vec![&[5, 8], &[5, 8]], generators),
        ("spectrogram_decoder", vec![&[5, 8], &[5, 8]], decoder),
        ("end-to-end loss (N=3, D=8, M=4)", vec![], end_to_end),
    ]
}

fn grad_line(name: &str, report: &GradCheckReport, tol: f64) -> CheckLine {
    CheckLine {
        name: format!("grad {name}"),
        error: report.max_rel_error,
        tolerance: tol,
        checked: report.checked,
        skipped_kinks: report.skipped_kinks,
        passed: report.max_rel_error < tol && report.checked > 0,
    }
}

/// Gradient checks only.
pub fn gradient_suite(opts: &SelfCheckOptions) -> Result<Vec<CheckLine>> {
    let fault = opts.matmul_grad_fault;
    let mut lines = Vec::new();
    for c in op_checks() {
        let mut total = GradCheckReport::default();
        for seed in 0..opts.seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (c.inputs)(&mut rng);
            let r = grad_check_many(
                |t, v| {
                    t.inject_matmul_grad_fault(fault);
                    (c.f)(t, v, seed)
                },
                &inputs,
                DEFAULT_STEP,
                Coords::All,
            )?;
            total.merge(&r);
        }
        lines.push(grad_line(c.name, &total, opts.tolerance));
    }
    for (name, data_shapes, f) in model_checks() {
        let whole = data_shapes.is_empty() && name.starts_with("end-to-end");
        let (step, count) = if whole {
            (END_TO_END_STEP, opts.end_to_end_coords)
        } else {
            (DEFAULT_STEP, opts.model_coords)
        };
        let mut total = GradCheckReport::default();
        for seed in 0..opts.seeds as u64 {
            let model = tiny_model(seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
            let mut inputs: Vec<Tensor> = data_shapes
                .iter()
                .map(|s| random_tensor(&mut rng, s, 1.0))
                .collect();
            let n_data = inputs.len();
            inputs.extend(model.weights.store.tensors().iter().cloned());
            let r = grad_check_many(
                |t, v| {
                    t.inject_matmul_grad_fault(fault);
                    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
                    f(&model, t, &v[..n_data], &v[n_data..], &mut r, seed)
                },
                &inputs,
                step,
                Coords::Sample { count, seed },
            )?;
            total.merge(&r);
        }
        lines.push(grad_line(name, &total, opts.tolerance));
    }
    Ok(lines)
}

fn oracle_line(name: &str, error: f64, tolerance: f64) -> CheckLine {
    CheckLine {
        name: format!("oracle {name}"),
        error,
        tolerance,
        checked: 1,
        skipped_kinks: 0,
        passed: error <= tolerance,
    }
}

/// Metric oracles with hand-derived answers.
pub fn metric_oracles() -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();

    // T=10: frames 0 and 1 flip voicing, frame 5 is off by 30%.
    let reference = F0Track::from_hz(vec![
        100.0, 0.0, 120.0, 120.0, 150.0, 200.0, 0.0, 180.0, 110.0, 90.0,
    ]);
    let test = F0Track::from_hz(vec![
        0.0, 130.0, 125.0, 118.0, 150.0, 260.0, 0.0, 190.0, 110.0, 95.0,
    ]);
    lines.push(oracle_line(
        "ffe hand case = 30%",
        (metrics::ffe(&reference, &test)? - 30.0).abs(),
        0.0,
    ));
    let voiced = F0Track::from_hz(vec![100.0; 8]);
    let unvoiced = F0Track::from_hz(vec![0.0; 8]);
    lines.push(oracle_line(
        "ffe all voicing errors = 100%",
        (metrics::ffe(&voiced, &unvoiced)? - 100.0).abs(),
        0.0,
    ));
    lines.push(oracle_line(
        "ffe identical = 0%",
        metrics::ffe(&reference, &reference)?,
        0.0,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mel = MelSpectrogram::from_tensor(&random_tensor(&mut rng, &[7, 16], 3.0))?;
    lines.push(oracle_line(
        "mcd(a, a) = 0",
        metrics::mcd(&mel, &mel, metrics::DEFAULT_MCD_ORDER)?,
        0.0,
    ));

    let dct = Dct::new(16);
    let mut c = vec![0.0; 16];
    c[1] = 1.0;
    let a = MelSpectrogram::new(1, 16, dct.inverse(&c))?;
    let b = MelSpectrogram::new(1, 16, vec![0.0; 16])?;
    let expected = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
    lines.push(oracle_line(
        "mcd single coefficient = (10/ln10)·√2",
        (metrics::mcd(&a, &b, metrics::DEFAULT_MCD_ORDER)? - expected).abs(),
        1e-9,
    ));

    let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let back = dct.inverse(&dct.forward(&x));
    let err = x
        .iter()
        .zip(&back)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    lines.push(oracle_line("dct round trip at full order", err, 1e-12));

    let lambdas = [-8.0, -6.0, -4.0, 4.0, 6.0, 8.0];
    let expected = [0.63, 0.71, 0.79, 1.26, 1.41, 1.59];
    let worst = lambdas
        .iter()
        .zip(expected)
        .map(|(&l, e)| (crate::control::semitone_ratio(l) - e).abs())
        .fold(0.0, f64::max);
    lines.push(oracle_line("semitone ratios", worst, 0.005));
    Ok(lines)
}

pub fn run(opts: &SelfCheckOptions) -> Result<SelfCheckReport> {
    let start = Instant::now();
    let mut lines = gradient_suite(opts)?;
    lines.extend(metric_oracles()?);
    Ok(SelfCheckReport {
        lines,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_oracles_pass() {
        for l in metric_oracles().unwrap() {
            assert!(l.passed, "{l:?}");
        }
    }

    #[test]
    fn reduced_suite_passes_and_fault_fails() {
        let opts = SelfCheckOptions {
            seeds: 2,
            model_coords: 8,
            end_to_end_coords: 8,
            ..SelfCheckOptions::default()
        };
        let lines = gradient_suite(&opts).unwrap();
        for l in &lines {
            assert!(l.passed, "{l:?}");
        }
        let faulty = gradient_suite(&SelfCheckOptions {
            matmul_grad_fault: Some(1.01),
            ..opts
        })
        .unwrap();
        let matmul = faulty.iter().find(|l| l.name == "grad matmul").unwrap();
        assert!(!matmul.passed);
    }
}
