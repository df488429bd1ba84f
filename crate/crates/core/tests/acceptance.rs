//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail.
//!
//! Run alone with `cargo test -p fpf-core --test acceptance`.

use std::time::Instant;

use fpf_core::checkpoint;
use fpf_core::control::{
    semitone_ratio, shift_pitch, sweep, synthesize, SweepOptions, SweepResult, SynthesisOptions,
};
use fpf_core::data::{
    corpus_from_bytes, corpus_to_bytes, generate_corpus, CorpusConfig, PhonemeUtterance,
    SourceFilterBank,
};
use fpf_core::metrics::{ffe, F0Track};
use fpf_core::model::{ForwardOptions, SynthesisInput};
use fpf_core::selfcheck::{self, SelfCheckOptions};
use fpf_core::tape::Tape;
use fpf_core::tensor::Tensor;
use fpf_core::training::{train, OptimizerState, TrainConfig, TrainingLog};
use fpf_core::{FastPitchFormant, ModelConfig, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Check<'a> = Box<dyn Fn() -> Result<Outcome> + 'a>;

struct Trained {
    model: FastPitchFormant,
    state: OptimizerState,
    log: TrainingLog,
    secs: f64,
}

fn train_desk(corpus: &[PhonemeUtterance], extended_query: bool) -> Result<Trained> {
    let mut model = FastPitchFormant::new(ModelConfig {
        extended_query,
        ..ModelConfig::default()
    })?;
    let mut state = OptimizerState::new(&model.weights.store);
    let start = Instant::now();
    let log = train(&mut model, corpus, &TrainConfig::default(), &mut state)?;
    Ok(Trained {
        model,
        state,
        log,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn gradient_integrity() -> Result<Outcome> {
    let opts = SelfCheckOptions::default();
    let start = Instant::now();
    let lines = selfcheck::gradient_suite(&opts)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = lines.iter().map(|l| l.error).fold(0.0, f64::max);
    let failed: Vec<&str> = lines
        .iter()
        .filter(|l| !l.passed)
        .map(|l| l.name.as_str())
        .collect();
    let skipped: usize = lines.iter().map(|l| l.skipped_kinks).sum();
    Ok(outcome(
        failed.is_empty() && secs < 120.0 && opts.seeds >= 100,
        format!(
            "{} checks x {} seeds, worst rel err {worst:.2e} (tol {:.0e}), {skipped} kink coords skipped, {secs:.1}s{}",
            lines.len(),
            opts.seeds,
            opts.tolerance,
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(", ")) }
        ),
    ))
}

fn semitone_exactness() -> Result<Outcome> {
    let table = [
        (-8.0, 0.63),
        (-6.0, 0.71),
        (-4.0, 0.79),
        (4.0, 1.26),
        (6.0, 1.41),
        (8.0, 1.59),
    ];
    let worst_ratio = table
        .iter()
        .map(|&(l, r)| (semitone_ratio(l) - r).abs())
        .fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_octave = 0.0f64;
    let mut worst_compose = 0.0f64;
    for _ in 0..1000 {
        let f: f64 = rng.gen_range(40.0..800.0);
        let g = shift_pitch(&[f], 12.0)?[0];
        worst_octave = worst_octave.max((g - 2.0 * f).abs() / (2.0 * f));
        let (a, b): (f64, f64) = (rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0));
        let once = shift_pitch(&[f], a + b)?[0];
        let twice = shift_pitch(&shift_pitch(&[f], a)?, b)?[0];
        worst_compose = worst_compose.max((once - twice).abs() / once);
    }
    Ok(outcome(
        worst_ratio <= 0.005 && worst_octave <= 1e-12 && worst_compose <= 1e-12,
        format!("ratio dev {worst_ratio:.4} (tol 0.005), octave rel {worst_octave:.1e}, composition rel {worst_compose:.1e}"),
    ))
}

/// Generators and decoder on a real utterance with the pitch embedding
/// replaced by zeros.
fn zero_pitch_mel(model: &FastPitchFormant, utt: &PhonemeUtterance) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let h = model.encode_text(&mut tape, &params, &utt.phoneme_ids)?;
    let shape = tape.shape(h).to_vec();
    let p = tape.constant(Tensor::zeros(&shape));
    let (f, e) = model.run_generators(&mut tape, &params, h, p)?;
    let (_, _, mel3) = model.spectrogram_decoder(&mut tape, &params, f, e)?;
    Ok(tape.value(mel3).clone())
}

fn reduction_and_ablation(
    corpus: &[PhonemeUtterance],
    ext: &Trained,
    woq: &Trained,
) -> Result<Outcome> {
    let mut standard = ext.model.clone();
    standard.config.extended_query = false;
    let mut reduced = 0;
    for utt in corpus.iter().take(8) {
        if zero_pitch_mel(&ext.model, utt)?.bit_eq(&zero_pitch_mel(&standard, utt)?) {
            reduced += 1;
        }
    }
    let mut same_shapes = 0;
    for utt in corpus {
        let opts = SynthesisOptions::ground_truth(4.0);
        let a = synthesize(&ext.model, &utt.as_input(), &opts)?;
        let b = synthesize(&woq.model, &utt.as_input(), &opts)?;
        if a.shape() == b.shape() && a.shape() == utt.target_mel.shape() {
            same_shapes += 1;
        }
    }
    let finite = |t: &Trained| {
        t.log.records.len() == TrainConfig::default().max_iterations
            && t.log.totals().iter().all(|v| v.is_finite())
    };
    Ok(outcome(
        reduced == 8 && same_shapes == corpus.len() && finite(ext) && finite(woq),
        format!(
            "zero pitch: {reduced}/8 bit-equal mels; shapes equal on {same_shapes}/{} utterances; both modes trained {} iterations",
            corpus.len(),
            ext.log.records.len()
        ),
    ))
}

fn formant_independence(corpus: &[PhonemeUtterance], ext: &Trained) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut invariant = 0;
    let mut excitation_moved = 0;
    for trial in 0..100 {
        let utt = &corpus[trial % corpus.len()];
        let base = ext
            .model
            .infer(&utt.as_input(), &ForwardOptions::teacher_forced())?;
        let pitch: Vec<f64> = (0..utt.n_phonemes())
            .map(|_| {
                if rng.gen::<f64>() < 0.2 {
                    0.0
                } else {
                    rng.gen_range(60.0..500.0)
                }
            })
            .collect();
        let input = SynthesisInput {
            pitch_hz: Some(&pitch),
            ..utt.as_input()
        };
        let shift: f64 = rng.gen_range(-12.0..12.0);
        let v = ext
            .model
            .infer(&input, &ForwardOptions::teacher_forced().with_shift(shift))?;
        if v.formant_repr.bit_eq(&base.formant_repr) {
            invariant += 1;
        }
        if !v.excitation_repr.bit_eq(&base.excitation_repr) {
            excitation_moved += 1;
        }
    }
    Ok(outcome(
        invariant == 100,
        format!("formant_repr bit-identical in {invariant}/100 perturbations (excitation changed in {excitation_moved})"),
    ))
}

fn metric_oracles() -> Result<Outcome> {
    let lines = selfcheck::metric_oracles()?;
    let failed: Vec<&str> = lines
        .iter()
        .filter(|l| !l.passed)
        .map(|l| l.name.as_str())
        .collect();
    Ok(outcome(
        failed.is_empty(),
        format!(
            "{} oracles{}",
            lines.len(),
            if failed.is_empty() {
                ", all exact within tolerance".to_string()
            } else {
                format!(", failed: {}", failed.join(", "))
            }
        ),
    ))
}

fn desk_training(corpus: &[PhonemeUtterance], ext: &Trained) -> Result<Outcome> {
    let totals = ext.log.totals();
    let (first, last) = (totals[0], *totals.last().unwrap_or(&f64::NAN));
    let ratio = last / first;
    let again = train_desk(corpus, true)?;
    let deterministic = bits(&again.log.totals()) == bits(&totals)
        && again
            .model
            .weights
            .store
            .tensors()
            .iter()
            .zip(ext.model.weights.store.tensors())
            .all(|(a, b)| a.bit_eq(b));
    Ok(outcome(
        ratio < 0.1 && deterministic && ext.secs < 600.0,
        format!(
            "loss {first:.4} -> {last:.6} (ratio {ratio:.5}, need < 0.1), rerun bit-identical: {deterministic}, {:.1}s",
            ext.secs
        ),
    ))
}

fn mean_over(
    res: &SweepResult,
    lambdas: &[f64],
    f: impl Fn(&fpf_core::control::SweepEntry) -> f64,
) -> f64 {
    let rows: Vec<f64> = res
        .entries
        .iter()
        .filter(|e| lambdas.contains(&e.lambda))
        .map(f)
        .collect();
    rows.iter().sum::<f64>() / rows.len().max(1) as f64
}

fn decomposition_regression(
    corpus: &[PhonemeUtterance],
    ext: &Trained,
    woq: &Trained,
) -> Result<Outcome> {
    let lambdas = [-8.0, -6.0, -4.0, 4.0, 6.0, 8.0];
    let ext_res = sweep(&ext.model, corpus, &lambdas, &SweepOptions::default())?;
    let woq_res = sweep(&woq.model, corpus, &lambdas, &SweepOptions::default())?;
    let formant = mean_over(&ext_res, &[-4.0, 4.0], |e| e.formant_drift);
    let excitation = mean_over(&ext_res, &[-4.0, 4.0], |e| e.excitation_drift);
    let drift_ok = formant <= 0.5 * excitation;
    let mut mcd_ok = true;
    let mut cells = Vec::new();
    for (a, b) in ext_res.summary.iter().zip(&woq_res.summary) {
        if a.lambda.abs() >= 6.0 {
            mcd_ok &= a.mean_mcd <= b.mean_mcd;
        }
        cells.push(format!(
            "{:+}: {:.2}/{:.2}",
            a.lambda, a.mean_mcd, b.mean_mcd
        ));
    }
    Ok(outcome(
        drift_ok && mcd_ok,
        format!(
            "drift formant {formant:.4} vs excitation {excitation:.4}; MCD ext/w/o-Q [{}]",
            cells.join(", ")
        ),
    ))
}

fn extractor_sanity(cfg: &CorpusConfig, corpus: &[PhonemeUtterance]) -> Result<Outcome> {
    let bank = SourceFilterBank::new(cfg)?;
    let mut reference = Vec::new();
    let mut extracted = Vec::new();
    for u in corpus {
        reference.extend_from_slice(u.frame_f0().frame_hz());
        extracted.extend_from_slice(bank.extract_f0(&u.target_mel).frame_hz());
    }
    let value = ffe(&F0Track::from_hz(reference), &F0Track::from_hz(extracted))?;
    Ok(outcome(
        value < 5.0,
        format!(
            "pooled FFE {value:.3}% over {} utterances (need < 5%)",
            corpus.len()
        ),
    ))
}

fn serialization(
    cfg: &CorpusConfig,
    corpus: &[PhonemeUtterance],
    ext: &Trained,
) -> Result<Outcome> {
    let train_cfg = TrainConfig::default();
    let bytes = checkpoint::to_bytes(&ext.model, &ext.state, &train_cfg)?;
    let ck = checkpoint::from_bytes(&bytes)?;
    let ck_bytes_equal = checkpoint::to_bytes(&ck.model, &ck.optimizer, &ck.train)? == bytes;
    let weights_equal = ck
        .model
        .weights
        .store
        .tensors()
        .iter()
        .zip(ext.model.weights.store.tensors())
        .all(|(a, b)| a.bit_eq(b))
        && ck.model.weights.pitch_stats == ext.model.weights.pitch_stats
        && ck.optimizer == ext.state;
    let mut forward_equal = true;
    for u in corpus.iter().take(8) {
        let opts = ForwardOptions::teacher_forced().with_shift(-6.0);
        forward_equal &=
            ck.model.infer(&u.as_input(), &opts)? == ext.model.infer(&u.as_input(), &opts)?;
    }

    let cbytes = corpus_to_bytes(cfg, corpus)?;
    let (cfg2, corpus2) = corpus_from_bytes(&cbytes)?;
    let corpus_equal =
        cfg2 == *cfg && corpus2 == corpus && corpus_to_bytes(&cfg2, &corpus2)? == cbytes;
    Ok(outcome(
        ck_bytes_equal && weights_equal && forward_equal && corpus_equal,
        format!(
            "checkpoint {} bytes re-encoded identical: {ck_bytes_equal}, weights/state bit-equal: {weights_equal}, forward identical: {forward_equal}, corpus {} bytes round-trip: {corpus_equal}",
            bytes.len(),
            cbytes.len()
        ),
    ))
}

fn main() {
    let suite_start = Instant::now();
    let cfg = CorpusConfig::default();
    let corpus = generate_corpus(&cfg).expect("default corpus");
    println!(
        "acceptance: training extended-query and w/o-Q desk models on {} utterances",
        corpus.len()
    );
    let ext = train_desk(&corpus, true).expect("extended-query training");
    let woq = train_desk(&corpus, false).expect("w/o-Q training");

    let criteria: Vec<(&str, Check<'_>)> = vec![
        ("gradient integrity", Box::new(gradient_integrity)),
        ("semitone ratio exactness", Box::new(semitone_exactness)),
        (
            "zero-pitch reduction and ablation plumbing",
            Box::new(|| reduction_and_ablation(&corpus, &ext, &woq)),
        ),
        (
            "formant-path independence",
            Box::new(|| formant_independence(&corpus, &ext)),
        ),
        ("metric oracles", Box::new(metric_oracles)),
        ("desk training", Box::new(|| desk_training(&corpus, &ext))),
        (
            "decomposition regression",
            Box::new(|| decomposition_regression(&corpus, &ext, &woq)),
        ),
        (
            "extractor round-trip FFE",
            Box::new(|| extractor_sanity(&cfg, &corpus)),
        ),
        (
            "serialization round-trips",
            Box::new(|| serialization(&cfg, &corpus, &ext)),
        ),
    ];

    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        if !o.passed {
            failures += 1;
        }
        println!(
            "criterion {} {:<44} {}  {}",
            i + 1,
            name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        criteria.len() - failures,
        criteria.len(),
        suite_start.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
