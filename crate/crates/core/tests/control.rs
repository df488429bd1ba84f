use fpf_core::control::{
    semitone_ratio, shift_pitch, sweep, synthesize, SweepOptions, SynthesisOptions,
};
use fpf_core::data::{generate_corpus, CorpusConfig, PhonemeUtterance, SourceFilterBank};
use fpf_core::model::{FastPitchFormant, ForwardOptions, ModelConfig};
use fpf_core::Error;
use proptest::prelude::*;

fn tiny_corpus_cfg(n: usize) -> CorpusConfig {
    CorpusConfig {
        n_utterances: n,
        vocab_size: 5,
        n_speakers: 2,
        n_mel_bins: 4,
        min_phonemes: 2,
        max_phonemes: 4,
        min_duration: 1,
        max_duration: 3,
        ..CorpusConfig::default()
    }
}

fn fitted_model(corpus: &[PhonemeUtterance], extended_query: bool) -> FastPitchFormant {
    let mut model = FastPitchFormant::new(ModelConfig {
        extended_query,
        ..ModelConfig::tiny()
    })
    .unwrap();
    model.fit_pitch_stats(
        corpus
            .iter()
            .map(|u| (u.speaker_id, u.phoneme_pitch_hz.as_slice())),
    );
    model
}

#[test]
fn ratio_table() {
    for (lambda, ratio) in [
        (0.0, 1.0),
        (12.0, 2.0),
        (-12.0, 0.5),
        (24.0, 4.0),
        (7.0, 1.4983070768766815),
    ] {
        assert!((semitone_ratio(lambda) - ratio).abs() <= 1e-12 * ratio);
    }
}

#[test]
fn unvoiced_zeros_survive_every_shift() {
    let f = [0.0, 180.0, 0.0, 95.5];
    for lambda in [-8.0, -0.5, 3.0, 8.0] {
        let g = shift_pitch(&f, lambda).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[2], 0.0);
        assert!(g[1] > 0.0 && g[3] > 0.0);
    }
}

#[test]
fn synthesize_matches_teacher_forced_forward() {
    let corpus = generate_corpus(&tiny_corpus_cfg(2)).unwrap();
    let model = fitted_model(&corpus, true);
    for lambda in [0.0, -4.0, 6.0] {
        let mel = synthesize(
            &model,
            &corpus[0].as_input(),
            &SynthesisOptions::ground_truth(lambda),
        )
        .unwrap();
        let direct = model
            .infer(
                &corpus[0].as_input(),
                &ForwardOptions::teacher_forced().with_shift(lambda),
            )
            .unwrap();
        assert_eq!(mel, direct.mel3);
        assert_eq!(mel.n_frames(), corpus[0].n_frames());
    }
}

#[test]
fn sweep_shape_and_zero_shift_row() {
    let cfg = tiny_corpus_cfg(3);
    let corpus = generate_corpus(&cfg).unwrap();
    let bank = SourceFilterBank::new(&cfg).unwrap();
    let model = fitted_model(&corpus, true);
    let lambdas = [-6.0, 0.0, 6.0];
    let opts = SweepOptions {
        mcd_order: 3,
        keep_mels: true,
        extractor: Some(&bank),
    };
    let res = sweep(&model, &corpus, &lambdas, &opts).unwrap();
    assert_eq!(res.entries.len(), lambdas.len() * corpus.len());
    assert_eq!(res.summary.len(), lambdas.len());
    for (i, e) in res.entries.iter().enumerate() {
        assert_eq!(e.utterance, i / lambdas.len());
        assert_eq!(e.lambda, lambdas[i % lambdas.len()]);
        assert!(e.ffe.is_some() && e.mel.is_some());
        // the formant path never reads pitch
        assert_eq!(e.formant_drift, 0.0);
        if e.lambda == 0.0 {
            assert_eq!(e.mcd_vs_unshifted, 0.0);
            assert_eq!(e.excitation_drift, 0.0);
        } else {
            assert!(e.excitation_drift > 0.0);
        }
    }
    let zero = &res.summary[1];
    assert_eq!((zero.lambda, zero.ratio, zero.mean_mcd), (0.0, 1.0, 0.0));
}

#[test]
fn sweep_is_deterministic_and_checks_inputs() {
    let corpus = generate_corpus(&tiny_corpus_cfg(2)).unwrap();
    let model = fitted_model(&corpus, false);
    let order3 = SweepOptions {
        mcd_order: 3,
        ..SweepOptions::default()
    };
    let a = sweep(&model, &corpus, &[4.0], &order3).unwrap();
    let b = sweep(&model, &corpus, &[4.0], &order3).unwrap();
    assert_eq!(a.entries, b.entries);
    assert!(a.entries.iter().all(|e| e.ffe.is_none() && e.mel.is_none()));
    assert!(matches!(
        sweep(&model, &corpus, &[], &order3),
        Err(Error::Input(_))
    ));
    assert!(matches!(
        sweep(&model, &corpus, &[f64::NAN], &order3),
        Err(Error::Input(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn shifts_compose(a in -12.0f64..12.0, b in -12.0f64..12.0, f in 50.0f64..500.0) {
        let once = shift_pitch(&[f, 0.0], a + b).unwrap();
        let twice = shift_pitch(&shift_pitch(&[f, 0.0], a).unwrap(), b).unwrap();
        prop_assert!((once[0] - twice[0]).abs() <= 1e-12 * once[0]);
        prop_assert_eq!(twice[1], 0.0);
    }

    #[test]
    fn octave_doubles_any_pitch(f in 1.0f64..2000.0) {
        let g = shift_pitch(&[f], 12.0).unwrap();
        prop_assert!((g[0] - 2.0 * f).abs() <= 1e-12 * f);
    }
}
