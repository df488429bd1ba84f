use fpf_core::metrics::{
    cepstrum_to_mel, ffe, mcd, mel_to_cepstrum, spectral_envelope, Dct, F0Track, DEFAULT_MCD_ORDER,
};
use fpf_core::selfcheck::random_tensor;
use fpf_core::spectrogram::MelSpectrogram;
use fpf_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn track(hz: &[f64]) -> F0Track {
    F0Track::from_hz(hz.to_vec())
}

#[test]
fn ffe_hand_enumerated_cases() {
    let same = track(&[100.0, 0.0, 200.0]);
    assert_eq!(ffe(&same, &same).unwrap(), 0.0);
    assert_eq!(ffe(&track(&[120.0; 6]), &track(&[0.0; 6])).unwrap(), 100.0);

    // frames 3 and 7 flip voicing; frame 0 is 25% off; frame 9 is 19% off
    let reference = track(&[
        100.0, 150.0, 150.0, 0.0, 180.0, 180.0, 90.0, 110.0, 0.0, 100.0,
    ]);
    let test = track(&[
        125.0, 150.0, 160.0, 140.0, 175.0, 180.0, 95.0, 0.0, 0.0, 119.0,
    ]);
    assert!((ffe(&reference, &test).unwrap() - 30.0).abs() < 1e-12);

    // exactly 20% off is not a gross error
    assert_eq!(ffe(&track(&[100.0]), &track(&[120.0])).unwrap(), 0.0);
}

#[test]
fn ffe_errors() {
    assert!(matches!(
        ffe(&track(&[1.0]), &track(&[1.0, 2.0])),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        ffe(&track(&[]), &track(&[])),
        Err(Error::Input(_))
    ));
    assert!(F0Track::new(vec![100.0], vec![false]).is_err());
}

fn naive_dct(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n).cos())
                .sum();
            let norm = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            norm * s
        })
        .collect()
}

#[test]
fn cepstrum_matches_naive_cosine_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mel = MelSpectrogram::from_tensor(&random_tensor(&mut rng, &[3, 16], 4.0)).unwrap();
    let cep = mel_to_cepstrum(&mel, 13).unwrap();
    assert_eq!(cep.order(), 13);
    for t in 0..3 {
        let oracle = naive_dct(mel.frame(t));
        for (c, o) in cep.frame(t).iter().zip(&oracle) {
            assert!((c - o).abs() <= 1e-12);
        }
    }
}

#[test]
fn cepstrum_of_constant_frame_has_only_c0() {
    let mel = MelSpectrogram::new(1, 8, vec![2.5; 8]).unwrap();
    let cep = mel_to_cepstrum(&mel, 7).unwrap();
    assert!((cep.frame(0)[0] - 2.5 * 8f64.sqrt()).abs() < 1e-12);
    assert!(cep.frame(0)[1..].iter().all(|c| c.abs() < 1e-12));
    assert!(matches!(mel_to_cepstrum(&mel, 8), Err(Error::Config(_))));
}

#[test]
fn cepstrum_is_linear_and_inverts_at_full_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, &[2, 10], 3.0);
    let b = random_tensor(&mut rng, &[2, 10], 3.0);
    let sum: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let (ma, mb) = (
        MelSpectrogram::from_tensor(&a).unwrap(),
        MelSpectrogram::from_tensor(&b).unwrap(),
    );
    let ms = MelSpectrogram::new(2, 10, sum).unwrap();
    let (ca, cb, cs) = (
        mel_to_cepstrum(&ma, 9).unwrap(),
        mel_to_cepstrum(&mb, 9).unwrap(),
        mel_to_cepstrum(&ms, 9).unwrap(),
    );
    for t in 0..2 {
        for k in 0..10 {
            assert!((ca.frame(t)[k] + cb.frame(t)[k] - cs.frame(t)[k]).abs() <= 1e-12);
        }
    }
    let back = cepstrum_to_mel(&ca, 10).unwrap();
    let err = back
        .data()
        .iter()
        .zip(ma.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-12);
}

#[test]
fn mcd_identity_offset_and_single_coefficient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mel = MelSpectrogram::from_tensor(&random_tensor(&mut rng, &[4, 16], 2.0)).unwrap();
    assert_eq!(mcd(&mel, &mel, DEFAULT_MCD_ORDER).unwrap(), 0.0);
    let offset = MelSpectrogram::new(4, 16, mel.data().iter().map(|v| v + 3.0).collect()).unwrap();
    assert!(mcd(&mel, &offset, DEFAULT_MCD_ORDER).unwrap() < 1e-12);

    let dct = Dct::new(16);
    let mut c = vec![0.0; 16];
    c[1] = 1.0;
    let one = MelSpectrogram::new(1, 16, dct.inverse(&c)).unwrap();
    let zero = MelSpectrogram::new(1, 16, vec![0.0; 16]).unwrap();
    let expected = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
    assert!((mcd(&one, &zero, DEFAULT_MCD_ORDER).unwrap() - expected).abs() <= 1e-9);

    let short = MelSpectrogram::new(3, 16, vec![0.0; 48]).unwrap();
    assert!(matches!(
        mcd(&mel, &short, DEFAULT_MCD_ORDER),
        Err(Error::Contract(_))
    ));
}

#[test]
fn envelope_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frame = random_tensor(&mut rng, &[12], 2.0).into_data();
    let full = spectral_envelope(&frame, 11).unwrap();
    assert!(full.iter().zip(&frame).all(|(a, b)| (a - b).abs() <= 1e-12));
    let flat = spectral_envelope(&[1.5; 12], 3).unwrap();
    assert!(flat.iter().all(|v| (v - 1.5).abs() <= 1e-12));
    assert!(matches!(
        spectral_envelope(&frame, 12),
        Err(Error::Config(_))
    ));
}

fn total_variation(x: &[f64]) -> f64 {
    x.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn envelope_smooths(seed in any::<u64>(), m in 8usize..24, order in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = random_tensor(&mut rng, &[m], 3.0).into_data();
        let env = spectral_envelope(&frame, order).unwrap();
        prop_assert!(total_variation(&env) <= total_variation(&frame) + 1e-12);
    }

    #[test]
    fn ffe_stays_in_range(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            random_tensor(rng, &[n], 1.0).data().iter().map(|v| if *v < -0.3 { 0.0 } else { 150.0 + 100.0 * v }).collect()
        };
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let e = ffe(&track(&a), &track(&b)).unwrap();
        prop_assert!((0.0..=100.0).contains(&e));
    }

    #[test]
    fn mcd_is_non_negative_symmetric_and_offset_invariant(seed in any::<u64>(), t in 1usize..5, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = MelSpectrogram::from_tensor(&random_tensor(&mut rng, &[t, 16], 2.0)).unwrap();
        let b = MelSpectrogram::from_tensor(&random_tensor(&mut rng, &[t, 16], 2.0)).unwrap();
        let d = mcd(&a, &b, DEFAULT_MCD_ORDER).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - mcd(&b, &a, DEFAULT_MCD_ORDER).unwrap()).abs() <= 1e-12);
        let shifted = MelSpectrogram::new(t, 16, b.data().iter().map(|v| v + shift).collect()).unwrap();
        prop_assert!((d - mcd(&a, &shifted, DEFAULT_MCD_ORDER).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn dct_round_trip(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[n], 10.0).into_data();
        let dct = Dct::new(n);
        let back = dct.inverse(&dct.forward(&x));
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
