//! Objective metrics: f0 frame error, mel-cepstral distortion, and
//! cepstrally smoothed spectral envelopes.

use std::f64::consts::{LN_10, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrogram::MelSpectrogram;

/// Relative deviation above which a voiced frame counts as a gross pitch error.
pub const GROSS_PITCH_ERROR_THRESHOLD: f64 = 0.2;
pub const DEFAULT_MCD_ORDER: usize = 13;
pub const DEFAULT_ENVELOPE_ORDER: usize = 4;

/// Frame-level pitch with voicing decisions. `frame_hz[t] > 0` iff `voiced[t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0Track {
    frame_hz: Vec<f64>,
    voiced: Vec<bool>,
}

impl F0Track {
    pub fn new(frame_hz: Vec<f64>, voiced: Vec<bool>) -> Result<Self> {
        if frame_hz.len() != voiced.len() {
            return Err(Error::Contract(format!(
                "{} pitch values but {} voicing flags",
                frame_hz.len(),
                voiced.len()
            )));
        }
        if let Some(t) = (0..voiced.len()).find(|&t| (frame_hz[t] > 0.0) != voiced[t]) {
            return Err(Error::Contract(format!(
                "frame {t}: pitch {} inconsistent with voiced={}",
                frame_hz[t], voiced[t]
            )));
        }
        Ok(Self { frame_hz, voiced })
    }

    /// Voicing is read off the values: positive means voiced.
    pub fn from_hz(frame_hz: Vec<f64>) -> Self {
        let voiced = frame_hz.iter().map(|&f| f > 0.0).collect();
        Self { frame_hz, voiced }
    }

    pub fn len(&self) -> usize {
        self.frame_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_hz.is_empty()
    }

    pub fn frame_hz(&self) -> &[f64] {
        &self.frame_hz
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }
}

/// Percentage of frames with a voicing mismatch, or voiced in both tracks
/// with `|test − ref| / ref` above 20%.
pub fn ffe(reference: &F0Track, test: &F0Track) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::Contract(format!(
            "FFE needs equal-length tracks, got {} and {}",
            reference.len(),
            test.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::Input("FFE of an empty track".into()));
    }
    let errors = (0..reference.len())
        .filter(|&t| {
            let (rv, tv) = (reference.voiced[t], test.voiced[t]);
            if rv != tv {
                return true;
            }
            rv && {
                let r = reference.frame_hz[t];
                (test.frame_hz[t] - r).abs() / r > GROSS_PITCH_ERROR_THRESHOLD
            }
        })
        .count();
    Ok(100.0 * errors as f64 / reference.len() as f64)
}

/// Orthonormal type-II DCT basis for a fixed length.
#[derive(Clone, Debug)]
pub struct Dct {
    n: usize,
    /// Row `k` holds basis vector `k`.
    basis: Vec<f64>,
}

impl Dct {
    pub fn new(n: usize) -> Self {
        let mut basis = vec![0.0; n * n];
        for k in 0..n {
            let s = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            for i in 0..n {
                basis[k * n + i] = s * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
            }
        }
        Self { n, basis }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.basis
            .chunks(self.n)
            .map(|row| row.iter().zip(x).map(|(b, v)| b * v).sum())
            .collect()
    }

    /// Inverse transform from the first `coeffs.len()` coefficients; the
    /// rest are taken as zero.
    pub fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (row, &c) in self.basis.chunks(self.n).zip(coeffs) {
            for (o, b) in out.iter_mut().zip(row) {
                *o += c * b;
            }
        }
        out
    }
}

/// Per-frame cepstral coefficients `c₀..c_K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelCepstrum {
    order: usize,
    coeffs: Vec<f64>,
}

impl MelCepstrum {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_frames(&self) -> usize {
        self.coeffs.len() / (self.order + 1)
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.order + 1;
        &self.coeffs[t * w..(t + 1) * w]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.coeffs.chunks(self.order + 1)
    }
}

fn check_order(order: usize, bins: usize, what: &str) -> Result<()> {
    if order >= bins {
        return Err(Error::Config(format!(
            "{what} order {order} must be below the bin count {bins}"
        )));
    }
    Ok(())
}

pub fn mel_to_cepstrum(mel: &MelSpectrogram, order: usize) -> Result<MelCepstrum> {
    check_order(order, mel.n_bins(), "cepstral")?;
    let dct = Dct::new(mel.n_bins());
    let mut coeffs = Vec::with_capacity(mel.n_frames() * (order + 1));
    for frame in mel.frames() {
        coeffs.extend_from_slice(&dct.forward(frame)[..=order]);
    }
    Ok(MelCepstrum { order, coeffs })
}

/// Inverse of [`mel_to_cepstrum`], treating missing coefficients as zero.
pub fn cepstrum_to_mel(cep: &MelCepstrum, n_bins: usize) -> Result<MelSpectrogram> {
    check_order(cep.order, n_bins, "cepstral")?;
    let dct = Dct::new(n_bins);
    let frames: Vec<Vec<f64>> = cep.frames().map(|c| dct.inverse(c)).collect();
    MelSpectrogram::from_frames(&frames)
}

/// Mean over frames of `(10 / ln 10)·√(2·Σ_{k=1..K} (cₖᵃ − cₖᵇ)²)`; `c₀` is
/// excluded so overall level differences do not count.
pub fn mcd(a: &MelSpectrogram, b: &MelSpectrogram, order: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "MCD needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ca = mel_to_cepstrum(a, order)?;
    let cb = mel_to_cepstrum(b, order)?;
    let k = 10.0 / LN_10;
    let total: f64 = ca
        .frames()
        .zip(cb.frames())
        .map(|(x, y)| {
            let sq: f64 = x[1..]
                .iter()
                .zip(&y[1..])
                .map(|(p, q)| (p - q).powi(2))
                .sum();
            k * (2.0 * sq).sqrt()
        })
        .sum();
    Ok(total / ca.n_frames() as f64)
}

/// Cepstral liftering: keep `c₀..c_order`, zero the rest, transform back.
pub fn spectral_envelope(frame: &[f64], order: usize) -> Result<Vec<f64>> {
    check_order(order, frame.len(), "envelope")?;
    let dct = Dct::new(frame.len());
    let c = dct.forward(frame);
    Ok(dct.inverse(&c[..=order]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(hz: &[f64]) -> F0Track {
        F0Track::from_hz(hz.to_vec())
    }

    #[test]
    fn ffe_basic_cases() {
        let r = track(&[100.0, 120.0, 0.0, 140.0]);
        assert_eq!(ffe(&r, &r).unwrap(), 0.0);
        let all_voiced = track(&[100.0; 5]);
        let none = track(&[0.0; 5]);
        assert_eq!(ffe(&all_voiced, &none).unwrap(), 100.0);
        assert!(matches!(ffe(&r, &none), Err(Error::Contract(_))));
        assert!(matches!(
            ffe(&track(&[]), &track(&[])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn ffe_uses_reference_for_ratio() {
        // 100 → 121 is 21% of the reference; 121 → 100 is 17.4%.
        let a = track(&[100.0]);
        let b = track(&[121.0]);
        assert_eq!(ffe(&a, &b).unwrap(), 100.0);
        assert_eq!(ffe(&b, &a).unwrap(), 0.0);
    }

    #[test]
    fn f0_track_rejects_inconsistent_voicing() {
        assert!(F0Track::new(vec![100.0, 0.0], vec![true, false]).is_ok());
        assert!(F0Track::new(vec![100.0, 0.0], vec![true, true]).is_err());
        assert!(F0Track::new(vec![100.0], vec![true, true]).is_err());
    }

    #[test]
    fn constant_frame_has_only_c0() {
        let mel = MelSpectrogram::from_frames(&[vec![2.5; 8]]).unwrap();
        let c = mel_to_cepstrum(&mel, 7).unwrap();
        assert!((c.frame(0)[0] - 2.5 * 8f64.sqrt()).abs() < 1e-12);
        assert!(c.frame(0)[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cepstrum_order_must_be_below_bins() {
        let mel = MelSpectrogram::from_frames(&[vec![0.0; 4]]).unwrap();
        assert!(matches!(mel_to_cepstrum(&mel, 4), Err(Error::Config(_))));
        assert!(matches!(
            spectral_envelope(&[0.0; 4], 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mcd_zero_cases() {
        let a = MelSpectrogram::from_frames(&[vec![0.1, 0.5, -0.3, 2.0, 1.0]]).unwrap();
        assert_eq!(mcd(&a, &a, 4).unwrap(), 0.0);
        let shifted: Vec<f64> = a.frame(0).iter().map(|v| v + 3.0).collect();
        let b = MelSpectrogram::from_frames(&[shifted]).unwrap();
        assert!(mcd(&a, &b, 4).unwrap() < 1e-12);
        let c = MelSpectrogram::from_frames(&[vec![0.0; 4]]).unwrap();
        assert!(matches!(mcd(&a, &c, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn envelope_of_constant_is_constant() {
        let env = spectral_envelope(&[1.5; 10], 2).unwrap();
        assert!(env.iter().all(|v| (v - 1.5).abs() < 1e-12));
    }
}
