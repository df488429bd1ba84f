//! Report schemas, aligned text tables and PNG mel dumps.

use std::path::Path;

use fpf_core::control::{SweepEntry, SweepSummary};
use fpf_core::selfcheck::CheckLine;
use fpf_core::spectrogram::MelSpectrogram;
use fpf_core::training::LossBreakdown;
use image::{GrayImage, Luma};
use serde::Serialize;

use crate::config::RunConfig;
use crate::Failure;

pub const EVAL_SCHEMA: &str = "fpf.eval/1";
pub const SWEEP_SCHEMA: &str = "fpf.sweep/1";
pub const SELFCHECK_SCHEMA: &str = "fpf.selfcheck/1";

#[derive(Debug, Serialize)]
pub struct EvalUtterance {
    pub index: usize,
    pub frames: usize,
    pub mcd: f64,
    pub ffe: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub schema: &'static str,
    pub split: &'static str,
    pub utterances: Vec<EvalUtterance>,
    pub loss: LossBreakdown,
    pub mean_mcd: f64,
    pub mean_ffe: f64,
    pub config: RunConfig,
}

#[derive(Debug, Serialize)]
pub struct InvarianceProbe {
    /// Largest formant-path drift over every (utterance, λ); 0 when the
    /// formant path is pitch independent.
    pub max_formant_drift: f64,
    pub mean_excitation_drift: f64,
    pub formant_invariant: bool,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub schema: &'static str,
    pub split: &'static str,
    pub utterances: Vec<usize>,
    pub rows: Vec<SweepSummary>,
    pub entries: Vec<SweepEntry>,
    pub invariance: InvarianceProbe,
    pub mel_dumps: Vec<String>,
    pub config: RunConfig,
}

#[derive(Debug, Serialize)]
pub struct SelfCheckDoc {
    pub schema: &'static str,
    pub passed: bool,
    pub max_gradient_error: f64,
    pub elapsed_secs: f64,
    pub lines: Vec<CheckLine>,
}

/// Left-aligned first column, right-aligned numbers.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = vec![line(headers.to_vec())];
    out.push(
        widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .join("  "),
    );
    for row in rows {
        out.push(line(row.iter().map(String::as_str).collect()));
    }
    out.join("\n") + "\n"
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

pub fn eval_text(r: &EvalReport) -> String {
    let l = &r.loss;
    let mut s = format!("split {} ({} utterances)\n\n", r.split, r.utterances.len());
    s += &table(
        &["quantity", "value"],
        &[
            vec!["loss total".into(), format!("{:.6}", l.total)],
            vec![
                "loss mel1 (SSE/TM)".into(),
                format!("{:.6}", l.spec_losses[0] / l.normalizer),
            ],
            vec![
                "loss mel2 (SSE/TM)".into(),
                format!("{:.6}", l.spec_losses[1] / l.normalizer),
            ],
            vec![
                "loss mel3 (SSE/TM)".into(),
                format!("{:.6}", l.spec_losses[2] / l.normalizer),
            ],
            vec!["loss pitch".into(), format!("{:.6}", l.pitch_loss)],
            vec!["loss duration".into(), format!("{:.6}", l.duration_loss)],
            vec!["MCD (dB)".into(), format!("{:.4}", r.mean_mcd)],
            vec!["FFE (%)".into(), format!("{:.2}", r.mean_ffe)],
        ],
    );
    s
}

pub fn sweep_text(r: &SweepReport) -> String {
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|s| {
            vec![
                format!("{:+}", s.lambda),
                format!("{:.4}", s.ratio),
                format!("{:.4}", s.mean_mcd),
                opt(s.mean_ffe, 2),
                format!("{:.4}", s.mean_formant_drift),
                format!("{:.4}", s.mean_excitation_drift),
            ]
        })
        .collect();
    let mut s = format!("split {} ({} utterances)\n\n", r.split, r.utterances.len());
    s += &table(
        &[
            "lambda",
            "ratio",
            "MCD(dB)",
            "FFE(%)",
            "formant drift",
            "excitation drift",
        ],
        &rows,
    );
    s += &format!(
        "\nformant path invariant under shift: {} (max drift {:.3e})\n",
        r.invariance.formant_invariant, r.invariance.max_formant_drift
    );
    s
}

pub fn selfcheck_text(d: &SelfCheckDoc) -> String {
    let rows: Vec<Vec<String>> = d
        .lines
        .iter()
        .map(|l| {
            vec![
                l.name.clone(),
                format!("{:.3e}", l.error),
                format!("{:.0e}", l.tolerance),
                l.checked.to_string(),
                l.skipped_kinks.to_string(),
                if l.passed {
                    "PASS".into()
                } else {
                    "FAIL".into()
                },
            ]
        })
        .collect();
    let mut s = table(
        &["check", "error", "tol", "coords", "kinks", "result"],
        &rows,
    );
    s += &format!(
        "\nmax gradient rel error {:.3e}; {} in {:.1}s\n",
        d.max_gradient_error,
        if d.passed { "PASS" } else { "FAIL" },
        d.elapsed_secs
    );
    s
}

/// Grayscale image, low bins at the bottom, min to max mapped to 0..255.
pub fn write_mel_png(mel: &MelSpectrogram, path: &Path) -> Result<(), Failure> {
    const SCALE: u32 = 4;
    let (frames, bins) = mel.shape();
    let (lo, hi) = mel
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = (hi - lo).max(1e-12);
    let img = GrayImage::from_fn(frames as u32 * SCALE, bins as u32 * SCALE, |x, y| {
        let t = (x / SCALE) as usize;
        let b = bins - 1 - (y / SCALE) as usize;
        Luma([((mel.frame(t)[b] - lo) / span * 255.0).round() as u8])
    });
    img.save(path)
        .map_err(|e| Failure::data(format!("writing {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::data(format!("writing {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(path, &(text + "\n"))
}
