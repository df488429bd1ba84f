use std::path::{Path, PathBuf};
use std::time::Instant;

use fpf_core::checkpoint::{load_checkpoint, save_checkpoint};
use fpf_core::control::{sweep, SweepOptions};
use fpf_core::data::{
    generate_corpus, load_corpus, save_corpus, split_indices, PhonemeUtterance, SourceFilterBank,
};
use fpf_core::metrics::{ffe, mcd};
use fpf_core::model::ForwardOptions;
use fpf_core::selfcheck;
use fpf_core::training::{evaluate, train_with, OptimizerState};
use fpf_core::{FastPitchFormant, ModelConfig};
use log::info;

use crate::config::{RunConfig, Split};
use crate::report::{self, EvalReport, EvalUtterance, InvarianceProbe, SelfCheckDoc, SweepReport};
use crate::Failure;

fn require<'a>(path: Option<&'a Path>, flag: &str) -> Result<&'a Path, Failure> {
    path.ok_or_else(|| Failure::usage(format!("missing required {flag}")))
}

fn load(path: &Path) -> Result<(fpf_core::data::CorpusConfig, Vec<PhonemeUtterance>), Failure> {
    load_corpus(path).map_err(|e| Failure::from(e).context(&format!("corpus {}", path.display())))
}

/// Indices of the requested split, ascending.
pub fn split_of(cfg: &RunConfig, n: usize, split: Split) -> Vec<usize> {
    let (mut train, mut held) = split_indices(n, cfg.split.held_out_fraction, cfg.split.seed);
    train.sort_unstable();
    held.sort_unstable();
    match split {
        Split::Train => train,
        Split::HeldOut => held,
        Split::All => (0..n).collect(),
    }
}

pub fn gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let out = require(out, "--out")?;
    let corpus = generate_corpus(&cfg.corpus)?;
    save_corpus(&cfg.corpus, &corpus, out)?;
    let frames: usize = corpus.iter().map(|u| u.n_frames()).sum();
    println!(
        "wrote {} utterances ({frames} frames) to {}",
        corpus.len(),
        out.display()
    );
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    corpus_path: &Path,
    resume: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let out = require(out, "--out")?;
    let (ccfg, corpus) = load(corpus_path)?;
    let idx = split_of(cfg, corpus.len(), Split::Train);
    let dataset: Vec<PhonemeUtterance> = idx.iter().map(|&i| corpus[i].clone()).collect();
    if dataset.is_empty() {
        return Err(Failure::data("training split is empty"));
    }
    let (mut model, mut state, tcfg) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)
                .map_err(|e| Failure::from(e).context(&format!("checkpoint {}", path.display())))?;
            let mut tcfg = ck.train;
            tcfg.max_iterations = cfg.train.max_iterations;
            info!(
                "resuming from {} at iteration {}",
                path.display(),
                ck.optimizer.step
            );
            (ck.model, ck.optimizer, tcfg)
        }
        None => {
            let mcfg = ModelConfig {
                vocab_size: ccfg.vocab_size,
                n_speakers: ccfg.n_speakers,
                n_mel_bins: ccfg.n_mel_bins,
                ..cfg.model.clone()
            };
            let model = FastPitchFormant::new(mcfg)?;
            let state = OptimizerState::new(&model.weights.store);
            (model, state, cfg.train.clone())
        }
    };
    info!(
        "training on {} utterances; model {}; train {}",
        dataset.len(),
        serde_json::to_string(&model.config).expect("serializes"),
        serde_json::to_string(&tcfg).expect("serializes")
    );
    let start = Instant::now();
    let log = train_with(&mut model, &dataset, &tcfg, &mut state, |r| {
        if r.iteration == 1 || r.iteration % 100 == 0 {
            info!(
                "iteration {:>5}  lr {:.2e}  loss {:.6}",
                r.iteration, r.lr, r.loss.total
            );
        }
    })?;
    save_checkpoint(&model, &state, &tcfg, out)?;
    let log_path = log_path(out);
    report::write_json(&log_path, &log)?;
    let totals = log.totals();
    match (totals.first(), totals.last()) {
        (Some(first), Some(last)) => println!(
            "iterations {}..{}: loss {first:.6} -> {last:.6} (ratio {:.5}) in {:.1}s",
            log.records[0].iteration,
            state.step,
            last / first,
            start.elapsed().as_secs_f64()
        ),
        _ => println!("no iterations run (already at {})", state.step),
    }
    println!(
        "checkpoint {}\nloss log {}",
        out.display(),
        log_path.display()
    );
    Ok(())
}

/// `ck.bin` → `ck.log.json`.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.json")
}

fn prepare_out_dir(out: Option<&Path>) -> Result<Option<&Path>, Failure> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::data(format!("creating {}: {e}", dir.display())))?;
    }
    Ok(out)
}

fn load_model(path: &Path) -> Result<fpf_core::checkpoint::Checkpoint, Failure> {
    load_checkpoint(path)
        .map_err(|e| Failure::from(e).context(&format!("checkpoint {}", path.display())))
}

pub fn eval(
    cfg: &RunConfig,
    ck_path: &Path,
    corpus_path: &Path,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let ck = load_model(ck_path)?;
    let (ccfg, corpus) = load(corpus_path)?;
    let idx = split_of(cfg, corpus.len(), cfg.eval.split);
    if idx.is_empty() {
        return Err(Failure::data(format!(
            "evaluation split '{}' is empty",
            cfg.eval.split.name()
        )));
    }
    let items: Vec<PhonemeUtterance> = idx.iter().map(|&i| corpus[i].clone()).collect();
    let loss = evaluate(&ck.model, &items, &ck.train)?;
    let bank = SourceFilterBank::new(&ccfg)?;
    let mut utterances = Vec::with_capacity(items.len());
    for (&i, u) in idx.iter().zip(&items) {
        let mel = ck
            .model
            .infer(&u.as_input(), &ForwardOptions::teacher_forced())?
            .mel3;
        utterances.push(EvalUtterance {
            index: i,
            frames: u.n_frames(),
            mcd: mcd(&mel, &u.target_mel, cfg.eval.mcd_order)?,
            ffe: ffe(&u.frame_f0(), &bank.extract_f0(&mel))?,
        });
    }
    let n = utterances.len() as f64;
    let r = EvalReport {
        schema: report::EVAL_SCHEMA,
        split: cfg.eval.split.name(),
        mean_mcd: utterances.iter().map(|u| u.mcd).sum::<f64>() / n,
        mean_ffe: utterances.iter().map(|u| u.ffe).sum::<f64>() / n,
        utterances,
        loss,
        config: cfg.clone(),
    };
    let text = report::eval_text(&r);
    print!("{text}");
    if let Some(dir) = prepare_out_dir(out)? {
        report::write_json(&dir.join("eval.json"), &r)?;
        report::write_text(&dir.join("eval.txt"), &text)?;
    }
    Ok(())
}

pub fn run_sweep(
    cfg: &RunConfig,
    ck_path: &Path,
    corpus_path: &Path,
    lambdas: Option<&[f64]>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let ck = load_model(ck_path)?;
    let (ccfg, corpus) = load(corpus_path)?;
    let lambdas = lambdas.unwrap_or(&cfg.sweep.lambdas);
    let mut idx = split_of(cfg, corpus.len(), cfg.sweep.split);
    if cfg.sweep.max_utterances > 0 {
        idx.truncate(cfg.sweep.max_utterances);
    }
    if idx.is_empty() {
        return Err(Failure::data(format!(
            "sweep split '{}' is empty",
            cfg.sweep.split.name()
        )));
    }
    let items: Vec<PhonemeUtterance> = idx.iter().map(|&i| corpus[i].clone()).collect();
    let bank = SourceFilterBank::new(&ccfg)?;
    let opts = SweepOptions {
        mcd_order: cfg.sweep.mcd_order,
        keep_mels: cfg.sweep.dump_mels > 0,
        extractor: Some(&bank),
    };
    let mut res = sweep(&ck.model, &items, lambdas, &opts)?;
    let out = prepare_out_dir(out)?;
    let mut mel_dumps = Vec::new();
    for e in res.entries.iter_mut() {
        let Some(mel) = e.mel.take() else { continue };
        if e.utterance >= cfg.sweep.dump_mels {
            continue;
        }
        if let Some(dir) = out {
            let name = format!("mel_u{}_{:+}.png", idx[e.utterance], e.lambda);
            report::write_mel_png(&mel, &dir.join(&name))?;
            mel_dumps.push(name);
        }
    }
    for e in res.entries.iter_mut() {
        e.utterance = idx[e.utterance];
    }
    let max_formant_drift = res
        .entries
        .iter()
        .map(|e| e.formant_drift)
        .fold(0.0, f64::max);
    let r = SweepReport {
        schema: report::SWEEP_SCHEMA,
        split: cfg.sweep.split.name(),
        utterances: idx,
        invariance: InvarianceProbe {
            max_formant_drift,
            mean_excitation_drift: res.entries.iter().map(|e| e.excitation_drift).sum::<f64>()
                / res.entries.len() as f64,
            formant_invariant: max_formant_drift == 0.0,
        },
        rows: res.summary,
        entries: res.entries,
        mel_dumps,
        config: RunConfig {
            sweep: crate::config::SweepConfig {
                lambdas: lambdas.to_vec(),
                ..cfg.sweep.clone()
            },
            ..cfg.clone()
        },
    };
    let text = report::sweep_text(&r);
    print!("{text}");
    if let Some(dir) = out {
        report::write_json(&dir.join("sweep.json"), &r)?;
        report::write_text(&dir.join("sweep.txt"), &text)?;
    }
    Ok(())
}

pub fn run_selfcheck(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let rep = selfcheck::run(&cfg.selfcheck.options())?;
    let doc = SelfCheckDoc {
        schema: report::SELFCHECK_SCHEMA,
        passed: rep.passed(),
        max_gradient_error: rep.max_gradient_error(),
        elapsed_secs: rep.elapsed_secs,
        lines: rep.lines,
    };
    print!("{}", report::selfcheck_text(&doc));
    if let Some(path) = out {
        report::write_json(path, &doc)?;
    }
    if doc.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = doc
            .lines
            .iter()
            .filter(|l| !l.passed)
            .map(|l| l.name.as_str())
            .collect();
        Err(Failure::numeric(format!(
            "self-check failed: {}",
            failed.join(", ")
        )))
    }
}
