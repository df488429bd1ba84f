//! Resolved run configuration: defaults, then `--config`, then `--seed`,
//! then `--set` overrides.

use std::path::Path;

use fpf_core::control::DEFAULT_LAMBDAS;
use fpf_core::data::CorpusConfig;
use fpf_core::metrics::DEFAULT_MCD_ORDER;
use fpf_core::selfcheck::SelfCheckOptions;
use fpf_core::training::TrainConfig;
use fpf_core::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
    All,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldOut => "held_out",
            Split::All => "all",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub held_out_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            held_out_fraction: 0.1,
            seed: 99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub mcd_order: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::HeldOut,
            mcd_order: DEFAULT_MCD_ORDER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub split: Split,
    /// 0 means the whole split.
    pub max_utterances: usize,
    pub mcd_order: usize,
    /// Number of utterances whose per-λ mels are written as PNG.
    pub dump_mels: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            split: Split::All,
            max_utterances: 16,
            mcd_order: DEFAULT_MCD_ORDER,
            dump_mels: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfCheckConfig {
    pub seeds: usize,
    pub tolerance: f64,
    pub model_coords: usize,
    pub end_to_end_coords: usize,
    /// Test hook: corrupts the matmul gradient by this factor.
    pub matmul_grad_fault: Option<f64>,
}

impl Default for SelfCheckConfig {
    fn default() -> Self {
        let d = SelfCheckOptions::default();
        Self {
            seeds: d.seeds,
            tolerance: d.tolerance,
            model_coords: d.model_coords,
            end_to_end_coords: d.end_to_end_coords,
            matmul_grad_fault: d.matmul_grad_fault,
        }
    }
}

impl SelfCheckConfig {
    pub fn options(&self) -> SelfCheckOptions {
        SelfCheckOptions {
            seeds: self.seeds,
            tolerance: self.tolerance,
            model_coords: self.model_coords,
            end_to_end_coords: self.end_to_end_coords,
            matmul_grad_fault: self.matmul_grad_fault,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub selfcheck: SelfCheckConfig,
}

impl RunConfig {
    pub fn resolve(
        file: Option<&Path>,
        seed: Option<u64>,
        sets: &[String],
    ) -> Result<Self, Failure> {
        let mut cfg = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Failure::usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.corpus.seed = s;
            cfg.model.init_seed = s;
            cfg.train.seed = s;
            cfg.split.seed = s;
        }
        if !sets.is_empty() {
            let mut value = serde_json::to_value(&cfg).expect("config serializes");
            for s in sets {
                apply_set(&mut value, s)?;
            }
            cfg =
                serde_json::from_value(value).map_err(|e| Failure::usage(format!("--set: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let section = |name: &str, r: fpf_core::Result<()>| {
            r.map_err(|e| match e {
                fpf_core::Error::Config(m) => Failure::usage(format!("{name}.{m}")),
                other => Failure::usage(format!("{name}: {other}")),
            })
        };
        section("corpus", self.corpus.validate())?;
        section("model", self.model.validate())?;
        section("train", self.train.validate())?;
        if !(0.0..=1.0).contains(&self.split.held_out_fraction) {
            return Err(Failure::usage(format!(
                "split.held_out_fraction: {} outside [0, 1]",
                self.split.held_out_fraction
            )));
        }
        if self.sweep.lambdas.is_empty() || self.sweep.lambdas.iter().any(|l| !l.is_finite()) {
            return Err(Failure::usage(
                "sweep.lambdas: needs at least one finite value",
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<(), Failure> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got '{assignment}'")))?;
    let pointer = format!("/{}", key.trim().replace('.', "/"));
    let slot = root
        .pointer_mut(&pointer)
        .ok_or_else(|| Failure::usage(format!("unknown config key '{key}'")))?;
    if slot.is_object() {
        return Err(Failure::usage(format!("'{key}' is a section, not a value")));
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_nested_values() {
        let cfg = RunConfig::resolve(
            None,
            None,
            &[
                "train.max_iterations=7".into(),
                "eval.split=all".into(),
                "sweep.lambdas=[1,2]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.max_iterations, 7);
        assert_eq!(cfg.eval.split, Split::All);
        assert_eq!(cfg.sweep.lambdas, vec![1.0, 2.0]);
    }

    #[test]
    fn unknown_key_and_bad_value_are_usage_errors() {
        let e = RunConfig::resolve(None, None, &["train.nope=1".into()]).unwrap_err();
        assert_eq!(e.code, 1);
        assert!(e.message.contains("train.nope"));
        let e = RunConfig::resolve(None, None, &["train.alpha=\"x\"".into()]).unwrap_err();
        assert_eq!(e.code, 1);
        let e = RunConfig::resolve(None, None, &["train".into()]).unwrap_err();
        assert!(e.message.contains("KEY=VALUE"));
    }

    #[test]
    fn validation_names_the_field() {
        let e = RunConfig::resolve(None, None, &["corpus.f_max=10".into()]).unwrap_err();
        assert!(e.message.contains("corpus.f_max"), "{}", e.message);
    }

    #[test]
    fn seed_reaches_every_stream() {
        let cfg = RunConfig::resolve(None, Some(5), &[]).unwrap();
        assert_eq!(
            (
                cfg.corpus.seed,
                cfg.model.init_seed,
                cfg.train.seed,
                cfg.split.seed
            ),
            (5, 5, 5, 5)
        );
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
