//! Checkpoint files: model config, training config, parameters, pitch
//! statistics and Adam moments in one versioned container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{FastPitchFormant, ModelConfig, ModelWeights, PitchStats};
use crate::tensor::Tensor;
use crate::training::{OptimizerState, TrainConfig};

const MAGIC: &[u8; 8] = b"FPFCKPT\0";
const VERSION: u32 = 1;
const PITCH_STATS: &str = "buffer.pitch_stats";
const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    optimizer_step: u64,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FastPitchFormant,
    pub train: TrainConfig,
    pub optimizer: OptimizerState,
}

pub fn to_bytes(
    model: &FastPitchFormant,
    state: &OptimizerState,
    train: &TrainConfig,
) -> Result<Vec<u8>> {
    let header = serde_json::to_string(&Header {
        model: model.config.clone(),
        train: train.clone(),
        optimizer_step: state.step,
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    let store = &model.weights.store;
    let mut w = Writer::new(MAGIC, VERSION, &header);
    w.u32((3 * store.len() + 1) as u32);
    for (name, t) in store.iter() {
        w.tensor(name, t);
    }
    let stats: Vec<f64> = model
        .weights
        .pitch_stats
        .iter()
        .flat_map(|s| [s.mean, s.std])
        .collect();
    w.tensor(PITCH_STATS, &Tensor::new(vec![stats.len() / 2, 2], stats)?);
    for ((name, t), (m, v)) in store
        .iter()
        .zip(state.first_moment.iter().zip(&state.second_moment))
    {
        w.tensor(
            &format!("{MOMENT1}{name}"),
            &Tensor::new(t.shape().to_vec(), m.clone())?,
        );
        w.tensor(
            &format!("{MOMENT2}{name}"),
            &Tensor::new(t.shape().to_vec(), v.clone())?,
        );
    }
    Ok(w.finish())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (mut r, header) = Reader::open(bytes, MAGIC, VERSION)?;
    let header: Header = serde_json::from_str(&header)
        .map_err(|e| Error::Load(format!("checkpoint header: {e}")))?;
    header
        .model
        .validate()
        .map_err(|e| Error::Load(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut params = Vec::new();
    let mut moments1 = Vec::new();
    let mut moments2 = Vec::new();
    let mut stats = None;
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if name == PITCH_STATS {
            stats = Some(t);
        } else if let Some(n) = name.strip_prefix(MOMENT1) {
            moments1.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix(MOMENT2) {
            moments2.push((n.to_string(), t));
        } else {
            params.push((name, t));
        }
    }
    r.expect_end()?;

    let mut weights = ModelWeights::init(&header.model)?;
    weights.load_named(params)?;
    let stats = stats.ok_or_else(|| Error::Load("pitch statistics missing".into()))?;
    if stats.shape() != [header.model.n_speakers, 2] {
        return Err(Error::Load(format!(
            "pitch statistics have shape {:?}",
            stats.shape()
        )));
    }
    weights.pitch_stats = stats
        .data()
        .chunks(2)
        .map(|c| PitchStats {
            mean: c[0],
            std: c[1],
        })
        .collect();

    let order = |named: Vec<(String, Tensor)>, which: &str| -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; weights.store.len()];
        for (n, t) in named {
            let i = weights.store.position(&n).ok_or_else(|| {
                Error::Load(format!("{which} moment for unknown parameter `{n}`"))
            })?;
            if t.shape() != weights.store.tensors()[i].shape() {
                return Err(Error::Load(format!(
                    "{which} moment for `{n}` has wrong shape"
                )));
            }
            out[i] = Some(t.into_data());
        }
        out.into_iter()
            .enumerate()
            .map(|(i, m)| {
                m.ok_or_else(|| {
                    Error::Load(format!(
                        "{which} moment for `{}` missing",
                        weights.store.names()[i]
                    ))
                })
            })
            .collect()
    };
    let optimizer = OptimizerState {
        first_moment: order(moments1, "first")?,
        second_moment: order(moments2, "second")?,
        step: header.optimizer_step,
    };
    Ok(Checkpoint {
        model: FastPitchFormant {
            config: header.model,
            weights,
        },
        train: header.train,
        optimizer,
    })
}

pub fn save_checkpoint(
    model: &FastPitchFormant,
    state: &OptimizerState,
    train: &TrainConfig,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, to_bytes(model, state, train)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}
