use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames × mel-bins matrix of log magnitudes, row-major by frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    n_frames: usize,
    n_bins: usize,
    data: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(n_frames: usize, n_bins: usize, data: Vec<f64>) -> Result<Self> {
        if n_frames == 0 || n_bins == 0 || data.len() != n_frames * n_bins {
            return Err(Error::Dimension(format!(
                "mel spectrogram {n_frames}×{n_bins} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            n_frames,
            n_bins,
            data,
        })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        let bins = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != bins) {
            return Err(Error::Dimension("frames have unequal bin counts".into()));
        }
        Self::new(frames.len(), bins, frames.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [f, b] => Self::new(*f, *b, t.data().to_vec()),
            s => Err(Error::Dimension(format!(
                "expected [frames, bins], got {s:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_frames, self.n_bins], self.data.clone())
            .expect("validated on construction")
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_frames, self.n_bins)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_bins)
    }

    /// Mean over frames of the Euclidean distance between matching frames.
    pub fn mean_frame_l2(&self, other: &MelSpectrogram) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Contract(format!(
                "frame distance needs equal shapes, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let total: f64 = self
            .frames()
            .zip(other.frames())
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        Ok(total / self.n_frames as f64)
    }
}
