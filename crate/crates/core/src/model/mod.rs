//! The trajectory network: context encoder, transformer encoder-decoder with
//! full or projected attention, and multi-mode output heads.

pub mod attention;
mod config;
pub mod context;
mod input;
mod network;
mod params;
mod positional;

use crate::error::{Error, Result};
use crate::geometry::{Point, Pose};
use crate::tensor::{softmax_rows, Tensor};

pub use config::{AttentionKind, ModelConfig};
pub use input::ModelInput;
pub use network::{Batch, Catf, Outputs, RunOptions, POS_SCALE};
pub use params::{check_params, init_params, param_shapes, Bound, ParamMap};
pub use positional::{positional_encoding, PositionalEncoding};

/// K hypothesis trajectories over the horizon with a credibility per mode.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub trajectories: Vec<Vec<Point>>,
    pub credibility: Vec<f64>,
}

impl PredictionSet {
    pub fn new(trajectories: Vec<Vec<Point>>, credibility: Vec<f64>) -> Result<Self> {
        let set = PredictionSet {
            trajectories,
            credibility,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.trajectories.len();
        if k == 0 || self.credibility.len() != k {
            return Err(Error::invalid(format!(
                "{k} trajectories with {} credibilities",
                self.credibility.len()
            )));
        }
        let h = self.trajectories[0].len();
        if h == 0 || self.trajectories.iter().any(|t| t.len() != h) {
            return Err(Error::invalid("trajectories must share a non-zero horizon"));
        }
        if self
            .trajectories
            .iter()
            .flatten()
            .any(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(Error::invalid("trajectories contain non-finite points"));
        }
        let sum: f64 = self.credibility.iter().sum();
        if self.credibility.iter().any(|&c| !(c >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "credibility must be non-negative and sum to 1, got {:?}",
                self.credibility
            )));
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.trajectories.len()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories[0].len()
    }

    /// Mode indices by descending credibility; ties keep the lower index first.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.modes()).collect();
        idx.sort_by(|&a, &b| self.credibility[b].total_cmp(&self.credibility[a]).then(a.cmp(&b)));
        idx
    }

    pub fn to_world(&self, pose: &Pose) -> PredictionSet {
        PredictionSet {
            trajectories: self
                .trajectories
                .iter()
                .map(|t| t.iter().map(|&p| pose.to_world(p)).collect())
                .collect(),
            credibility: self.credibility.clone(),
        }
    }

    /// Split batched network outputs `[B, K, H, 2]` and logits `[B, K]`.
    pub fn from_tensors(positions: &Tensor, logits: &Tensor) -> Result<Vec<PredictionSet>> {
        let s = positions.shape();
        if s.len() != 4 || s[3] != 2 || logits.shape() != [s[0], s[1]] {
            return Err(Error::shape("prediction tensors", s, logits.shape()));
        }
        let (b, k, h) = (s[0], s[1], s[2]);
        let cred = softmax_rows(logits)?;
        let pos = positions.data();
        (0..b)
            .map(|bi| {
                let trajectories = (0..k)
                    .map(|m| {
                        (0..h)
                            .map(|t| {
                                let o = ((bi * k + m) * h + t) * 2;
                                [pos[o], pos[o + 1]]
                            })
                            .collect()
                    })
                    .collect();
                PredictionSet::new(trajectories, cred.data()[bi * k..(bi + 1) * k].to_vec())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
