//! Anything that maps samples to prediction sets: the network, the
//! constant-velocity baseline, and a ground-truth oracle for pipeline checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use crate::error::{Error, Result};
use crate::geometry::{Point, Trajectory};
use crate::metrics::{evaluate_dataset, EvalRecord, MetricsTable};
use crate::model::{Catf, PredictionSet};

/// Extrapolate the last displacement of `history` for `horizon` steps.
pub fn constant_velocity(history: &[Point], horizon: usize) -> Result<PredictionSet> {
    let n = history.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "constant velocity needs at least 2 history states, got {n}"
        )));
    }
    let last = history[n - 1];
    let d = [last[0] - history[n - 2][0], last[1] - history[n - 2][1]];
    let future = (1..=horizon)
        .map(|k| [last[0] + k as f64 * d[0], last[1] + k as f64 * d[1]])
        .collect();
    PredictionSet::new(vec![future], vec![1.0])
}

pub fn constant_velocity_baseline(history: &Trajectory, horizon: usize) -> Result<PredictionSet> {
    constant_velocity(&history.points(), horizon)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Catf,
    ConstantVelocity,
    /// Returns the ground truth; only useful to check the evaluation pipeline.
    Oracle,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Predictor {
    Catf { model: Catf, use_context: bool },
    ConstantVelocity,
    Oracle,
}

/// Samples per network call during evaluation.
const EVAL_CHUNK: usize = 32;

impl Predictor {
    pub fn kind(&self) -> PredictorKind {
        match self {
            Predictor::Catf { .. } => PredictorKind::Catf,
            Predictor::ConstantVelocity => PredictorKind::ConstantVelocity,
            Predictor::Oracle => PredictorKind::Oracle,
        }
    }

    /// Actor-frame predictions, one per sample in order. Chunks run in parallel;
    /// results are identical for any thread count.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<PredictionSet>> {
        match self {
            Predictor::Catf { model, use_context } => {
                let chunks: Vec<Vec<PredictionSet>> = samples
                    .par_chunks(EVAL_CHUNK)
                    .map(|chunk| {
                        let inputs: Vec<_> = chunk.iter().map(|s| &s.input).collect();
                        model.predict(&inputs, *use_context)
                    })
                    .collect::<Result<_>>()?;
                Ok(chunks.into_iter().flatten().collect())
            }
            Predictor::ConstantVelocity => samples
                .iter()
                .map(|s| constant_velocity(&s.input.target_history, s.truth.len()))
                .collect(),
            Predictor::Oracle => samples
                .iter()
                .map(|s| PredictionSet::new(vec![s.truth.clone()], vec![1.0]))
                .collect(),
        }
    }

    pub fn records(&self, samples: &[Sample]) -> Result<Vec<EvalRecord>> {
        Ok(records_for(samples, self.predict(samples)?))
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<MetricsTable> {
        evaluate_dataset(&self.records(samples)?)
    }
}

pub fn records_for(samples: &[Sample], predictions: Vec<PredictionSet>) -> Vec<EvalRecord> {
    samples
        .iter()
        .zip(predictions)
        .map(|(s, prediction)| EvalRecord {
            scene_id: s.scene_id.clone(),
            agent_id: s.agent_id,
            truth: s.truth.clone(),
            prediction,
            grid: s.grid.clone(),
        })
        .collect()
}
