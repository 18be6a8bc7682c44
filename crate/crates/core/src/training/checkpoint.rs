//! Parameter checkpoint plus a TOML sidecar with everything needed to rebuild the
//! predictor.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::predictor::{Predictor, PredictorKind};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::MultitaskWeights;
use crate::model::{Catf, ModelConfig, ParamMap};
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};

/// Sidecar contents. `model` also fixes the data geometry (raster, history and
/// horizon) used to prepare evaluation samples for non-network predictors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub predictor: PredictorKind,
    pub use_context: bool,
    pub epoch: usize,
    pub grid_cell: f64,
    pub loss_weights: MultitaskWeights,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
}

impl CheckpointMeta {
    pub fn new(
        predictor: PredictorKind,
        model: ModelConfig,
        train: Option<TrainConfig>,
        loss_weights: MultitaskWeights,
        epoch: usize,
    ) -> Self {
        CheckpointMeta {
            predictor,
            use_context: train.as_ref().is_none_or(|t| t.use_context),
            epoch,
            grid_cell: train.as_ref().map_or(0.5, |t| t.grid_cell),
            loss_weights,
            model,
            train,
        }
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

/// Write parameters to `path` and the sidecar next to it.
pub fn save_checkpoint(path: &Path, predictor: &Predictor, meta: &CheckpointMeta) -> Result<()> {
    if predictor.kind() != meta.predictor {
        return Err(Error::invalid("checkpoint metadata names a different predictor"));
    }
    let empty = ParamMap::new();
    let params = match predictor {
        Predictor::Catf { model, .. } => model.params(),
        _ => &empty,
    };
    write_checkpoint(BufWriter::new(File::create(path)?), params)?;
    let text = toml::to_string(meta).map_err(|e| Error::invalid(format!("sidecar: {e}")))?;
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Predictor, CheckpointMeta)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side)
        .map_err(|e| Error::invalid(format!("cannot read sidecar {}: {e}", side.display())))?;
    let meta: CheckpointMeta =
        toml::from_str(&text).map_err(|e| Error::invalid(format!("sidecar {}: {e}", side.display())))?;
    meta.model.validate()?;
    let params = read_checkpoint(BufReader::new(File::open(path)?))?;
    let predictor = match meta.predictor {
        PredictorKind::Catf => Predictor::Catf {
            model: Catf::from_params(meta.model.clone(), params)?,
            use_context: meta.use_context,
        },
        PredictorKind::ConstantVelocity | PredictorKind::Oracle => {
            if !params.is_empty() {
                return Err(Error::invalid(format!(
                    "{:?} checkpoint should carry no parameters",
                    meta.predictor
                )));
            }
            if meta.predictor == PredictorKind::Oracle {
                Predictor::Oracle
            } else {
                Predictor::ConstantVelocity
            }
        }
    };
    Ok((predictor, meta))
}
