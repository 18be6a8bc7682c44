//! Optimization loop, ablation switches, checkpoints and baselines.

mod checkpoint;
mod data;
mod optim;
mod predictor;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    multitask_loss, multitask_tape, nll_mixture_loss, nll_mixture_tape, offroad_loss, offroad_tape, MultitaskWeights,
};
use crate::metrics::{evaluate_dataset, MetricsTable};
use crate::model::{AttentionKind, Batch, Bound, Catf, ModelConfig, ParamMap, RunOptions};
use crate::scene::Scene;
use crate::tensor::{Tape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use data::{prepare_samples, prepare_scene, split_scenes, Sample, Split};
pub use optim::{adam_step, clip_global_norm, global_norm, lr_at, AdamConfig, AdamState};
pub use predictor::{constant_velocity, constant_velocity_baseline, records_for, Predictor, PredictorKind};

const LOG_SIGMA1: &str = "loss.log_sigma1";
const LOG_SIGMA2: &str = "loss.log_sigma2";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    /// `base_lr * sqrt(warmup_steps / step)` after warm-up.
    InverseSqrt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Model preset the run starts from.
    pub preset: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub decay: Decay,
    pub seed: u64,
    pub use_context: bool,
    pub use_offroad_loss: bool,
    pub attention: AttentionKind,
    /// Epochs without a better validation minADE_3 before stopping.
    pub patience: usize,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Use the off-road fraction instead of `exp(count)`.
    pub offroad_normalized: bool,
    /// Drivable grid cell size in meters.
    pub grid_cell: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            preset: "desk".into(),
            batch_size: 16,
            epochs: 30,
            base_lr: 1e-3,
            warmup_epochs: 5.0,
            decay: Decay::InverseSqrt,
            seed: 0,
            use_context: true,
            use_offroad_loss: true,
            attention: AttentionKind::Linear,
            patience: 5,
            clip_norm: 5.0,
            offroad_normalized: false,
            grid_cell: 0.5,
        }
    }

    pub fn large() -> Self {
        TrainConfig {
            preset: "large".into(),
            batch_size: 64,
            ..TrainConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::desk()),
            "large" => Ok(TrainConfig::large()),
            _ => Err(Error::invalid(format!("unknown preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return Err(Error::invalid(format!(
                "warm-up of {} epochs must be shorter than {} epochs",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::invalid("clip_norm must be non-negative"));
        }
        if !(self.grid_cell > 0.0) {
            return Err(Error::invalid("grid_cell must be positive"));
        }
        Ok(())
    }

    /// Model configuration with this run's attention variant applied.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        if base.attention() == self.attention {
            base.clone()
        } else {
            base.clone().with_attention(self.attention)
        }
    }
}

/// Learning rate for optimizer step `step` (the first update is step 1).
pub fn lr_schedule(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    match cfg.decay {
        Decay::InverseSqrt => lr_at(step, cfg.warmup_epochs * steps_per_epoch as f64, cfg.base_lr),
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(rename = "minADE_1")]
    pub min_ade_1: f64,
    #[serde(rename = "minADE_3")]
    pub min_ade_3: f64,
    pub offroad_rate: f64,
    /// Mean mixture NLL on the training batches.
    pub train_nll: f64,
    /// Mean off-road loss on the training batches; absent when that loss is off.
    pub train_offroad: Option<f64>,
    pub log_sigma1: f64,
    pub log_sigma2: f64,
    pub skipped_steps: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.epochs {
            writeln!(w, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        Ok(())
    }

    pub fn read_ndjson(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format {
                    line: i + 1,
                    offset: 0,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(RunLog { epochs })
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Catf,
    pub weights: MultitaskWeights,
    pub log: RunLog,
    pub best_epoch: usize,
    pub best_metrics: MetricsTable,
}

/// Loss pieces of one batch.
struct StepLoss {
    total: f64,
    nll: f64,
    offroad: Option<f64>,
    grads: ParamMap,
}

fn batch_truth(samples: &[&Sample]) -> Result<Tensor> {
    let h = samples[0].truth.len();
    let data = samples
        .iter()
        .flat_map(|s| s.truth.iter().flat_map(|p| [p[0], p[1]]))
        .collect::<Vec<_>>();
    Tensor::new(&[samples.len(), h, 2], data)
}

/// Objective and gradients of one batch; the loss parameters are in `loss_params`.
fn batch_step(
    model: &Catf,
    loss_params: &ParamMap,
    samples: &[&Sample],
    cfg: &TrainConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<StepLoss> {
    let mc = model.config();
    let inputs: Vec<_> = samples.iter().map(|s| &s.input).collect();
    let batch = Batch::new(&inputs, mc)?;
    let truth = batch_truth(samples)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let lp = Bound::new(&mut tape, loss_params, true);
    let mut opts = RunOptions {
        use_context: cfg.use_context,
        dropout,
    };
    let out = model.forward_train(&mut tape, &p, &batch, &mut opts)?;
    let nll = nll_mixture_tape(&mut tape, out.positions, out.logits, &truth)?;
    let offroad = if cfg.use_offroad_loss {
        let grids: Vec<_> = samples.iter().map(|s| s.grid.as_ref()).collect();
        Some(offroad_tape(&mut tape, out.positions, &grids, cfg.offroad_normalized)?.0)
    } else {
        None
    };
    let total = multitask_tape(&mut tape, nll, offroad, lp.get(LOG_SIGMA1)?, lp.get(LOG_SIGMA2)?)?;
    let mut g = tape.backward(total);
    let mut grads = p.gradients(&tape, &mut g);
    grads.extend(lp.gradients(&tape, &mut g));
    Ok(StepLoss {
        total: tape.value(total).item(),
        nll: tape.value(nll).item(),
        offroad: offroad.map(|v| tape.value(v).item()),
        grads,
    })
}

/// Validation objective and metrics from autoregressive predictions.
fn validate(
    model: &Catf,
    weights: &MultitaskWeights,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(f64, MetricsTable)> {
    let predictor = Predictor::Catf {
        model: model.clone(),
        use_context: cfg.use_context,
    };
    let preds = predictor.predict(samples)?;
    let n = samples.len() as f64;
    let mut nll = 0.0;
    let mut off = 0.0;
    for (s, p) in samples.iter().zip(&preds) {
        // keep credibility strictly positive when a softmax entry underflows
        let cred: Vec<f64> = p.credibility.iter().map(|c| c.max(f64::MIN_POSITIVE)).collect();
        nll += nll_mixture_loss(&s.truth, &p.trajectories, &cred)?;
        off += offroad_loss(&p.trajectories, &s.grid, cfg.offroad_normalized).value;
    }
    let l_o = cfg.use_offroad_loss.then_some(off / n);
    let loss = multitask_loss(nll / n, l_o, weights);
    let table = evaluate_dataset(&records_for(samples, preds))?;
    Ok((loss, table))
}

fn weights_of(loss_params: &ParamMap) -> MultitaskWeights {
    MultitaskWeights {
        log_sigma1: loss_params[LOG_SIGMA1].item(),
        log_sigma2: loss_params[LOG_SIGMA2].item(),
    }
}

/// Train on prepared samples, selecting the epoch with the best validation minADE_3.
///
/// With `out_dir`, the run log is appended to `run_log.ndjson` after every epoch and
/// the best model is written to `model.ckpt` with its sidecar whenever it improves,
/// so a diverged run leaves the last good checkpoint behind.
pub fn fit(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[Sample],
    val: &[Sample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let model_cfg = cfg.model_config(model_cfg);
    let mut model = Catf::new(model_cfg.clone(), cfg.seed)?;
    let mut loss_params: ParamMap = [(LOG_SIGMA1, 0.0), (LOG_SIGMA2, 0.0)]
        .into_iter()
        .map(|(n, v)| (n.to_string(), Tensor::scalar(v)))
        .collect();
    // model and loss parameters share one optimizer
    let mut all = model.params().clone();
    all.extend(loss_params.clone());
    let mut adam = AdamState::new(AdamConfig::default());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("run_log.ndjson"))?))
        }
        None => None,
    };
    let mut log = RunLog::default();
    let mut best: Option<(usize, f64, Catf, MultitaskWeights, MetricsTable)> = None;
    let mut step = 0usize;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum_total, mut sum_nll, mut sum_off, mut batches, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let dropout = (model_cfg.dropout > 0.0).then_some(&mut dropout_rng);
            let loss = batch_step(&model, &loss_params, &samples, cfg, dropout)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            let mut grads = loss.grads;
            if cfg.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.clip_norm);
            }
            step += 1;
            lr = lr_schedule(step, steps_per_epoch, cfg);
            if adam_step(&mut all, &grads, &mut adam, lr)? {
                let (loss_part, model_part): (ParamMap, ParamMap) = std::mem::take(&mut all)
                    .into_iter()
                    .partition(|(k, _)| k.starts_with("loss."));
                model.set_params(model_part.clone())?;
                loss_params = loss_part;
                all = model_part;
                all.extend(loss_params.clone());
            } else {
                skipped += 1;
            }
            sum_total += loss.total;
            sum_nll += loss.nll;
            sum_off += loss.offroad.unwrap_or(0.0);
            batches += 1;
        }
        let weights = weights_of(&loss_params);
        let (val_loss, table) = validate(&model, &weights, val, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, step });
        }
        let nb = batches as f64;
        let record = EpochRecord {
            epoch,
            step,
            lr,
            train_loss: sum_total / nb,
            val_loss,
            min_ade_1: table.min_ade_1,
            min_ade_3: table.min_ade_3,
            offroad_rate: table.offroad_rate_3,
            train_nll: sum_nll / nb,
            train_offroad: cfg.use_offroad_loss.then_some(sum_off / nb),
            log_sigma1: weights.log_sigma1,
            log_sigma2: weights.log_sigma2,
            skipped_steps: skipped,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} minADE1 {:.3} minADE3 {:.3} offroad {:.4}",
            record.train_loss,
            val_loss,
            table.min_ade_1,
            table.min_ade_3,
            table.offroad_rate_3
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record).expect("record serializes"))?;
            f.flush()?;
        }
        log.epochs.push(record);
        let improved = best.as_ref().is_none_or(|b| table.min_ade_3 < b.1);
        if improved {
            if let Some(dir) = out_dir {
                let meta = CheckpointMeta::new(
                    PredictorKind::Catf,
                    model_cfg.clone(),
                    Some(cfg.clone()),
                    weights,
                    epoch,
                );
                let predictor = Predictor::Catf {
                    model: model.clone(),
                    use_context: cfg.use_context,
                };
                save_checkpoint(&dir.join("model.ckpt"), &predictor, &meta)?;
            }
            best = Some((epoch, table.min_ade_3, model.clone(), weights, table));
        } else if epoch - best.as_ref().expect("set on first epoch").0 >= cfg.patience {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let (best_epoch, _, model, weights, best_metrics) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        weights,
        log,
        best_epoch,
        best_metrics,
    })
}

/// Prepare samples, split scenes 70/15/15 and train on the first two parts.
/// Returns the outcome together with the held-out test samples.
pub fn train(
    scenes: &[Scene],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(TrainOutcome, Vec<Sample>)> {
    if scenes.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    cfg.validate()?;
    let split = split_scenes(scenes.len(), cfg.seed)?;
    let pick = |idx: &[usize]| -> Result<Vec<Sample>> {
        let chosen: Vec<Scene> = idx.iter().map(|&i| scenes[i].clone()).collect();
        prepare_samples(&chosen, model_cfg, cfg.grid_cell)
    };
    let (tr, va, te) = (pick(&split.train)?, pick(&split.val)?, pick(&split.test)?);
    Ok((fit(model_cfg, cfg, &tr, &va, out_dir)?, te))
}
