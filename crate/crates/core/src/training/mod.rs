//! Training objective, optimizer, loop and loss telemetry.

mod log;
mod loss;
mod optim;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use log::{loss_split, read_loss_log, write_split_data, LogRow, LossLog, LossSplit};
pub use loss::{batch_loss, batch_loss_on, instance_terms, LossReport, Parallelism};
pub use optim::{clip_grad_norm, learning_rate, Adam};

use crate::data::{make_batches, Example};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::RngStream;
use crate::order::OrderDistribution;

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e4;

fn d_lr() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    32
}
fn d_one() -> usize {
    1
}
fn d_epochs() -> u64 {
    1
}
fn d_clip() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub warmup: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Stops after this many updates even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default = "d_epochs")]
    pub epochs: u64,
    #[serde(default)]
    pub order: OrderDistribution,
    #[serde(default = "d_one")]
    pub orders_per_instance: usize,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub shuffle: bool,
    #[serde(default = "yes")]
    pub parallel: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.orders_per_instance == 0 {
            return Err(Error::Config(
                "batch_size and orders_per_instance must be positive".into(),
            ));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        self.order.validate()
    }

    pub fn parallelism(&self) -> Parallelism {
        if self.parallel {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub report: LossReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub epochs_completed: u64,
    pub stopped_early: bool,
    pub last: Option<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn epoch_checkpoint(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch-{epoch}.ckpt"))
}

pub fn last_checkpoint(dir: &Path) -> PathBuf {
    dir.join("last.ckpt")
}

/// Runs Adam over `data` for the configured epochs/steps. With `out_dir`,
/// writes `loss.csv`, an initial checkpoint `epoch-0.ckpt`, one checkpoint
/// per completed epoch and `last.ckpt`. `on_step` sees every update and may
/// stop the run.
pub fn train(
    model: &mut Model<f32>,
    data: &[Example],
    cfg: &TrainingConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord, &Model<f32>) -> Result<Control>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let base = RngStream::new(cfg.seed);
    let data_rng = base.split("data");
    let dropout_rng = base.split("dropout");
    let mut opt = Adam::new(model.params());
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(LossLog::create(&dir.join("loss.csv"), model.config().streams)?)
        }
        None => None,
    };
    let mut outcome = TrainOutcome {
        steps: 0,
        epochs_completed: 0,
        stopped_early: false,
        last: None,
        checkpoints: Vec::new(),
    };
    let save = |model: &Model<f32>, path: PathBuf, outcome: &mut TrainOutcome| -> Result<()> {
        model.save(&path)?;
        outcome.checkpoints.push(path);
        Ok(())
    };
    if let Some(dir) = out_dir {
        save(model, epoch_checkpoint(dir, 0), &mut outcome)?;
    }
    let max_steps = cfg.max_steps.unwrap_or(u64::MAX);
    'epochs: for epoch in 1..=cfg.epochs {
        if outcome.steps >= max_steps {
            break;
        }
        let batches = make_batches(
            data,
            cfg.batch_size,
            cfg.order,
            cfg.orders_per_instance,
            cfg.shuffle,
            data_rng.fork(epoch),
        )?;
        for batch in batches {
            let batch = batch?;
            let step = outcome.steps + 1;
            let drop = dropout_rng.fork(step);
            let dropout = (model.config().dropout > 0.0).then_some(&drop);
            let (report, grads) = batch_loss(model, &batch, cfg.order, cfg.parallelism(), true, dropout)?;
            if !report.total.is_finite() || report.total > DIVERGENCE_LOSS {
                return Err(Error::Divergence {
                    step,
                    loss: report.total,
                });
            }
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&grads.expect("gradients requested"));
            let grad_norm = clip_grad_norm(params, cfg.grad_clip);
            if !grad_norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: report.total,
                });
            }
            let lr = learning_rate(cfg.lr, cfg.warmup, step);
            opt.update(params, lr);
            outcome.steps = step;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                grad_norm,
                report,
            };
            if let Some(log) = log.as_mut() {
                log.append(&rec)?;
            }
            let control = on_step(&rec, model)?;
            outcome.last = Some(rec);
            if control == Control::Stop {
                outcome.stopped_early = true;
                break 'epochs;
            }
            if outcome.steps >= max_steps {
                break 'epochs;
            }
        }
        outcome.epochs_completed = epoch;
        if let Some(dir) = out_dir {
            save(model, epoch_checkpoint(dir, epoch), &mut outcome)?;
        }
    }
    if let Some(dir) = out_dir {
        save(model, last_checkpoint(dir), &mut outcome)?;
    }
    Ok(outcome)
}
