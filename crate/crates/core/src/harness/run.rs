use serde::Serialize;

use super::model::{Method, Model};
use super::task::SyntheticTask;
use crate::error::{DotaError, Result};
use crate::tensor::DenseTensor;

/// Optimization settings for a single run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hyper {
    pub steps: usize,
    pub lr: f64,
    pub eval_every: usize,
    /// DoTA bond-rank threshold `R`.
    pub rank: usize,
    pub lora_rank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
}

/// Loss curve of one `(task, method, seed)` run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    pub method: Method,
    pub seed: u64,
    pub hyper: Hyper,
    pub trainable_params: usize,
    pub records: Vec<LogRecord>,
    /// Step at which a non-finite loss stopped the run.
    pub diverged_at: Option<usize>,
}

impl TrainLog {
    pub fn final_eval_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.eval_loss)
    }

    pub fn initial_eval_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.eval_loss)
    }

    /// CSV with header `step,train_loss,eval_loss`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record(["step", "train_loss", "eval_loss"])?;
        }
        let bytes = w.into_inner().map_err(|e| DotaError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Mean squared error over all elements.
pub fn mse(pred: &DenseTensor<f64>, target: &DenseTensor<f64>) -> Result<f64> {
    let diff = pred.sub(target)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

/// `∂ mse / ∂ pred`.
fn mse_grad(pred: &DenseTensor<f64>, target: &DenseTensor<f64>) -> Result<DenseTensor<f64>> {
    let n = pred.len() as f64;
    Ok(pred.sub(target)?.scale(2.0 / n))
}

/// Trains `method` on `task` with plain gradient descent over the task's
/// seeded batches.
///
/// A record is logged at step 0, every `eval_every` steps and at the final
/// step. `train_loss` is the loss on that step's training batch before the
/// update. A non-finite loss ends the run early with `diverged_at` set.
pub fn run_experiment(task: &SyntheticTask, method: Method, hyper: &Hyper) -> Result<TrainLog> {
    if hyper.eval_every == 0 {
        return Err(DotaError::Parameter("eval_every must be at least 1".into()));
    }
    if !(hyper.lr.is_finite() && hyper.lr > 0.0) {
        return Err(DotaError::Parameter("learning rate must be positive".into()));
    }
    let mut model = Model::init(
        method,
        task.w0(),
        &task.spec().shape,
        hyper.rank,
        hyper.lora_rank,
        task.seed(),
    )?;
    let (eval_x, eval_y) = task.eval_batch();
    let mut log = TrainLog {
        method,
        seed: task.seed(),
        hyper: hyper.clone(),
        trainable_params: model.trainable_params(),
        records: Vec::new(),
        diverged_at: None,
    };

    for step in 0..=hyper.steps {
        let (x, y) = task.train_batch(step)?;
        let pred = model.forward(&x)?;
        let train_loss = mse(&pred, &y)?;
        if step % hyper.eval_every == 0 || step == hyper.steps {
            let eval_loss = mse(&model.forward(eval_x)?, eval_y)?;
            if !(train_loss.is_finite() && eval_loss.is_finite()) {
                log.diverged_at = Some(step);
                break;
            }
            log.records.push(LogRecord {
                step,
                train_loss,
                eval_loss,
            });
        } else if !train_loss.is_finite() {
            log.diverged_at = Some(step);
            break;
        }
        if step == hyper.steps {
            break;
        }
        model.step(&x, &mse_grad(&pred, &y)?, hyper.lr)?;
    }
    Ok(log)
}
