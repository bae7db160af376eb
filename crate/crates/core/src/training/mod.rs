//! Losses, Adam, checkpoints and the epoch loop.

mod adam;
mod checkpoint;
mod config;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{self, Batch, DataError, DatasetSplit, PrefixExample, PAD};
use crate::eval::{self, EvalError};
use crate::model::{forward, ForwardOutput, ModelError, ModelParams, Phase};
use crate::tensor::{Tape, Var};

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, Dtype, CHECKPOINT_MAGIC};
pub use config::{TrainConfig, KEYS as CONFIG_KEYS};

/// Probabilities are clamped here before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("non-finite gradient in `{name}` at entry {index}")]
    NonFiniteGrad { name: String, index: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Mean of `−log max(p_final[target], floor)` over the batch.
pub fn loss_rec(tape: &mut Tape, out: &ForwardOutput, targets: &[usize]) -> Result<Var> {
    let n = tape.value(out.p_final).cols();
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(TrainError::Contract(format!("target {t} outside vocabulary of {n}")));
    }
    let p = tape.pick(out.p_final, targets)?;
    Ok(neg_mean_log(tape, p))
}

/// Mean of `−log p_repeat` on repeat targets and `−log p_explore` otherwise.
pub fn loss_mode(tape: &mut Tape, out: &ForwardOutput, is_repeat: &[bool]) -> Result<Var> {
    let mode = out
        .p_mode
        .ok_or_else(|| TrainError::Contract("mode loss needs the mode predictor".into()))?;
    let labels: Vec<usize> = is_repeat.iter().map(|&r| if r { 0 } else { 1 }).collect();
    let p = tape.pick(mode, &labels)?;
    Ok(neg_mean_log(tape, p))
}

fn neg_mean_log(tape: &mut Tape, p: Var) -> Var {
    let logs = tape.log_clamped(p, LOG_FLOOR);
    let m = tape.mean(logs);
    tape.scale(m, -1.0)
}

/// `L_rec`, plus `L_mode` when `joint` is set.
pub fn total_loss(tape: &mut Tape, out: &ForwardOutput, batch: &Batch, joint: bool) -> Result<Var> {
    let rec = loss_rec(tape, out, &batch.targets)?;
    if !joint {
        return Ok(rec);
    }
    let mode = loss_mode(tape, out, &batch.is_repeat)?;
    Ok(tape.add(rec, mode)?)
}

/// Forward and backward over one batch. Gradients are added onto `params`;
/// the loss value is returned.
pub fn accumulate_gradients(params: &mut ModelParams, batch: &Batch, joint: bool, phase: &mut Phase<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward(&mut tape, params, &bound, batch, phase)?;
    let loss = total_loss(&mut tape, &out, batch, joint)?;
    let value = tape.data(loss)[0];
    tape.backward(loss)?;
    params.absorb_grads(&tape, &bound);
    Ok(value)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mrr20: Option<f64>,
    pub val_recall20: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation MRR@20 (the
    /// last epoch when there is no validation data).
    pub best: ModelParams,
    pub best_epoch: usize,
    pub last: ModelParams,
    pub adam: AdamState,
    pub log: Vec<EpochRecord>,
}

fn stream(epoch: usize, batch: usize) -> u64 {
    ((epoch as u64) << 32) | batch as u64
}

/// Trains from a seeded Xavier init.
///
/// Each epoch shuffles the training examples, groups them into
/// length-homogeneous batches, visits the batches in shuffled order and then
/// scores the validation split. `on_epoch` sees every log row as it is made.
pub fn train(
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut examples = data::unroll(&split.train);
    if examples.is_empty() {
        return Err(TrainError::Data(DataError::EmptyDataset));
    }
    let validation = data::unroll(&split.validation);
    let model_cfg = cfg.model_config(split.vocabulary.len());
    model_cfg.validate()?;
    let mut params = ModelParams::seeded(model_cfg, cfg.seed);
    let mut adam = AdamState::new(&params);
    let dropout = cfg.dropout_config();

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let hyper = AdamHyper {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            clip: cfg.clip,
        };
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        order_rng.set_stream(stream(epoch, 0));
        examples.shuffle(&mut order_rng);
        let mut batches: Vec<Batch> = data::batch(&examples, cfg.batch_size, PAD).collect();
        batches.shuffle(&mut order_rng);

        let mut weighted = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream(epoch, b + 1));
            let mut phase = Phase::Train {
                dropout: &dropout,
                rng: &mut rng,
            };
            let loss = accumulate_gradients(&mut params, batch, cfg.joint_mode_loss, &mut phase)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b + 1 });
            }
            adam_step(&mut params, &mut adam, &hyper)?;
            weighted += loss * batch.size as f64;
        }

        let (val_mrr20, val_recall20) = if validation.is_empty() {
            (None, None)
        } else {
            let r = eval::evaluate(&params, &validation, &[20], false)?;
            (Some(r.mrr(20)), Some(r.recall(20)))
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: weighted / examples.len() as f64,
            val_mrr20,
            val_recall20,
        };
        on_epoch(&record);
        log.push(record);

        let score = val_mrr20.unwrap_or(f64::INFINITY);
        let improved = match &best {
            None => true,
            Some((s, _, _)) => score > *s || val_mrr20.is_none(),
        };
        if improved {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.unwrap_or((0.0, 0, params.clone()));
    Ok(TrainOutcome {
        best: best_params,
        best_epoch,
        last: params,
        adam,
        log,
    })
}

/// Batches examples in input order for gradient checks and scoring.
pub fn batch_of(examples: &[PrefixExample]) -> Batch {
    Batch::from_examples(examples, PAD)
}

#[cfg(test)]
mod tests;
