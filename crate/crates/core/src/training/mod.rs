//! Training with optional per-language class weights and masked-input
//! entropy regularisation; validation-loss model selection; evaluation.

mod eval;
mod loss;
mod weights;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use eval::{evaluate, EvalMetrics, LanguageMetrics};
pub use loss::{
    grad_check, loss, loss_and_grad, neg_entropy, GradCheckReport, LossParts, GRAD_CHECK_REL_FLOOR,
    GRAD_CHECK_STEP, PROB_FLOOR,
};
pub use weights::{compute_weights, WeightTable};

use crate::corpus::{cell_counts, max_len, Example, Vocab};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    None,
    PerLanguage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; decays linearly to zero over all steps.
    pub learning_rate: f64,
    pub weighting: Weighting,
    /// Coefficient of the masked-input entropy term.
    pub mask_entropy_coeff: f64,
    pub seed: u64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub validate_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.1,
            weighting: Weighting::None,
            mask_entropy_coeff: 0.0,
            seed: 0,
            validate_every: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("validate_every must be positive".into()));
        }
        if self.mask_entropy_coeff.is_nan() || self.mask_entropy_coeff < 0.0 {
            return Err(Error::Config("mask_entropy_coeff must be ≥ 0".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at step `t` of `total`: `lr0 · (1 − t / total)`.
pub fn learning_rate(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - step as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (first minimum of the
    /// validation loss); `None` when no epoch ran.
    pub selected_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub total_steps: usize,
    pub weights: Option<WeightTable>,
}

/// Mean (optionally weighted) cross-entropy of `params` over `data`.
pub fn dataset_loss(
    params: &ModelParams,
    data: &[Example],
    weights: Option<&WeightTable>,
) -> Result<f64> {
    let refs: Vec<&Example> = data.iter().collect();
    Ok(loss(params, &refs, weights, 0.0, 1)?.cross_entropy)
}

/// Trains a fresh model on `data`, selecting the epoch with the lowest
/// validation loss on `val`.
///
/// With [`Weighting::PerLanguage`] the weight table is computed from the
/// cell counts of `data` and applied to both training and validation
/// losses. Each step draws an all-mask length uniformly from
/// `1..=max_len(data)` for the entropy term.
pub fn train(
    vocab: &Vocab,
    data: &[Example],
    val: &[Example],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    let n_classes = vocab.n_classes();
    let init = ModelParams::init(vocab, n_classes, &config.model, config.seed)?;
    if config.epochs == 0 {
        let report = TrainReport {
            epochs: Vec::new(),
            selected_epoch: None,
            best_val_loss: None,
            total_steps: 0,
            weights: None,
        };
        return Ok((init, report));
    }
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation data"));
    }
    for ex in data.iter().chain(val) {
        init.check_tokens(&ex.tokens)?;
        if ex.label >= n_classes || ex.language >= vocab.n_languages() {
            return Err(Error::VocabMismatch(format!(
                "example `{}` has language {} / label {} outside the vocabulary",
                ex.id, ex.language, ex.label
            )));
        }
    }

    let weights = match config.weighting {
        Weighting::None => None,
        Weighting::PerLanguage => Some(compute_weights(&cell_counts(
            data,
            vocab.n_languages(),
            n_classes,
        ))?),
    };
    let longest = max_len(data).max(1);
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;

    let mut params = init;
    let mut grad = vec![0.0; params.as_slice().len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng::stream(config.seed, "train/shuffle");
    let mut mask_rng = rng::stream(config.seed, "train/mask_len");
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let mask_len = mask_rng.random_range(1..=longest);
            let parts = loss_and_grad(
                &params,
                &batch,
                weights.as_ref(),
                config.mask_entropy_coeff,
                mask_len,
                &mut grad,
            )
            .map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence {
                    epoch,
                    step,
                    detail,
                },
                other => other,
            })?;
            epoch_loss += parts.total * batch.len() as f64;
            let lr = learning_rate(config.learning_rate, step, total_steps);
            for (p, g) in params.as_mut_slice().iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            params.round_to_f32();
            if let Some(i) = params.as_slice().iter().position(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("parameter {i} became non-finite"),
                });
            }
            step += 1;
        }

        let validate = epoch % config.validate_every == 0 || epoch == config.epochs;
        let val_loss = if validate {
            let v = dataset_loss(&params, val, weights.as_ref())?;
            if best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                best = Some((epoch, v, params.clone()));
            }
            Some(v)
        } else {
            None
        };
        records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / data.len() as f64,
            val_loss,
        });
    }

    let (selected, best_loss, selected_params) = best.expect("last epoch is always validated");
    let report = TrainReport {
        epochs: records,
        selected_epoch: Some(selected),
        best_val_loss: Some(best_loss),
        total_steps,
        weights,
    };
    Ok((selected_params, report))
}
