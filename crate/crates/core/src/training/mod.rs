//! Initialization, AdamW and the mini-batch training loop.

mod adamw;
mod checkpoint;
mod init;

pub use adamw::{AdamWConfig, AdamWState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, inspect_checkpoint, load_checkpoint, save_checkpoint,
    FORMAT_VERSION,
};
pub use init::TruncatedNormal;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::{argmax, ModelConfig, SentiFormer};
use crate::scalar::Scalar;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub init_std: f64,
    pub init_trunc: f64,
    /// Drop probability inside the transformer layers during training.
    /// Off by default.
    #[serde(default)]
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 200,
            weight_decay: 0.01,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init_std: 0.02,
            init_trunc: 0.04,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if !(self.init_std > 0.0 && self.init_trunc > 0.0) {
            return bad("init_std and init_trunc must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("weight_decay must be >= 0 and adam_eps > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Fresh model with truncated-normal weights drawn from `train.seed`.
pub fn init_model<S: Scalar>(config: ModelConfig, train: &TrainConfig) -> Result<SentiFormer<S>> {
    let mut init = TruncatedNormal::new(train.seed, train.init_std, train.init_trunc);
    SentiFormer::new(config, &mut init)
}

/// One record of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, weighted by batch size.
    pub loss: f64,
    /// Accuracy and macro-F1 of the predictions made during the epoch.
    pub accuracy: f64,
    pub macro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_macro_f1: Option<f64>,
    pub ablation: Vec<String>,
}

/// Mini-batch training with a seeded per-epoch shuffle (the last partial
/// batch is kept). `on_epoch` sees every record and the current model.
pub fn train<S: Scalar>(
    model: &mut SentiFormer<S>,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &SentiFormer<S>) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    eval::check_compatible(model, data)?;
    if let Some(e) = eval_data {
        eval::check_compatible(model, e)?;
    }
    let classes = model.config().classes;
    let ablation: Vec<String> = model
        .config()
        .ablation
        .flags()
        .iter()
        .map(|f| f.name().to_string())
        .collect();
    let opt_cfg = cfg.optimizer();
    let mut opt = AdamWState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let labels = data.labels();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut predicted = Vec::with_capacity(data.len());
        let mut seen_labels = Vec::with_capacity(data.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch::<S>(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            // masks depend only on the seed and the step index
            let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            mask_rng.set_stream(2);
            mask_rng.set_word_pos((opt.step_count() as u128) << 32);
            let (loss, acts) = model.train_loss(&mut tape, &batch, &y, cfg.dropout, mask_rng)?;
            let value = tape.value(loss).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {value} in epoch {epoch}"
                )));
            }
            loss_sum += value * chunk.len() as f64;
            for row in tape.value(acts.logits).data().chunks(classes) {
                predicted.push(argmax(row));
            }
            seen_labels.extend_from_slice(&y);
            tape.backward(loss, model.params_mut())?;
            opt.step(model.params_mut(), &opt_cfg)?;
        }
        let report = EvalReport::from_predictions(&predicted, &seen_labels, classes)?;
        let held_out = eval_data.map(|d| eval::evaluate(model, d)).transpose()?;
        let record = EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            eval_accuracy: held_out.as_ref().map(|r| r.accuracy),
            eval_macro_f1: held_out.as_ref().map(|r| r.macro_f1),
            ablation: ablation.clone(),
        };
        on_epoch(&record, model)?;
        log.push(record);
    }
    Ok(log)
}
