//! Mini-batch training, evaluation and cross-validation.

mod cv;
mod optim;

pub use cv::{
    block_split_sweep, check_splits, run_cross_validation, stratified_folds, write_sweep_csv, CvResult, CvSummary, FoldReport,
    SweepRow,
};
pub use optim::{learning_rate, AdamW, LrSchedule};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{preprocess_view, CaseRecord, Label, VIEWS};
use crate::error::{Error, Result};
use crate::model::{logits, malignancy_score, predict_logits, ModelConfig, ParamStore};
use crate::rng::{indexed_substream, substream_seed};
use crate::tensor::{Graph, Parameters, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// Linear ramp length, in epochs, before the schedule proper starts.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 5e-4,
            weight_decay: 0.05,
            lr_schedule: LrSchedule::Cosine,
            warmup_epochs: 0,
            seed: 0,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// A case with its views already preprocessed for one model config.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub case_id: String,
    pub views: Vec<Tensor>,
    pub label: Label,
}

pub fn prepare_cases(cases: &[CaseRecord], cfg: &ModelConfig) -> Result<Vec<PreparedCase>> {
    cases
        .par_iter()
        .map(|c| {
            Ok(PreparedCase {
                case_id: c.case_id.clone(),
                views: VIEWS
                    .iter()
                    .map(|&v| preprocess_view(c.view(v), cfg))
                    .collect::<Result<_>>()?,
                label: c.label,
            })
        })
        .collect()
}

/// `-log softmax(logits)[label]` for a length-2 logit vector.
pub fn cross_entropy(logits: [f64; 2], label: Label) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[label.index()]
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Tensors that take weight decay: matrices, but not the position table.
fn decay_mask(params: &ParamStore) -> Vec<bool> {
    params
        .named_tensors()
        .iter()
        .map(|(name, t)| t.shape().len() >= 2 && !name.ends_with("pos_embed"))
        .collect()
}

/// Loss and parameter gradients for a single case.
fn case_gradient(params: &ParamStore, cfg: &ModelConfig, case: &PreparedCase) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let p = params.register(&mut g, true);
    let out = logits(&mut g, &case.views, &p, cfg)?;
    let loss = g.cross_entropy(out, case.label.index())?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let mut grads = Vec::new();
    p.visit(&mut |_, &v| grads.push(g.grad_tensor(v).into_data()));
    Ok((value, grads))
}

/// Trains a freshly initialised model on `cases`.
///
/// Each batch's per-case gradients may be computed in parallel, but they are
/// always summed in batch order, so results do not depend on thread count.
pub fn train_model(cases: &[PreparedCase], cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if cases.is_empty() {
        return Err(Error::config("cannot train on an empty case list"));
    }
    let mut params = ParamStore::init(cfg, substream_seed(tcfg.seed, "init", 0))?;
    let decay = decay_mask(&params);
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(&sizes, tcfg.weight_decay);
    let batches_per_epoch = cases.len().div_ceil(tcfg.batch_size);
    let total = tcfg.epochs * batches_per_epoch;
    let warmup = tcfg.warmup_epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);
    let mut step = 0;

    for epoch in 0..tcfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut indexed_substream(tcfg.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let results: Vec<_> = chunk
                .par_iter()
                .map(|&i| case_gradient(&params, cfg, &cases[i]))
                .collect::<Result<_>>()?;
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let inv = 1.0 / chunk.len() as f64;
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b });
                }
                loss_sum += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, x) in acc.iter_mut().zip(gi) {
                        *a += x * inv;
                    }
                }
            }
            let lr = learning_rate(tcfg.learning_rate, tcfg.lr_schedule, step, total, warmup);
            opt.step(&mut params.tensors_mut(), &grads, &decay, lr);
            step += 1;
        }
        let mean = loss_sum / cases.len() as f64;
        log::info!("epoch {:>4}  loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: String,
    /// Probability of the malignant class.
    pub score: f64,
    pub pred: u8,
    pub label: u8,
}

/// Scores cases; a score of exactly 0.5 predicts benign.
pub fn evaluate(params: &ParamStore, cfg: &ModelConfig, cases: &[PreparedCase]) -> Result<Vec<Prediction>> {
    cases
        .par_iter()
        .map(|c| {
            let l = predict_logits(params, cfg, &c.views)?;
            let score = malignancy_score(l);
            Ok(Prediction {
                case_id: c.case_id.clone(),
                score,
                pred: u8::from(score > 0.5),
                label: c.label.index() as u8,
            })
        })
        .collect()
}
