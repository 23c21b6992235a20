use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, argmax_rows, auroc_macro, EvalResult};
use super::optim::{Optimizer, OptimizerKind};
use crate::adaptation::AdaptedModel;
use crate::datahub::Dataset;
use crate::error::{Error, Result};
use crate::numcore::exec::{map_indexed, Exec};
use crate::numcore::kernels::softmax_row;
use crate::numcore::rng::seeded;
use crate::numcore::ParamGrads;

fn default_lr() -> f64 {
    1e-3
}

fn default_wd() -> f64 {
    1e-4
}

fn default_eval_every() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 32,
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            optimizer: OptimizerKind::Adamw,
            seed: 0,
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Loss of the step's batch, sampled every `eval_every` steps and at the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub loss: f64,
    /// Hash of every frozen parameter at this step.
    pub frozen_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,frozen_hash\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.9},{}\n", r.step, r.loss, r.frozen_hash));
        }
        s
    }
}

/// Samples per gradient shard. Fixed, so results do not depend on thread count.
const SHARD: usize = 16;

/// Mean loss and gradients over `indices`, computed in fixed shards.
pub fn batch_gradients(
    model: &AdaptedModel,
    data: &Dataset,
    indices: &[usize],
    exec: Exec,
) -> Result<(f64, ParamGrads)> {
    let shards: Vec<&[usize]> = indices.chunks(SHARD).collect();
    let parts = map_indexed(exec, shards.len(), |s| -> Result<_> {
        let (x, y) = data.batch(shards[s])?;
        model.loss_and_grads(&x, &y)
    });
    let total = indices.len() as f64;
    let mut loss = 0.0;
    let mut grads: ParamGrads = Vec::new();
    for (part, shard) in parts.into_iter().zip(&shards) {
        let (l, g) = part?;
        let w = shard.len() as f64 / total;
        loss += w * l;
        if grads.is_empty() {
            grads = g.into_iter().map(|(i, v)| (i, v.into_iter().map(|x| w * x).collect())).collect();
        } else {
            for ((_, acc), (_, v)) in grads.iter_mut().zip(g) {
                acc.iter_mut().zip(v).for_each(|(a, x)| *a += w * x);
            }
        }
    }
    Ok((loss, grads))
}

/// Train the trainable parameters of `model` on the samples `indices` of `data`.
/// Batches are drawn by seeded epoch shuffles.
pub fn train(
    model: &mut AdaptedModel,
    data: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<History> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let mut rng = seeded(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = indices.to_vec();
    let mut cursor = order.len();
    let mut history = History::default();
    let every = cfg.eval_every.max(1);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 1..=cfg.steps {
        batch.clear();
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let take = (cfg.batch_size - batch.len()).min(order.len() - cursor);
            batch.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let (loss, grads) = match batch_gradients(model, data, &batch, exec) {
            Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step, loss: f64::NAN }),
            other => other?,
        };
        if !loss.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { step, loss });
        }
        opt.step(&mut model.params, &grads);
        if step % every == 0 || step == cfg.steps {
            history.records.push(HistoryRecord { step, loss, frozen_hash: model.frozen_digest() });
        }
    }
    Ok(history)
}

/// Logits `[n, K]` (row-major) for the given samples, evaluated in parallel batches.
pub fn predict_logits(model: &AdaptedModel, data: &Dataset, indices: &[usize], exec: Exec) -> Result<Vec<f64>> {
    const EVAL_BATCH: usize = 32;
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let parts = map_indexed(exec, chunks.len(), |c| -> Result<Vec<f64>> {
        let (x, _) = data.batch(chunks[c])?;
        Ok(model.logits(&x)?.into_data())
    });
    let mut out = Vec::with_capacity(indices.len() * model.num_classes());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Accuracy, AUROC (binary or macro one-vs-rest) and mean cross-entropy.
pub fn evaluate(
    model: &AdaptedModel,
    data: &Dataset,
    indices: &[usize],
    split: &str,
    exec: Exec,
) -> Result<EvalResult> {
    if indices.is_empty() {
        return Err(Error::Metric(format!("split {split} is empty")));
    }
    let k = model.num_classes();
    let logits = predict_logits(model, data, indices, exec)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.manifest.entries[i].label).collect();
    let mut probs = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for ((row, out), &y) in logits.chunks(k).zip(probs.chunks_mut(k)).zip(&labels) {
        softmax_row(row, out);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    let preds = argmax_rows(&logits, k);
    Ok(EvalResult {
        split: split.to_string(),
        n: indices.len(),
        accuracy: accuracy(&preds, &labels)?,
        auroc: if k >= 2 { auroc_macro(&probs, k, &labels).ok() } else { None },
        loss: loss / indices.len() as f64,
    })
}
