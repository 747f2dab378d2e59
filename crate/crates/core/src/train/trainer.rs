use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Dropout;
use crate::metrics::MetricReport;
use crate::model::Model;
use crate::params::Ctx;
use crate::rng;
use crate::synth::Bag;
use crate::tensor::{Real, Tensor};

use super::{cosine_lr, weighted_sampler, AdamW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub patience: usize,
    /// Epoch count when there is no validation set.
    pub epochs_no_val: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout_features: f64,
    pub dropout_ff: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            max_epochs: 20,
            min_epochs: 10,
            patience: 5,
            epochs_no_val: 10,
            batch_size: 1,
            seed: 0,
            dropout_features: 0.1,
            dropout_ff: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_epochs > self.max_epochs {
            return Err(Error::config(format!(
                "min_epochs = {} exceeds max_epochs = {}",
                self.min_epochs, self.max_epochs
            )));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.batch_size != 1 {
            return Err(Error::config("only batch_size = 1 is supported"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr and weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn dropout(&self) -> Dropout {
        Dropout {
            features: self.dropout_features,
            ff: self.dropout_ff,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, when validating.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    /// `epoch,train_loss,val_metric,lr`; `val_metric` is empty without
    /// validation.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_metric,lr")?;
        for e in &self.epochs {
            let val = e.val_metric.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", e.epoch, e.train_loss, val, e.lr)?;
        }
        Ok(())
    }
}

/// Per-epoch validation callback: returns the metric to maximize.
pub type Monitor<'a, T> = dyn FnMut(&Model<T>, usize) -> Result<f64> + 'a;

/// Trains with early stopping on the validation split when one is given
/// (AUROC for binary tasks, balanced accuracy otherwise).
pub fn train<T: Real>(model: &mut Model<T>, bags: &[Bag], val: Option<&[Bag]>, cfg: &TrainConfig) -> Result<History> {
    match val {
        Some(v) if !v.is_empty() => {
            let mut monitor = |m: &Model<T>, _: usize| Ok(evaluate(m, v)?.report.monitored());
            train_with(model, bags, Some(&mut monitor), cfg)
        }
        _ => train_with(model, bags, None, cfg),
    }
}

/// The training loop. With a monitor, runs up to `max_epochs` and stops
/// once the metric has failed to improve on `patience` epochs after
/// `min_epochs`, then restores the best parameters. Without one, runs
/// exactly `epochs_no_val` epochs.
pub fn train_with<T: Real>(
    model: &mut Model<T>,
    bags: &[Bag],
    mut monitor: Option<&mut Monitor<'_, T>>,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if bags.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let c = model.cfg.num_classes();
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let feats: Vec<Tensor<T>> = bags.iter().map(|b| b.features.cast()).collect();
    let mut sampler = rng::child(cfg.seed, rng::stream::SAMPLER);
    let mut drop_rng = rng::child(cfg.seed, rng::stream::DROPOUT);
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let drop = cfg.dropout();

    let planned = if monitor.is_some() { cfg.max_epochs } else { cfg.epochs_no_val };
    let total = planned * bags.len();
    let mut step = 0;
    let mut history = History::default();
    let mut best: Option<(f64, crate::params::ParamStore<T>)> = None;
    let mut stale = 0;

    for epoch in 1..=planned {
        let order = weighted_sampler(&labels, c, &mut sampler)?;
        let mut loss_sum = 0.0;
        let mut lr_t = cfg.lr;
        for (s, &i) in order.iter().enumerate() {
            lr_t = cosine_lr(step, total, cfg.lr);
            let grads = {
                let mut ctx = Ctx::new(&model.store, true, true, &mut drop_rng);
                let x = ctx.graph.constant(feats[i].clone());
                let out = model.forward(&mut ctx, x, drop)?;
                let loss = ctx.graph.cross_entropy_with_logits(out.agg.logits, labels[i])?;
                let lv = ctx.graph.value(loss).data()[0].f64();
                if !lv.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step: s });
                }
                loss_sum += lv;
                let g = ctx.graph.backward(loss)?;
                ctx.param_grads(&g)
            };
            opt.update(&mut model.store, &grads, lr_t)?;
            step += 1;
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_metric: None,
            lr: lr_t,
        };
        if let Some(m) = monitor.as_deref_mut() {
            let metric = m(model, epoch)?;
            record.val_metric = Some(metric);
            if best.as_ref().is_none_or(|(b, _)| metric > *b) {
                best = Some((metric, model.store.clone()));
                history.best_epoch = Some(epoch);
                stale = 0;
            } else if epoch > cfg.min_epochs {
                stale += 1;
            }
        }
        history.epochs.push(record);
        if stale >= cfg.patience {
            history.stopped_early = epoch < planned;
            break;
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub report: MetricReport,
}

/// Inference over `bags` (parallel across bags).
pub fn evaluate<T: Real>(model: &Model<T>, bags: &[Bag]) -> Result<Evaluation> {
    let probs = bags
        .par_iter()
        .map(|b| model.predict_proba(&b.features.cast()))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let report = MetricReport::compute(&probs, &labels, model.cfg.num_classes())?;
    Ok(Evaluation { probs, labels, report })
}
