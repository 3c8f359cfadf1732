use std::collections::BTreeMap;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use super::network::BgaModel;
use super::optim::{AdamW, TrainConfig};
use crate::crf::{span_counts, Prf};
use crate::data::{batch_iter, PairedExample};
use crate::error::{Error, Result};
use crate::nn::Session;
use crate::tensor::{split_rng, Graph, ParamStore, Rng};

/// Losses of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub loss: f64,
    pub mner: f64,
    pub recon: Vec<f64>,
    pub cycle: Vec<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One gradient step on the overall objective.
pub fn train_step(
    model: &mut BgaModel,
    opt: &mut AdamW,
    batch: &[&PairedExample],
    rng: &mut Rng,
) -> Result<LossRecord> {
    let mut g = Graph::new();
    let step_rng = split_rng(rng);
    let fwd = {
        let mut s = Session::train(&mut g, &model.store, step_rng, model.config.dropout);
        model.forward_batch(&mut s, batch)?
    };
    let loss = g.value(fwd.loss).item();
    let (mner, recon, cycle) = fwd.values(&g);
    g.backward(fwd.loss)?;
    model.store.zero_grads();
    g.accumulate_param_grads(&mut model.store);
    let lr = opt.current_lr();
    let grad_norm = opt.update(&mut model.store).map_err(|_| {
        Error::invalid(format!(
            "non-finite gradient at step {} (loss {loss}, mner {mner}, recon {recon:?}, cycle {cycle:?})",
            opt.step
        ))
    })?;
    Ok(LossRecord {
        loss,
        mner,
        recon,
        cycle,
        lr,
        grad_norm,
    })
}

/// Precision, recall and F1 overall and per entity type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: Prf,
    pub per_type: BTreeMap<String, Prf>,
}

impl Metrics {
    /// Scores predicted against gold tag sequences. Per-type figures count
    /// only spans of that type on both sides.
    pub fn from_tags<S: AsRef<str>>(
        pred: &[Vec<S>],
        gold: &[Vec<S>],
        types: &[String],
    ) -> Result<Self> {
        let overall = span_counts(pred, gold, None)?.prf();
        let per_type = types
            .iter()
            .map(|t| Ok((t.clone(), span_counts(pred, gold, Some(t))?.prf())))
            .collect::<Result<_>>()?;
        Ok(Self { overall, per_type })
    }
}

/// Tags every example image-free and scores the result.
pub fn evaluate(model: &BgaModel, examples: &[PairedExample]) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut pred = Vec::with_capacity(examples.len());
    let mut gold = Vec::with_capacity(examples.len());
    for ex in examples {
        pred.push(model.labels.decode(&model.infer(&ex.ids)?));
        gold.push(model.labels.decode(&ex.tags));
    }
    Metrics::from_tags(&pred, &gold, model.labels.types())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_mner: f64,
    pub mean_recon: f64,
    pub mean_cycle: f64,
    pub dev: Option<Metrics>,
}

pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the best dev micro-F1 (the last epoch without a dev set).
    pub best_epoch: usize,
    pub best_store: ParamStore,
}

/// Full training run. `on_epoch` sees each record as it completes.
pub fn fit(
    model: &mut BgaModel,
    train: &[PairedExample],
    dev: &[PairedExample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(cfg.clone(), &model.store, steps_per_epoch * cfg.epochs);
    let mut rng = Rng::seed_from_u64(seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        let shuffle = rng.random::<u64>();
        let mut sums = [0.0f64; 4];
        let mut count = 0usize;
        for batch in batch_iter(train, cfg.batch_size, Some(shuffle)) {
            let rec = train_step(model, &mut opt, &batch.examples, &mut rng)?;
            let n = rec.recon.len().max(1) as f64;
            sums[0] += rec.loss;
            sums[1] += rec.mner;
            sums[2] += rec.recon.iter().sum::<f64>() / n;
            sums[3] += rec.cycle.iter().sum::<f64>() / n;
            count += 1;
        }
        let dev_metrics = if dev.is_empty() {
            None
        } else {
            Some(evaluate(model, dev)?)
        };
        let score = dev_metrics.as_ref().map_or(f64::INFINITY, |m| m.overall.f1);
        if best
            .as_ref()
            .is_none_or(|(b, _, _)| score > *b || (score == *b && !score.is_finite()))
        {
            best = Some((score, epoch, model.store.clone()));
        }
        let c = count as f64;
        let rec = EpochRecord {
            epoch,
            mean_loss: sums[0] / c,
            mean_mner: sums[1] / c,
            mean_recon: sums[2] / c,
            mean_cycle: sums[3] / c,
            dev: dev_metrics,
        };
        on_epoch(&rec);
        epochs.push(rec);
    }
    let (best_epoch, best_store) = match best {
        Some((_, e, s)) => (e, s),
        None => (0, model.store.clone()),
    };
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_store,
    })
}
