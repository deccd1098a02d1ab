//! Training loop, evaluation and metrics.

pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod protocol;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{AsuError, Result};
use crate::model::{AsuModel, LogitMode, LossMode, TextClassifier};
use crate::rng::Prng;
use crate::tensor::ParamStore;
use crate::video_decoder::multi_view_aggregate;

use data::SyntheticDataset;
use optim::{AdamW, LrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr_backbone: f64,
    pub base_lr_rest: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub loss_mode: LossMode,
    pub logit_mode: LogitMode,
    pub scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 5,
            base_lr_backbone: 1e-4,
            base_lr_rest: 1e-3,
            weight_decay: 0.001,
            batch: 16,
            loss_mode: LossMode::CrossModal,
            logit_mode: LogitMode::CosineScaled,
            scale: 30.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(AsuError::Config(format!(
                "need 0 <= warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr_backbone > 0.0 && self.base_lr_rest > 0.0) {
            return Err(AsuError::Config("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(AsuError::Config("weight_decay must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(AsuError::Config("batch must be at least 1".into()));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(AsuError::Config("logit scale must be positive".into()));
        }
        Ok(())
    }
}

/// One progress line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr_backbone: f64,
    pub lr_rest: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Epoch-averaged training loss.
    pub loss_curve: Vec<f64>,
    /// Largest gradient magnitude that reached the frozen text matrices.
    pub frozen_grad_max: f64,
    pub steps: usize,
}

/// What a batch is scored against.
pub struct Objective<'a> {
    pub classifier: Option<&'a TextClassifier>,
    pub loss_mode: LossMode,
    /// Logit column of each dataset class, `None` for classes outside the task.
    pub column_of_class: Vec<Option<usize>>,
}

impl Objective<'_> {
    fn targets(&self, ds: &SyntheticDataset, batch: &[usize]) -> Result<Vec<usize>> {
        batch
            .iter()
            .map(|&i| {
                let c = ds.videos[i].class;
                self.column_of_class
                    .get(c)
                    .copied()
                    .flatten()
                    .ok_or_else(|| AsuError::Invalid(format!("class {c} is not part of this task")))
            })
            .collect()
    }

    /// Logits `[B × I]` plus the frozen label node when text is used.
    fn logits(&self, model: &AsuModel, tape: &mut Tape, store: &ParamStore, z: Var, training: bool) -> Result<(Var, Option<Var>)> {
        let text = |tape: &mut Tape| -> Result<(Var, Var)> {
            self.classifier
                .ok_or_else(|| AsuError::Config("cross-modal logits need label embeddings".into()))?
                .logits(tape, z)
        };
        match self.loss_mode {
            LossMode::CrossModal => text(tape).map(|(l, c)| (l, Some(c))),
            LossMode::UniModal => Ok((model.uni_logits(tape, store, z)?, None)),
            LossMode::Ensemble if training => {
                let (l, c) = text(tape)?;
                let u = model.uni_logits(tape, store, z)?;
                Ok((tape.add(l, u)?, Some(c)))
            }
            LossMode::Ensemble => {
                let (l, c) = text(tape)?;
                match model.uni_logits(tape, store, z) {
                    Ok(u) if tape.shape(u) == tape.shape(l) => Ok((tape.add(l, u)?, Some(c))),
                    _ => Ok((l, Some(c))),
                }
            }
        }
    }

    /// Training loss for a batch; the ensemble sums the two cross-entropies.
    fn loss(&self, model: &AsuModel, tape: &mut Tape, store: &ParamStore, z: Var, targets: &[usize]) -> Result<(Var, Option<Var>)> {
        match self.loss_mode {
            LossMode::Ensemble => {
                let classifier = self
                    .classifier
                    .ok_or_else(|| AsuError::Config("ensemble loss needs label embeddings".into()))?;
                let (l, c) = classifier.logits(tape, z)?;
                let cross = tape.cross_entropy(l, targets)?;
                let u = model.uni_logits(tape, store, z)?;
                let uni = tape.cross_entropy(u, targets)?;
                Ok((tape.add(cross, uni)?, Some(c)))
            }
            _ => {
                let (l, c) = self.logits(model, tape, store, z, true)?;
                Ok((tape.cross_entropy(l, targets)?, c))
            }
        }
    }
}

fn max_abs_grad(tape: &Tape, v: Option<Var>) -> f64 {
    v.and_then(|v| tape.grad(v))
        .map(|g| g.data().iter().fold(0.0f64, |m, x| m.max(x.abs() as f64)))
        .unwrap_or(0.0)
}

/// Trains `model` on `train` (indices into `ds`) with shuffled minibatches of
/// single canonical clips. `on_epoch` receives one log per epoch.
pub fn train(
    model: &AsuModel,
    store: &mut ParamStore,
    ds: &SyntheticDataset,
    train: &[usize],
    objective: &Objective,
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(AsuError::Invalid("empty training set".into()));
    }
    let per_epoch = train.len().div_ceil(config.batch);
    let total = per_epoch * config.epochs;
    let schedule = LrSchedule {
        base_backbone: config.base_lr_backbone,
        base_rest: config.base_lr_rest,
        warmup: per_epoch * config.warmup_epochs,
        // Update i uses the rate at i + 1, so the last update still moves.
        total: total + 1,
    };
    let mut opt = AdamW::new(config.weight_decay);
    let mut report = TrainReport::default();
    let frames = ds.spec.frames;
    let mut order = train.to_vec();
    let mut step = 0;
    for epoch in 0..config.epochs {
        Prng::derive(seed, &format!("epoch/{epoch}")).shuffle(&mut order);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch) {
            let clips = ds.batch(batch, 1, 0)?;
            let targets = objective.targets(ds, batch)?;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, store, &clips, batch.len(), frames)?;
            let (loss, labels) = objective.loss(model, &mut tape, store, out.video.z, &targets)?;
            tape.backward(loss)?;
            report.frozen_grad_max = report
                .frozen_grad_max
                .max(max_abs_grad(&tape, out.units))
                .max(max_abs_grad(&tape, labels));
            tape.write_param_grads(store);
            step += 1;
            opt.step(store, |name| schedule.lr_for(step, name))?;
            sum += tape.value(loss).data()[0] as f64 * batch.len() as f64;
        }
        let loss = sum / train.len() as f64;
        report.loss_curve.push(loss);
        let (lr_backbone, lr_rest) = schedule.at(step);
        on_epoch(&EpochLog {
            epoch: epoch + 1,
            loss,
            lr_backbone,
            lr_rest,
        });
    }
    report.steps = step;
    Ok(report)
}

/// Per-video class logits, averaged over `views` temporal clips.
pub fn predict(
    model: &AsuModel,
    store: &ParamStore,
    ds: &SyntheticDataset,
    videos: &[usize],
    objective: &Objective,
    views: usize,
    batch: usize,
) -> Result<Vec<Vec<f32>>> {
    if views == 0 {
        return Err(AsuError::Invalid("views must be at least 1".into()));
    }
    let mut per_view: Vec<Vec<Vec<f32>>> = vec![Vec::new(); videos.len()];
    let frames = ds.spec.frames;
    for view in 0..views {
        for (chunk_no, chunk) in videos.chunks(batch.max(1)).enumerate() {
            let clips = ds.batch(chunk, views, view)?;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, store, &clips, chunk.len(), frames)?;
            let (logits, _) = objective.logits(model, &mut tape, store, out.video.z, false)?;
            let l = tape.value(logits);
            for r in 0..chunk.len() {
                per_view[chunk_no * batch.max(1) + r].push(l.row(r).to_vec());
            }
        }
    }
    per_view.iter().map(|v| multi_view_aggregate(v)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: String,
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
    pub per_class: BTreeMap<String, f64>,
    pub loss_curve: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chance: Option<f64>,
    pub views: usize,
    pub ablation: String,
}

/// Top-1 and top-5 accuracy and per-class top-1 from logits. A target's rank
/// counts the classes scoring strictly higher.
pub fn score(logits: &[Vec<f32>], targets: &[usize], class_names: &[String]) -> Result<(f64, f64, BTreeMap<String, f64>)> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(AsuError::Invalid(format!("{} logit rows for {} targets", logits.len(), targets.len())));
    }
    let (mut hit1, mut hit5) = (0usize, 0usize);
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (row, &t) in logits.iter().zip(targets) {
        let name = class_names
            .get(t)
            .ok_or_else(|| AsuError::Invalid(format!("target {t} out of {} classes", class_names.len())))?;
        let rank = row.iter().filter(|&&v| v > row[t]).count();
        let e = per.entry(name.clone()).or_default();
        e.1 += 1;
        if rank == 0 {
            hit1 += 1;
            e.0 += 1;
        }
        if rank < 5 {
            hit5 += 1;
        }
    }
    let n = targets.len() as f64;
    let per_class = per.into_iter().map(|(k, (h, c))| (k, h as f64 / c as f64)).collect();
    Ok((hit1 as f64 / n, hit5 as f64 / n, per_class))
}

pub fn metrics_json(m: &Metrics) -> Result<String> {
    let mut s = serde_json::to_string_pretty(m)?;
    s.push('\n');
    Ok(s)
}
