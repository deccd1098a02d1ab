//! Fully-supervised, few-shot and zero-shot runs on the synthetic benchmark.

use std::collections::BTreeSet;

use crate::config::{Mode, RunConfig};
use crate::error::{AsuError, Result};
use crate::model::{AsuModel, LossMode, TextClassifier};
use crate::rng::Prng;
use crate::su_bank::SemanticBank;
use crate::tensor::ParamStore;
use crate::text_embed::{embed_bank, embed_labels, EmbeddingMatrix};

use super::checkpoint::Checkpoint;
use super::data::{generate_dataset, synthetic_bank, synthetic_classes, SyntheticDataset};
use super::{predict, score, train, EpochLog, Metrics, Objective, TrainReport};

/// Which classes and videos a run trains and evaluates on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    pub train_classes: Vec<usize>,
    pub eval_classes: Vec<usize>,
    pub train_videos: Vec<usize>,
    pub eval_videos: Vec<usize>,
}

impl Task {
    pub fn new(config: &RunConfig, ds: &SyntheticDataset) -> Result<Self> {
        let all: Vec<usize> = (0..ds.classes.len()).collect();
        match config.protocol.mode {
            Mode::Full => Ok(Task {
                train_classes: all.clone(),
                eval_classes: all,
                train_videos: ds.train.clone(),
                eval_videos: ds.val.clone(),
            }),
            Mode::Fewshot => Ok(Task {
                train_classes: all.clone(),
                eval_classes: all,
                train_videos: ds.few_shot_train(config.protocol.shots, config.seed)?,
                eval_videos: ds.val.clone(),
            }),
            Mode::Zeroshot => {
                let held = holdout_classes(ds, config.protocol.holdout, config.seed)?;
                let train_classes: Vec<usize> = all.iter().copied().filter(|c| !held.contains(c)).collect();
                let train_videos = ds
                    .train
                    .iter()
                    .copied()
                    .filter(|&i| train_classes.contains(&ds.videos[i].class))
                    .collect();
                // Held-out classes are never trained on, so all their videos evaluate.
                let eval_videos = (0..ds.videos.len()).filter(|&i| held.contains(&ds.videos[i].class)).collect();
                Ok(Task {
                    train_classes,
                    eval_classes: held,
                    train_videos,
                    eval_videos,
                })
            }
        }
    }

    fn columns(classes: &[usize], total: usize) -> Vec<Option<usize>> {
        let mut cols = vec![None; total];
        for (col, &c) in classes.iter().enumerate() {
            cols[c] = Some(col);
        }
        cols
    }
}

/// `count` classes, chosen by seed, whose every unit also appears in some
/// remaining class.
pub fn holdout_classes(ds: &SyntheticDataset, count: usize, seed: u64) -> Result<Vec<usize>> {
    let n = ds.classes.len();
    if count == 0 || count >= n {
        return Err(AsuError::Config(format!("cannot hold out {count} of {n} classes")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Prng::derive(seed, "holdout").shuffle(&mut order);
    let mut held: Vec<usize> = Vec::new();
    for &c in &order {
        let mut trial = held.clone();
        trial.push(c);
        let seen: BTreeSet<&str> = (0..n)
            .filter(|k| !trial.contains(k))
            .flat_map(|k| ds.classes[k].units())
            .collect();
        if trial.iter().all(|&h| ds.classes[h].units().iter().all(|u| seen.contains(u))) {
            held = trial;
            if held.len() == count {
                held.sort_unstable();
                return Ok(held);
            }
        }
    }
    Err(AsuError::Config(format!(
        "no {count} classes can be held out with all their units seen in training"
    )))
}

/// Everything a run needs besides the weights.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: RunConfig,
    pub bank: SemanticBank,
    pub dataset: SyntheticDataset,
    pub task: Task,
    pub units: EmbeddingMatrix,
    /// Label embeddings of every dataset class, in class order.
    pub labels: EmbeddingMatrix,
}

impl Prepared {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let classes = synthetic_classes(config.data.classes)?;
        let bank = match &config.bank {
            Some(p) => SemanticBank::load(p)?,
            None => synthetic_bank(&classes)?,
        };
        let dataset = generate_dataset(&bank, &classes, &config.data, config.seed)?;
        let d = config.encoder.shared_dim;
        let units = match &config.text.unit_embeddings {
            Some(p) => EmbeddingMatrix::load(p)?.select(&bank.composed_texts())?,
            None => embed_bank(&bank, d, config.text.seed)?,
        };
        let labels = match &config.text.label_embeddings {
            Some(p) => EmbeddingMatrix::load(p)?.select(&dataset.labels())?,
            None => embed_labels(&dataset.labels(), &config.text.prompt, d, config.text.seed)?,
        };
        for (what, m) in [("unit", &units), ("label", &labels)] {
            if m.dim() != d {
                return Err(AsuError::Config(format!("{what} embeddings have dim {}, model dim is {d}", m.dim())));
            }
        }
        let task = Task::new(config, &dataset)?;
        Ok(Prepared {
            config: config.clone(),
            bank,
            dataset,
            task,
            units,
            labels,
        })
    }

    fn label_subset(&self, classes: &[usize]) -> Result<EmbeddingMatrix> {
        let names: Vec<String> = classes.iter().map(|&c| self.dataset.classes[c].label.clone()).collect();
        self.labels.select(&names)
    }

    /// Fresh model; the uni-modal head covers the training classes.
    pub fn init_model(&self) -> Result<(AsuModel, ParamStore)> {
        let mut store = ParamStore::new();
        let head = if self.config.train.loss_mode.uses_head() {
            self.task.train_classes.len()
        } else {
            0
        };
        let model = AsuModel::init(&mut store, self.config.seed, &self.config.model(), Some(&self.units), head)?;
        Ok((model, store))
    }

    fn classifier(&self, classes: &[usize]) -> Result<Option<TextClassifier>> {
        if !self.config.train.loss_mode.uses_text() {
            return Ok(None);
        }
        Ok(Some(TextClassifier::new(
            &self.label_subset(classes)?,
            self.config.train.logit_mode,
            self.config.train.scale,
        )?))
    }

    pub fn train(&self, model: &AsuModel, store: &mut ParamStore, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainReport> {
        let classifier = self.classifier(&self.task.train_classes)?;
        let objective = Objective {
            classifier: classifier.as_ref(),
            loss_mode: self.config.train.loss_mode,
            column_of_class: Task::columns(&self.task.train_classes, self.dataset.classes.len()),
        };
        train(
            model,
            store,
            &self.dataset,
            &self.task.train_videos,
            &objective,
            &self.config.train,
            self.config.seed,
            on_epoch,
        )
    }

    /// Raw logits of the evaluation videos plus their targets.
    pub fn eval_logits(&self, model: &AsuModel, store: &ParamStore, views: usize) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
        let eval = &self.task.eval_classes;
        if self.config.protocol.mode == Mode::Zeroshot && self.config.train.loss_mode == LossMode::UniModal {
            return Err(AsuError::Config("zero-shot evaluation needs label embeddings, not a uni-modal head".into()));
        }
        let classifier = self.classifier(eval)?;
        let objective = Objective {
            classifier: classifier.as_ref(),
            loss_mode: self.config.train.loss_mode,
            column_of_class: Task::columns(eval, self.dataset.classes.len()),
        };
        let logits = predict(
            model,
            store,
            &self.dataset,
            &self.task.eval_videos,
            &objective,
            views,
            self.config.train.batch,
        )?;
        let targets = objective.targets(&self.dataset, &self.task.eval_videos)?;
        Ok((logits, targets))
    }

    pub fn evaluate(&self, model: &AsuModel, store: &ParamStore, views: usize, loss_curve: Vec<f64>) -> Result<Metrics> {
        let (logits, targets) = self.eval_logits(model, store, views)?;
        let names: Vec<String> = self
            .task
            .eval_classes
            .iter()
            .map(|&c| self.dataset.classes[c].label.clone())
            .collect();
        let (top1, top5, per_class) = score(&logits, &targets, &names)?;
        let chance = (self.config.protocol.mode == Mode::Zeroshot).then(|| 1.0 / names.len() as f64);
        Ok(Metrics {
            mode: self.config.protocol.mode.as_str().to_owned(),
            seed: self.config.seed,
            top1,
            top5,
            per_class,
            loss_curve,
            chance,
            views,
            ablation: self.config.ablation.label(),
        })
    }

    pub fn checkpoint(&self, store: &ParamStore) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.config.to_value()?,
            params: store.clone(),
            frozen: vec![("units".into(), self.units.clone()), ("labels".into(), self.labels.clone())],
        })
    }

    /// Model with the checkpoint's weights. The architecture must match.
    pub fn restore(&self, ck: &Checkpoint) -> Result<(AsuModel, ParamStore)> {
        let (model, fresh) = self.init_model()?;
        let fresh_names: Vec<&str> = fresh.names().collect();
        let ck_names: Vec<&str> = ck.params.names().collect();
        if fresh_names != ck_names {
            return Err(AsuError::Config("checkpoint parameters do not match the configured model".into()));
        }
        for p in fresh.iter() {
            if ck.params.tensor(&p.name)?.shape() != p.tensor.shape() {
                return Err(AsuError::Config(format!("checkpoint shape mismatch for {}", p.name)));
            }
        }
        Ok((model, ck.params.clone()))
    }
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
}

/// Trains (unless `skip_training`) and evaluates per `config`.
pub fn run(config: &RunConfig, skip_training: bool, on_epoch: impl FnMut(&EpochLog)) -> Result<RunOutput> {
    let prep = Prepared::new(config)?;
    let (model, mut store) = prep.init_model()?;
    let report = if skip_training {
        TrainReport::default()
    } else {
        prep.train(&model, &mut store, on_epoch)?
    };
    let metrics = prep.evaluate(&model, &store, config.protocol.views, report.loss_curve.clone())?;
    let checkpoint = prep.checkpoint(&store)?;
    Ok(RunOutput {
        metrics,
        report,
        checkpoint,
    })
}
