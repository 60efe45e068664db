//! Mini-batch training loop with per-epoch validation and checkpoint selection.

use alloc::vec::Vec;

use crate::autograd::Graph;
use crate::data::{class_priors, ClassPrior, GroupAssignment, LabeledDataset};
use crate::error::{bail, Error, Result};
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::nn::ParamId;
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which epoch's weights a run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Selection {
    /// Highest validation BScore; the earliest epoch wins ties.
    #[default]
    Bscore,
    /// Highest validation overall accuracy.
    Ovacc,
    /// The final epoch.
    Last,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            sgd: SgdConfig::default(),
            selection: Selection::Bscore,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!(Config, "epochs must be >= 1");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be >= 1");
        }
        self.sgd.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub steps: usize,
}

/// One optimizer plus the step counter driving the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    opt: Sgd,
    prior: ClassPrior,
    base_lr: f64,
    step: usize,
    total_steps: usize,
}

impl Trainer {
    pub fn new(model: &Model, prior: ClassPrior, sgd: SgdConfig, total_steps: usize) -> Result<Self> {
        if prior.num_classes() != model.num_classes {
            bail!(
                Config,
                "prior over {} classes for a {}-class model",
                prior.num_classes(),
                model.num_classes
            );
        }
        let base_lr = sgd.lr;
        Ok(Self {
            opt: Sgd::new(&model.store, sgd)?,
            prior,
            base_lr,
            step: 0,
            total_steps,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps)
    }

    /// Forward, backward and one SGD update on a batch; returns the batch loss.
    pub fn step(&mut self, model: &mut Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let lr = self.current_lr();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let out = model.forward(&mut g, &p, images)?;
        let l = model.loss(&mut g, &out, labels, &self.prior)?;
        let loss = g.value(l).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                lr,
                loss,
            });
        }
        let grads = g.backward(l)?;
        self.opt.step(&mut model.store, &p, &grads, lr);
        self.step += 1;
        Ok(loss)
    }
}

/// Predict every sample of `ds` and score it.
pub fn evaluate(model: &Model, ds: &LabeledDataset, grouping: Option<&GroupAssignment>) -> Result<EvalReport> {
    if ds.num_classes != model.num_classes {
        bail!(
            Config,
            "dataset has {} classes, model {}",
            ds.num_classes,
            model.num_classes
        );
    }
    let preds = model.predict(&ds.images)?;
    EvalReport::from_predictions(&preds, &ds.labels, ds.num_classes, grouping)
}

fn snapshot(model: &Model, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&i| model.store.get(i).tensor.clone()).collect()
}

/// Train `model` on `train`, validating on `val` after every epoch.
///
/// Sample order for epoch `e` comes from `rng.derive(e)`. On return the
/// model holds the weights chosen by `cfg.selection`.
pub fn fit(
    model: &mut Model,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
    rng: &Rng,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.num_classes != model.num_classes || val.num_classes != model.num_classes {
        bail!(
            Config,
            "class count mismatch: model {}, train {}, val {}",
            model.num_classes,
            train.num_classes,
            val.num_classes
        );
    }
    let prior = class_priors(train)?;
    let per_epoch = cfg.steps_per_epoch(train.len());
    let mut trainer = Trainer::new(model, prior, cfg.sgd.clone(), per_epoch * cfg.epochs)?;
    let (_, trainable) = model.partition();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.derive(epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (images, labels) = train.batch(idx);
            total += trainer.step(model, &images, &labels)? * idx.len() as f64;
        }
        let val_report = evaluate(model, val, None)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val: val_report,
        };
        on_epoch(&record);
        let score = match cfg.selection {
            Selection::Bscore => record.val.bscore,
            Selection::Ovacc => record.val.ovacc,
            Selection::Last => epoch as f64,
        };
        if best.as_ref().map_or(true, |(_, s, _)| score > *s) {
            best = Some((epoch, score, snapshot(model, &trainable)));
        }
        history.push(record);
    }
    let (best_epoch, _, weights) = best.expect("at least one epoch");
    for (&id, w) in trainable.iter().zip(weights) {
        model.store.get_mut(id).tensor = w;
    }
    Ok(TrainOutcome {
        history,
        best_epoch,
        steps: trainer.steps_taken(),
    })
}
