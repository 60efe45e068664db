//! Training runs: data, model, fit, evaluation and the files a run leaves behind.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ltlab_core::data::{group_split, synth_longtail, GroupAssignment, SplitSet};
use ltlab_core::metrics::EvalReport;
use ltlab_core::model::{HeadConfig, Model};
use ltlab_core::train::{evaluate, fit, EpochRecord};
use ltlab_core::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DatasetSource, ExperimentConfig};
use crate::error::{LabError, Result};
use crate::fsio;
use crate::ltds;

/// Everything a run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    /// Short label for comparison tables, e.g. `scilt` or `ce`.
    pub method: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
    pub train_counts: Vec<usize>,
    pub train_report: EvalReport,
    pub test_report: EvalReport,
    /// Train minus test overall accuracy of the kept weights.
    pub generalization_gap: f64,
    pub checkpoint_sha256: String,
    /// Every frozen parameter still equals its initial value.
    pub frozen_unchanged: bool,
    pub wall_clock_secs: f64,
}

pub fn method_label(head: &HeadConfig) -> String {
    match head {
        HeadConfig::Scilt(c) => match (c.fusion, c.ensemble) {
            (true, true) => "scilt".into(),
            (false, true) => "scilt_no_fusion".into(),
            (true, false) => "scilt_no_ensemble".into(),
            (false, false) => "scilt_no_fusion_no_ensemble".into(),
        },
        HeadConfig::Single(c) => c.loss.kind.as_str().into(),
    }
}

pub fn load_data(source: &DatasetSource) -> Result<SplitSet> {
    match source {
        DatasetSource::Synth { profile, params, seed } => Ok(synth_longtail(profile, params, &Rng::new(*seed))?),
        DatasetSource::File { path } => ltds::read_split_set(path),
    }
}

/// Build the model a config describes, before any training.
pub fn initial_model(cfg: &ExperimentConfig, num_classes: usize) -> Result<Model> {
    let mut model = Model::init(&cfg.model, num_classes, &Rng::new(cfg.seed).derive(1))?;
    if let Some(p) = &cfg.init_checkpoint {
        let source = checkpoint::load(p)?;
        checkpoint::inject_backbone(&mut model, &source)?;
    }
    Ok(model)
}

/// Train and evaluate in memory.
pub fn train_run(cfg: &ExperimentConfig, data: &SplitSet) -> Result<(RunRecord, Model)> {
    cfg.validate()?;
    let start = Instant::now();
    let num_classes = data.train.num_classes;
    let [h, w, c] = data.train.image_shape();
    let vit = &cfg.model.vit;
    if h != vit.image_size || w != vit.image_size || c != vit.channels {
        return Err(LabError::Config(format!(
            "dataset images {h}x{w}x{c} do not match the backbone's {0}x{0}x{1}",
            vit.image_size, vit.channels
        )));
    }
    let init = initial_model(cfg, num_classes)?;
    let mut model = init.clone();
    let outcome = fit(
        &mut model,
        &data.train,
        &data.val,
        &cfg.train,
        &Rng::new(cfg.seed).derive(2),
        |r| {
            log::info!(
                "{} epoch {}: loss {:.4}, val ovacc {:.1} macro {:.1} bscore {:.1}",
                cfg.name,
                r.epoch,
                r.train_loss,
                r.val.ovacc,
                r.val.macro_acc,
                r.val.bscore
            )
        },
    )?;
    let train_counts = data.train.class_counts();
    let grouping = grouping_for(cfg, &train_counts)?;
    let train_report = evaluate(&model, &data.train, Some(&grouping))?;
    let test_report = evaluate(&model, &data.test, Some(&grouping))?;
    let (frozen, _) = model.partition();
    let frozen_unchanged = frozen
        .iter()
        .all(|&id| model.store.get(id).tensor.bitwise_eq(&init.store.get(id).tensor));
    let record = RunRecord {
        config: cfg.clone(),
        method: method_label(&cfg.model.head),
        epochs: outcome.history,
        best_epoch: outcome.best_epoch,
        steps: outcome.steps,
        train_counts,
        generalization_gap: train_report.ovacc - test_report.ovacc,
        train_report,
        test_report,
        checkpoint_sha256: checkpoint::content_hash(&model),
        frozen_unchanged,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((record, model))
}

pub fn grouping_for(cfg: &ExperimentConfig, train_counts: &[usize]) -> Result<GroupAssignment> {
    Ok(group_split(train_counts, cfg.grouping.t_many, cfg.grouping.t_few)?)
}

/// Files written by [`run_and_save`].
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub record: PathBuf,
    pub checkpoint: PathBuf,
    pub eval: PathBuf,
    pub per_class: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            record: dir.join("run.json"),
            checkpoint: dir.join("checkpoint.json"),
            eval: dir.join("eval.json"),
            per_class: dir.join("per_class.csv"),
        }
    }
}

/// Train, then write the run record, checkpoint, test report and per-class CSV.
pub fn run_and_save(cfg: &ExperimentConfig) -> Result<(RunRecord, RunPaths)> {
    let data = load_data(&cfg.dataset)?;
    let (record, model) = train_run(cfg, &data)?;
    let paths = RunPaths::in_dir(&fsio::resolve_output(&cfg.output_dir));
    checkpoint::save(&model, &paths.checkpoint)?;
    fsio::write_json(&paths.eval, &record.test_report)?;
    write_per_class_csv(&paths.per_class, &record.test_report, &record.train_counts)?;
    fsio::write_json(&paths.record, &record)?;
    Ok((record, paths))
}

/// One row per class: `class_id, count, accuracy, group`, with `count` the training count.
pub fn per_class_csv(report: &EvalReport, train_counts: &[usize]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class_id", "count", "accuracy", "group"])?;
    for (k, acc) in report.per_class.iter().enumerate() {
        let group = report
            .group_tags
            .as_ref()
            .and_then(|t| t.get(k))
            .map_or("", |g| g.as_str());
        let count = train_counts.get(k).copied().unwrap_or(report.class_counts[k]);
        w.write_record([k.to_string(), count.to_string(), acc.to_string(), group.to_owned()])?;
    }
    w.into_inner().map_err(|e| LabError::Config(e.to_string()))
}

pub fn write_per_class_csv(path: &Path, report: &EvalReport, train_counts: &[usize]) -> Result<()> {
    fsio::atomic_write(path, &per_class_csv(report, train_counts)?)
}
