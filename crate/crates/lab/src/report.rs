//! Comparison tables over finished runs.

use std::path::Path;

use ltlab_core::metrics::{bscore, GroupAccuracy};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::fsio;
use crate::run::RunRecord;

/// One row of the comparison table, at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub method: String,
    pub ovacc: f64,
    #[serde(rename = "macro")]
    pub macro_acc: f64,
    pub bscore: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl ReportRow {
    pub fn from_record(record: &RunRecord) -> Self {
        let t = &record.test_report;
        let g = t.groups.unwrap_or(GroupAccuracy {
            many: None,
            medium: None,
            few: None,
        });
        Self {
            run: record.config.name.clone(),
            method: record.method.clone(),
            ovacc: t.ovacc,
            macro_acc: t.macro_acc,
            bscore: bscore(t.ovacc, t.macro_acc),
            many: g.many,
            medium: g.medium,
            few: g.few,
        }
    }
}

/// Accepts a run directory or the path of its `run.json`.
pub fn load_record(path: &Path) -> Result<RunRecord> {
    if path.is_dir() {
        fsio::read_json(&path.join("run.json"))
    } else {
        fsio::read_json(path)
    }
}

pub fn to_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| LabError::Config(e.to_string()))
}

pub fn build(paths: &[impl AsRef<Path>]) -> Result<Vec<ReportRow>> {
    paths
        .iter()
        .map(|p| load_record(p.as_ref()).map(|r| ReportRow::from_record(&r)))
        .collect()
}
