//! Feature-discrepancy and capacity diagnostics on a trained checkpoint.

use ltlab_core::data::LabeledDataset;
use ltlab_core::model::Model;
use ltlab_core::ot::{layer_discrepancy, Normalization, OtReport, SinkhornConfig};
use ltlab_core::tensor::Tensor;
use ltlab_core::theory::{subadditivity_check, HypothesisSample, SubadditivityReport};
use ltlab_core::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// The first `n` samples of `ds`, or all of them when `n` is zero or too large.
pub fn head_images(ds: &LabeledDataset, n: usize) -> Tensor {
    let n = if n == 0 { ds.len() } else { n.min(ds.len()) };
    let idx: Vec<usize> = (0..n).collect();
    ds.batch(&idx).0
}

/// Sinkhorn distance between the penultimate and final cls features of `images`.
pub fn analyze_ot(model: &Model, images: &Tensor, cfg: &SinkhornConfig, norm: Normalization) -> Result<OtReport> {
    let (pen, fin) = model.features(images)?;
    Ok(layer_discrepancy(&pen, &fin, cfg, norm)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Class whose logit is the scalar hypothesis output.
    pub class: usize,
    /// Hypotheses sampled per branch.
    pub hypotheses: usize,
    /// Relative scale of the weight perturbations.
    pub noise: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for TheoryParams {
    fn default() -> Self {
        Self {
            class: 0,
            hypotheses: 32,
            noise: 0.1,
            draws: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stderrs {
    pub r1: f64,
    pub r2: f64,
    pub r_combined: f64,
    pub difference: f64,
}

/// Summary emitted by `check-theory`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub r1: f64,
    pub r2: f64,
    pub r_combined: f64,
    pub r_sum: f64,
    pub stderrs: Stderrs,
    pub margin: f64,
    pub draws: usize,
    pub draw_violations: usize,
    pub num_samples: usize,
    pub params: TheoryParams,
    pub holds: bool,
}

impl TheoryReport {
    fn new(r: SubadditivityReport, num_samples: usize, params: TheoryParams) -> Self {
        Self {
            r1: r.r1.mean,
            r2: r.r2.mean,
            r_combined: r.r_combined.mean,
            r_sum: r.r_sum,
            stderrs: Stderrs {
                r1: r.r1.stderr,
                r2: r.r2.stderr,
                r_combined: r.r_combined.stderr,
                difference: r.stderr,
            },
            margin: r.margin,
            draws: r.draws,
            draw_violations: r.draw_violations,
            num_samples,
            params,
            holds: r.holds,
        }
    }
}

/// Sub-additivity of empirical Rademacher complexity over hypothesis sets
/// sampled around the two trained branches of a dual-head model.
pub fn check_theory(model: &Model, images: &Tensor, params: TheoryParams) -> Result<TheoryReport> {
    let (pen, fin) = model.features(images)?;
    let rng = Rng::new(params.seed);
    let (f1, f2) = model.branch_hypotheses(&pen, &fin, params.class, params.hypotheses, params.noise, &rng.derive(1))?;
    let h1 = HypothesisSample::new(f1)?;
    let h2 = HypothesisSample::new(f2)?;
    let report = subadditivity_check(&h1, &h2, params.draws, &rng.derive(2))?;
    Ok(TheoryReport::new(report, images.shape()[0], params))
}
