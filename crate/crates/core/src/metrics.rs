//! Accuracy metrics for imbalanced evaluation. All values are percentages.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Group, GroupAssignment};
use crate::error::{bail, Error, Result};
use crate::math;

fn check(preds: &[usize], labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        bail!(Contract, "no samples to score");
    }
    if preds.len() != labels.len() {
        bail!(Dimension, "{} predictions for {} labels", preds.len(), labels.len());
    }
    Ok(())
}

/// `100 · correct / total`.
pub fn ovacc(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Per-class recall in percent and per-class sample counts.
pub fn per_class_acc(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    check(preds, labels)?;
    let mut total = vec![0usize; num_classes];
    let mut hit = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= num_classes {
            bail!(Contract, "label {y} out of range for {num_classes} classes");
        }
        total[y] += 1;
        hit[y] += usize::from(p == y);
    }
    if let Some(k) = total.iter().position(|&n| n == 0) {
        return Err(Error::DegenerateClass {
            class: k,
            reason: "absent from evaluation labels".into(),
        });
    }
    let acc = hit.iter().zip(&total).map(|(&h, &n)| 100.0 * h as f64 / n as f64).collect();
    Ok((acc, total))
}

/// Unweighted mean of per-class recalls.
pub fn macro_acc(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let (acc, _) = per_class_acc(preds, labels, num_classes)?;
    Ok(mean(&acc))
}

fn mean(xs: &[f64]) -> f64 {
    math::stable_sum(xs.iter().copied()) / xs.len() as f64
}

/// Harmonic mean `2ab / (a + b)`, zero when both are zero.
pub fn bscore(ovacc: f64, macro_acc: f64) -> f64 {
    let s = ovacc + macro_acc;
    if s == 0.0 {
        0.0
    } else {
        2.0 * ovacc * macro_acc / s
    }
}

/// Round to one decimal, as the result tables print.
pub fn round1(x: f64) -> f64 {
    math::round(x * 10.0) / 10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// Mean class accuracy within each group; groups with no classes are `None`.
pub fn group_acc(per_class: &[f64], assignment: &GroupAssignment) -> Result<GroupAccuracy> {
    if assignment.tags.len() != per_class.len() {
        bail!(
            Dimension,
            "{} group tags for {} classes",
            assignment.tags.len(),
            per_class.len()
        );
    }
    let pick = |grp: Group| {
        let xs: Vec<f64> = per_class
            .iter()
            .zip(&assignment.tags)
            .filter(|(_, &t)| t == grp)
            .map(|(&a, _)| a)
            .collect();
        (!xs.is_empty()).then(|| mean(&xs))
    };
    Ok(GroupAccuracy {
        many: pick(Group::Many),
        medium: pick(Group::Medium),
        few: pick(Group::Few),
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub ovacc: f64,
    pub macro_acc: f64,
    pub bscore: f64,
    pub per_class: Vec<f64>,
    /// Evaluation samples per class.
    pub class_counts: Vec<usize>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub groups: Option<GroupAccuracy>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub group_tags: Option<Vec<Group>>,
}

impl EvalReport {
    /// Score predictions; `grouping` tags classes by their training counts.
    pub fn from_predictions(
        preds: &[usize],
        labels: &[usize],
        num_classes: usize,
        grouping: Option<&GroupAssignment>,
    ) -> Result<Self> {
        let (per_class, class_counts) = per_class_acc(preds, labels, num_classes)?;
        let ov = ovacc(preds, labels)?;
        let mac = mean(&per_class);
        let groups = grouping.map(|a| group_acc(&per_class, a)).transpose()?;
        Ok(Self {
            ovacc: ov,
            macro_acc: mac,
            bscore: bscore(ov, mac),
            per_class,
            class_counts,
            groups,
            group_tags: grouping.map(|a| a.tags.clone()),
        })
    }

    /// OvAcc and Macro rebuilt from `per_class` and `class_counts`, with their BScore.
    pub fn recompute(&self) -> (f64, f64, f64) {
        let total: usize = self.class_counts.iter().sum();
        let correct = math::stable_sum(
            self.per_class
                .iter()
                .zip(&self.class_counts)
                .map(|(&a, &n)| a * n as f64 / 100.0),
        );
        let ov = 100.0 * correct / total as f64;
        let mac = mean(&self.per_class);
        (ov, mac, bscore(ov, mac))
    }
}
