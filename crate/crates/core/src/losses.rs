//! Classification criteria for imbalanced training.
//!
//! Every loss maps `logits[batch, C]`, integer labels and the training
//! [`ClassPrior`] to a scalar, mean-reduced over the batch. All of them are
//! built from graph operations, so they differentiate with respect to the
//! logits (and anything upstream).
//!
//! | kind          | per-sample value                                    |
//! |---------------|-----------------------------------------------------|
//! | `ce`          | `−log softmax(z)[y]`                                |
//! | `la`          | CE on `z_k + τ·log π_k`                             |
//! | `cb`          | `w_y · CE`, `w_k = (1−β) / (1−β^{n_k})`             |
//! | `ldam`        | CE on `s·(z − m_y e_y)`, `m_k = margin / n_k^{1/4}` |
//! | `focal`       | `−(1−p_y)^γ log p_y`                                |
//! | `lade_approx` | CE on `z_k − log π_k`                               |

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::data::ClassPrior;
use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossKind {
    #[default]
    Ce,
    La,
    Cb,
    Ldam,
    Focal,
    LadeApprox,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Ce,
        LossKind::La,
        LossKind::Cb,
        LossKind::Ldam,
        LossKind::Focal,
        LossKind::LadeApprox,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::La => "la",
            LossKind::Cb => "cb",
            LossKind::Ldam => "ldam",
            LossKind::Focal => "focal",
            LossKind::LadeApprox => "lade_approx",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossConfig {
    pub kind: LossKind,
    /// Logit-adjustment strength.
    pub tau: f64,
    /// Class-balanced smoothing, in `[0, 1)`.
    pub beta: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// LDAM margin constant.
    pub margin_scale: f64,
    /// LDAM multiplier applied after the margin is subtracted.
    pub ldam_logit_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            tau: 1.0,
            beta: 0.999,
            gamma: 2.0,
            margin_scale: 0.5,
            ldam_logit_scale: 1.0,
        }
    }
}

impl LossConfig {
    pub fn of(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            bail!(Config, "tau must be a finite value >= 0, got {}", self.tau);
        }
        if !(0.0..1.0).contains(&self.beta) {
            bail!(Config, "beta must lie in [0, 1), got {}", self.beta);
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            bail!(Config, "gamma must be >= 0, got {}", self.gamma);
        }
        if !(self.margin_scale >= 0.0 && self.margin_scale.is_finite()) {
            bail!(Config, "margin_scale must be >= 0, got {}", self.margin_scale);
        }
        if !(self.ldam_logit_scale > 0.0 && self.ldam_logit_scale.is_finite()) {
            bail!(Config, "ldam_logit_scale must be > 0, got {}", self.ldam_logit_scale);
        }
        Ok(())
    }
}

fn check_batch(g: &Graph, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
    let v = g.value(logits);
    if v.shape().len() != 2 {
        bail!(Dimension, "logits must be [batch, C], got {:?}", v.shape());
    }
    let (n, c) = (v.shape()[0], v.shape()[1]);
    if labels.is_empty() {
        bail!(Contract, "empty batch");
    }
    if labels.len() != n {
        bail!(Dimension, "{} labels for {} rows of logits", labels.len(), n);
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        bail!(Contract, "label {y} out of range for {c} classes");
    }
    Ok((n, c))
}

fn check_prior(prior: &ClassPrior, c: usize) -> Result<()> {
    if prior.num_classes() != c {
        bail!(Dimension, "prior over {} classes for {} logits", prior.num_classes(), c);
    }
    Ok(())
}

/// Mean of `−log softmax(z)[y]`.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    check_batch(g, logits, labels)?;
    let ls = g.log_softmax(logits);
    let picked = g.gather(ls, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

fn shifted_ce(g: &mut Graph, logits: Var, labels: &[usize], shift: &[f64]) -> Result<Var> {
    let b = g.constant(Tensor::from_vec(shift.to_vec()));
    let z = g.add_bias(logits, b)?;
    ce_loss(g, z, labels)
}

/// CE on logits adjusted by `+τ·log π_k`.
pub fn la_loss(g: &mut Graph, logits: Var, labels: &[usize], prior: &ClassPrior, tau: f64) -> Result<Var> {
    let (_, c) = check_batch(g, logits, labels)?;
    check_prior(prior, c)?;
    let shift: Vec<f64> = prior.log_priors().iter().map(|l| tau * l).collect();
    shifted_ce(g, logits, labels, &shift)
}

/// CE on logits with the prior removed, `z_k − log π_k`.
pub fn lade_approx_loss(g: &mut Graph, logits: Var, labels: &[usize], prior: &ClassPrior) -> Result<Var> {
    let (_, c) = check_batch(g, logits, labels)?;
    check_prior(prior, c)?;
    let shift: Vec<f64> = prior.log_priors().iter().map(|l| -l).collect();
    shifted_ce(g, logits, labels, &shift)
}

/// Effective-number weights `(1−β) / (1−β^{n_k})`.
pub fn cb_weights(counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        bail!(Config, "beta must lie in [0, 1), got {beta}");
    }
    counts
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            if n == 0 {
                return Err(crate::Error::DegenerateClass {
                    class: k,
                    reason: "zero count has no effective number".into(),
                });
            }
            Ok((1.0 - beta) / (1.0 - math::pow(beta, n as f64)))
        })
        .collect()
}

/// Mean over the batch of `w_y · CE`.
pub fn cb_loss(g: &mut Graph, logits: Var, labels: &[usize], prior: &ClassPrior, beta: f64) -> Result<Var> {
    let (_, c) = check_batch(g, logits, labels)?;
    check_prior(prior, c)?;
    let w = cb_weights(prior.counts(), beta)?;
    let ls = g.log_softmax(logits);
    let picked = g.gather(ls, labels)?;
    let wy = g.constant(Tensor::from_vec(labels.iter().map(|&y| w[y]).collect()));
    let weighted = g.mul(picked, wy)?;
    let m = g.mean(weighted);
    Ok(g.scale(m, -1.0))
}

/// Per-class margins `margin_scale / n_k^{1/4}`.
pub fn ldam_margins(counts: &[usize], margin_scale: f64) -> Vec<f64> {
    counts
        .iter()
        .map(|&n| margin_scale / math::pow(n as f64, 0.25))
        .collect()
}

/// CE on `logit_scale · (z − m_y e_y)`.
pub fn ldam_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    prior: &ClassPrior,
    margin_scale: f64,
    logit_scale: f64,
) -> Result<Var> {
    let (n, c) = check_batch(g, logits, labels)?;
    check_prior(prior, c)?;
    if !(margin_scale >= 0.0) {
        bail!(Config, "margin_scale must be >= 0, got {margin_scale}");
    }
    let m = ldam_margins(prior.counts(), margin_scale);
    let mut offset = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        offset[i * c + y] = -m[y];
    }
    let offset = g.constant(Tensor::new(vec![n, c], offset)?);
    let z = g.add(logits, offset)?;
    let z = g.scale(z, logit_scale);
    ce_loss(g, z, labels)
}

/// Mean of `−(1−p_y)^γ log p_y`.
pub fn focal_loss(g: &mut Graph, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    check_batch(g, logits, labels)?;
    if !(gamma >= 0.0) {
        bail!(Config, "gamma must be >= 0, got {gamma}");
    }
    let ls = g.log_softmax(logits);
    let logp = g.gather(ls, labels)?;
    let p = g.exp(logp);
    let q = g.affine(p, -1.0, 1.0);
    let modulator = g.pow(q, gamma);
    let v = g.mul(modulator, logp)?;
    let m = g.mean(v);
    Ok(g.scale(m, -1.0))
}

/// Dispatch on `cfg.kind`.
pub fn loss(g: &mut Graph, logits: Var, labels: &[usize], prior: &ClassPrior, cfg: &LossConfig) -> Result<Var> {
    match cfg.kind {
        LossKind::Ce => ce_loss(g, logits, labels),
        LossKind::La => la_loss(g, logits, labels, prior, cfg.tau),
        LossKind::Cb => cb_loss(g, logits, labels, prior, cfg.beta),
        LossKind::Ldam => ldam_loss(g, logits, labels, prior, cfg.margin_scale, cfg.ldam_logit_scale),
        LossKind::Focal => focal_loss(g, logits, labels, cfg.gamma),
        LossKind::LadeApprox => lade_approx_loss(g, logits, labels, prior),
    }
}

/// Loss value for fixed logits, without gradients.
pub fn loss_value(logits: &Tensor, labels: &[usize], prior: &ClassPrior, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = loss(&mut g, z, labels, prior, cfg)?;
    Ok(g.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::rng::Rng;

    fn ce_of(z: &[f64], y: usize) -> f64 {
        // brute force: −log(e^{z_y} / Σ e^{z_j}) without max subtraction
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        -(z[y].exp() / s).ln()
    }

    fn value(rows: &[&[f64]], labels: &[usize], prior: &ClassPrior, cfg: &LossConfig) -> f64 {
        loss_value(&Tensor::from_rows(rows).unwrap(), labels, prior, cfg).unwrap()
    }

    #[test]
    fn ce_examples() {
        let u = ClassPrior::uniform(2).unwrap();
        let ce = LossConfig::of(LossKind::Ce);
        assert!((value(&[&[0.0, 0.0]], &[0], &u, &ce) - core::f64::consts::LN_2).abs() < 1e-15);
        assert!(value(&[&[30.0, 0.0]], &[0], &u, &ce) < 1e-12);
        let u3 = ClassPrior::uniform(3).unwrap();
        let v = value(&[&[1.0, 2.0, 3.0]], &[2], &u3, &ce);
        assert!((v - 0.40760596444438).abs() < 1e-12, "{v}");
        assert!((v - ce_of(&[1.0, 2.0, 3.0], 2)).abs() < 1e-14);
    }

    #[test]
    fn errors() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(ce_loss(&mut g, z, &[]), Err(crate::Error::Contract(_))));
        assert!(ce_loss(&mut g, z, &[2]).is_err());
        let u3 = ClassPrior::uniform(3).unwrap();
        assert!(la_loss(&mut g, z, &[0], &u3, 1.0).is_err());
        assert!(ClassPrior::from_counts(&[3, 0]).is_err());
        assert!(cb_weights(&[1], 1.0).is_err());
        assert!(LossConfig { beta: 1.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { margin_scale: -0.1, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn la_examples() {
        let p = ClassPrior::from_counts(&[9, 1]).unwrap();
        let la = LossConfig {
            kind: LossKind::La,
            tau: 1.0,
            ..LossConfig::default()
        };
        let v = value(&[&[0.0, 0.0]], &[1], &p, &la);
        // adjusted logits [ln 0.9, ln 0.1]; softmax = [0.9, 0.1]
        assert!((v - ce_of(&[0.9f64.ln(), 0.1f64.ln()], 1)).abs() < 1e-12);
        assert!((v - 10f64.ln()).abs() < 1e-12, "{v}");
        let la0 = LossConfig { tau: 0.0, ..la.clone() };
        assert_eq!(
            value(&[&[0.3, -0.2]], &[1], &p, &la0),
            value(&[&[0.3, -0.2]], &[1], &p, &LossConfig::of(LossKind::Ce))
        );
    }

    #[test]
    fn cb_examples() {
        assert!((cb_weights(&[1], 0.9).unwrap()[0] - 1.0).abs() < 1e-15);
        assert_eq!(cb_weights(&[7, 3], 0.0).unwrap(), vec![1.0, 1.0]);
        let w = cb_weights(&[100], 0.99).unwrap()[0];
        assert!((w - 0.01 / (1.0 - 0.99f64.powi(100))).abs() < 1e-15);
        assert!((w - 0.0157737).abs() < 1e-7, "{w}");
    }

    #[test]
    fn ldam_examples() {
        assert!((ldam_margins(&[16], 0.5)[0] - 0.25).abs() < 1e-15);
        // margin 1 at n = 1 with margin_scale 1
        let p = ClassPrior::from_counts(&[1, 1]).unwrap();
        let cfg = LossConfig {
            kind: LossKind::Ldam,
            margin_scale: 1.0,
            ..LossConfig::default()
        };
        let v = value(&[&[0.0, 0.0]], &[0], &p, &cfg);
        let expect = -((-1f64).exp() / ((-1f64).exp() + 1.0)).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 1.3132616875).abs() < 1e-9);
    }

    #[test]
    fn focal_examples() {
        let u = ClassPrior::uniform(2).unwrap();
        let cfg = LossConfig {
            kind: LossKind::Focal,
            gamma: 2.0,
            ..LossConfig::default()
        };
        let v = value(&[&[0.0, 0.0]], &[0], &u, &cfg);
        assert!((v - 0.25 * core::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.17329).abs() < 1e-5);
        assert!(value(&[&[40.0, 0.0]], &[0], &u, &cfg) < 1e-30);
    }

    #[test]
    fn lade_is_la_with_negative_unit_tau() {
        let mut rng = Rng::new(5);
        let p = ClassPrior::from_counts(&[40, 9, 2]).unwrap();
        for _ in 0..20 {
            let z = Tensor::uniform(&[4, 3], -2.0, 2.0, &mut rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.below(3)).collect();
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let a = lade_approx_loss(&mut g, zv, &labels, &p).unwrap();
            let b = la_loss(&mut g, zv, &labels, &p, -1.0).unwrap();
            assert!((g.value(a).data()[0] - g.value(b).data()[0]).abs() < 1e-14);
            // brute-force adjusted softmax
            let mut acc = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let adj: Vec<f64> = (0..3).map(|k| z.at2(i, k) - p.priors()[k].ln()).collect();
                acc += ce_of(&adj, y);
            }
            assert!((g.value(a).data()[0] - acc / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_of_every_loss() {
        let mut rng = Rng::new(9);
        let p = ClassPrior::from_counts(&[50, 12, 3, 1]).unwrap();
        let labels = [0, 3, 2, 1, 3];
        for kind in LossKind::ALL {
            let cfg = LossConfig {
                kind,
                tau: 1.3,
                beta: 0.9,
                gamma: 2.0,
                margin_scale: 0.7,
                ldam_logit_scale: 2.0,
            };
            let z = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
            let err = grad_check(|g, x| loss(g, x, &labels, &p, &cfg), &z, 1e-6).unwrap();
            assert!(err < 1e-6, "{kind:?}: {err}");
        }
    }
}
