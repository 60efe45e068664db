//! Gated two-tap fusion with dual classifiers.
//!
//! ```text
//! α₁ = σ(W₁ᵀ z_pen),  α₂ = σ(W₂ᵀ z_fin)
//! z̃  = α₁·z_pen + α₂·z_fin + (z_pen + z_fin)/2
//! s₁ = g₁(z̃),  s₂ = g₂(z_fin)
//! L  = CE(s₂) + LA(s₁)
//! ŷ  = argmax_c (s₁ + s₂)
//! ```

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::backbone::FeatureTaps;
use crate::data::ClassPrior;
use crate::error::{bail, Result};
use crate::losses;
use crate::nn::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default cosine-classifier scale.
pub const DEFAULT_SCALE: f64 = 16.0;

#[derive(Debug, Clone, Copy)]
pub struct FusionGate {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl FusionGate {
    /// Zero gates, so training starts from `α₁ = α₂ = 0.5`.
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            w1: store.add(&alloc::format!("{name}.w1"), Tensor::zeros(&[dim]), true),
            w2: store.add(&alloc::format!("{name}.w2"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z_pen: Var, z_fin: Var) -> Result<Var> {
        fuse(g, z_pen, z_fin, p.var(self.w1), p.var(self.w2))
    }
}

fn gate(g: &mut Graph, z: Var, w: Var) -> Result<Var> {
    let d = g.value(w).len();
    let col = g.reshape(w, &[d, 1])?;
    let s = g.matmul(z, col)?;
    let n = g.value(s).len();
    let s = g.reshape(s, &[n])?;
    Ok(g.sigmoid(s))
}

/// `σ(z_pen w1)·z_pen + σ(z_fin w2)·z_fin + (z_pen + z_fin)/2`, row by row.
pub fn fuse(g: &mut Graph, z_pen: Var, z_fin: Var, w1: Var, w2: Var) -> Result<Var> {
    if g.value(z_pen).shape() != g.value(z_fin).shape() {
        bail!(
            Dimension,
            "fusing {:?} with {:?}",
            g.value(z_pen).shape(),
            g.value(z_fin).shape()
        );
    }
    let a1 = gate(g, z_pen, w1)?;
    let a2 = gate(g, z_fin, w2)?;
    let t1 = g.row_scale(z_pen, a1)?;
    let t2 = g.row_scale(z_fin, a2)?;
    let mid = g.add(z_pen, z_fin)?;
    let mid = g.scale(mid, 0.5);
    let t = g.add(t1, t2)?;
    g.add(t, mid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ClassifierKind {
    #[default]
    Cosine,
    /// Plain `z Wᵀ` without normalization.
    Linear,
}

/// `scale · cos(z, w_c)` for every class row `w_c`, or `z Wᵀ` when linear.
#[derive(Debug, Clone, Copy)]
pub struct Classifier {
    pub weight: ParamId,
    pub scale: f64,
    pub kind: ClassifierKind,
}

impl Classifier {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        classes: usize,
        kind: ClassifierKind,
        scale: f64,
        rng: &mut Rng,
    ) -> Self {
        let w = Tensor::randn(&[classes, dim], 1.0 / crate::math::sqrt(dim as f64), rng);
        Self {
            weight: store.add(&alloc::format!("{name}.weight"), w, true),
            scale,
            kind,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        match self.kind {
            ClassifierKind::Cosine => cosine_logits(g, z, p.var(self.weight), self.scale),
            ClassifierKind::Linear => {
                let wt = g.transpose(p.var(self.weight))?;
                g.matmul(z, wt)
            }
        }
    }
}

/// `scale · (z/‖z‖)(W/‖W‖)ᵀ` with `W` of shape `[C, D]`.
pub fn cosine_logits(g: &mut Graph, z: Var, weight: Var, scale: f64) -> Result<Var> {
    let zn = g.row_normalize(z);
    let wn = g.row_normalize(weight);
    let wt = g.transpose(wn)?;
    let cos = g.matmul(zn, wt)?;
    Ok(g.scale(cos, scale))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SciltConfig {
    /// Feed `g₁` the gated fusion; when off, `g₁` reads the penultimate tap directly.
    pub fusion: bool,
    /// Predict from `s₁ + s₂`; when off, from `s₁` alone.
    pub ensemble: bool,
    pub tau: f64,
    pub scale: f64,
    pub classifier: ClassifierKind,
}

impl Default for SciltConfig {
    fn default() -> Self {
        Self {
            fusion: true,
            ensemble: true,
            tau: 1.0,
            scale: DEFAULT_SCALE,
            classifier: ClassifierKind::Cosine,
        }
    }
}

impl SciltConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            bail!(Config, "tau must be a finite value >= 0, got {}", self.tau);
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            bail!(Config, "classifier scale must be > 0, got {}", self.scale);
        }
        Ok(())
    }
}

/// The two-branch head: gates, `g₁` on the fused feature, `g₂` on the final tap.
#[derive(Debug, Clone)]
pub struct SciltHead {
    pub config: SciltConfig,
    pub gate: FusionGate,
    pub g1: Classifier,
    pub g2: Classifier,
}

#[derive(Debug, Clone, Copy)]
pub struct Scores {
    pub s1: Var,
    pub s2: Var,
}

impl SciltHead {
    pub fn init(
        store: &mut ParamStore,
        dim: usize,
        classes: usize,
        config: &SciltConfig,
        rng: &Rng,
    ) -> Result<Self> {
        config.validate()?;
        let gate = FusionGate::init(store, "head.gate", dim);
        let g1 = Classifier::init(store, "head.g1", dim, classes, config.classifier, config.scale, &mut rng.derive(1));
        let g2 = Classifier::init(store, "head.g2", dim, classes, config.classifier, config.scale, &mut rng.derive(2));
        Ok(Self {
            config: config.clone(),
            gate,
            g1,
            g2,
        })
    }

    /// `s₁ = g₁(z̃)` (or `g₁(z_pen)` with fusion off) and `s₂ = g₂(z_fin)`.
    pub fn predict(&self, g: &mut Graph, p: &Bound, taps: &FeatureTaps) -> Result<Scores> {
        let f = if self.config.fusion {
            self.gate.forward(g, p, taps.penultimate, taps.last)?
        } else {
            taps.penultimate
        };
        Ok(Scores {
            s1: self.g1.forward(g, p, f)?,
            s2: self.g2.forward(g, p, taps.last)?,
        })
    }

    pub fn loss(&self, g: &mut Graph, scores: &Scores, labels: &[usize], prior: &ClassPrior) -> Result<Var> {
        total_loss(g, scores.s1, scores.s2, labels, prior, self.config.tau)
    }

    pub fn infer(&self, s1: &Tensor, s2: &Tensor) -> Result<Vec<usize>> {
        if self.config.ensemble {
            infer(s1, s2)
        } else {
            Ok(argmax_rows(s1))
        }
    }
}

/// `CE(s₂) + LA(s₁)`, each mean-reduced.
pub fn total_loss(g: &mut Graph, s1: Var, s2: Var, labels: &[usize], prior: &ClassPrior, tau: f64) -> Result<Var> {
    let ce = losses::ce_loss(g, s2, labels)?;
    let la = losses::la_loss(g, s1, labels, prior, tau)?;
    g.add(ce, la)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `argmax_c (s₁ + s₂)` per row.
pub fn infer(s1: &Tensor, s2: &Tensor) -> Result<Vec<usize>> {
    if s1.shape() != s2.shape() {
        bail!(Dimension, "scores {:?} and {:?}", s1.shape(), s2.shape());
    }
    let sum: Vec<f64> = s1.data().iter().zip(s2.data()).map(|(a, b)| a + b).collect();
    Ok(argmax_rows(&Tensor::new(s1.shape().to_vec(), sum)?))
}
