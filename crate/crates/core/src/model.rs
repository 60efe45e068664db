//! Backbone plus head, with the frozen/trainable parameter split.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::backbone::{AdapterConfig, Backbone, FeatureTaps, PenultimateTap, ViTConfig};
use crate::data::ClassPrior;
use crate::error::{bail, Result};
use crate::head::{self, argmax_rows, Classifier, ClassifierKind, SciltConfig, SciltHead, DEFAULT_SCALE};
use crate::losses::{self, LossConfig};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which tap a single-head baseline reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TapChoice {
    #[default]
    Final,
    Penultimate,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SingleHeadConfig {
    pub loss: LossConfig,
    pub tap: TapChoice,
    pub scale: f64,
    pub classifier: ClassifierKind,
}

impl Default for SingleHeadConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            tap: TapChoice::Final,
            scale: DEFAULT_SCALE,
            classifier: ClassifierKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum HeadConfig {
    Scilt(SciltConfig),
    Single(SingleHeadConfig),
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig::Scilt(SciltConfig::default())
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            HeadConfig::Scilt(c) => c.validate(),
            HeadConfig::Single(c) => {
                c.loss.validate()?;
                if !(c.scale > 0.0 && c.scale.is_finite()) {
                    bail!(Config, "classifier scale must be > 0, got {}", c.scale);
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub adapter: AdapterConfig,
    pub penultimate_tap: PenultimateTap,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.adapter.validate(self.vit.embed_dim)?;
        self.head.validate()
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Scilt(SciltHead),
    Single {
        classifier: Classifier,
        config: SingleHeadConfig,
    },
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub taps: FeatureTaps,
    /// Fused-branch scores for the dual head, the only scores otherwise.
    pub s1: Var,
    /// Final-tap scores of the dual head.
    pub s2: Option<Var>,
}

/// Scores for a batch, detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensors {
    pub s1: Tensor,
    pub s2: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: Head,
}

/// Rows per forward pass in the inference helpers.
const EVAL_CHUNK: usize = 128;

impl Model {
    pub fn init(config: &ModelConfig, num_classes: usize, rng: &Rng) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            bail!(Config, "need at least 2 classes, got {num_classes}");
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::init(
            &mut store,
            &config.vit,
            &config.adapter,
            config.penultimate_tap,
            &rng.derive(1),
        )?;
        let d = config.vit.embed_dim;
        let head = match &config.head {
            HeadConfig::Scilt(c) => Head::Scilt(SciltHead::init(&mut store, d, num_classes, c, &rng.derive(2))?),
            HeadConfig::Single(c) => Head::Single {
                classifier: Classifier::init(
                    &mut store,
                    "head.classifier",
                    d,
                    num_classes,
                    c.classifier,
                    c.scale,
                    &mut rng.derive(2).derive(1),
                ),
                config: c.clone(),
            },
        };
        Ok(Self {
            config: config.clone(),
            num_classes,
            store,
            backbone,
            head,
        })
    }

    /// `(frozen, trainable)` parameter ids; disjoint and covering the store.
    pub fn partition(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        partition_params(&self.store)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, images: &Tensor) -> Result<Forward> {
        let taps = self.backbone.forward_with_taps(g, p, images)?;
        self.forward_head(g, p, taps)
    }

    pub fn forward_head(&self, g: &mut Graph, p: &Bound, taps: FeatureTaps) -> Result<Forward> {
        match &self.head {
            Head::Scilt(h) => {
                let s = h.predict(g, p, &taps)?;
                Ok(Forward {
                    taps,
                    s1: s.s1,
                    s2: Some(s.s2),
                })
            }
            Head::Single { classifier, config } => {
                let z = match config.tap {
                    TapChoice::Final => taps.last,
                    TapChoice::Penultimate => taps.penultimate,
                };
                Ok(Forward {
                    taps,
                    s1: classifier.forward(g, p, z)?,
                    s2: None,
                })
            }
        }
    }

    /// Training objective for a forward pass.
    pub fn loss(&self, g: &mut Graph, out: &Forward, labels: &[usize], prior: &ClassPrior) -> Result<Var> {
        match &self.head {
            Head::Scilt(h) => {
                let s2 = out.s2.expect("dual head yields s2");
                head::total_loss(g, out.s1, s2, labels, prior, h.config.tau)
            }
            Head::Single { config, .. } => losses::loss(g, out.s1, labels, prior, &config.loss),
        }
    }

    fn frozen_graph(&self) -> (Graph, Bound) {
        let mut g = Graph::new();
        let p = self.store.bind_with(&mut g, |_| false);
        (g, p)
    }

    fn chunks(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let s = images.shape();
        if s.len() != 4 || s[0] == 0 {
            bail!(Config, "expected [n, H, W, C] images, got {:?}", s);
        }
        let per = s[1] * s[2] * s[3];
        let mut out = Vec::new();
        for start in (0..s[0]).step_by(EVAL_CHUNK) {
            let n = EVAL_CHUNK.min(s[0] - start);
            let data = images.data()[start * per..(start + n) * per].to_vec();
            out.push(Tensor::new(alloc::vec![n, s[1], s[2], s[3]], data)?);
        }
        Ok(out)
    }

    /// Head scores for every image, without recording gradients.
    pub fn scores(&self, images: &Tensor) -> Result<ScoreTensors> {
        let mut s1 = Vec::new();
        let mut s2 = Vec::new();
        for chunk in self.chunks(images)? {
            let (mut g, p) = self.frozen_graph();
            let out = self.forward(&mut g, &p, &chunk)?;
            s1.extend_from_slice(g.value(out.s1).data());
            if let Some(v) = out.s2 {
                s2.extend_from_slice(g.value(v).data());
            }
        }
        let n = images.shape()[0];
        let c = self.num_classes;
        Ok(ScoreTensors {
            s1: Tensor::new(alloc::vec![n, c], s1)?,
            s2: if s2.is_empty() {
                None
            } else {
                Some(Tensor::new(alloc::vec![n, c], s2)?)
            },
        })
    }

    /// Class predictions: the head's inference rule, or argmax of the single head.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let s = self.scores(images)?;
        match (&self.head, &s.s2) {
            (Head::Scilt(h), Some(s2)) => h.infer(&s.s1, s2),
            _ => Ok(argmax_rows(&s.s1)),
        }
    }

    /// Penultimate and final tap features for every image.
    pub fn features(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut pen = Vec::new();
        let mut fin = Vec::new();
        for chunk in self.chunks(images)? {
            let (mut g, p) = self.frozen_graph();
            let taps = self.backbone.forward_with_taps(&mut g, &p, &chunk)?;
            pen.extend_from_slice(g.value(taps.penultimate).data());
            fin.extend_from_slice(g.value(taps.last).data());
        }
        let shape = alloc::vec![images.shape()[0], self.config.vit.embed_dim];
        Ok((Tensor::new(shape.clone(), pen)?, Tensor::new(shape, fin)?))
    }

    /// Finite hypothesis samples of the two dual-head branches.
    ///
    /// Each hypothesis perturbs the trained branch parameters with Gaussian
    /// noise of relative size `noise` and records the class-`class` score on
    /// every sample. Returns `([count, n], [count, n])` for `g₁∘fuse` and `g₂`.
    pub fn branch_hypotheses(
        &self,
        pen: &Tensor,
        fin: &Tensor,
        class: usize,
        count: usize,
        noise: f64,
        rng: &Rng,
    ) -> Result<(Tensor, Tensor)> {
        let Head::Scilt(h) = &self.head else {
            bail!(Config, "branch hypotheses need the dual head");
        };
        if class >= self.num_classes || count == 0 {
            bail!(Contract, "class {class} / count {count} out of range");
        }
        let n = pen.rows();
        let perturbed = |id: ParamId, r: &mut Rng| -> Tensor {
            let t = &self.store.get(id).tensor;
            let rms = crate::math::sqrt(t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64).max(1e-3);
            let mut out = t.clone();
            out.data_mut().iter_mut().for_each(|v| *v += noise * rms * r.normal());
            out
        };
        let mut f1 = Vec::with_capacity(count * n);
        let mut f2 = Vec::with_capacity(count * n);
        for k in 0..count {
            let mut r = rng.derive(k as u64);
            let mut g = Graph::new();
            let zp = g.constant(pen.clone());
            let zf = g.constant(fin.clone());
            let w1 = g.constant(perturbed(h.gate.w1, &mut r));
            let w2 = g.constant(perturbed(h.gate.w2, &mut r));
            let c1 = g.constant(perturbed(h.g1.weight, &mut r));
            let c2 = g.constant(perturbed(h.g2.weight, &mut r));
            let z = if h.config.fusion {
                head::fuse(&mut g, zp, zf, w1, w2)?
            } else {
                zp
            };
            let s1 = branch_logits(&mut g, z, c1, &h.g1)?;
            let s2 = branch_logits(&mut g, zf, c2, &h.g2)?;
            f1.extend((0..n).map(|i| g.value(s1).at2(i, class)));
            f2.extend((0..n).map(|i| g.value(s2).at2(i, class)));
        }
        Ok((
            Tensor::new(alloc::vec![count, n], f1)?,
            Tensor::new(alloc::vec![count, n], f2)?,
        ))
    }
}

fn branch_logits(g: &mut Graph, z: Var, w: Var, c: &Classifier) -> Result<Var> {
    match c.kind {
        ClassifierKind::Cosine => head::cosine_logits(g, z, w, c.scale),
        ClassifierKind::Linear => {
            let wt = g.transpose(w)?;
            g.matmul(z, wt)
        }
    }
}

/// Split a store into `(frozen, trainable)` ids.
pub fn partition_params(store: &ParamStore) -> (Vec<ParamId>, Vec<ParamId>) {
    store.iter().map(|(id, p)| (id, p.trainable)).fold(
        (Vec::new(), Vec::new()),
        |(mut f, mut t), (id, tr)| {
            if tr {
                t.push(id)
            } else {
                f.push(id)
            }
            (f, t)
        },
    )
}
