//! Parameters and the dense building blocks of the transformer.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A named weight tensor. Frozen parameters are never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered parameter registry shared by the backbone and the head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Register every parameter as a leaf; gradients are tracked for trainable ones.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, |p| p.trainable)
    }

    /// Register every parameter as a leaf, tracking gradients where `track` says so.
    pub fn bind_with(&self, g: &mut Graph, track: impl Fn(&Param) -> bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.tensor.clone(), track(p)))
                .collect(),
        }
    }

    /// Replace the value of `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let Some(id) = self.find(name) else {
            bail!(Config, "unknown parameter {name}");
        };
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            bail!(
                Dimension,
                "parameter {name}: shape {:?} vs {:?}",
                p.tensor.shape(),
                tensor.shape()
            );
        }
        p.tensor = tensor;
        Ok(())
    }
}

/// Graph handles for every parameter of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Route `id` to another node, e.g. a leaf perturbed by a gradient check.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

/// `y = x W + b`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Dense layer with an optional bias.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights `N(0, 1/fan_in)`, zero bias.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
        rng: &mut Rng,
    ) -> Self {
        let std = 1.0 / crate::math::sqrt(d_in as f64);
        let weight = store.add(
            &alloc::format!("{name}.weight"),
            Tensor::randn(&[d_in, d_out], std, rng),
            trainable,
        );
        let bias = bias.then(|| {
            store.add(
                &alloc::format!("{name}.bias"),
                Tensor::zeros(&[d_out]),
                trainable,
            )
        });
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        linear(g, x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

/// Layer normalization over the last axis with learnable scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        Self {
            gamma: store.add(
                &alloc::format!("{name}.gamma"),
                Tensor::full(&[dim], 1.0),
                trainable,
            ),
            beta: store.add(&alloc::format!("{name}.beta"), Tensor::zeros(&[dim]), trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Multi-head self-attention over `batch` sequences of `tokens` rows each.
#[derive(Debug, Clone, Copy)]
pub struct Mhsa {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            bail!(Config, "embed dim {dim} not divisible by {heads} heads");
        }
        Ok(Self {
            qkv: Linear::init(store, &alloc::format!("{name}.qkv"), dim, 3 * dim, true, trainable, rng),
            proj: Linear::init(store, &alloc::format!("{name}.proj"), dim, dim, true, trainable, rng),
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, batch: usize, tokens: usize) -> Result<Var> {
        let qkv = self.qkv.forward(g, p, x)?;
        let att = g.attention(qkv, batch, tokens, self.heads)?;
        self.proj.forward(g, p, att)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        trainable: bool,
        rng: &mut Rng,
    ) -> Self {
        Self {
            fc1: Linear::init(store, &alloc::format!("{name}.fc1"), dim, hidden, true, trainable, rng),
            fc2: Linear::init(store, &alloc::format!("{name}.fc2"), hidden, dim, true, trainable, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}
