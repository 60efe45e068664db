//! Toy vision transformer with bottleneck adapters and two feature taps.
//!
//! Block update (pre-LN), with the adapter applied to the block output:
//!
//! ```text
//! Z~ = Z + MHSA(LN(Z))
//! Z' = Z~ + FFN(LN(Z~))
//! Z  = Z' + s · ReLU(Z' W_down) W_up
//! ```
//!
//! The class token after block `N−1` (penultimate) and after block `N`
//! (final) are exposed as [`FeatureTaps`], each through its own layer norm.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::nn::{Bound, Ffn, LayerNorm, Mhsa, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            ffn_hidden: 128,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(
                Config,
                "image size {} not divisible by patch size {}",
                self.image_size,
                self.patch_size
            );
        }
        if self.depth < 2 {
            bail!(Config, "depth {} leaves no penultimate block", self.depth);
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            bail!(
                Config,
                "embed dim {} not divisible by {} heads",
                self.embed_dim,
                self.heads
            );
        }
        if self.channels == 0 || self.ffn_hidden == 0 {
            bail!(Config, "channels and ffn width must be positive");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Bottleneck adapter `h + s · W_up ReLU(W_down h)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdapterConfig {
    pub bottleneck: usize,
    pub scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck: 8,
            scale: 1.0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.bottleneck < 1 || self.bottleneck >= embed_dim {
            bail!(
                Config,
                "adapter bottleneck {} must be in [1, {})",
                self.bottleneck,
                embed_dim
            );
        }
        Ok(())
    }
}

/// Where the penultimate feature is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PenultimateTap {
    /// Class token after block `N−1`, through its own learnable layer norm.
    #[default]
    Normalized,
    /// The same class token without normalization.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureTaps {
    /// `[batch, D]`
    pub penultimate: Var,
    /// `[batch, D]`
    pub last: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Adapter {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
}

impl Adapter {
    /// `W_down ~ N(0, 1/D)`, `W_up = 0`: the identity at initialization.
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, cfg: &AdapterConfig, rng: &mut Rng) -> Self {
        let std = 1.0 / crate::math::sqrt(dim as f64);
        Self {
            down: store.add(
                &alloc::format!("{name}.down"),
                Tensor::randn(&[dim, cfg.bottleneck], std, rng),
                true,
            ),
            up: store.add(
                &alloc::format!("{name}.up"),
                Tensor::zeros(&[cfg.bottleneck, dim]),
                true,
            ),
            scale: cfg.scale,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var> {
        adapter(g, h, p.var(self.down), p.var(self.up), self.scale)
    }
}

/// `h + scale · ReLU(h W_down) W_up`.
pub fn adapter(g: &mut Graph, h: Var, down: Var, up: Var, scale: f64) -> Result<Var> {
    let z = g.matmul(h, down)?;
    let z = g.relu(z);
    let z = g.matmul(z, up)?;
    let z = g.scale(z, scale);
    g.add(h, z)
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: LayerNorm,
    attn: Mhsa,
    ln2: LayerNorm,
    ffn: Ffn,
}

/// Parameter handles of the transformer; weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: ViTConfig,
    pub tap: PenultimateTap,
    patch_embed: ParamId,
    pos_embed: ParamId,
    cls_token: ParamId,
    blocks: Vec<Block>,
    adapters: Vec<Adapter>,
    pen_norm: LayerNorm,
    final_norm: LayerNorm,
}

impl Backbone {
    /// Register all backbone parameters. Transformer weights are frozen;
    /// adapters and the two tap norms are trainable.
    pub fn init(
        store: &mut ParamStore,
        config: &ViTConfig,
        adapter: &AdapterConfig,
        tap: PenultimateTap,
        rng: &Rng,
    ) -> Result<Self> {
        config.validate()?;
        adapter.validate(config.embed_dim)?;
        let d = config.embed_dim;
        let patch_embed = store.add(
            "backbone.patch_embed",
            Tensor::randn(
                &[config.patch_dim(), d],
                1.0 / crate::math::sqrt(config.patch_dim() as f64),
                &mut rng.derive(0),
            ),
            false,
        );
        let pos_embed = store.add(
            "backbone.pos_embed",
            Tensor::randn(&[config.num_patches(), d], 0.02, &mut rng.derive(1)),
            false,
        );
        let cls_token = store.add(
            "backbone.cls_token",
            Tensor::randn(&[d], 0.02, &mut rng.derive(2)),
            false,
        );
        let mut blocks = Vec::with_capacity(config.depth);
        let mut adapters = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let mut r = rng.derive(100 + i as u64);
            let name = alloc::format!("backbone.blocks.{i}");
            blocks.push(Block {
                ln1: LayerNorm::init(store, &alloc::format!("{name}.ln1"), d, false),
                attn: Mhsa::init(store, &alloc::format!("{name}.attn"), d, config.heads, false, &mut r)?,
                ln2: LayerNorm::init(store, &alloc::format!("{name}.ln2"), d, false),
                ffn: Ffn::init(store, &alloc::format!("{name}.ffn"), d, config.ffn_hidden, false, &mut r),
            });
            adapters.push(Adapter::init(
                store,
                &alloc::format!("adapter.{i}"),
                d,
                adapter,
                &mut rng.derive(200 + i as u64),
            ));
        }
        let pen_norm = LayerNorm::init(store, "tap.penultimate_norm", d, true);
        let final_norm = LayerNorm::init(store, "tap.final_norm", d, true);
        Ok(Self {
            config: config.clone(),
            tap,
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            adapters,
            pen_norm,
            final_norm,
        })
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    /// Flatten `[b, H, W, C]` images into `[b · patches, P·P·C]` rows.
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.image_size || s[2] != c.image_size || s[3] != c.channels {
            bail!(
                Config,
                "images {:?} do not match [*, {}, {}, {}]",
                s,
                c.image_size,
                c.image_size,
                c.channels
            );
        }
        let (b, size, ch, p) = (s[0], c.image_size, c.channels, c.patch_size);
        let grid = size / p;
        let mut out = Vec::with_capacity(images.len());
        let src = images.data();
        for n in 0..b {
            for gy in 0..grid {
                for gx in 0..grid {
                    for dy in 0..p {
                        let y = gy * p + dy;
                        let start = ((n * size + y) * size + gx * p) * ch;
                        out.extend_from_slice(&src[start..start + p * ch]);
                    }
                }
            }
        }
        Tensor::new(alloc::vec![b * grid * grid, c.patch_dim()], out)
    }

    /// Token sequence `[b · (1 + patches), D]`: class token, then `E·vec(x_i) + e_i`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, images: &Tensor) -> Result<Var> {
        let batch = images.shape()[0];
        let patches = g.constant(self.patchify(images)?);
        let tokens = g.matmul(patches, p.var(self.patch_embed))?;
        let tokens = g.add_tiled(tokens, p.var(self.pos_embed))?;
        g.prepend_token(tokens, p.var(self.cls_token), batch)
    }

    /// Run all blocks and return the two class-token taps.
    pub fn forward_with_taps(&self, g: &mut Graph, p: &Bound, images: &Tensor) -> Result<FeatureTaps> {
        self.forward_inner(g, p, images, true)
    }

    /// The same network with every adapter removed.
    pub fn forward_without_adapters(&self, g: &mut Graph, p: &Bound, images: &Tensor) -> Result<FeatureTaps> {
        self.forward_inner(g, p, images, false)
    }

    fn forward_inner(&self, g: &mut Graph, p: &Bound, images: &Tensor, adapters: bool) -> Result<FeatureTaps> {
        let batch = images.shape()[0];
        let tokens = self.config.num_tokens();
        let cls_rows: Vec<usize> = (0..batch).map(|s| s * tokens).collect();
        let mut z = self.embed(g, p, images)?;
        let depth = self.blocks.len();
        let mut penultimate = None;
        for (i, (block, ad)) in self.blocks.iter().zip(&self.adapters).enumerate() {
            let h = block.ln1.forward(g, p, z)?;
            let h = block.attn.forward(g, p, h, batch, tokens)?;
            let zt = g.add(z, h)?;
            let h = block.ln2.forward(g, p, zt)?;
            let h = block.ffn.forward(g, p, h)?;
            z = g.add(zt, h)?;
            if adapters {
                z = ad.forward(g, p, z)?;
            }
            if i + 2 == depth {
                let cls = g.select_rows(z, &cls_rows)?;
                penultimate = Some(match self.tap {
                    PenultimateTap::Normalized => self.pen_norm.forward(g, p, cls)?,
                    PenultimateTap::Raw => cls,
                });
            }
        }
        let cls = g.select_rows(z, &cls_rows)?;
        let last = self.final_norm.forward(g, p, cls)?;
        Ok(FeatureTaps {
            penultimate: penultimate.expect("depth >= 2"),
            last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check_many;
    use alloc::vec;

    fn tiny() -> (ViTConfig, AdapterConfig) {
        (
            ViTConfig {
                image_size: 4,
                patch_size: 2,
                channels: 2,
                embed_dim: 4,
                depth: 2,
                heads: 2,
                ffn_hidden: 6,
            },
            AdapterConfig {
                bottleneck: 2,
                scale: 1.0,
            },
        )
    }

    #[test]
    fn token_count() {
        let c = ViTConfig {
            image_size: 16,
            patch_size: 4,
            ..ViTConfig::default()
        };
        assert_eq!(c.num_tokens(), 17);
    }

    #[test]
    fn config_errors() {
        let bad = ViTConfig {
            depth: 1,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ViTConfig {
            image_size: 15,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ViTConfig {
            heads: 5,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(AdapterConfig { bottleneck: 64, scale: 1.0 }.validate(64).is_err());
    }

    #[test]
    fn zero_embedding_gives_constant_tokens() {
        let (cfg, ad) = tiny();
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, &cfg, &ad, PenultimateTap::Normalized, &Rng::new(0)).unwrap();
        store.assign("backbone.patch_embed", Tensor::zeros(&[8, 4])).unwrap();
        store.assign("backbone.pos_embed", Tensor::zeros(&[4, 4])).unwrap();
        let cls = store.get(store.find("backbone.cls_token").unwrap()).tensor.clone();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let z = bb.embed(&mut g, &p, &Tensor::zeros(&[2, 4, 4, 2])).unwrap();
        let v = g.value(z);
        assert_eq!(v.shape(), &[10, 4]);
        for s in 0..2 {
            assert_eq!(v.row(s * 5), cls.data());
            for t in 1..5 {
                assert!(v.row(s * 5 + t).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn patch_order_is_row_major() {
        let (cfg, ad) = tiny();
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, &cfg, &ad, PenultimateTap::Normalized, &Rng::new(0)).unwrap();
        let img = Tensor::new(vec![1, 4, 4, 2], (0..32).map(|v| v as f64).collect()).unwrap();
        let p = bb.patchify(&img).unwrap();
        // top-left patch: pixels (0,0),(0,1),(1,0),(1,1), two channels each
        assert_eq!(p.row(0), &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(p.row(1), &[4.0, 5.0, 6.0, 7.0, 12.0, 13.0, 14.0, 15.0]);
        assert!(bb.patchify(&Tensor::zeros(&[1, 5, 5, 2])).is_err());
    }

    #[test]
    fn zero_init_adapters_are_exact_identity() {
        let cfg = ViTConfig {
            embed_dim: 16,
            depth: 3,
            ffn_hidden: 32,
            ..ViTConfig::default()
        };
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, &cfg, &AdapterConfig::default(), PenultimateTap::Normalized, &Rng::new(3))
            .unwrap();
        let images = Tensor::uniform(&[3, 16, 16, 3], 0.0, 1.0, &mut Rng::new(4));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let a = bb.forward_with_taps(&mut g, &p, &images).unwrap();
        let b = bb.forward_without_adapters(&mut g, &p, &images).unwrap();
        assert!(g.value(a.penultimate).bitwise_eq(g.value(b.penultimate)));
        assert!(g.value(a.last).bitwise_eq(g.value(b.last)));
        assert_eq!(g.value(a.last).shape(), &[3, 16]);
        assert!(g.value(a.last).is_finite());
    }

    #[test]
    fn adapter_identities() {
        let mut rng = Rng::new(2);
        let h = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let down = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let up = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let dv = g.constant(down.clone());
        let zero = g.constant(Tensor::zeros(&[2, 4]));
        let uv = g.constant(up.clone());
        let y = adapter(&mut g, hv, dv, zero, 1.0).unwrap();
        assert!(g.value(y).bitwise_eq(&h));
        let y = adapter(&mut g, hv, dv, uv, 0.0).unwrap();
        assert!(g.value(y).bitwise_eq(&h));

        let probe = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let err = grad_check_many(
            |g, v| {
                let y = adapter(g, v[0], v[1], v[2], 0.7)?;
                let c = g.constant(probe.clone());
                let z = g.mul(y, c)?;
                Ok(g.sum(z))
            },
            &[h, down, up],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn embedding_gradients() {
        let (cfg, ad) = tiny();
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, &cfg, &ad, PenultimateTap::Normalized, &Rng::new(0)).unwrap();
        let images = Tensor::uniform(&[2, 4, 4, 2], 0.0, 1.0, &mut Rng::new(1));
        let ids = [
            store.find("backbone.patch_embed").unwrap(),
            store.find("backbone.pos_embed").unwrap(),
            store.find("backbone.cls_token").unwrap(),
        ];
        let pts: Vec<Tensor> = ids.iter().map(|&i| store.get(i).tensor.clone()).collect();
        let probe = Tensor::uniform(&[10, 4], -1.0, 1.0, &mut Rng::new(2));
        let err = grad_check_many(
            |g, v| {
                let patches = g.constant(bb.patchify(&images)?);
                let tokens = g.matmul(patches, v[0])?;
                let tokens = g.add_tiled(tokens, v[1])?;
                let z = g.prepend_token(tokens, v[2], 2)?;
                let c = g.constant(probe.clone());
                let z = g.mul(z, c)?;
                Ok(g.sum(z))
            },
            &pts,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
