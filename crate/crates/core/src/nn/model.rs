//! Single-resolution transformer restoration model.
//!
//! ```text
//! tokens = embed(I, M)                      [T, E]
//! repeat N: tokens += MHA(LN(tokens))
//!           tokens += FFN(LN(tokens))
//! delta  = fold(tokens · W_head + b_head)   [H, W, 3]
//! J      = clamp(I + 127.5·delta, 0, 255)   (global residual)
//!        | clamp(127.5·delta + 127.5, 0, 255)
//! ```
//!
//! With the global residual, `I + 127.5·delta` is the raw-scale form of
//! `denormalize(normalize(I) + delta)`.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::graph::{FoldGeom, Graph, Var};
use super::layers::{self, AttentionVars, FfnVars};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::imaging::{FloatImage, RangeTag, RawMask};
use crate::mape::{self, EmbeddingVariant, MapeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub ffn_ratio: f64,
    pub patch_size: usize,
    pub global_residual: bool,
    /// Token count of a learned additive positional table; 0 disables it.
    #[serde(default)]
    pub pos_embed_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            num_heads: 4,
            embed_dim: 32,
            ffn_ratio: 4.0,
            patch_size: 4,
            global_residual: true,
            pos_embed_tokens: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be at least 1".into()));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.patch_size == 0 || self.ffn_hidden() == 0 {
            return Err(Error::Config("patch_size and ffn width must be positive".into()));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.ffn_ratio).round() as usize
    }
}

/// Named parameter tensors in a stable (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub mape: MapeConfig,
    pub variant: EmbeddingVariant,
    pub params: ParamStore,
}

const INIT_STD: f64 = 0.02;

fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape product")
}

/// Graph handles of one transformer block.
struct BlockVars {
    ln1: (Var, Var),
    attn: AttentionVars,
    ln2: (Var, Var),
    ffn: FfnVars,
}

/// Output of [`Model::build`].
pub struct Forward {
    pub image: Var,
    pub output: Var,
}

impl Model {
    /// Random initialization: truncated normal (σ = 0.02) for projections,
    /// zero biases, unit/zero layer norms. The same seed gives identical
    /// parameters for every embedding variant.
    pub fn init(config: ModelConfig, mape: MapeConfig, variant: EmbeddingVariant, seed: u64) -> Result<Self> {
        config.validate()?;
        mape.validate()?;
        if mape.patch_size != config.patch_size || mape.embed_dim != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding config (patch {}, dim {}) disagrees with model (patch {}, dim {})",
                mape.patch_size, mape.embed_dim, config.patch_size, config.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (e, hid, p) = (config.embed_dim, config.ffn_hidden(), config.patch_size);
        let mut params = ParamStore::default();
        params.insert("embed.proj.kernel", trunc_normal(&mut rng, &[e, 3, 3, 3]));
        params.insert("embed.proj.bias", Tensor::zeros(&[e]));
        if mape.trainable_weights {
            params.insert("embed.w1", Tensor::scalar(mape.w1));
            params.insert("embed.w2", Tensor::scalar(mape.w2));
        }
        if config.pos_embed_tokens > 0 {
            params.insert("embed.pos", trunc_normal(&mut rng, &[config.pos_embed_tokens, e]));
        }
        for i in 0..config.num_blocks {
            let b = |s: &str| format!("blocks.{i}.{s}");
            params.insert(b("ln1.gamma"), Tensor::full(&[e], 1.0));
            params.insert(b("ln1.beta"), Tensor::zeros(&[e]));
            params.insert(b("attn.qkv.weight"), trunc_normal(&mut rng, &[e, 3 * e]));
            params.insert(b("attn.qkv.bias"), Tensor::zeros(&[3 * e]));
            params.insert(b("attn.out.weight"), trunc_normal(&mut rng, &[e, e]));
            params.insert(b("attn.out.bias"), Tensor::zeros(&[e]));
            params.insert(b("ln2.gamma"), Tensor::full(&[e], 1.0));
            params.insert(b("ln2.beta"), Tensor::zeros(&[e]));
            params.insert(b("ffn.fc1.weight"), trunc_normal(&mut rng, &[e, hid]));
            params.insert(b("ffn.fc1.bias"), Tensor::zeros(&[hid]));
            params.insert(b("ffn.fc2.weight"), trunc_normal(&mut rng, &[hid, e]));
            params.insert(b("ffn.fc2.bias"), Tensor::zeros(&[e]));
        }
        params.insert("head.weight", trunc_normal(&mut rng, &[e, p * p * 3]));
        params.insert("head.bias", Tensor::zeros(&[p * p * 3]));
        Ok(Self {
            config,
            mape,
            variant,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Records the forward pass of `img` on `g`.
    pub fn build(&self, g: &mut Graph, img: &FloatImage, mask: &RawMask, image_requires_grad: bool) -> Result<Forward> {
        img.expect_range(RangeTag::Raw255)?;
        if img.channels() != 3 {
            return Err(Error::Channels {
                expected: 3,
                actual: img.channels(),
            });
        }
        let (h, w) = (img.height(), img.width());
        self.mape.check_dims(h, w)?;
        let image = g.leaf(
            &Tensor::new(&[h, w, 3], img.data().to_vec())?.with_requires_grad(image_requires_grad),
        );
        let p = |g: &mut Graph, name: &str| -> Result<Var> { Ok(g.param(name, self.params.get(name)?)) };

        let kernel = p(g, "embed.proj.kernel")?;
        let bias = p(g, "embed.proj.bias")?;
        let (w1, w2) = if self.mape.trainable_weights {
            (p(g, "embed.w1")?, p(g, "embed.w2")?)
        } else {
            (g.leaf(&Tensor::scalar(self.mape.w1)), g.leaf(&Tensor::scalar(self.mape.w2)))
        };
        let mut x = mape::embed(g, image, mask, kernel, bias, w1, w2, &self.mape, self.variant)?;
        if self.config.pos_embed_tokens > 0 {
            let pos = p(g, "embed.pos")?;
            x = g.add(x, pos)?;
        }
        for i in 0..self.config.num_blocks {
            let n = |s: &str| format!("blocks.{i}.{s}");
            let bv = BlockVars {
                ln1: (p(g, &n("ln1.gamma"))?, p(g, &n("ln1.beta"))?),
                attn: AttentionVars {
                    qkv_weight: p(g, &n("attn.qkv.weight"))?,
                    qkv_bias: p(g, &n("attn.qkv.bias"))?,
                    out_weight: p(g, &n("attn.out.weight"))?,
                    out_bias: p(g, &n("attn.out.bias"))?,
                    heads: self.config.num_heads,
                },
                ln2: (p(g, &n("ln2.gamma"))?, p(g, &n("ln2.beta"))?),
                ffn: FfnVars {
                    w1: p(g, &n("ffn.fc1.weight"))?,
                    b1: p(g, &n("ffn.fc1.bias"))?,
                    w2: p(g, &n("ffn.fc2.weight"))?,
                    b2: p(g, &n("ffn.fc2.bias"))?,
                },
            };
            let h1 = g.layer_norm(x, bv.ln1.0, bv.ln1.1)?;
            let a = layers::attention(g, h1, bv.attn)?;
            x = g.add(x, a)?;
            let h2 = g.layer_norm(x, bv.ln2.0, bv.ln2.1)?;
            let f = layers::feed_forward(g, h2, bv.ffn)?;
            x = g.add(x, f)?;
        }
        let hw = p(g, "head.weight")?;
        let hb = p(g, "head.bias")?;
        let patches = layers::linear(g, x, hw, hb)?;
        let delta = g.fold(
            patches,
            FoldGeom {
                height: h,
                width: w,
                channels: 3,
                patch: self.config.patch_size,
            },
        )?;
        let raw = if self.config.global_residual {
            let scaled = g.affine(delta, 127.5, 0.0);
            g.add(image, scaled)?
        } else {
            g.affine(delta, 127.5, 127.5)
        };
        let output = g.clamp(raw, 0.0, 255.0);
        Ok(Forward { image, output })
    }

    /// Restored image `J` in `raw255`.
    pub fn forward(&self, img: &FloatImage, mask: &RawMask) -> Result<FloatImage> {
        let mut g = Graph::new();
        let f = self.build(&mut g, img, mask, false)?;
        FloatImage::new(img.height(), img.width(), 3, g.value(f.output).to_vec(), RangeTag::Raw255)
    }

    /// L1 loss against `gt` and the gradient of every parameter.
    pub fn loss_and_grads(
        &self,
        img: &FloatImage,
        mask: &RawMask,
        gt: &FloatImage,
    ) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let mut g = Graph::new();
        let f = self.build(&mut g, img, mask, false)?;
        let target: Rc<[f64]> = gt.data().into();
        let loss = g.l1_loss(f.output, target)?;
        let value = g.value(loss)[0];
        let grads = g.backward(loss);
        Ok((value, g.param_grads(&grads)))
    }

    pub fn loss(&self, img: &FloatImage, mask: &RawMask, gt: &FloatImage) -> Result<f64> {
        layers::l1_loss(&self.forward(img, mask)?, gt)
    }
}
