//! Transformer building blocks as graph builders, plus tensor-level
//! convenience wrappers that evaluate a single op.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::imaging::FloatImage;

/// Attention projections. `qkv_weight` packs `[W_q | W_k | W_v]` as `[d, 3d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub heads: usize,
}

/// Two affine maps with GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Node handles of [`AttentionParams`] on a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn attention(g: &mut Graph, x: Var, p: AttentionVars) -> Result<Var> {
    let qkv = linear(g, x, p.qkv_weight, p.qkv_bias)?;
    let heads = g.attention(qkv, p.heads)?;
    linear(g, heads, p.out_weight, p.out_bias)
}

pub fn feed_forward(g: &mut Graph, x: Var, p: FfnVars) -> Result<Var> {
    let h = linear(g, x, p.w1, p.b1)?;
    let h = g.gelu(h);
    linear(g, h, p.w2, p.b2)
}

impl AttentionParams {
    pub fn leaves(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            qkv_weight: g.leaf(&self.qkv_weight),
            qkv_bias: g.leaf(&self.qkv_bias),
            out_weight: g.leaf(&self.out_weight),
            out_bias: g.leaf(&self.out_bias),
            heads: self.heads,
        }
    }
}

impl FfnParams {
    pub fn leaves(&self, g: &mut Graph) -> FfnVars {
        FfnVars {
            w1: g.leaf(&self.w1),
            b1: g.leaf(&self.b1),
            w2: g.leaf(&self.w2),
            b2: g.leaf(&self.b2),
        }
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[d, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    /// Hidden width `2d` with `w1 = [I | −I]`, `w2 = [I ; −I]`: since
    /// `gelu(x) − gelu(−x) = x`, the block reproduces its input.
    pub fn identity(d: usize) -> Self {
        let mut p = Self::zeros(d, 2 * d);
        for i in 0..d {
            p.w1.data_mut()[i * 2 * d + i] = 1.0;
            p.w1.data_mut()[i * 2 * d + d + i] = -1.0;
            p.w2.data_mut()[i * d + i] = 1.0;
            p.w2.data_mut()[(d + i) * d + i] = -1.0;
        }
        p
    }
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.leaf(x), g.leaf(gamma), g.leaf(beta));
    let y = g.layer_norm(xv, gv, bv)?;
    Ok(g.tensor(y))
}

pub fn multi_head_attention(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let vars = p.leaves(&mut g);
    let y = attention(&mut g, xv, vars)?;
    Ok(g.tensor(y))
}

/// Softmax weights `[heads, T, T]` that [`multi_head_attention`] uses.
pub fn attention_weights(x: &Tensor, p: &AttentionParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let vars = p.leaves(&mut g);
    let qkv = linear(&mut g, xv, vars.qkv_weight, vars.qkv_bias)?;
    let a = g.attention(qkv, p.heads)?;
    Ok(g.attention_probs(a).expect("attention node").to_vec())
}

pub fn ffn(x: &Tensor, p: &FfnParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let vars = p.leaves(&mut g);
    let y = feed_forward(&mut g, xv, vars)?;
    Ok(g.tensor(y))
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &FloatImage, gt: &FloatImage) -> Result<f64> {
    if !pred.same_dims(gt) {
        return Err(Error::Shape(format!(
            "l1: {}x{}x{} vs {}x{}x{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            gt.height(),
            gt.width(),
            gt.channels()
        )));
    }
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}
