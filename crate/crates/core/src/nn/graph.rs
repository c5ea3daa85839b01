//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in evaluation order. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every node that depends on a leaf created with
//! `requires_grad`.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::gemm::{gemm, MatMut, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of the 3×3, padding-1 convolution used for patch embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub const KERNEL: usize = 3;
    pub const PAD: usize = 1;

    pub fn out_height(&self) -> usize {
        (self.height + 2 * Self::PAD - Self::KERNEL) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * Self::PAD - Self::KERNEL) / self.stride + 1
    }

    pub fn tokens(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * Self::KERNEL * Self::KERNEL
    }
}

/// Geometry of the token-to-image fold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FoldGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl FoldGeom {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn token_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Affine(Var, f64),
    MulField(Var, Rc<[f64]>),
    RegionReweight {
        x: Var,
        unit_mask: Rc<[f64]>,
        channels: usize,
        w1: Var,
        w2: Var,
    },
    Conv3x3 {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Fold(Var, FoldGeom),
    Clamp(Var, f64, f64),
    L1 {
        x: Var,
        target: Rc<[f64]>,
    },
    Dot(Var, Rc<[f64]>),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone()).expect("node invariant")
    }

    /// A leaf that carries the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// A named trainable leaf; its gradient is reported by [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err(format!("expected 2-d operand, got {s:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, Op::Add(a, b), rg))
    }

    /// `x[n, m] + bias[m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.dims2(x)?;
        if self.value(bias).len() != m {
            return Err(shape_err(format!("bias length {} != {m}", self.value(bias).len())));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks_exact(m)
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, value, Op::AddBias(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err(format!("matmul: [{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(self.value(a), m, k),
            MatRef::new(self.value(b), k, n),
            0.0,
            MatMut::new(&mut out, m, n),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * scale + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, Op::Affine(x, scale), rg)
    }

    /// `x / 255 · 2 − 1`, evaluated in the same order as
    /// [`crate::imaging::normalize_signed`] so both agree bit for bit.
    pub fn normalize_signed(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v / 255.0 * 2.0 - 1.0).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, Op::Affine(x, 2.0 / 255.0), rg)
    }

    /// Elementwise product with a constant field of the same length.
    pub fn mul_field(&mut self, x: Var, field: Rc<[f64]>) -> Result<Var> {
        if field.len() != self.value(x).len() {
            return Err(shape_err(format!(
                "field length {} != operand length {}",
                field.len(),
                self.value(x).len()
            )));
        }
        let value = self.value(x).iter().zip(field.iter()).map(|(v, f)| v * f).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::MulField(x, field), rg))
    }

    /// `(w1·m + w2·(1 − m))·x` with a per-pixel unit mask `m` broadcast over
    /// the trailing channel axis; `w1` and `w2` are scalar nodes.
    pub fn region_reweight(
        &mut self,
        x: Var,
        unit_mask: Rc<[f64]>,
        channels: usize,
        w1: Var,
        w2: Var,
    ) -> Result<Var> {
        if unit_mask.len() * channels != self.value(x).len() {
            return Err(shape_err(format!(
                "mask of {} pixels does not cover operand of length {}",
                unit_mask.len(),
                self.value(x).len()
            )));
        }
        if self.value(w1).len() != 1 || self.value(w2).len() != 1 {
            return Err(shape_err("region weights must be scalars".into()));
        }
        let (a, b) = (self.value(w1)[0], self.value(w2)[0]);
        let value = self
            .value(x)
            .chunks_exact(channels)
            .zip(unit_mask.iter())
            .flat_map(|(px, &m)| {
                let f = a * m + b * (1.0 - m);
                px.iter().map(move |v| f * v)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, w1, w2]);
        Ok(self.push(
            shape,
            value,
            Op::RegionReweight {
                x,
                unit_mask,
                channels,
                w1,
                w2,
            },
            rg,
        ))
    }

    /// 3×3 convolution, padding 1, over an `[H, W, C]` input. Kernel is
    /// `[E, C, 3, 3]`, bias `[E]`; output is the flattened token grid
    /// `[tokens, E]` in row-major grid order.
    pub fn conv3x3(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (h, w, c) = match self.shape(x)[..] {
            [h, w, c] => (h, w, c),
            ref s => return Err(shape_err(format!("conv input must be [H, W, C], got {s:?}"))),
        };
        let (e, kc) = match self.shape(kernel)[..] {
            [e, kc, 3, 3] => (e, kc),
            ref s => return Err(shape_err(format!("kernel must be [E, C, 3, 3], got {s:?}"))),
        };
        if kc != c {
            return Err(shape_err(format!("kernel expects {kc} channels, input has {c}")));
        }
        if self.value(bias).len() != e {
            return Err(shape_err(format!("bias length {} != {e}", self.value(bias).len())));
        }
        if stride == 0 || h == 0 || w == 0 {
            return Err(shape_err("empty convolution".into()));
        }
        let geom = ConvGeom {
            height: h,
            width: w,
            channels: c,
            stride,
        };
        let cols = im2col(self.value(x), geom);
        let (t, plen) = (geom.tokens(), geom.patch_len());
        let mut out = vec![0.0; t * e];
        let bv = self.value(bias);
        for row in out.chunks_exact_mut(e) {
            row.copy_from_slice(bv);
        }
        gemm(
            1.0,
            MatRef::new(&cols, t, plen),
            MatRef::new(self.value(kernel), e, plen).t(),
            1.0,
            MatMut::new(&mut out, t, e),
        );
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(
            vec![t, e],
            out,
            Op::Conv3x3 {
                x,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Normalizes each row of `[n, d]` to zero mean and unit variance, then
    /// applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, d) = self.dims2(x)?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err(format!("layer norm affine length must be {d}")));
        }
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut inv_std = Vec::new();
        for row in self.value(x).chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let value = xhat
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((v, g), b)| v * g + b))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, Op::Gelu(x), rg)
    }

    /// Multi-head scaled dot-product attention over packed projections
    /// `qkv = [Q | K | V]` of shape `[T, 3d]`. Returns the concatenated head
    /// outputs `[T, d]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (t, d3) = self.dims2(qkv)?;
        if d3 % 3 != 0 || heads == 0 || (d3 / 3) % heads != 0 {
            return Err(shape_err(format!(
                "attention: width {d3} not divisible into 3 x {heads} heads"
            )));
        }
        let d = d3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv);
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(
                scale,
                MatRef::block(src, t, d3, h * dh, dh),
                MatRef::block(src, t, d3, d + h * dh, dh).t(),
                0.0,
                MatMut::new(p, t, t),
            );
            for row in p.chunks_exact_mut(t) {
                softmax_in_place(row);
            }
            gemm(
                1.0,
                MatRef::new(p, t, t),
                MatRef::block(src, t, d3, 2 * d + h * dh, dh),
                0.0,
                MatMut::block(&mut out, t, d, h * dh, dh),
            );
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(vec![t, d], out, Op::Attention { qkv, heads, probs }, rg))
    }

    /// Folds `[tokens, p·p·C]` patch vectors back into an `[H, W, C]` image.
    pub fn fold(&mut self, x: Var, geom: FoldGeom) -> Result<Var> {
        let (gh, gw) = geom.grid();
        let (t, len) = self.dims2(x)?;
        if t != gh * gw || len != geom.token_len() || geom.height % geom.patch != 0 || geom.width % geom.patch != 0 {
            return Err(shape_err(format!("fold: [{t}, {len}] does not tile {geom:?}")));
        }
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for_each_fold_index(geom, |ti, pi| out[pi] = src[ti]);
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![geom.height, geom.width, geom.channels],
            out,
            Op::Fold(x, geom),
            rg,
        ))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, Op::Clamp(x, lo, hi), rg)
    }

    /// Mean absolute difference to a constant target; a scalar node.
    pub fn l1_loss(&mut self, x: Var, target: Rc<[f64]>) -> Result<Var> {
        if target.len() != self.value(x).len() {
            return Err(shape_err(format!(
                "l1: prediction length {} != target length {}",
                self.value(x).len(),
                target.len()
            )));
        }
        let n = target.len() as f64;
        let sum: f64 = self.value(x).iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![sum / n], Op::L1 { x, target }, rg))
    }

    /// `Σ wᵢ·xᵢ` against constant weights; a scalar probe for gradient checks.
    pub fn dot(&mut self, x: Var, weights: Rc<[f64]>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err("dot: length mismatch".into()));
        }
        let s = self.value(x).iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![s], Op::Dot(x, weights), rg))
    }

    /// Softmax probabilities `[heads, T, T]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every named parameter, in registration order.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.value(*v).len()]);
                (name.clone(), g)
            })
            .collect()
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(grads, v, self.value(v).len(), |acc| add_into(acc, g));
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    accumulate(grads, *x, g.len(), |acc| add_into(acc, g));
                }
                if wants(*bias) {
                    let m = self.value(*bias).len();
                    accumulate(grads, *bias, m, |acc| {
                        for row in g.chunks_exact(m) {
                            add_into(acc, row);
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    let bv = self.value(*b);
                    accumulate(grads, *a, m * k, |acc| {
                        gemm(1.0, MatRef::new(g, m, n), MatRef::new(bv, k, n).t(), 1.0, MatMut::new(acc, m, k))
                    });
                }
                if wants(*b) {
                    let av = self.value(*a);
                    accumulate(grads, *b, k * n, |acc| {
                        gemm(1.0, MatRef::new(av, m, k).t(), MatRef::new(g, m, n), 1.0, MatMut::new(acc, k, n))
                    });
                }
            }
            Op::Affine(x, scale) => {
                if wants(*x) {
                    accumulate(grads, *x, g.len(), |acc| {
                        for (a, gi) in acc.iter_mut().zip(g) {
                            *a += scale * gi;
                        }
                    });
                }
            }
            Op::MulField(x, field) => {
                if wants(*x) {
                    accumulate(grads, *x, g.len(), |acc| {
                        for ((a, gi), f) in acc.iter_mut().zip(g).zip(field.iter()) {
                            *a += gi * f;
                        }
                    });
                }
            }
            Op::RegionReweight {
                x,
                unit_mask,
                channels,
                w1,
                w2,
            } => {
                let (a, b) = (self.value(*w1)[0], self.value(*w2)[0]);
                if wants(*x) {
                    accumulate(grads, *x, g.len(), |acc| {
                        for ((acc_px, g_px), &m) in acc
                            .chunks_exact_mut(*channels)
                            .zip(g.chunks_exact(*channels))
                            .zip(unit_mask.iter())
                        {
                            let f = a * m + b * (1.0 - m);
                            for (ac, gi) in acc_px.iter_mut().zip(g_px) {
                                *ac += f * gi;
                            }
                        }
                    });
                }
                if wants(*w1) || wants(*w2) {
                    let xv = self.value(*x);
                    let (mut d1, mut d2) = (0.0, 0.0);
                    for ((x_px, g_px), &m) in xv
                        .chunks_exact(*channels)
                        .zip(g.chunks_exact(*channels))
                        .zip(unit_mask.iter())
                    {
                        let s: f64 = x_px.iter().zip(g_px).map(|(x, g)| x * g).sum();
                        d1 += m * s;
                        d2 += (1.0 - m) * s;
                    }
                    if wants(*w1) {
                        accumulate(grads, *w1, 1, |acc| acc[0] += d1);
                    }
                    if wants(*w2) {
                        accumulate(grads, *w2, 1, |acc| acc[0] += d2);
                    }
                }
            }
            Op::Conv3x3 {
                x,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (t, plen) = (geom.tokens(), geom.patch_len());
                let e = self.value(*bias).len();
                if wants(*bias) {
                    accumulate(grads, *bias, e, |acc| {
                        for row in g.chunks_exact(e) {
                            add_into(acc, row);
                        }
                    });
                }
                if wants(*kernel) {
                    accumulate(grads, *kernel, e * plen, |acc| {
                        gemm(1.0, MatRef::new(g, t, e).t(), MatRef::new(cols, t, plen), 1.0, MatMut::new(acc, e, plen))
                    });
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; t * plen];
                    gemm(
                        1.0,
                        MatRef::new(g, t, e),
                        MatRef::new(self.value(*kernel), e, plen),
                        0.0,
                        MatMut::new(&mut dcols, t, plen),
                    );
                    accumulate(grads, *x, self.value(*x).len(), |acc| col2im_add(&dcols, *geom, acc));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).len();
                if wants(*gamma) {
                    accumulate(grads, *gamma, d, |acc| {
                        for (g_row, xh_row) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for ((a, gi), xh) in acc.iter_mut().zip(g_row).zip(xh_row) {
                                *a += gi * xh;
                            }
                        }
                    });
                }
                if wants(*beta) {
                    accumulate(grads, *beta, d, |acc| {
                        for row in g.chunks_exact(d) {
                            add_into(acc, row);
                        }
                    });
                }
                if wants(*x) {
                    let gam = self.value(*gamma);
                    accumulate(grads, *x, g.len(), |acc| {
                        let mut dxhat = vec![0.0; d];
                        for (((acc_row, g_row), xh_row), is) in acc
                            .chunks_exact_mut(d)
                            .zip(g.chunks_exact(d))
                            .zip(xhat.chunks_exact(d))
                            .zip(inv_std)
                        {
                            for ((dx, gi), gm) in dxhat.iter_mut().zip(g_row).zip(gam) {
                                *dx = gi * gm;
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dx = dxhat.iter().zip(xh_row).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for ((a, dx), xh) in acc_row.iter_mut().zip(&dxhat).zip(xh_row) {
                                *a += is * (dx - mean_d - xh * mean_dx);
                            }
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = self.value(*x);
                    accumulate(grads, *x, g.len(), |acc| {
                        for ((a, gi), &v) in acc.iter_mut().zip(g).zip(xv) {
                            *a += gi * gelu_grad(v);
                        }
                    });
                }
            }
            Op::Attention { qkv, heads, probs } => {
                if wants(*qkv) {
                    let (t, d3) = (self.shape(*qkv)[0], self.shape(*qkv)[1]);
                    let src = self.value(*qkv);
                    accumulate(grads, *qkv, t * d3, |acc| {
                        attention_backward(src, probs, g, *heads, t, d3, acc)
                    });
                }
            }
            Op::Fold(x, geom) => {
                if wants(*x) {
                    accumulate(grads, *x, g.len(), |acc| {
                        for_each_fold_index(*geom, |ti, pi| acc[ti] += g[pi]);
                    });
                }
            }
            Op::Clamp(x, lo, hi) => {
                if wants(*x) {
                    let xv = self.value(*x);
                    accumulate(grads, *x, g.len(), |acc| {
                        for ((a, gi), v) in acc.iter_mut().zip(g).zip(xv) {
                            if (*lo..=*hi).contains(v) {
                                *a += gi;
                            }
                        }
                    });
                }
            }
            Op::L1 { x, target } => {
                if wants(*x) {
                    let xv = self.value(*x);
                    let scale = g[0] / target.len() as f64;
                    accumulate(grads, *x, xv.len(), |acc| {
                        for ((a, v), t) in acc.iter_mut().zip(xv).zip(target.iter()) {
                            let s = v - t;
                            if s > 0.0 {
                                *a += scale;
                            } else if s < 0.0 {
                                *a -= scale;
                            }
                        }
                    });
                }
            }
            Op::Dot(x, w) => {
                if wants(*x) {
                    accumulate(grads, *x, w.len(), |acc| {
                        for (a, wi) in acc.iter_mut().zip(w.iter()) {
                            *a += g[0] * wi;
                        }
                    });
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn attention_backward(
    src: &[f64],
    probs: &[f64],
    g: &[f64],
    heads: usize,
    t: usize,
    d3: usize,
    acc: &mut [f64],
) {
    let d = d3 / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; t * t];
    for h in 0..heads {
        let p = &probs[h * t * t..(h + 1) * t * t];
        let g_h = MatRef::block(g, t, d, h * dh, dh);
        // dV = Pᵀ·dO
        gemm(1.0, MatRef::new(p, t, t).t(), g_h, 1.0, MatMut::block(acc, t, d3, 2 * d + h * dh, dh));
        // dP = dO·Vᵀ
        gemm(1.0, g_h, MatRef::block(src, t, d3, 2 * d + h * dh, dh).t(), 0.0, MatMut::new(&mut dp, t, t));
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for (dp_row, p_row) in dp.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
            let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
            for (a, pv) in dp_row.iter_mut().zip(p_row) {
                *a = pv * (*a - dot);
            }
        }
        // dQ = scale·dS·K, dK = scale·dSᵀ·Q
        gemm(
            scale,
            MatRef::new(&dp, t, t),
            MatRef::block(src, t, d3, d + h * dh, dh),
            1.0,
            MatMut::block(acc, t, d3, h * dh, dh),
        );
        gemm(
            scale,
            MatRef::new(&dp, t, t).t(),
            MatRef::block(src, t, d3, h * dh, dh),
            1.0,
            MatMut::block(acc, t, d3, d + h * dh, dh),
        );
    }
}

/// Patches of the padded input, one row per output position, columns ordered
/// `(channel, ky, kx)` to match an `[E, C, 3, 3]` kernel.
fn im2col(x: &[f64], geom: ConvGeom) -> Vec<f64> {
    let (ho, wo, plen) = (geom.out_height(), geom.out_width(), geom.patch_len());
    let mut cols = vec![0.0; ho * wo * plen];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * plen..][..plen];
            for ky in 0..3 {
                let Some(iy) = (oy * geom.stride + ky).checked_sub(ConvGeom::PAD).filter(|&y| y < geom.height) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = (ox * geom.stride + kx).checked_sub(ConvGeom::PAD).filter(|&x| x < geom.width)
                    else {
                        continue;
                    };
                    let base = (iy * geom.width + ix) * geom.channels;
                    for c in 0..geom.channels {
                        row[c * 9 + ky * 3 + kx] = x[base + c];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], geom: ConvGeom, dx: &mut [f64]) {
    let (ho, wo, plen) = (geom.out_height(), geom.out_width(), geom.patch_len());
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &dcols[(oy * wo + ox) * plen..][..plen];
            for ky in 0..3 {
                let Some(iy) = (oy * geom.stride + ky).checked_sub(ConvGeom::PAD).filter(|&y| y < geom.height) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = (ox * geom.stride + kx).checked_sub(ConvGeom::PAD).filter(|&x| x < geom.width)
                    else {
                        continue;
                    };
                    let base = (iy * geom.width + ix) * geom.channels;
                    for c in 0..geom.channels {
                        dx[base + c] += row[c * 9 + ky * 3 + kx];
                    }
                }
            }
        }
    }
}

fn for_each_fold_index(geom: FoldGeom, mut f: impl FnMut(usize, usize)) {
    let (gh, gw) = geom.grid();
    let (p, c) = (geom.patch, geom.channels);
    let len = geom.token_len();
    for ty in 0..gh {
        for tx in 0..gw {
            let t = ty * gw + tx;
            for dy in 0..p {
                for dx in 0..p {
                    let pix = ((ty * p + dy) * geom.width + tx * p + dx) * c;
                    let tok = t * len + (dy * p + dx) * c;
                    for ch in 0..c {
                        f(tok + ch, pix + ch);
                    }
                }
            }
        }
    }
}
