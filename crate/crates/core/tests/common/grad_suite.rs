//! Finite-difference checks shared by the gradient tests and the acceptance
//! run.

use std::rc::Rc;

use shadowmask::nn::graph::FoldGeom;
use shadowmask::nn::{Model, ModelConfig, Tensor};
use shadowmask::{EmbeddingVariant, MapeConfig};

use super::{check_model, check_op, rand_image, rand_mask, rand_tensor, rng};

/// Worst relative error of every differentiable graph op.
pub fn op_errors() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, err: f64| out.push((name.to_string(), err));
    let mut r = rng(1);

    let a = rand_tensor(&mut r, &[4, 5], -2.0, 2.0);
    let b = rand_tensor(&mut r, &[4, 5], -2.0, 2.0);
    let bias = rand_tensor(&mut r, &[5], -1.0, 1.0);
    push("add", check_op(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap(), 1));
    push("add_bias", check_op(&[a.clone(), bias], |g, v| g.add_bias(v[0], v[1]).unwrap(), 2));
    push("affine", check_op(&[a.clone()], |g, v| g.affine(v[0], -1.7, 0.3), 3));
    push("gelu", check_op(&[a.clone()], |g, v| g.gelu(v[0]), 4));
    let field: Rc<[f64]> = b.data().into();
    push("mul_field", check_op(&[a], move |g, v| g.mul_field(v[0], field.clone()).unwrap(), 5));
    // Stay clear of the clamp kinks.
    let mid = rand_tensor(&mut r, &[3, 4], 10.0, 240.0);
    let wide = Tensor::new(&[3, 4], mid.data().iter().map(|v| if v < &125.0 { v - 200.0 } else { v + 200.0 }).collect()).unwrap();
    push("clamp", check_op(&[mid, wide], |g, v| {
        let x = g.clamp(v[0], 0.0, 255.0);
        let y = g.clamp(v[1], 0.0, 255.0);
        g.add(x, y).unwrap()
    }, 6));
    let raw = rand_tensor(&mut r, &[6], 0.0, 255.0);
    push("normalize_signed", check_op(&[raw], |g, v| g.normalize_signed(v[0]), 7));

    let a = rand_tensor(&mut r, &[5, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    push("matmul", check_op(&[a, b], |g, v| g.matmul(v[0], v[1]).unwrap(), 8));
    let x = rand_tensor(&mut r, &[4, 6], -3.0, 3.0);
    let gamma = rand_tensor(&mut r, &[6], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[6], -0.5, 0.5);
    push("layer_norm", check_op(&[x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(), 9));

    for heads in [1, 2, 4] {
        let qkv = rand_tensor(&mut r, &[6, 3 * 8], -1.5, 1.5);
        let err = check_op(&[qkv], move |g, v| g.attention(v[0], heads).unwrap(), 10 + heads as u64);
        push(&format!("attention/{heads}h"), err);
    }

    for stride in [1, 2, 4] {
        let x = rand_tensor(&mut r, &[8, 8, 3], -1.0, 1.0);
        let k = rand_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut r, &[4], -0.5, 0.5);
        let err = check_op(&[x, k, b], move |g, v| g.conv3x3(v[0], v[1], v[2], stride).unwrap(), 20 + stride as u64);
        push(&format!("conv3x3/s{stride}"), err);
    }
    let geom = FoldGeom { height: 8, width: 4, channels: 3, patch: 2 };
    let tokens = rand_tensor(&mut r, &[8, 12], -1.0, 1.0);
    push("fold", check_op(&[tokens], move |g, v| g.fold(v[0], geom).unwrap(), 30));

    let x = rand_tensor(&mut r, &[4, 4, 3], -1.0, 1.0);
    let m: Rc<[f64]> = (0..16).map(|i| f64::from(i % 3 == 0)).collect();
    let w1 = Tensor::new(&[1], vec![2.5]).unwrap();
    let w2 = Tensor::new(&[1], vec![1.0]).unwrap();
    push("region_reweight", check_op(&[x.clone(), w1, w2], move |g, v| {
        g.region_reweight(v[0], m.clone(), 3, v[1], v[2]).unwrap()
    }, 40));
    // Targets well away from the inputs keep |x − t| differentiable.
    let target: Rc<[f64]> = x.data().iter().map(|v| if *v > 0.0 { v - 1.0 } else { v + 1.0 }).collect();
    push("l1", check_op(&[x], move |g, v| g.l1_loss(v[0], target.clone()).unwrap(), 41));
    out
}

fn small_model(variant: EmbeddingVariant, trainable: bool, residual: bool) -> Model {
    let cfg = ModelConfig {
        num_blocks: 2,
        num_heads: 2,
        embed_dim: 8,
        ffn_ratio: 2.0,
        patch_size: 4,
        global_residual: residual,
        pos_embed_tokens: 16,
    };
    let mape = MapeConfig { patch_size: 4, embed_dim: 8, trainable_weights: trainable, ..MapeConfig::default() };
    let mut m = Model::init(cfg, mape, variant, 9).unwrap();
    // Scale up the tiny init so every path carries a visible gradient.
    for (_, t) in m.params.iter_mut() {
        if t.data().iter().any(|v| *v != 0.0 && *v != 1.0 && *v != 2.5) {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    }
    m
}

pub struct ModelGrad {
    pub name: String,
    pub rel_err: f64,
    /// Analytic gradient is zero for a parameter the variant does use.
    pub vanished: bool,
}

/// End-to-end L1 gradient check per parameter tensor, for every embedding
/// variant with and without trainable weights and global residual, on a
/// random 16×16 input.
pub fn model_errors() -> Vec<ModelGrad> {
    let mut r = rng(6);
    let img = rand_image(&mut r, 16, 16, 40.0, 215.0);
    let gt = rand_image(&mut r, 16, 16, 0.0, 255.0);
    let mask = rand_mask(&mut r, 16, 16);
    let mut out = Vec::new();
    for variant in EmbeddingVariant::ALL {
        for (trainable, residual) in [(false, true), (true, false)] {
            let m = small_model(variant, trainable, residual);
            for (name, (err, norm)) in check_model(&m, &img, &mask, &gt, 8) {
                // Plain PE ignores the region weights; the 0/1 modulation
                // zeroes every pixel that w2 scales.
                let unused = (variant == EmbeddingVariant::PlainPe && name.starts_with("embed.w"))
                    || (variant == EmbeddingVariant::MapeMsOnly && name == "embed.w2");
                out.push(ModelGrad {
                    name: format!("{variant}/trainable={trainable}/residual={residual}/{name}"),
                    rel_err: err,
                    vanished: !unused && norm == 0.0,
                });
            }
        }
    }
    out
}
