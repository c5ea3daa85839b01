#![allow(dead_code)]

pub mod grad_suite;
pub mod oracles;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadowmask::nn::{Graph, Model, Tensor, Var};
use shadowmask::{FloatImage, RangeTag, RawMask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> FloatImage {
    let data = (0..h * w * 3).map(|_| rng.gen_range(lo..hi)).collect();
    FloatImage::new(h, w, 3, data, RangeTag::Raw255).unwrap()
}

pub fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RawMask {
    let (cy, cx) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
    let r = rng.gen_range(2.0..(h.min(w) as f64 / 2.0));
    let m = RawMask::from_fn(h, w, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r);
    if m.shadow_count() == 0 || m.shadow_count() == h * w {
        RawMask::from_fn(h, w, |y, _| y < h / 2)
    } else {
        m
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn probe(g: &mut Graph, out: Var, weights: &Rc<[f64]>) -> Var {
    g.dot(out, weights.clone()).unwrap()
}

/// Checks the analytic gradient of `Σ wᵢ·op(inputs)ᵢ` for random `w` against
/// central differences. Returns the worst relative error over all inputs.
pub fn check_op(inputs: &[Tensor], op: impl Fn(&mut Graph, &[Var]) -> Var, seed: u64) -> f64 {
    let build = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(&t.clone().with_requires_grad(true))).collect();
        let out = op(&mut g, &vars);
        (g, vars, out)
    };
    let (g0, _, out0) = build(inputs);
    let mut r = rng(seed);
    let weights: Rc<[f64]> = (0..g0.value(out0).len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let eval = |ins: &[Tensor]| {
        let (mut g, _, out) = build(ins);
        let root = probe(&mut g, out, &weights);
        g.value(root)[0]
    };
    let (mut g, vars, out) = build(inputs);
    let root = probe(&mut g, out, &weights);
    let grads = g.backward(root);
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = Vec::with_capacity(t.numel());
        for j in 0..t.numel() {
            let h = 1e-6 * t.data()[j].abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Relative error and analytic gradient norm of the end-to-end L1 gradient
/// per parameter tensor, probing up to `samples` evenly spaced entries.
pub fn check_model(model: &Model, img: &FloatImage, mask: &RawMask, gt: &FloatImage, samples: usize) -> BTreeMap<String, (f64, f64)> {
    let (_, grads) = model.loss_and_grads(img, mask, gt).unwrap();
    let mut out = BTreeMap::new();
    for name in model.params.names().cloned().collect::<Vec<_>>() {
        let n = model.params.get(&name).unwrap().numel();
        let step = (n / samples).max(1);
        let idx: Vec<usize> = (0..n).step_by(step).take(samples).collect();
        let analytic: Vec<f64> = idx.iter().map(|&j| grads[&name][j]).collect();
        let numeric: Vec<f64> = idx
            .iter()
            .map(|&j| {
                let h = 1e-5;
                let mut m = model.clone();
                m.params.get_mut(&name).unwrap().data_mut()[j] += h;
                let lp = m.loss(img, mask, gt).unwrap();
                m.params.get_mut(&name).unwrap().data_mut()[j] -= 2.0 * h;
                let lm = m.loss(img, mask, gt).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect();
        let gn = norm(&grads[&name]);
        out.insert(name, (rel_err(&analytic, &numeric), gn));
    }
    out
}
