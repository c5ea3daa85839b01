//! Synthetic shadow triplets rendered with the physical model.
//!
//! Each image gets a smooth random reflectance, a convex polygon or ellipse
//! mask, a constant attenuation `a` and per-channel ambient light with
//! `L_d + L_a` fixed, so the shadow-free image is exactly the relit shadow
//! image. Sample `i` of a split draws from its own ChaCha8 stream, so a
//! sample does not depend on how many others are generated.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, Split};
use crate::error::{Error, Result};
use crate::imaging::{save_image, save_mask, FloatImage, RangeTag, RawMask};
use crate::shadow_model::{
    render_shadow, render_shadow_free, AttenuationField, LinearShadowParams, SceneParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    /// Uniform range of the per-image attenuation `a`.
    pub attenuation: [f64; 2],
    /// Uniform range of each channel's ambient light `L_a`.
    pub ambient: [f64; 2],
    /// `L_d + L_a` for every channel.
    pub total_light: f64,
    /// Target shadow area as a fraction of the image.
    pub mask_area: [f64; 2],
    /// Reflectance clamp range.
    pub reflectance: [f64; 2],
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            attenuation: [0.2, 0.7],
            ambient: [0.4, 0.7],
            total_light: 1.0,
            mask_area: [0.15, 0.45],
            reflectance: [0.05, 0.95],
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if r[0] <= r[1] && r[0] >= lo && r[1] <= hi {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} range {r:?} must be ordered within [{lo}, {hi}]")))
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        check_range("attenuation", self.attenuation, f64::MIN_POSITIVE, 1.0)?;
        check_range("ambient", self.ambient, f64::MIN_POSITIVE, self.total_light)?;
        check_range("mask_area", self.mask_area, 0.01, 0.9)?;
        check_range("reflectance", self.reflectance, 0.0, 1.0)?;
        Ok(())
    }
}

/// One rendered triplet before quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub scene: SceneParams,
    pub attenuation: f64,
    pub mask: RawMask,
    pub shadow: FloatImage,
    pub free: FloatImage,
}

impl SynthSample {
    /// The exact per-channel map from shadow to lit values.
    pub fn linear_params(&self) -> LinearShadowParams {
        LinearShadowParams::from_scene(&self.scene, self.attenuation)
    }

    /// Byte-quantized triplet, identical to what is written to disk.
    pub fn to_sample(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            shadow: self.shadow.quantize(),
            mask: self.mask.clone(),
            free: self.free.quantize(),
        }
    }
}

/// Bilinear upsampling of a random `(cells+1)²` lattice in [-1, 1].
fn smooth_field(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let y = (r as f64 + 0.5) / size as f64 * cells as f64;
        let (y0, fy) = (y.floor() as usize, y.fract());
        for c in 0..size {
            let x = (c as f64 + 0.5) / size as f64 * cells as f64;
            let (x0, fx) = (x.floor() as usize, x.fract());
            let at = |yy: usize, xx: usize| lattice[yy * n + xx];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn reflectance(rng: &mut ChaCha8Rng, size: usize, range: [f64; 2]) -> FloatImage {
    let mut data = vec![0.0; size * size * 3];
    for k in 0..3 {
        let base = rng.gen_range(0.3..=0.7);
        let low = smooth_field(rng, size, 3);
        let high = smooth_field(rng, size, 12);
        for i in 0..size * size {
            data[3 * i + k] = (base + 0.25 * low[i] + 0.08 * high[i]).clamp(range[0], range[1]);
        }
    }
    FloatImage::new(size, size, 3, data, RangeTag::Unit1).expect("sized")
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn random_mask(rng: &mut ChaCha8Rng, size: usize, area: [f64; 2]) -> RawMask {
    let s = size as f64;
    let n = (size * size) as f64;
    loop {
        let target = rng.gen_range(area[0]..=area[1]) * n;
        let (cy, cx) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
        let mask = if rng.gen_bool(0.5) {
            let aspect = rng.gen_range(0.5..=1.0);
            let ra = (target / (std::f64::consts::PI * aspect)).sqrt();
            let rb = ra * aspect;
            let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (sn, cs) = th.sin_cos();
            RawMask::from_fn(size, size, |r, c| {
                let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                let u = dx * cs + dy * sn;
                let v = -dx * sn + dy * cs;
                (u / ra).powi(2) + (v / rb).powi(2) <= 1.0
            })
        } else {
            let k = rng.gen_range(5..=8);
            let radius = (target / std::f64::consts::PI).sqrt() * 1.15;
            let pts: Vec<(f64, f64)> = (0..k)
                .map(|_| {
                    let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let rr = radius * rng.gen_range(0.7..=1.0);
                    (cx + rr * t.cos(), cy + rr * t.sin())
                })
                .collect();
            let hull = convex_hull(pts);
            RawMask::from_fn(size, size, |r, c| {
                let p = (c as f64 + 0.5, r as f64 + 0.5);
                hull.len() >= 3 && (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
            })
        };
        let count = mask.shadow_count() as f64;
        if count >= 0.5 * area[0] * n && count <= (area[1] * 1.25).min(0.95) * n {
            return mask;
        }
    }
}

fn stream(split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    (tag << 32) | index as u64
}

/// Renders sample `index` of `split`.
pub fn generate_sample(size: usize, seed: u64, split: Split, index: usize, params: &SynthParams) -> Result<SynthSample> {
    params.validate()?;
    if size < 8 {
        return Err(Error::Config(format!("synthetic size must be at least 8, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream(split, index));
    let refl = reflectance(&mut rng, size, params.reflectance);
    let ambient: [f64; 3] = std::array::from_fn(|_| rng.gen_range(params.ambient[0]..=params.ambient[1]));
    let direct = ambient.map(|la| params.total_light - la);
    let a = rng.gen_range(params.attenuation[0]..=params.attenuation[1]);
    let mask = random_mask(&mut rng, size, params.mask_area);
    let scene = SceneParams::new(refl, direct, ambient)?;
    let atten = AttenuationField::constant(&mask, a)?;
    let shadow = render_shadow(&scene, &atten, &mask)?;
    let free = render_shadow_free(&scene);
    Ok(SynthSample {
        id: format!("{index:05}"),
        scene,
        attenuation: a,
        mask,
        shadow,
        free,
    })
}

/// Quantized in-memory split, identical to [`generate_synthetic`] output
/// read back from disk.
pub fn synthetic_split(n: usize, size: usize, seed: u64, split: Split, params: &SynthParams) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| generate_sample(size, seed, split, i, params).map(|s| s.to_sample()))
        .collect()
}

/// Writes `train` and `test` triplets as PNG files in the ISTD layout.
pub fn generate_synthetic(
    out: impl AsRef<Path>,
    train: usize,
    test: usize,
    size: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<()> {
    if train + test == 0 {
        return Err(Error::Config("synthetic dataset needs at least one triplet".into()));
    }
    let out = out.as_ref();
    for (split, n) in [(Split::Train, train), (Split::Test, test)] {
        let [a, b, c] = split.dirs();
        for i in 0..n {
            let s = generate_sample(size, seed, split, i, params)?;
            let name = format!("{}.png", s.id);
            save_image(&s.shadow, out.join(&a).join(&name))?;
            save_mask(&s.mask, out.join(&b).join(&name))?;
            save_image(&s.free, out.join(&c).join(&name))?;
        }
    }
    Ok(())
}
