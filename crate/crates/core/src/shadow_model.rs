//! Physical shadow formation with per-channel illumination.
//!
//! A lit pixel reflects direct plus ambient light, `(L_d + L_a)·R`. Inside a
//! shadow the direct term is blocked and the ambient term is attenuated by
//! `a ∈ (0, 1]`, giving `a·L_a·R`. Under spatially constant illumination the
//! two are related by a per-channel affine map `lit = w·shadow + b` that holds
//! for every shadow pixel, which [`fit_linear_map`] recovers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FloatImage, RangeTag, RawMask};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    /// Unit-range, 3-channel reflectance.
    pub reflectance: FloatImage,
    pub direct: [f64; 3],
    pub ambient: [f64; 3],
}

impl SceneParams {
    pub fn new(reflectance: FloatImage, direct: [f64; 3], ambient: [f64; 3]) -> Result<Self> {
        reflectance.expect_range(RangeTag::Unit1)?;
        if reflectance.channels() != 3 {
            return Err(Error::Channels {
                expected: 3,
                actual: reflectance.channels(),
            });
        }
        if direct.iter().chain(&ambient).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "illumination must be non-negative, got direct {direct:?} ambient {ambient:?}"
            )));
        }
        Ok(Self {
            reflectance,
            direct,
            ambient,
        })
    }

    pub fn height(&self) -> usize {
        self.reflectance.height()
    }

    pub fn width(&self) -> usize {
        self.reflectance.width()
    }
}

/// Per-pixel fraction of ambient light that survives occlusion.
#[derive(Clone, Debug, PartialEq)]
pub struct AttenuationField {
    field: FloatImage,
}

impl AttenuationField {
    pub fn new(field: FloatImage) -> Result<Self> {
        if field.channels() != 1 {
            return Err(Error::Channels {
                expected: 1,
                actual: field.channels(),
            });
        }
        if field.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("attenuation must lie in [0, 1]".into()));
        }
        Ok(Self {
            field: field.with_range(RangeTag::Unit1),
        })
    }

    /// `value` inside the mask, 1 outside.
    pub fn constant(mask: &RawMask, value: f64) -> Result<Self> {
        let data = mask
            .data()
            .iter()
            .map(|&m| if m == crate::imaging::SHADOW { value } else { 1.0 })
            .collect();
        Self::new(FloatImage::new(mask.height(), mask.width(), 1, data, RangeTag::Unit1)?)
    }

    #[inline]
    pub fn at(&self, index: usize) -> f64 {
        self.field.data()[index]
    }

    pub fn height(&self) -> usize {
        self.field.height()
    }

    pub fn width(&self) -> usize {
        self.field.width()
    }
}

/// Per-channel affine map from shadow to lit intensities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearShadowParams {
    pub w: [f64; 3],
    pub b: [f64; 3],
}

impl LinearShadowParams {
    pub const IDENTITY: Self = Self {
        w: [1.0; 3],
        b: [0.0; 3],
    };

    /// Pure gain form `lit = S(k)·shadow`, i.e. `b = 0`.
    pub fn gain(s: [f64; 3]) -> Self {
        Self { w: s, b: [0.0; 3] }
    }

    /// Whether every gain exceeds 1, the regime where shadows are darker than
    /// their lit counterparts.
    pub fn is_brightening(&self) -> bool {
        self.w.iter().all(|&w| w > 1.0)
    }

    /// Exact parameters implied by a scene with constant attenuation `a`:
    /// `w_k = (L_d + L_a) / (a·L_a)`, `b_k = 0`.
    pub fn from_scene(scene: &SceneParams, attenuation: f64) -> Self {
        let w = std::array::from_fn(|k| {
            (scene.direct[k] + scene.ambient[k]) / (attenuation * scene.ambient[k])
        });
        Self::gain(w)
    }
}

/// Result of [`fit_linear_map`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub params: LinearShadowParams,
    /// Per-channel root-mean-square residual over the masked pixels.
    pub residual_rms: [f64; 3],
}

impl LinearFit {
    pub fn max_residual(&self) -> f64 {
        self.residual_rms.iter().copied().fold(0.0, f64::max)
    }
}

fn check_scene_dims(scene: &SceneParams, h: usize, w: usize, what: &str) -> Result<()> {
    if scene.height() != h || scene.width() != w {
        return Err(Error::Dimension(format!(
            "{what} is {h}x{w}, scene is {}x{}",
            scene.height(),
            scene.width()
        )));
    }
    Ok(())
}

fn check_mask(mask: &RawMask, img: &FloatImage) -> Result<()> {
    if !mask.matches(img) {
        return Err(Error::Dimension(format!(
            "mask is {}x{}, image is {}x{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// `255·clamp((L_d + L_a)·R, 0, 1)` per pixel and channel.
pub fn render_shadow_free(scene: &SceneParams) -> FloatImage {
    let r = &scene.reflectance;
    let mut data = Vec::with_capacity(r.data().len());
    for px in r.data().chunks_exact(3) {
        for k in 0..3 {
            let lit = (scene.direct[k] + scene.ambient[k]) * px[k];
            data.push(255.0 * lit.clamp(0.0, 1.0));
        }
    }
    FloatImage::new(r.height(), r.width(), 3, data, RangeTag::Raw255).expect("same dims")
}

/// Shadowed rendering: `255·clamp(a·L_a·R)` inside the mask, lit outside.
pub fn render_shadow(scene: &SceneParams, atten: &AttenuationField, mask: &RawMask) -> Result<FloatImage> {
    check_scene_dims(scene, atten.height(), atten.width(), "attenuation field")?;
    check_scene_dims(scene, mask.height(), mask.width(), "mask")?;
    let mut out = render_shadow_free(scene);
    let r = scene.reflectance.data();
    for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
        if !mask.is_shadow_at(i) {
            continue;
        }
        let a = atten.at(i);
        for k in 0..3 {
            let v = a * scene.ambient[k] * r[3 * i + k];
            px[k] = 255.0 * v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Recovers the lit image from a shadowed one: `255·L_d·R + shadow / a`
/// inside the mask, unchanged outside. No clamping is applied.
pub fn relight(
    shadow: &FloatImage,
    scene: &SceneParams,
    atten: &AttenuationField,
    mask: &RawMask,
) -> Result<FloatImage> {
    check_scene_dims(scene, shadow.height(), shadow.width(), "shadow image")?;
    check_scene_dims(scene, atten.height(), atten.width(), "attenuation field")?;
    check_mask(mask, shadow)?;
    if shadow.channels() != 3 {
        return Err(Error::Channels {
            expected: 3,
            actual: shadow.channels(),
        });
    }
    let mut out = shadow.clone();
    let r = scene.reflectance.data();
    let w = shadow.width();
    for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
        if !mask.is_shadow_at(i) {
            continue;
        }
        let a = atten.at(i);
        if a <= 0.0 {
            return Err(Error::Singular {
                row: i / w,
                col: i % w,
            });
        }
        for k in 0..3 {
            px[k] = 255.0 * scene.direct[k] * r[3 * i + k] + px[k] / a;
        }
    }
    Ok(out)
}

/// `w_k·x + b_k` on masked pixels, identity elsewhere.
pub fn apply_linear_map(
    shadow: &FloatImage,
    params: &LinearShadowParams,
    mask: &RawMask,
) -> Result<FloatImage> {
    check_mask(mask, shadow)?;
    if shadow.channels() != 3 {
        return Err(Error::Channels {
            expected: 3,
            actual: shadow.channels(),
        });
    }
    let mut out = shadow.clone();
    for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
        if mask.is_shadow_at(i) {
            for k in 0..3 {
                px[k] = params.w[k] * px[k] + params.b[k];
            }
        }
    }
    Ok(out)
}

/// Per-channel ordinary least squares of `lit` on `shadow` over the masked
/// pixels.
pub fn fit_linear_map(shadow: &FloatImage, lit: &FloatImage, mask: &RawMask) -> Result<LinearFit> {
    check_mask(mask, shadow)?;
    if !shadow.same_dims(lit) {
        return Err(Error::Dimension("shadow and lit images differ in shape".into()));
    }
    if shadow.channels() != 3 {
        return Err(Error::Channels {
            expected: 3,
            actual: shadow.channels(),
        });
    }
    let idx: Vec<usize> = (0..mask.data().len()).filter(|&i| mask.is_shadow_at(i)).collect();
    let mut params = LinearShadowParams::IDENTITY;
    let mut residual_rms = [0.0; 3];
    for k in 0..3 {
        if idx.len() < 2 {
            return Err(Error::RankDeficient { channel: k });
        }
        let xs: Vec<f64> = idx.iter().map(|&i| shadow.data()[3 * i + k]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| lit.data()[3 * i + k]).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            sxx += (x - mx) * (x - mx);
            sxy += (x - mx) * (y - my);
        }
        let scale = xs.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
        if sxx <= (scale * 1e-12).powi(2) * n {
            return Err(Error::RankDeficient { channel: k });
        }
        let w = sxy / sxx;
        let b = my - w * mx;
        let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (w * x + b - y).powi(2)).sum();
        params.w[k] = w;
        params.b[k] = b;
        residual_rms[k] = (sse / n).sqrt();
    }
    Ok(LinearFit {
        params,
        residual_rms,
    })
}
