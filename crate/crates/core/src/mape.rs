//! Mask Augmented Patch Embedding.
//!
//! The shadow image is normalized to `[-1, 1]`, reweighted region-wise with a
//! 0/1 mask (`w1` on shadow pixels, `w2` elsewhere), multiplied by the ±1 mask,
//! and projected to tokens by a strided 3×3 convolution:
//!
//! ```text
//! x   = I / 255 · 2 − 1
//! T_s = (w1·M_s + w2·(1 − M_s)) · x
//! T_m = M_p · T_s
//! F   = conv3x3(T_m)
//! ```
//!
//! Masks are single-channel and broadcast over the colour channels. The
//! embedding adds no parameters beyond the projection.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FloatImage, RangeTag, RawMask};
use crate::nn::{Graph, Tensor, Var};

/// 0/1 binarization of a raw mask (`M / 255`).
#[derive(Clone, Debug, PartialEq)]
pub struct UnitMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// ±1 binarization of a raw mask (`M / 255 · 2 − 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct SignedMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

macro_rules! mask_accessors {
    ($t:ty) => {
        impl $t {
            pub fn height(&self) -> usize {
                self.height
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }
        }
    };
}

mask_accessors!(UnitMask);
mask_accessors!(SignedMask);

pub fn binarize_unit(mask: &RawMask) -> UnitMask {
    UnitMask {
        height: mask.height(),
        width: mask.width(),
        data: mask.data().iter().map(|&m| f64::from(m) / 255.0).collect(),
    }
}

pub fn binarize_signed(mask: &RawMask) -> SignedMask {
    SignedMask {
        height: mask.height(),
        width: mask.width(),
        data: mask.data().iter().map(|&m| f64::from(m) / 255.0 * 2.0 - 1.0).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapeConfig {
    /// Shadow-region weight.
    pub w1: f64,
    /// Non-shadow weight.
    pub w2: f64,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Learn `w1`, `w2` alongside the projection. Off by default.
    #[serde(default)]
    pub trainable_weights: bool,
}

impl Default for MapeConfig {
    fn default() -> Self {
        Self {
            w1: 2.5,
            w2: 1.0,
            patch_size: 4,
            embed_dim: 32,
            trainable_weights: false,
        }
    }
}

impl MapeConfig {
    pub const KERNEL_SIZE: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if !(self.w1.is_finite() && self.w2.is_finite() && self.w1 > 0.0 && self.w2 > 0.0) {
            return Err(Error::Config(format!(
                "region weights must be positive, got w1={} w2={}",
                self.w1, self.w2
            )));
        }
        if self.patch_size == 0 || self.embed_dim == 0 {
            return Err(Error::Config("patch_size and embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// `w1 > w2`: shadow pixels are amplified relative to lit ones.
    pub fn emphasizes_shadow(&self) -> bool {
        self.w1 > self.w2
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || height % self.patch_size != 0 || width % self.patch_size != 0 {
            return Err(Error::Dimension(format!(
                "{height}x{width} image is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Patch-embedding variant; names follow the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingVariant {
    /// Full mask-augmented embedding.
    Mape,
    /// Conventional patch embedding: normalize and project, mask unused.
    PlainPe,
    /// Second step uses the 0/1 mask in place of the ±1 mask.
    MapeMsOnly,
}

impl EmbeddingVariant {
    pub const ALL: [EmbeddingVariant; 3] = [
        EmbeddingVariant::PlainPe,
        EmbeddingVariant::Mape,
        EmbeddingVariant::MapeMsOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EmbeddingVariant::Mape => "mape",
            EmbeddingVariant::PlainPe => "plain_pe",
            EmbeddingVariant::MapeMsOnly => "mape_ms_only",
        }
    }

    /// Row label used in ablation tables.
    pub fn table_label(&self) -> &'static str {
        match self {
            EmbeddingVariant::Mape => "MAPE",
            EmbeddingVariant::PlainPe => "Original PE",
            EmbeddingVariant::MapeMsOnly => "M_p -> M_s in MAPE",
        }
    }
}

impl fmt::Display for EmbeddingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbeddingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown embedding variant {s:?}")))
    }
}

/// Convolutional projection parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    /// `[embed_dim, 3, 3, 3]`
    pub kernel: Tensor,
    /// `[embed_dim]`
    pub bias: Tensor,
}

impl ProjectionWeights {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        let e = match kernel.shape() {
            [e, 3, 3, 3] => *e,
            s => return Err(Error::Shape(format!("projection kernel must be [E, 3, 3, 3], got {s:?}"))),
        };
        if bias.shape() != [e] {
            return Err(Error::Shape(format!("projection bias must be [{e}], got {:?}", bias.shape())));
        }
        if kernel.data().iter().chain(bias.data()).any(|v| !v.is_finite()) {
            return Err(Error::Shape("projection weights must be finite".into()));
        }
        Ok(Self { kernel, bias })
    }

    pub fn zeros(embed_dim: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[embed_dim, 3, 3, 3]),
            bias: Tensor::zeros(&[embed_dim]),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.bias.numel()
    }
}

fn check_mask_dims(h: usize, w: usize, img: &FloatImage) -> Result<()> {
    if img.height() != h || img.width() != w {
        return Err(Error::Dimension(format!(
            "mask is {h}x{w}, image is {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// `T_s = (w1·M_s + w2·(1 − M_s)) · x`, mask broadcast over channels.
pub fn region_reweight(img: &FloatImage, m_s: &UnitMask, cfg: &MapeConfig) -> Result<FloatImage> {
    check_mask_dims(m_s.height, m_s.width, img)?;
    let c = img.channels();
    let mut data = Vec::with_capacity(img.data().len());
    for (px, &m) in img.data().chunks_exact(c).zip(&m_s.data) {
        let f = cfg.w1 * m + cfg.w2 * (1.0 - m);
        data.extend(px.iter().map(|v| f * v));
    }
    FloatImage::new(img.height(), img.width(), c, data, RangeTag::Reweighted)
}

/// `T_m = M_p · T_s`. Applying it twice with the same mask is the identity.
pub fn mask_modulate(t_s: &FloatImage, m_p: &SignedMask) -> Result<FloatImage> {
    modulate_by(t_s, &m_p.data, m_p.height, m_p.width)
}

fn modulate_by(img: &FloatImage, field: &[f64], h: usize, w: usize) -> Result<FloatImage> {
    check_mask_dims(h, w, img)?;
    let c = img.channels();
    let mut data = Vec::with_capacity(img.data().len());
    for (px, &m) in img.data().chunks_exact(c).zip(field) {
        data.extend(px.iter().map(|v| m * v));
    }
    FloatImage::new(img.height(), img.width(), c, data, img.range())
}

/// Per-element field that repeats one value per pixel across `channels`.
fn broadcast(per_pixel: &[f64], channels: usize) -> Rc<[f64]> {
    per_pixel
        .iter()
        .flat_map(|&m| std::iter::repeat(m).take(channels))
        .collect()
}

fn image_leaf(g: &mut Graph, img: &FloatImage, requires_grad: bool) -> Var {
    let t = Tensor::new(&[img.height(), img.width(), img.channels()], img.data().to_vec())
        .expect("image dims")
        .with_requires_grad(requires_grad);
    g.leaf(&t)
}

/// Strided 3×3 convolution of `t_m` (`[H, W, 3]`) into a `[tokens, E]` sequence.
pub fn project(t_m: &FloatImage, weights: &ProjectionWeights, cfg: &MapeConfig) -> Result<Tensor> {
    cfg.check_dims(t_m.height(), t_m.width())?;
    let mut g = Graph::new();
    let x = image_leaf(&mut g, t_m, false);
    let k = g.leaf(&weights.kernel);
    let b = g.leaf(&weights.bias);
    let out = g.conv3x3(x, k, b, cfg.patch_size)?;
    Ok(g.tensor(out))
}

/// Graph-level embedding of a raw `[H, W, 3]` image node. `w1`, `w2` are
/// scalar nodes so that they can optionally be trained.
#[allow(clippy::too_many_arguments)]
pub fn embed(
    g: &mut Graph,
    img: Var,
    mask: &RawMask,
    kernel: Var,
    bias: Var,
    w1: Var,
    w2: Var,
    cfg: &MapeConfig,
    variant: EmbeddingVariant,
) -> Result<Var> {
    let (h, w, c) = match g.shape(img)[..] {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::Shape(format!("image node must be [H, W, C], got {s:?}"))),
    };
    if mask.height() != h || mask.width() != w {
        return Err(Error::Dimension(format!(
            "mask is {}x{}, image is {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    cfg.check_dims(h, w)?;
    let x = g.normalize_signed(img);
    let tokens_in = match variant {
        EmbeddingVariant::PlainPe => x,
        EmbeddingVariant::Mape | EmbeddingVariant::MapeMsOnly => {
            let m_s = binarize_unit(mask);
            let t_s = g.region_reweight(x, m_s.data.clone().into(), c, w1, w2)?;
            let field = match variant {
                EmbeddingVariant::Mape => broadcast(&binarize_signed(mask).data, c),
                _ => broadcast(&m_s.data, c),
            };
            g.mul_field(t_s, field)?
        }
    };
    g.conv3x3(tokens_in, kernel, bias, cfg.patch_size)
}

/// Full embedding of a raw image: normalize, reweight, modulate, project.
pub fn mape_forward(
    img: &FloatImage,
    mask: &RawMask,
    weights: &ProjectionWeights,
    cfg: &MapeConfig,
) -> Result<Tensor> {
    embed_variant(img, mask, weights, cfg, EmbeddingVariant::Mape)
}

pub fn embed_variant(
    img: &FloatImage,
    mask: &RawMask,
    weights: &ProjectionWeights,
    cfg: &MapeConfig,
    variant: EmbeddingVariant,
) -> Result<Tensor> {
    img.expect_range(RangeTag::Raw255)?;
    let mut g = Graph::new();
    let (out, _) = embed_on_graph(&mut g, img, mask, weights, cfg, variant, false)?;
    Ok(g.tensor(out))
}

/// Embeds on a fresh set of leaves; returns the output node and the
/// `(image, kernel, bias)` leaves.
pub(crate) fn embed_on_graph(
    g: &mut Graph,
    img: &FloatImage,
    mask: &RawMask,
    weights: &ProjectionWeights,
    cfg: &MapeConfig,
    variant: EmbeddingVariant,
    requires_grad: bool,
) -> Result<(Var, [Var; 3])> {
    if img.channels() != 3 {
        return Err(Error::Channels {
            expected: 3,
            actual: img.channels(),
        });
    }
    let x = image_leaf(g, img, requires_grad);
    let k = g.leaf(&weights.kernel.clone().with_requires_grad(requires_grad));
    let b = g.leaf(&weights.bias.clone().with_requires_grad(requires_grad));
    let w1 = g.leaf(&Tensor::scalar(cfg.w1));
    let w2 = g.leaf(&Tensor::scalar(cfg.w2));
    let out = embed(g, x, mask, k, b, w1, w2, cfg, variant)?;
    Ok((out, [x, k, b]))
}

/// Gradients of `Σ probe ⊙ mape_forward(img)` with respect to the image,
/// kernel and bias.
pub fn mape_gradients(
    img: &FloatImage,
    mask: &RawMask,
    weights: &ProjectionWeights,
    cfg: &MapeConfig,
    variant: EmbeddingVariant,
    probe: &[f64],
) -> Result<[Vec<f64>; 3]> {
    let mut g = Graph::new();
    let (out, leaves) = embed_on_graph(&mut g, img, mask, weights, cfg, variant, true)?;
    let loss = g.dot(out, probe.into())?;
    let grads = g.backward(loss);
    Ok(leaves.map(|v| {
        grads
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; g.value(v).len()])
    }))
}

/// Positive/negative/zero counts over one region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignCounts {
    pub positive: u64,
    pub negative: u64,
    pub zero: u64,
}

impl SignCounts {
    pub fn total(&self) -> u64 {
        self.positive + self.negative + self.zero
    }

    fn frac(&self, n: u64) -> Option<f64> {
        (self.total() > 0).then(|| n as f64 / self.total() as f64)
    }

    pub fn positive_frac(&self) -> Option<f64> {
        self.frac(self.positive)
    }

    pub fn negative_frac(&self) -> Option<f64> {
        self.frac(self.negative)
    }

    pub fn zero_frac(&self) -> Option<f64> {
        self.frac(self.zero)
    }

    fn add(&mut self, v: f64) {
        if v > 0.0 {
            self.positive += 1;
        } else if v < 0.0 {
            self.negative += 1;
        } else {
            self.zero += 1;
        }
    }

    pub fn merge(&mut self, other: &SignCounts) {
        self.positive += other.positive;
        self.negative += other.negative;
        self.zero += other.zero;
    }
}

/// Sign distribution of values in shadow and non-shadow regions. Fractions of
/// an empty region are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignStatistics {
    pub shadow: SignCounts,
    pub nonshadow: SignCounts,
}

impl SignStatistics {
    pub fn shadow_pos_frac(&self) -> Option<f64> {
        self.shadow.positive_frac()
    }

    pub fn shadow_neg_frac(&self) -> Option<f64> {
        self.shadow.negative_frac()
    }

    pub fn nonshadow_pos_frac(&self) -> Option<f64> {
        self.nonshadow.positive_frac()
    }

    pub fn nonshadow_neg_frac(&self) -> Option<f64> {
        self.nonshadow.negative_frac()
    }

    pub fn merge(&mut self, other: &SignStatistics) {
        self.shadow.merge(&other.shadow);
        self.nonshadow.merge(&other.nonshadow);
    }
}

/// Counts signs of every channel value, split by the mask. Accepts signed
/// images and reweighted/modulated intermediates.
pub fn sign_statistics(img: &FloatImage, mask: &RawMask) -> Result<SignStatistics> {
    if !matches!(img.range(), RangeTag::Signed1 | RangeTag::Reweighted) {
        return Err(Error::RangeTag {
            expected: "signed1".into(),
            actual: img.range().to_string(),
        });
    }
    check_mask_dims(mask.height(), mask.width(), img)?;
    let mut stats = SignStatistics::default();
    for (i, px) in img.data().chunks_exact(img.channels()).enumerate() {
        let counts = if mask.is_shadow_at(i) {
            &mut stats.shadow
        } else {
            &mut stats.nonshadow
        };
        for &v in px {
            counts.add(v);
        }
    }
    Ok(stats)
}

/// Sign statistics of a raw image before modulation (`x`) and after
/// (`T_m`).
pub fn sign_statistics_both_stages(
    img: &FloatImage,
    mask: &RawMask,
    cfg: &MapeConfig,
) -> Result<(SignStatistics, SignStatistics)> {
    let x = crate::imaging::normalize_signed(img)?;
    let before = sign_statistics(&x, mask)?;
    let t_m = mask_modulate(&region_reweight(&x, &binarize_unit(mask), cfg)?, &binarize_signed(mask))?;
    let after = sign_statistics(&t_m, mask)?;
    Ok((before, after))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::normalize_signed;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RawMask {
        RawMask::from_fn(h, w, |_, _| rng.gen_bool(0.4))
    }

    fn random_raw(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FloatImage {
        let data = (0..h * w * 3).map(|_| rng.gen_range(0.0..=255.0f64).round()).collect();
        FloatImage::new(h, w, 3, data, RangeTag::Raw255).unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, e: usize) -> ProjectionWeights {
        let k = (0..e * 27).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b = (0..e).map(|_| rng.gen_range(-0.5..0.5)).collect();
        ProjectionWeights::new(Tensor::new(&[e, 3, 3, 3], k).unwrap(), Tensor::new(&[e], b).unwrap()).unwrap()
    }

    fn cfg(w1: f64, w2: f64, patch: usize, embed: usize) -> MapeConfig {
        MapeConfig {
            w1,
            w2,
            patch_size: patch,
            embed_dim: embed,
            trainable_weights: false,
        }
    }

    #[test]
    fn binarizations() {
        assert!(binarize_unit(&RawMask::full(2, 2)).data().iter().all(|&v| v == 1.0));
        assert!(binarize_unit(&RawMask::empty(2, 2)).data().iter().all(|&v| v == 0.0));
        let checker = RawMask::from_fn(2, 2, |r, c| (r + c) % 2 == 0);
        assert_eq!(binarize_unit(&checker).data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(binarize_signed(&checker).data(), &[1.0, -1.0, -1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn signed_is_twice_unit_minus_one(bits in proptest::collection::vec(any::<bool>(), 1..100)) {
            let n = bits.len();
            let mask = RawMask::from_fn(1, n, |_, c| bits[c]);
            let (u, s) = (binarize_unit(&mask), binarize_signed(&mask));
            for (a, b) in u.data().iter().zip(s.data()) {
                prop_assert_eq!(*b - (2.0 * a - 1.0), 0.0);
            }
        }

        #[test]
        fn modulation_is_an_involution(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = random_mask(&mut rng, 4, 5);
            let data = (0..60).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let img = FloatImage::new(4, 5, 3, data, RangeTag::Reweighted).unwrap();
            let m_p = binarize_signed(&mask);
            let twice = mask_modulate(&mask_modulate(&img, &m_p).unwrap(), &m_p).unwrap();
            prop_assert_eq!(twice.data(), img.data());
        }

        #[test]
        fn positively_homogeneous(seed in any::<u64>(), c in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = random_mask(&mut rng, 4, 4);
            let data: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let img = FloatImage::new(4, 4, 3, data.clone(), RangeTag::Signed1).unwrap();
            let scaled = FloatImage::new(4, 4, 3, data.iter().map(|v| v * c).collect(), RangeTag::Signed1).unwrap();
            let cf = MapeConfig::default();
            let t = |x: &FloatImage| mask_modulate(&region_reweight(x, &binarize_unit(&mask), &cf).unwrap(), &binarize_signed(&mask)).unwrap();
            for (a, b) in t(&img).data().iter().zip(t(&scaled).data()) {
                prop_assert!((a * c - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn reweight_cases() {
        let mask = RawMask::from_fn(1, 2, |_, c| c == 0);
        let img = FloatImage::new(1, 2, 1, vec![-0.4, 0.3], RangeTag::Signed1).unwrap();
        let same = region_reweight(&img, &binarize_unit(&mask), &cfg(1.0, 1.0, 1, 1)).unwrap();
        assert_eq!(same.data(), img.data());
        let out = region_reweight(&img, &binarize_unit(&mask), &cfg(2.5, 1.0, 1, 1)).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.3);
        let modded = mask_modulate(&out, &binarize_signed(&mask)).unwrap();
        assert!((modded.data()[0] + 1.0).abs() < 1e-15);
        assert_eq!(modded.data()[1], -0.3);
        let bad = RawMask::empty(2, 2);
        assert!(matches!(region_reweight(&img, &binarize_unit(&bad), &cfg(1.0, 1.0, 1, 1)), Err(Error::Dimension(_))));
        assert!(matches!(mask_modulate(&img, &binarize_signed(&bad)), Err(Error::Dimension(_))));
    }

    #[test]
    fn modulate_by_all_positive_is_identity() {
        let img = FloatImage::new(1, 2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6], RangeTag::Reweighted).unwrap();
        assert_eq!(mask_modulate(&img, &binarize_signed(&RawMask::full(1, 2))).unwrap(), img);
    }

    #[test]
    fn delta_kernel_projects_channel_zero() {
        let mut kernel = Tensor::zeros(&[1, 3, 3, 3]);
        kernel.data_mut()[4] = 1.0; // channel 0, centre tap
        let weights = ProjectionWeights::new(kernel, Tensor::zeros(&[1])).unwrap();
        let data: Vec<f64> = (0..4 * 4 * 3).map(|i| i as f64 * 0.01 - 0.2).collect();
        let img = FloatImage::new(4, 4, 3, data, RangeTag::Reweighted).unwrap();
        let out = project(&img, &weights, &cfg(1.0, 1.0, 1, 1)).unwrap();
        assert_eq!(out.shape(), &[16, 1]);
        for t in 0..16 {
            assert_eq!(out.data()[t], img.data()[t * 3]);
        }
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let weights = ProjectionWeights::new(Tensor::zeros(&[2, 3, 3, 3]), Tensor::new(&[2], vec![0.7, -1.25]).unwrap()).unwrap();
        let img = FloatImage::filled(8, 8, 3, 0.3, RangeTag::Reweighted);
        let out = project(&img, &weights, &cfg(1.0, 1.0, 4, 2)).unwrap();
        assert_eq!(out.shape(), &[4, 2]);
        for row in out.data().chunks(2) {
            assert_eq!(row, &[0.7, -1.25]);
        }
    }

    #[test]
    fn project_rejects_indivisible_dims() {
        let img = FloatImage::filled(6, 8, 3, 0.0, RangeTag::Reweighted);
        let err = project(&img, &ProjectionWeights::zeros(2), &cfg(1.0, 1.0, 4, 2)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn weights_validate_shape() {
        assert!(ProjectionWeights::new(Tensor::zeros(&[2, 3, 3]), Tensor::zeros(&[2])).is_err());
        assert!(ProjectionWeights::new(Tensor::zeros(&[2, 3, 3, 3]), Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn unit_weights_full_mask_reduce_to_plain_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_raw(&mut rng, 8, 8);
        let weights = random_weights(&mut rng, 5);
        let c = cfg(1.0, 1.0, 4, 5);
        let full = RawMask::full(8, 8);
        let mape = mape_forward(&img, &full, &weights, &c).unwrap();
        let plain = project(&normalize_signed(&img).unwrap(), &weights, &c).unwrap();
        assert_eq!(mape.data(), plain.data());
        let pe = embed_variant(&img, &random_mask(&mut rng, 8, 8), &weights, &c, EmbeddingVariant::PlainPe).unwrap();
        assert_eq!(pe.data(), plain.data());
    }

    #[test]
    fn ms_variant_zeroes_non_shadow_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = random_raw(&mut rng, 4, 4);
        let weights = random_weights(&mut rng, 3);
        let c = cfg(2.5, 1.0, 1, 3);
        let empty = RawMask::empty(4, 4);
        let out = embed_variant(&img, &empty, &weights, &c, EmbeddingVariant::MapeMsOnly).unwrap();
        for row in out.data().chunks(3) {
            assert_eq!(row, weights.bias.data());
        }
    }

    #[test]
    fn sign_statistics_cases() {
        let mask = RawMask::from_fn(2, 2, |r, _| r == 0);
        let neg = FloatImage::filled(2, 2, 3, -0.5, RangeTag::Signed1);
        let s = sign_statistics(&neg, &mask).unwrap();
        assert_eq!(s.shadow_neg_frac(), Some(1.0));
        assert_eq!(s.nonshadow_pos_frac(), Some(0.0));
        let zero = FloatImage::filled(2, 2, 3, 0.0, RangeTag::Signed1);
        let z = sign_statistics(&zero, &mask).unwrap();
        assert_eq!(z.shadow_pos_frac(), Some(0.0));
        assert_eq!(z.shadow_neg_frac(), Some(0.0));
        assert_eq!(z.shadow.zero_frac(), Some(1.0));
        let e = sign_statistics(&neg, &RawMask::empty(2, 2)).unwrap();
        assert_eq!(e.shadow_neg_frac(), None);
        let raw = FloatImage::filled(2, 2, 3, 10.0, RangeTag::Raw255);
        assert!(sign_statistics(&raw, &mask).is_err());
    }

    #[test]
    fn sign_flip_after_modulation() {
        let mask = RawMask::from_fn(2, 2, |r, _| r == 0);
        let mut img = FloatImage::filled(2, 2, 3, 40.0, RangeTag::Raw255);
        for c in 0..2 {
            for k in 0..3 {
                img.set(1, c, k, 200.0);
            }
        }
        let (before, after) = sign_statistics_both_stages(&img, &mask, &MapeConfig::default()).unwrap();
        assert_eq!(before.shadow_neg_frac(), Some(1.0));
        assert_eq!(before.nonshadow_pos_frac(), Some(1.0));
        assert_eq!(after.shadow_neg_frac(), Some(1.0));
        assert_eq!(after.nonshadow_neg_frac(), Some(1.0));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in EmbeddingVariant::ALL {
            assert_eq!(v.as_str().parse::<EmbeddingVariant>().unwrap(), v);
        }
        assert!("pe".parse::<EmbeddingVariant>().is_err());
    }
}
