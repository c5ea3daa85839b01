//! Region-wise restoration metrics and mask accuracy.
//!
//! Every metric is reported for the shadow region (`S`), the non-shadow region
//! (`NS`) and the whole image (`All`), selected by the ground-truth mask. A
//! region with no pixels yields `None`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{srgb_pixel_to_lab, FloatImage, RangeTag, RawMask};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "S")]
    Shadow,
    #[serde(rename = "NS")]
    NonShadow,
    #[serde(rename = "All")]
    All,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Shadow, Region::NonShadow, Region::All];

    pub fn label(&self) -> &'static str {
        match self {
            Region::Shadow => "S",
            Region::NonShadow => "NS",
            Region::All => "All",
        }
    }

    #[inline]
    fn contains(&self, shadow: bool) -> bool {
        match self {
            Region::Shadow => shadow,
            Region::NonShadow => !shadow,
            Region::All => true,
        }
    }
}

/// One value per region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerRegion<T> {
    #[serde(rename = "S")]
    pub shadow: T,
    #[serde(rename = "NS")]
    pub non_shadow: T,
    #[serde(rename = "All")]
    pub all: T,
}

impl<T: Copy> PerRegion<T> {
    pub fn get(&self, r: Region) -> T {
        match r {
            Region::Shadow => self.shadow,
            Region::NonShadow => self.non_shadow,
            Region::All => self.all,
        }
    }

    fn from_fn(mut f: impl FnMut(Region) -> T) -> Self {
        Self {
            shadow: f(Region::Shadow),
            non_shadow: f(Region::NonShadow),
            all: f(Region::All),
        }
    }
}

/// Metric values for a single region of one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub mae_lab: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub pixel_count: u64,
}

pub type RegionMetrics = PerRegion<RegionEntry>;

fn check_pair(pred: &FloatImage, gt: &FloatImage, mask: &RawMask) -> Result<()> {
    pred.expect_range(RangeTag::Raw255)?;
    gt.expect_range(RangeTag::Raw255)?;
    if !pred.same_dims(gt) {
        return Err(Error::Dimension("prediction and ground truth differ in shape".into()));
    }
    if !mask.matches(gt) {
        return Err(Error::Dimension("mask does not match image size".into()));
    }
    if gt.channels() != 3 {
        return Err(Error::Channels {
            expected: 3,
            actual: gt.channels(),
        });
    }
    Ok(())
}

/// Summed absolute LAB error and element count per region; combines across
/// images by addition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaeSums {
    pub abs_sum: PerRegion<f64>,
    pub pixels: PerRegion<u64>,
}

impl MaeSums {
    pub fn mean(&self, r: Region) -> Option<f64> {
        let n = self.pixels.get(r);
        (n > 0).then(|| self.abs_sum.get(r) / (3 * n) as f64)
    }

    pub fn merge(&mut self, other: &MaeSums) {
        for r in Region::ALL {
            *region_mut(&mut self.abs_sum, r) += other.abs_sum.get(r);
            *region_mut(&mut self.pixels, r) += other.pixels.get(r);
        }
    }
}

fn region_mut<T>(p: &mut PerRegion<T>, r: Region) -> &mut T {
    match r {
        Region::Shadow => &mut p.shadow,
        Region::NonShadow => &mut p.non_shadow,
        Region::All => &mut p.all,
    }
}

/// Absolute-error sums of two L*a*b* images.
pub fn mae_sums_lab(pred_lab: &FloatImage, gt_lab: &FloatImage, mask: &RawMask) -> Result<MaeSums> {
    pred_lab.expect_range(RangeTag::Lab)?;
    gt_lab.expect_range(RangeTag::Lab)?;
    if !pred_lab.same_dims(gt_lab) || !mask.matches(gt_lab) {
        return Err(Error::Dimension("LAB images and mask differ in shape".into()));
    }
    let mut sums = MaeSums::default();
    for (i, (p, g)) in pred_lab
        .data()
        .chunks_exact(3)
        .zip(gt_lab.data().chunks_exact(3))
        .enumerate()
    {
        let shadow = mask.is_shadow_at(i);
        let d: f64 = p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum();
        for r in Region::ALL {
            if r.contains(shadow) {
                *region_mut(&mut sums.abs_sum, r) += d;
                *region_mut(&mut sums.pixels, r) += 1;
            }
        }
    }
    Ok(sums)
}

/// Per-region MAE between two L*a*b* images, averaged over pixels and the
/// three channels.
pub fn mae_lab_on_lab(pred_lab: &FloatImage, gt_lab: &FloatImage, mask: &RawMask) -> Result<PerRegion<Option<f64>>> {
    let sums = mae_sums_lab(pred_lab, gt_lab, mask)?;
    Ok(PerRegion::from_fn(|r| sums.mean(r)))
}

fn to_lab(img: &FloatImage) -> FloatImage {
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|px| srgb_pixel_to_lab([px[0] / 255.0, px[1] / 255.0, px[2] / 255.0]))
        .collect();
    FloatImage::new(img.height(), img.width(), 3, data, RangeTag::Lab).expect("same dims")
}

pub fn mae_lab_sums(pred: &FloatImage, gt: &FloatImage, mask: &RawMask) -> Result<MaeSums> {
    check_pair(pred, gt, mask)?;
    mae_sums_lab(&to_lab(&pred.clamp_raw()), &to_lab(gt), mask)
}

/// MAE in L*a*b* per region. Predictions are clamped to `[0, 255]` before
/// conversion.
pub fn mae_lab(pred: &FloatImage, gt: &FloatImage, mask: &RawMask) -> Result<PerRegion<Option<f64>>> {
    let sums = mae_lab_sums(pred, gt, mask)?;
    Ok(PerRegion::from_fn(|r| sums.mean(r)))
}

/// `10·log10(255² / MSE)` over the RGB values of each region, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(pred: &FloatImage, gt: &FloatImage, mask: &RawMask) -> Result<PerRegion<Option<f64>>> {
    check_pair(pred, gt, mask)?;
    let mut sse = PerRegion::<f64>::default();
    let mut n = PerRegion::<u64>::default();
    for (i, (p, g)) in pred.data().chunks_exact(3).zip(gt.data().chunks_exact(3)).enumerate() {
        let shadow = mask.is_shadow_at(i);
        let d: f64 = p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
        for r in Region::ALL {
            if r.contains(shadow) {
                *region_mut(&mut sse, r) += d;
                *region_mut(&mut n, r) += 3;
            }
        }
    }
    Ok(PerRegion::from_fn(|r| {
        let count = n.get(r);
        (count > 0).then(|| psnr_from_mse(sse.get(r) / count as f64))
    }))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Normalized 1-d Gaussian of length [`SSIM_WINDOW`].
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mirror index for half-sample symmetric padding (`d c b a | a b c d`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    j as usize
}

fn blur_separable(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut s = 0.0;
            for (k, wk) in win.iter().enumerate() {
                s += wk * row[reflect_index(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (k, wk) in win.iter().enumerate() {
            let src = reflect_index(y as isize + k as isize - r, h);
            let (dst_row, src_row) = (&mut out[y * w..(y + 1) * w], &tmp[src * w..(src + 1) * w]);
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += wk * s;
            }
        }
    }
    out
}

#[inline]
pub fn ssim_from_moments(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64) -> f64 {
    let sx = exx - mx * mx;
    let sy = eyy - my * my;
    let sxy = exy - mx * my;
    ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2))
}

/// Per-pixel SSIM map averaged over the RGB channels.
pub fn ssim_map(pred: &FloatImage, gt: &FloatImage) -> Result<Vec<f64>> {
    let (h, w) = (gt.height(), gt.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let mut acc = vec![0.0; h * w];
    let c = gt.channels();
    for ch in 0..c {
        let x: Vec<f64> = pred.data().iter().skip(ch).step_by(c).copied().collect();
        let y: Vec<f64> = gt.data().iter().skip(ch).step_by(c).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, exx, eyy, exy] = [&x, &y, &xx, &yy, &xy].map(|p| blur_separable(p, h, w, &win));
        for i in 0..h * w {
            acc[i] += ssim_from_moments(mx[i], my[i], exx[i], eyy[i], exy[i]);
        }
    }
    for v in &mut acc {
        *v /= c as f64;
    }
    Ok(acc)
}

/// Gaussian-window SSIM: computed on the full image, then averaged over each
/// region of the map.
pub fn ssim(pred: &FloatImage, gt: &FloatImage, mask: &RawMask) -> Result<PerRegion<Option<f64>>> {
    check_pair(pred, gt, mask)?;
    let map = ssim_map(pred, gt)?;
    Ok(region_means(&map, mask))
}

fn region_means(map: &[f64], mask: &RawMask) -> PerRegion<Option<f64>> {
    let mut sum = PerRegion::<f64>::default();
    let mut n = PerRegion::<u64>::default();
    for (i, v) in map.iter().enumerate() {
        let shadow = mask.is_shadow_at(i);
        for r in Region::ALL {
            if r.contains(shadow) {
                *region_mut(&mut sum, r) += v;
                *region_mut(&mut n, r) += 1;
            }
        }
    }
    PerRegion::from_fn(|r| (n.get(r) > 0).then(|| sum.get(r) / n.get(r) as f64))
}

/// MAE-LAB, PSNR and SSIM for all three regions.
pub fn evaluate(pred: &FloatImage, gt: &FloatImage, mask: &RawMask) -> Result<RegionMetrics> {
    let pred = pred.clamp_raw();
    let mae = mae_lab_sums(&pred, gt, mask)?;
    let ps = psnr(&pred, gt, mask)?;
    let ss = ssim(&pred, gt, mask)?;
    Ok(PerRegion::from_fn(|r| RegionEntry {
        mae_lab: mae.mean(r),
        psnr_db: ps.get(r),
        ssim: ss.get(r),
        pixel_count: mae.pixels.get(r),
    }))
}

/// Order-independent dataset aggregate: MAE is pixel-weighted over the whole
/// set, PSNR and SSIM are means of per-image values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    mae: MaeSums,
    psnr_sum: PerRegion<f64>,
    psnr_n: PerRegion<u64>,
    ssim_sum: PerRegion<f64>,
    ssim_n: PerRegion<u64>,
    images: u64,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &FloatImage, gt: &FloatImage, mask: &RawMask) -> Result<RegionMetrics> {
        let pred = pred.clamp_raw();
        let sums = mae_lab_sums(&pred, gt, mask)?;
        self.mae.merge(&sums);
        let ps = psnr(&pred, gt, mask)?;
        let ss = ssim(&pred, gt, mask)?;
        for r in Region::ALL {
            if let Some(v) = ps.get(r) {
                *region_mut(&mut self.psnr_sum, r) += v;
                *region_mut(&mut self.psnr_n, r) += 1;
            }
            if let Some(v) = ss.get(r) {
                *region_mut(&mut self.ssim_sum, r) += v;
                *region_mut(&mut self.ssim_n, r) += 1;
            }
        }
        self.images += 1;
        Ok(PerRegion::from_fn(|r| RegionEntry {
            mae_lab: sums.mean(r),
            psnr_db: ps.get(r),
            ssim: ss.get(r),
            pixel_count: sums.pixels.get(r),
        }))
    }

    pub fn images(&self) -> u64 {
        self.images
    }

    pub fn summary(&self) -> RegionMetrics {
        let mean = |s: &PerRegion<f64>, n: &PerRegion<u64>, r| (n.get(r) > 0).then(|| s.get(r) / n.get(r) as f64);
        PerRegion::from_fn(|r| RegionEntry {
            mae_lab: self.mae.mean(r),
            psnr_db: mean(&self.psnr_sum, &self.psnr_n, r),
            ssim: mean(&self.ssim_sum, &self.ssim_n, r),
            pixel_count: self.mae.pixels.get(r),
        })
    }
}

/// Balance error rate of a predicted mask against the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BerScore {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl BerScore {
    /// `100·(1 − ½(tp/(tp+fn) + tn/(tn+fp)))`; `None` when the ground truth
    /// has no shadow or no non-shadow pixel.
    pub fn ber(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        if pos == 0 || neg == 0 {
            return None;
        }
        Some(100.0 * (1.0 - 0.5 * (self.tp as f64 / pos as f64 + self.tn as f64 / neg as f64)))
    }
}

pub fn ber(pred: &RawMask, gt: &RawMask) -> Result<BerScore> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Dimension("masks differ in size".into()));
    }
    let mut s = BerScore {
        tp: 0,
        tn: 0,
        fp: 0,
        fn_: 0,
    };
    for i in 0..gt.data().len() {
        match (pred.is_shadow_at(i), gt.is_shadow_at(i)) {
            (true, true) => s.tp += 1,
            (false, false) => s.tn += 1,
            (true, false) => s.fp += 1,
            (false, true) => s.fn_ += 1,
        }
    }
    Ok(s)
}

/// One line of the per-image metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image_id: String,
    pub region: Region,
    pub metric: String,
    pub value: Option<f64>,
    pub resolution: String,
}

pub fn records_for(image_id: &str, resolution: &str, m: &RegionMetrics) -> Vec<MetricRecord> {
    let mut out = Vec::with_capacity(9);
    for r in Region::ALL {
        let e = m.get(r);
        for (name, value) in [("mae_lab", e.mae_lab), ("psnr_db", e.psnr_db), ("ssim", e.ssim)] {
            out.push(MetricRecord {
                image_id: image_id.to_string(),
                region: r,
                metric: name.to_string(),
                value,
                resolution: resolution.to_string(),
            });
        }
    }
    out
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Fixed-width table with S / NS / All column groups, one row per entry.
pub fn format_table(rows: &[(String, Option<RegionMetrics>)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = write!(s, "{:label_w$}", "Method");
    for r in Region::ALL {
        let _ = write!(s, " | {:^22}", r.label());
    }
    s.push('\n');
    let _ = write!(s, "{:label_w$}", "");
    for _ in Region::ALL {
        let _ = write!(s, " | {:>6} {:>7} {:>7}", "MAE", "PSNR", "SSIM");
    }
    s.push('\n');
    for (label, m) in rows {
        let _ = write!(s, "{label:label_w$}");
        for r in Region::ALL {
            match m {
                Some(m) => {
                    let e = m.get(r);
                    let _ = write!(
                        s,
                        " | {:>6} {:>7} {:>7}",
                        cell(e.mae_lab, 2),
                        cell(e.psnr_db, 2),
                        cell(e.ssim, 3)
                    );
                }
                None => {
                    let _ = write!(s, " | {:>6} {:>7} {:>7}", "-", "-", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn format_csv(rows: &[(String, Option<RegionMetrics>)]) -> String {
    let mut s = String::from("method");
    for r in Region::ALL {
        for m in ["mae_lab", "psnr_db", "ssim"] {
            let _ = write!(s, ",{}_{m}", r.label());
        }
    }
    s.push('\n');
    for (label, m) in rows {
        s.push_str(label);
        for r in Region::ALL {
            let e = m.map(|m| m.get(r)).unwrap_or_default();
            for v in [e.mae_lab, e.psnr_db, e.ssim] {
                let _ = write!(s, ",{}", v.map_or(String::new(), |x| format!("{x:.6}")));
            }
        }
        s.push('\n');
    }
    s
}
