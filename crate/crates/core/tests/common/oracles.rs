//! Straightforward reference implementations of the evaluation metrics.

use shadowmask::{FloatImage, RawMask};

/// CIE L*a*b* via the ε/κ formulation of the companding function.
pub fn lab(rgb255: [f64; 3]) -> [f64; 3] {
    let lin = |c: f64| {
        let c = c.clamp(0.0, 255.0) / 255.0;
        if c > 0.04045 {
            ((c + 0.055) / 1.055).powf(2.4)
        } else {
            c / 12.92
        }
    };
    let (r, g, b) = (lin(rgb255[0]), lin(rgb255[1]), lin(rgb255[2]));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let eps = 216.0 / 24389.0;
    let kappa = 24389.0 / 27.0;
    let f = |t: f64| if t > eps { t.powf(1.0 / 3.0) } else { (kappa * t + 16.0) / 116.0 };
    let (fx, fy, fz) = (f(x / 0.95047), f(y / 1.0), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn px(img: &FloatImage, i: usize) -> [f64; 3] {
    let d = img.data();
    [d[3 * i], d[3 * i + 1], d[3 * i + 2]]
}

/// `[shadow, non-shadow, all]` selectors.
pub fn regions(mask: &RawMask) -> [Vec<usize>; 3] {
    let n = mask.height() * mask.width();
    let s = (0..n).filter(|&i| mask.is_shadow_at(i)).collect();
    let ns = (0..n).filter(|&i| !mask.is_shadow_at(i)).collect();
    [s, ns, (0..n).collect()]
}

pub fn mae_lab(pred: &FloatImage, gt: &FloatImage, idx: &[usize]) -> Option<f64> {
    if idx.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &i in idx {
        let (a, b) = (lab(px(pred, i)), lab(px(gt, i)));
        for k in 0..3 {
            total += (a[k] - b[k]).abs();
        }
    }
    Some(total / (3 * idx.len()) as f64)
}

pub fn psnr(pred: &FloatImage, gt: &FloatImage, idx: &[usize]) -> Option<f64> {
    if idx.is_empty() {
        return None;
    }
    let mut sse = 0.0;
    for &i in idx {
        let (a, b) = (px(pred, i), px(gt, i));
        for k in 0..3 {
            sse += (a[k].clamp(0.0, 255.0) - b[k]).powi(2);
        }
    }
    let mse = sse / (3 * idx.len()) as f64;
    Some(if mse == 0.0 { 100.0 } else { (10.0 * (65025.0 / mse).log10()).min(100.0) })
}

/// Symmetric padding: `d c b a | a b c d | d c b a`.
fn mirror(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Full-image SSIM map (RGB mean) with an explicit 11×11 Gaussian window and
/// two-pass variances.
pub fn ssim_map(pred: &FloatImage, gt: &FloatImage) -> Vec<f64> {
    let (h, w) = (gt.height(), gt.width());
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (dy, row) in win.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let r2 = (dy as f64 - 5.0).powi(2) + (dx as f64 - 5.0).powi(2);
            *v = (-r2 / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut map = vec![0.0; h * w];
    for ch in 0..3 {
        let x = |r: usize, c: usize| pred.get(r, c, ch).clamp(0.0, 255.0);
        let y = |r: usize, c: usize| gt.get(r, c, ch);
        for r in 0..h {
            for c in 0..w {
                let taps: Vec<(f64, f64, f64)> = (0..11)
                    .flat_map(|dy| (0..11).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| {
                        let rr = mirror(r as i64 + dy as i64 - 5, h as i64);
                        let cc = mirror(c as i64 + dx as i64 - 5, w as i64);
                        (win[dy][dx] / total, x(rr, cc), y(rr, cc))
                    })
                    .collect();
                let mx: f64 = taps.iter().map(|t| t.0 * t.1).sum();
                let my: f64 = taps.iter().map(|t| t.0 * t.2).sum();
                let vx: f64 = taps.iter().map(|t| t.0 * (t.1 - mx).powi(2)).sum();
                let vy: f64 = taps.iter().map(|t| t.0 * (t.2 - my).powi(2)).sum();
                let cxy: f64 = taps.iter().map(|t| t.0 * (t.1 - mx) * (t.2 - my)).sum();
                let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                map[r * w + c] += s / 3.0;
            }
        }
    }
    map
}

pub fn region_mean(map: &[f64], idx: &[usize]) -> Option<f64> {
    (!idx.is_empty()).then(|| idx.iter().map(|&i| map[i]).sum::<f64>() / idx.len() as f64)
}

pub fn ber(pred: &RawMask, gt: &RawMask) -> Option<f64> {
    let n = gt.height() * gt.width();
    let (mut tp, mut tn, mut pos, mut neg) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        if gt.is_shadow_at(i) {
            pos += 1.0;
            if pred.is_shadow_at(i) {
                tp += 1.0;
            }
        } else {
            neg += 1.0;
            if !pred.is_shadow_at(i) {
                tn += 1.0;
            }
        }
    }
    (pos > 0.0 && neg > 0.0).then(|| 100.0 * (1.0 - 0.5 * (tp / pos + tn / neg)))
}

/// Largest absolute gap between `metrics::evaluate` and the references above
/// over `cases` random 16×16 triplets, with predictions straying outside
/// [0, 255]. A presence mismatch (one side `None`) is an error.
pub fn worst_metric_gap(seed: u64, cases: usize) -> Result<f64, String> {
    use shadowmask::metrics::{evaluate, Region};
    let mut r = super::rng(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let gt = super::rand_image(&mut r, 16, 16, 0.0, 255.0);
        let pred = super::rand_image(&mut r, 16, 16, -20.0, 275.0);
        let mask = super::rand_mask(&mut r, 16, 16);
        let got = evaluate(&pred, &gt, &mask).map_err(|e| e.to_string())?;
        let map = ssim_map(&pred, &gt);
        let sel = regions(&mask);
        for (region, idx) in [Region::Shadow, Region::NonShadow, Region::All].into_iter().zip(&sel) {
            let e = got.get(region);
            if e.pixel_count != idx.len() as u64 {
                return Err(format!("case {case} {}: pixel count {}", region.label(), e.pixel_count));
            }
            let pairs = [
                ("mae", e.mae_lab, mae_lab(&pred, &gt, idx)),
                ("psnr", e.psnr_db, psnr(&pred, &gt, idx)),
                ("ssim", e.ssim, region_mean(&map, idx)),
            ];
            for (name, a, b) in pairs {
                match (a, b) {
                    (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                    (None, None) => {}
                    _ => return Err(format!("case {case} {} {name}: {a:?} vs {b:?}", region.label())),
                }
            }
        }
    }
    Ok(worst)
}

/// Largest BER gap against [`ber`] over `cases` random mask pairs.
pub fn worst_ber_gap(seed: u64, cases: usize) -> Result<f64, String> {
    use rand::Rng;
    let mut r = super::rng(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let gt = super::rand_mask(&mut r, 16, 16);
        let p: f64 = r.gen_range(0.0..0.5);
        let pred = RawMask::from_fn(16, 16, |y, x| gt.is_shadow(y, x) ^ r.gen_bool(p));
        let got = shadowmask::metrics::ber(&pred, &gt).map_err(|e| e.to_string())?.ber();
        match (got, ber(&pred, &gt)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (a, b) => return Err(format!("case {case}: {a:?} vs {b:?}")),
        }
    }
    Ok(worst)
}

/// Scores of a perfect prediction: `(MAE, PSNR, SSIM, BER)` per region.
pub fn identity_scores(seed: u64) -> Vec<(Option<f64>, Option<f64>, Option<f64>, Option<f64>)> {
    use shadowmask::metrics::{evaluate, Region};
    let mut r = super::rng(seed);
    let gt = super::rand_image(&mut r, 16, 16, 0.0, 255.0);
    let mask = super::rand_mask(&mut r, 16, 16);
    let m = evaluate(&gt, &gt, &mask).unwrap();
    let b = shadowmask::metrics::ber(&mask, &mask).unwrap().ber();
    [Region::Shadow, Region::NonShadow, Region::All]
        .into_iter()
        .map(|reg| {
            let e = m.get(reg);
            (e.mae_lab, e.psnr_db, e.ssim, b)
        })
        .collect()
}
