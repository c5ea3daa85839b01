//! Mask-quality degradation: contour shadow pixels are misclassified as
//! non-shadow until the mask reaches a target BER.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RawMask;
use crate::metrics::{ber, BerScore};

pub const DEFAULT_BAND_WIDTH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    /// Target BER in percent; 0 leaves the mask untouched.
    pub target_ber: f64,
    pub seed: u64,
    /// Contour half-width in pixels (Chebyshev).
    pub band_width: usize,
}

impl DegradeSpec {
    pub fn new(target_ber: f64, seed: u64) -> Self {
        Self {
            target_ber,
            seed,
            band_width: DEFAULT_BAND_WIDTH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..100.0).contains(&self.target_ber) {
            return Err(Error::Config(format!(
                "target BER must lie in [0, 100), got {}",
                self.target_ber
            )));
        }
        Ok(())
    }
}

/// Shadow pixels within `band_width` (Chebyshev distance) of a non-shadow
/// pixel, as raster indices in increasing order.
pub fn extract_contour(mask: &RawMask, band_width: usize) -> Vec<usize> {
    let (h, w) = (mask.height(), mask.width());
    // Summed-area table of non-shadow pixels, (h+1)×(w+1).
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            let v = u32::from(!mask.is_shadow(r, c));
            sat[(r + 1) * (w + 1) + c + 1] = v + sat[r * (w + 1) + c + 1] + sat[(r + 1) * (w + 1) + c] - sat[r * (w + 1) + c];
        }
    }
    let mut out = Vec::new();
    if band_width == 0 {
        return out;
    }
    for r in 0..h {
        let (r0, r1) = (r.saturating_sub(band_width), (r + band_width + 1).min(h));
        for c in 0..w {
            if !mask.is_shadow(r, c) {
                continue;
            }
            let (c0, c1) = (c.saturating_sub(band_width), (c + band_width + 1).min(w));
            let n = sat[r1 * (w + 1) + c1] + sat[r0 * (w + 1) + c0] - sat[r0 * (w + 1) + c1] - sat[r1 * (w + 1) + c0];
            if n > 0 {
                out.push(r * w + c);
            }
        }
    }
    out
}

/// Result of degrading one mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Degraded {
    pub mask: RawMask,
    pub score: BerScore,
    pub flips: usize,
    pub contour_size: usize,
}

impl Degraded {
    pub fn achieved_ber(&self) -> f64 {
        self.score.ber().unwrap_or(0.0)
    }
}

fn flip_first(mask: &RawMask, order: &[usize], k: usize) -> RawMask {
    let mut out = mask.clone();
    let w = mask.width();
    for &i in &order[..k] {
        out.set(i / w, i % w, false);
    }
    out
}

/// Flips a seeded random subset of contour pixels to non-shadow. The subset
/// size is found by bisection on the exact BER so that
/// `|achieved − target|` is minimal.
pub fn degrade_mask(mask: &RawMask, spec: &DegradeSpec) -> Result<Degraded> {
    spec.validate()?;
    let mut order = extract_contour(mask, spec.band_width);
    let contour_size = order.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let eval = |k: usize| -> Result<(RawMask, BerScore, f64)> {
        let m = flip_first(mask, &order, k);
        let s = ber(&m, mask)?;
        let b = s.ber().unwrap_or(0.0);
        Ok((m, s, b))
    };

    if spec.target_ber == 0.0 {
        let (m, score, _) = eval(0)?;
        return Ok(Degraded {
            mask: m,
            score,
            flips: 0,
            contour_size,
        });
    }
    let (_, _, max) = eval(contour_size)?;
    if max < spec.target_ber {
        return Err(Error::UnreachableBer {
            target: spec.target_ber,
            max,
        });
    }
    // Smallest k with ber(k) ≥ target.
    let (mut lo, mut hi) = (0usize, contour_size);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if eval(mid)?.2 >= spec.target_ber {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut k = lo;
    if k > 0 && (spec.target_ber - eval(k - 1)?.2).abs() <= (eval(k)?.2 - spec.target_ber).abs() {
        k -= 1;
    }
    let (m, score, _) = eval(k)?;
    Ok(Degraded {
        mask: m,
        score,
        flips: k,
        contour_size,
    })
}

/// One line of the degradation manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub target_ber: f64,
    pub achieved_ber: f64,
    pub flips: usize,
    pub contour_size: usize,
}

/// Degrades every mask of a set, one BER target per image. Image `i` draws
/// from seed `spec.seed + i`.
pub fn degrade_set<'a>(
    masks: impl IntoIterator<Item = (&'a str, &'a RawMask)>,
    spec: &DegradeSpec,
) -> Result<Vec<(RawMask, ManifestEntry)>> {
    masks
        .into_iter()
        .enumerate()
        .map(|(i, (id, mask))| {
            let s = DegradeSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..*spec
            };
            let d = degrade_mask(mask, &s)?;
            let entry = ManifestEntry {
                image_id: id.to_string(),
                target_ber: spec.target_ber,
                achieved_ber: d.achieved_ber(),
                flips: d.flips,
                contour_size: d.contour_size,
            };
            Ok((d.mask, entry))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(n: usize, r0: usize, side: usize) -> RawMask {
        RawMask::from_fn(n, n, |r, c| (r0..r0 + side).contains(&r) && (r0..r0 + side).contains(&c))
    }

    #[test]
    fn square_border_band_one() {
        let m = square(10, 2, 5);
        let contour = extract_contour(&m, 1);
        assert_eq!(contour.len(), 16);
        let brute: Vec<usize> = (0..100)
            .filter(|&i| {
                let (r, c) = (i / 10, i % 10);
                (2..7).contains(&r) && (2..7).contains(&c) && (r == 2 || r == 6 || c == 2 || c == 6)
            })
            .collect();
        assert_eq!(contour, brute);
        assert_eq!(extract_contour(&m, 2).len(), 24);
    }

    #[test]
    fn degenerate_contours() {
        assert!(extract_contour(&RawMask::full(6, 6), 1).is_empty());
        assert!(extract_contour(&RawMask::empty(6, 6), 1).is_empty());
        let single = RawMask::from_fn(5, 5, |r, c| r == 2 && c == 2);
        assert_eq!(extract_contour(&single, 1), vec![12]);
    }

    #[test]
    fn target_zero_is_identity() {
        let m = square(10, 2, 5);
        let d = degrade_mask(&m, &DegradeSpec::new(0.0, 3)).unwrap();
        assert_eq!(d.mask, m);
        assert_eq!(d.flips, 0);
        assert_eq!(d.achieved_ber(), 0.0);
    }

    #[test]
    fn whole_contour_matches_confusion_counts() {
        let m = square(10, 2, 5);
        let spec = DegradeSpec {
            target_ber: 32.0,
            seed: 1,
            band_width: 1,
        };
        let d = degrade_mask(&m, &spec).unwrap();
        assert_eq!(d.flips, 16);
        // 9 shadow pixels kept out of 25, no false positives.
        assert_eq!((d.score.tp, d.score.fn_, d.score.fp, d.score.tn), (9, 16, 0, 75));
        assert!((d.achieved_ber() - 100.0 * (1.0 - 0.5 * (9.0 / 25.0 + 1.0))).abs() < 1e-12);
    }

    #[test]
    fn unreachable_target_names_max() {
        let m = square(10, 2, 5);
        let spec = DegradeSpec {
            target_ber: 40.0,
            seed: 0,
            band_width: 1,
        };
        match degrade_mask(&m, &spec) {
            Err(Error::UnreachableBer { max, .. }) => assert!((max - 32.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn blob(n: usize) -> impl Strategy<Value = RawMask> {
        (4..n / 2, 4..n / 2, 3usize..8).prop_map(move |(cy, cx, rad)| {
            RawMask::from_fn(n, n, |r, c| {
                let (dy, dx) = (r as f64 - cy as f64, c as f64 - cx as f64);
                dy * dy + dx * dx <= (rad * rad) as f64
            })
        })
    }

    proptest! {
        #[test]
        fn degradation_properties(m in blob(32), target in 0.5f64..6.0, seed in 0u64..1000) {
            let spec = DegradeSpec::new(target, seed);
            let d = degrade_mask(&m, &spec).unwrap();
            // Only shadow→non-shadow changes.
            for i in 0..m.data().len() {
                prop_assert!(m.is_shadow_at(i) || !d.mask.is_shadow_at(i));
            }
            let step = 50.0 / m.shadow_count() as f64;
            prop_assert!((d.achieved_ber() - target).abs() <= step + 1e-12);
            prop_assert_eq!(&degrade_mask(&m, &spec).unwrap().mask, &d.mask);
        }

        #[test]
        fn ber_monotone_in_flips(m in blob(32), seed in 0u64..100) {
            let mut order = extract_contour(&m, 2);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let bers: Vec<f64> = (0..=order.len())
                .map(|k| ber(&flip_first(&m, &order, k), &m).unwrap().ber().unwrap())
                .collect();
            prop_assert!(bers.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
