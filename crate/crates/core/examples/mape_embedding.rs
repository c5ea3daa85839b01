//! Walk one image through the mask-augmented patch embedding and show how
//! the sign structure of the input changes.

use shadowmask::dataset::Split;
use shadowmask::imaging::normalize_signed;
use shadowmask::mape::{
    binarize_signed, binarize_unit, embed_variant, mask_modulate, region_reweight, sign_statistics_both_stages,
    ProjectionWeights,
};
use shadowmask::nn::Tensor;
use shadowmask::synth::{synthetic_split, SynthParams};
use shadowmask::{EmbeddingVariant, MapeConfig};

fn main() -> shadowmask::Result<()> {
    let sample = synthetic_split(1, 32, 0, Split::Train, &SynthParams::default())?.remove(0);
    let cfg = MapeConfig {
        embed_dim: 8,
        ..MapeConfig::default()
    };

    let x = normalize_signed(&sample.shadow)?;
    let t_s = region_reweight(&x, &binarize_unit(&sample.mask), &cfg)?;
    let t_m = mask_modulate(&t_s, &binarize_signed(&sample.mask))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean of x {:+.4}, T_s {:+.4}, T_m {:+.4}", mean(x.data()), mean(t_s.data()), mean(t_m.data()));

    let (before, after) = sign_statistics_both_stages(&sample.shadow, &sample.mask, &cfg)?;
    println!(
        "negative values: shadow {:.1}%, non-shadow {:.1}% before modulation; non-shadow {:.1}% after",
        100.0 * before.shadow_neg_frac().unwrap_or(0.0),
        100.0 * before.nonshadow_neg_frac().unwrap_or(0.0),
        100.0 * after.nonshadow_neg_frac().unwrap_or(0.0)
    );

    // A fixed kernel that averages each channel over the 3x3 window.
    let mut k = vec![0.0; 8 * 27];
    for e in 0..8 {
        for t in 0..9 {
            k[e * 27 + (e % 3) * 9 + t] = 1.0 / 9.0;
        }
    }
    let w = ProjectionWeights::new(Tensor::new(&[8, 3, 3, 3], k)?, Tensor::zeros(&[8]))?;
    for v in EmbeddingVariant::ALL {
        let tokens = embed_variant(&sample.shadow, &sample.mask, &w, &cfg, v)?;
        println!("{:>10}: tokens {:?}, mean {:+.4}", v.as_str(), tokens.shape(), mean(tokens.data()));
    }
    Ok(())
}
