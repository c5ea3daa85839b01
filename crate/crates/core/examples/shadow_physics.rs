//! Render a shadow from a lit scene, undo it, and recover the per-channel
//! linear map between shadowed and lit intensities.

use shadowmask::dataset::Split;
use shadowmask::shadow_model::{fit_linear_map, relight, render_shadow, render_shadow_free, AttenuationField, LinearShadowParams};
use shadowmask::synth::{generate_sample, SynthParams};

fn main() -> shadowmask::Result<()> {
    let s = generate_sample(64, 0, Split::Train, 0, &SynthParams::default())?;
    let atten = AttenuationField::constant(&s.mask, s.attenuation)?;
    let shadow = render_shadow(&s.scene, &atten, &s.mask)?;
    let free = render_shadow_free(&s.scene);
    let back = relight(&shadow, &s.scene, &atten, &s.mask)?;
    let err = back.data().iter().zip(free.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("attenuation {:.3}, {} shadow pixels", s.attenuation, s.mask.shadow_count());
    println!("relight max error {err:.2e}");

    let fit = fit_linear_map(&shadow, &free, &s.mask)?;
    let exact = LinearShadowParams::from_scene(&s.scene, s.attenuation);
    for k in 0..3 {
        println!(
            "channel {k}: fitted w={:.6} b={:+.2e}, exact w={:.6}",
            fit.params.w[k], fit.params.b[k], exact.w[k]
        );
    }
    println!("fit residual {:.2e}", fit.max_residual());
    Ok(())
}
