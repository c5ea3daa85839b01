//! Score a few corrupted versions of a shadow-free image.

use shadowmask::dataset::Split;
use shadowmask::metrics::{ber, evaluate, format_table};
use shadowmask::synth::{synthetic_split, SynthParams};
use shadowmask::RawMask;

fn main() -> shadowmask::Result<()> {
    let s = synthetic_split(1, 64, 3, Split::Test, &SynthParams::default())?.remove(0);
    let mut brighter = s.free.clone();
    brighter.data_mut().iter_mut().for_each(|v| *v += 10.0);

    let rows = vec![
        ("shadow input".to_string(), Some(evaluate(&s.shadow, &s.free, &s.mask)?)),
        ("+10 offset".to_string(), Some(evaluate(&brighter, &s.free, &s.mask)?)),
        ("exact".to_string(), Some(evaluate(&s.free, &s.free, &s.mask)?)),
    ];
    print!("{}", format_table(&rows));

    let shifted = RawMask::from_fn(64, 64, |r, c| c > 0 && s.mask.is_shadow(r, c - 1));
    let score = ber(&shifted, &s.mask)?;
    println!("mask shifted one pixel right: BER {:.3}", score.ber().unwrap_or(f64::NAN));
    Ok(())
}
