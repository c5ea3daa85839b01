//! Degrade ground-truth masks to a set of target BERs by eroding the shadow
//! contour.

use shadowmask::dataset::Split;
use shadowmask::degrade::{degrade_mask, extract_contour, DegradeSpec, DEFAULT_BAND_WIDTH};
use shadowmask::synth::{synthetic_split, SynthParams};

fn main() -> shadowmask::Result<()> {
    let samples = synthetic_split(3, 64, 0, Split::Test, &SynthParams::default())?;
    for s in &samples {
        let contour = extract_contour(&s.mask, DEFAULT_BAND_WIDTH);
        print!("{}: {} shadow px, {} on contour |", s.id, s.mask.shadow_count(), contour.len());
        for target in [1.0, 2.0, 4.0] {
            let d = degrade_mask(&s.mask, &DegradeSpec::new(target, 0))?;
            print!(" {target:.0}% -> {:.3}% ({} flips)", d.achieved_ber(), d.flips);
        }
        println!();
    }
    Ok(())
}
