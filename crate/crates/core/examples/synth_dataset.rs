//! Write a small synthetic dataset in the triplet layout and read it back.

use shadowmask::dataset::{ingest_dataset, Split};
use shadowmask::synth::{generate_synthetic, SynthParams};

fn main() -> shadowmask::Result<()> {
    let root = std::env::args().nth(1).unwrap_or_else(|| "data/example".into());
    generate_synthetic(&root, 8, 4, 64, 0, &SynthParams::default())?;
    let triplets = ingest_dataset(&root)?;
    for split in [Split::Train, Split::Test] {
        let ids: Vec<&str> = triplets.iter().filter(|t| t.split == split).map(|t| t.id.as_str()).collect();
        println!("{split}: {}", ids.join(" "));
    }
    let s = triplets[0].load()?;
    println!(
        "{}: {}, {:.1}% shadow",
        s.id,
        s.resolution(),
        100.0 * s.mask.shadow_count() as f64 / (s.mask.height() * s.mask.width()) as f64
    );
    Ok(())
}
