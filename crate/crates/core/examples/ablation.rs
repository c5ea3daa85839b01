//! Train the three embedding variants on a reduced synthetic profile, run
//! the mask-BER sweep and print the report.
//!
//! `cargo run --release --example ablation -- runs/ablation-small`

use shadowmask::dataset::Split;
use shadowmask::harness::{ablate_on, report, RunConfig, RunOptions};
use shadowmask::synth::synthetic_split;

fn main() -> shadowmask::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/ablation-small".into());
    let mut cfg = RunConfig {
        out: out.into(),
        save_predictions: false,
        ..RunConfig::default()
    };
    cfg.train.epochs = 5;
    cfg.synth.train = 48;
    cfg.synth.test = 12;

    let s = &cfg.synth;
    let train = synthetic_split(s.train, s.size, s.seed, Split::Train, &s.params)?;
    let test = synthetic_split(s.test, s.size, s.seed, Split::Test, &s.params)?;
    ablate_on(&cfg, RunOptions::default(), &train, &test)?;
    print!("{}", report(&cfg.out)?);
    Ok(())
}
