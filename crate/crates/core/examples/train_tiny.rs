//! Train a small model for a few epochs on in-memory synthetic data and
//! print the per-epoch log.

use shadowmask::dataset::Split;
use shadowmask::nn::{evaluate_model, train, Model, ModelConfig, TrainConfig};
use shadowmask::synth::{synthetic_split, SynthParams};
use shadowmask::{EmbeddingVariant, MapeConfig};

fn main() -> shadowmask::Result<()> {
    let p = SynthParams::default();
    let train_set = synthetic_split(16, 32, 0, Split::Train, &p)?;
    let test_set = synthetic_split(4, 32, 0, Split::Test, &p)?;
    let model = Model::init(ModelConfig::default(), MapeConfig::default(), EmbeddingVariant::Mape, 0)?;
    println!("{} parameters", model.param_count());

    let before = evaluate_model(&model, &test_set)?;
    let cfg = TrainConfig {
        lr: 1e-3,
        epochs: 5,
        val_images: 4,
        ..TrainConfig::default()
    };
    let (model, log) = train(model, &train_set, &test_set, cfg)?;
    for r in &log {
        let val = r.val.as_ref().and_then(|m| m.shadow.mae_lab).unwrap_or(f64::NAN);
        println!("epoch {:>2}  lr {:.2e}  train L1 {:7.3}  val S-MAE {:7.3}", r.epoch, r.lr, r.train_l1, val);
    }
    let after = evaluate_model(&model, &test_set)?;
    println!(
        "shadow MAE {:.3} -> {:.3}",
        before.shadow.mae_lab.unwrap_or(f64::NAN),
        after.shadow.mae_lab.unwrap_or(f64::NAN)
    );
    Ok(())
}
