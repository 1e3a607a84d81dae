//! Trains a small patch encoder with the multi-margin contrastive loss and
//! writes a checkpoint.
//!
//! cargo run --release --example train_encoder -- [out.dp3d]

use pointdesc::evaluation::{generate_synthetic_corpus, ShapeKind, SynthSpec};
use pointdesc::formats::save_checkpoint;
use pointdesc::geometry::PatchConfig;
use pointdesc::mining::{build_pair_set, MiningConfig, TrainingSet};
use pointdesc::model::{EncoderArch, LossConfig, LossKind, Variant};
use pointdesc::trainer::{train, TrainConfig};

fn main() -> pointdesc::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "encoder.dp3d".into());
    let synth = generate_synthetic_corpus(&SynthSpec {
        kinds: vec![ShapeKind::Composite; 2],
        instances: 3,
        noise: 0.003,
        stable_radius: Some(0.5),
        ..SynthSpec::default()
    })?;
    let patch = PatchConfig {
        radius: 0.5,
        n_points: 32,
        theta_min: 0.1,
    };
    let pairs = build_pair_set(&synth.corpus, &MiningConfig { patch, ..MiningConfig::default() })?;
    let data = TrainingSet::Pairs(pairs);
    println!("{:?} (positives, soft, hard)", data.counts());

    let cfg = TrainConfig {
        loss: LossConfig::with_kind(LossKind::Mmcl),
        arch: EncoderArch::new(vec![3, 32, 64], vec![64, 32], Variant::PatchSiamese)?,
        epochs: 15,
        batch_size: 16,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let report = train(&data, &cfg)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>2}  loss {l:.4}", e + 1);
    }
    save_checkpoint(out.as_ref(), &report.params)?;
    println!("wrote {out}");
    Ok(())
}
