//! Mines positives, soft negatives and hard negatives from a synthetic
//! corpus, with a multi-resolution copy of every model.
//!
//! cargo run --release --example mine_training_pairs

use pointdesc::evaluation::{generate_synthetic_corpus, ShapeKind, SynthSpec};
use pointdesc::geometry::PatchConfig;
use pointdesc::mining::{audit_labels, augment_multiresolution, Miner, MiningConfig};

fn main() -> pointdesc::Result<()> {
    let synth = generate_synthetic_corpus(&SynthSpec {
        kinds: vec![ShapeKind::Composite, ShapeKind::Composite],
        instances: 3,
        noise: 0.003,
        seed: 1,
        ..SynthSpec::default()
    })?;
    let corpus = augment_multiresolution(&synth.corpus, &[0.5], 1)?;
    println!("{} models after augmentation", corpus.models.len());

    let cfg = MiningConfig {
        patch: PatchConfig {
            radius: 0.5,
            n_points: 32,
            theta_min: 0.1,
        },
        cross_model_pairs: Some(20),
        ..MiningConfig::default()
    };
    let miner = Miner::new(&corpus, cfg)?;
    let pos = miner.positives()?;
    let soft = miner.soft_negatives(None)?;
    let hard = miner.hard_negatives(None)?;
    println!("positives {}  soft {}  hard {}", pos.len(), soft.len(), hard.len());

    let all: Vec<_> = pos.into_iter().chain(soft).chain(hard).collect();
    audit_labels(&corpus, &all)?;
    println!("label audit passed");
    Ok(())
}
