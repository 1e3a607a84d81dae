//! Compares a trained encoder, its random initialisation and the histogram
//! baseline on held-out instances: CMC, precision/recall and
//! correspondence accuracy in both symmetry modes.
//!
//! cargo run --release --example evaluate_descriptors

use pointdesc::baseline::HistogramBins;
use pointdesc::evaluation::{
    baseline_corpus, describe_corpus, evaluate_corpus, generate_synthetic_corpus, CorpusDescriptors, EvalConfig,
    ShapeKind, SymmetryMode, SynthSpec,
};
use pointdesc::geometry::PatchConfig;
use pointdesc::mining::{augment_multiresolution, build_pair_set, Corpus, MiningConfig, TrainingSet};
use pointdesc::model::{EncoderArch, Variant};
use pointdesc::trainer::{init_params, train, TrainConfig};

fn report(name: &str, corpus: &Corpus, d: &CorpusDescriptors) -> pointdesc::Result<()> {
    for mode in [SymmetryMode::NonSymmetric, SymmetryMode::Symmetric] {
        let cfg = EvalConfig {
            symmetry: mode,
            ..EvalConfig::default()
        };
        let r = evaluate_corpus(corpus, d, &cfg)?;
        println!(
            "{name:<10} {mode:?}: cmc@1 {:.3} cmc@10 {:.3} P {:.3} R {:.3} acc {:.3}",
            r.cmc_at(1),
            r.cmc_at(10),
            r.precision,
            r.recall,
            r.corr_accuracy
        );
    }
    Ok(())
}

fn main() -> pointdesc::Result<()> {
    let synth = generate_synthetic_corpus(&SynthSpec {
        kinds: vec![ShapeKind::Composite; 4],
        instances: 5,
        noise: 0.005,
        stable_radius: Some(0.5),
        seed: 0,
        ..SynthSpec::default()
    })?;
    let c = &synth.corpus;
    let train_ids: Vec<usize> = (0..c.models.len()).filter(|i| i % 5 < 3).collect();
    let test_ids: Vec<usize> = (0..c.models.len()).filter(|i| i % 5 >= 3).collect();
    let (train_c, test_c) = (c.subset(&train_ids), c.subset(&test_ids));

    let patch = PatchConfig {
        radius: 0.5,
        n_points: 64,
        theta_min: 0.1,
    };
    let train_c = augment_multiresolution(&train_c, &[0.5], 0)?;
    let data = TrainingSet::Pairs(build_pair_set(&train_c, &MiningConfig { patch, ..MiningConfig::default() })?);
    let cfg = TrainConfig {
        arch: EncoderArch::new(vec![3, 64, 128], vec![128, 128], Variant::PatchSiamese)?,
        epochs: 30,
        batch_size: 16,
        learning_rate: 0.02,
        ..TrainConfig::default()
    };
    let trained = train(&data, &cfg)?.params;
    let random = init_params(&cfg.arch, cfg.seed)?;

    report("trained", &test_c, &describe_corpus(&trained, &test_c, &patch)?)?;
    report("random", &test_c, &describe_corpus(&random, &test_c, &patch)?)?;
    report("histogram", &test_c, &baseline_corpus(&test_c, 0.5, HistogramBins::default(), 10)?)?;
    Ok(())
}
