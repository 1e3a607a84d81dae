//! Iterative quantization of descriptors into 32-bit codes, Hamming
//! ranking, and the CMC of codes against the real-valued descriptors.
//!
//! cargo run --release --example binarize_descriptors

use pointdesc::binarization::{encode_corpus, evaluate_binary_corpus, hamming_rank, itq_train_traced};
use pointdesc::evaluation::{describe_corpus, evaluate_corpus, generate_synthetic_corpus, EvalConfig, ShapeKind, SynthSpec};
use pointdesc::geometry::PatchConfig;
use pointdesc::model::{EncoderArch, Variant};
use pointdesc::trainer::init_params;

fn main() -> pointdesc::Result<()> {
    let synth = generate_synthetic_corpus(&SynthSpec {
        kinds: vec![ShapeKind::Composite; 2],
        instances: 3,
        noise: 0.002,
        ..SynthSpec::default()
    })?;
    let c = &synth.corpus;
    let patch = PatchConfig {
        radius: 0.5,
        n_points: 32,
        theta_min: 0.1,
    };
    // an untrained encoder is enough to show the mechanics
    let params = init_params(&EncoderArch::new(vec![3, 32, 64], vec![64, 64], Variant::PatchSiamese)?, 0)?;
    let descs = describe_corpus(&params, c, &patch)?;
    let flat: Vec<Vec<f64>> = descs.iter().flatten().map(|d| d.1.clone()).collect();

    let (itq, losses) = itq_train_traced(&flat, 32, 50, 0)?;
    println!(
        "quantization loss {:.2} -> {:.2}, rotation orthogonality error {:.1e}",
        losses[0],
        losses[losses.len() - 1],
        itq.orthogonality_error()
    );

    let codes = encode_corpus(&itq, &descs)?;
    let targets: Vec<_> = codes[1].iter().map(|c| c.1.clone()).collect();
    let ranked = hamming_rank(&codes[0][0].1, &targets)?;
    println!("nearest codes to keypoint {}: {:?}", codes[0][0].0, &ranked[..5]);

    let cfg = EvalConfig::default();
    let real = evaluate_corpus(c, &descs, &cfg)?;
    let binary = evaluate_binary_corpus(c, &codes, &cfg)?;
    println!("cmc@10 real {:.3}  binary {:.3}", real.cmc_at(10), binary.cmc_at(10));
    Ok(())
}
