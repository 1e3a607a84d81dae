//! Detects ISS keypoints on a synthetic shape and cuts an LRF-aligned patch
//! at each of the first few.
//!
//! cargo run --release --example keypoints_and_patches

use pointdesc::evaluation::{generate_synthetic_corpus, ShapeKind, SynthSpec};
use pointdesc::geometry::{compute_resolution, detect_iss_keypoints, IssParams, PatchConfig, PatchExtractor};

fn main() -> pointdesc::Result<()> {
    let synth = generate_synthetic_corpus(&SynthSpec {
        kinds: vec![ShapeKind::Composite],
        instances: 2,
        points: 3000,
        ..SynthSpec::default()
    })?;
    let cloud = &synth.corpus.models[0].cloud;
    let mr = compute_resolution(cloud)?;
    println!("{} points, resolution {mr:.4}", cloud.len());

    let kps = detect_iss_keypoints(cloud, &IssParams::for_resolution(mr))?;
    println!("{} ISS keypoints", kps.len());

    let cfg = PatchConfig {
        radius: 0.4,
        n_points: 32,
        theta_min: 0.1,
    };
    let extractor = PatchExtractor::new(cloud, cfg)?;
    for &k in kps.iter().take(5) {
        match extractor.extract(k) {
            Ok(p) => {
                let ev = p.lrf.eigenvalues;
                println!(
                    "keypoint {k:>5}: {} distinct neighbours, eigenvalues {:.4} {:.4} {:.4}",
                    p.valid_count, ev[0], ev[1], ev[2]
                );
            }
            Err(e) => println!("keypoint {k:>5}: {e}"),
        }
    }
    Ok(())
}
