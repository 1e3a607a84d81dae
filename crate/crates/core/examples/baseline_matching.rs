//! Matches two posed instances of a shape with the histogram baseline and
//! the nearest-neighbour distance ratio test.
//!
//! cargo run --release --example baseline_matching

use pointdesc::baseline::{nndr_match, HistogramBins, HistogramExtractor};
use pointdesc::evaluation::{generate_synthetic_corpus, ShapeKind, SynthSpec};
use pointdesc::geometry::estimate_normals;

fn main() -> pointdesc::Result<()> {
    let synth = generate_synthetic_corpus(&SynthSpec {
        kinds: vec![ShapeKind::Composite],
        instances: 2,
        noise: 0.002,
        seed: 5,
        ..SynthSpec::default()
    })?;
    let c = &synth.corpus;
    let mut described = Vec::new();
    for m in &c.models {
        let with_normals = estimate_normals(&m.cloud, 10)?;
        let hx = HistogramExtractor::new(&with_normals, 0.5, HistogramBins::default())?;
        let d: Vec<(usize, Vec<f64>)> = m
            .keypoints
            .iter()
            .filter_map(|&k| hx.compute(k).ok().map(|h| (k, h.values)))
            .collect();
        described.push(d);
    }
    let q: Vec<&[f64]> = described[0].iter().map(|d| d.1.as_slice()).collect();
    let t: Vec<&[f64]> = described[1].iter().map(|d| d.1.as_slice()).collect();
    let matches = nndr_match(&q, &t, 0.8)?;

    let gt = &c.correspondences[0];
    let correct = matches
        .iter()
        .filter(|m| gt.pairs.contains(&(described[0][m.query_index].0, described[1][m.target_index].0)))
        .count();
    println!("{} matches under ratio 0.8, {correct} correct", matches.len());
    Ok(())
}
