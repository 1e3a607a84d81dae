//! Writes a synthetic corpus to disk as clouds, keypoint and label lists,
//! correspondence files and a manifest, then loads it back.
//!
//! cargo run --release --example synthetic_dataset -- [out_dir]

use std::path::PathBuf;

use pointdesc::evaluation::{generate_synthetic_corpus, ShapeKind, SynthSpec};
use pointdesc::formats::{format_correspondences, format_indices, format_labels, format_xyz, write_atomic, Manifest};

fn main() -> pointdesc::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic".into()));
    std::fs::create_dir_all(&dir).map_err(|e| pointdesc::Error::Io { path: dir.clone(), source: e })?;
    let synth = generate_synthetic_corpus(&SynthSpec {
        kinds: vec![ShapeKind::Box, ShapeKind::Composite],
        instances: 2,
        noise: 0.002,
        ..SynthSpec::default()
    })?;

    let mut manifest = Manifest::default();
    for (i, m) in synth.corpus.models.iter().enumerate() {
        let files = [
            (dir.join(format!("m{i}.xyz")), format_xyz(&m.cloud)),
            (dir.join(format!("m{i}.kp")), format_indices(&m.keypoints)),
            (dir.join(format!("m{i}.labels")), format_labels(&m.part_labels)),
        ];
        for (p, body) in &files {
            write_atomic(p, body.as_bytes())?;
        }
        manifest.clouds.push(files[0].0.clone());
        manifest.keypoints.push(files[1].0.clone());
        manifest.labels.push(files[2].0.clone());
    }
    for s in &synth.corpus.correspondences {
        let p = dir.join(format!("c{}_{}.txt", s.model_a, s.model_b));
        write_atomic(&p, format_correspondences(s).as_bytes())?;
        manifest.correspondences.push(p);
    }
    let mpath = dir.join("manifest.txt");
    write_atomic(&mpath, manifest.format(&dir).as_bytes())?;

    let back = Manifest::load(&mpath)?.load_corpus()?;
    println!(
        "{} models, {} correspondence sets written to {}",
        back.models.len(),
        back.correspondences.len(),
        dir.display()
    );
    Ok(())
}
