//! Render a small multi-domain synthetic corpus and summarize it.
//!
//! cargo run --release --example synth_corpus -- [out_dir] [seed]

use std::path::PathBuf;

use anyhow::Result;
use hps_core::corpus::{generate_synthetic_corpus, Record, SynthSpec};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hps_synth_corpus"));
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    // two detection domains, one labeled and one unlabeled re-ID domain,
    // and a person-search target split into train and test manifests
    let spec = SynthSpec::desk(2, 1, 1, 40, 30, 20);
    let manifests = generate_synthetic_corpus(&spec, seed, &out)?;
    for m in &manifests {
        let boxes: usize = m
            .records
            .iter()
            .map(|r| match r {
                Record::Detection(d) => d.boxes.len(),
                Record::Reid(_) => 1,
            })
            .sum();
        let ((w0, w1), (h0, h1)) = m.image_size_stats().unwrap_or(((0, 0), (0, 0)));
        println!(
            "{:12} {:?}: {} images, {} persons, width {w0}..{w1}, height {h0}..{h1}",
            m.dataset_id,
            m.kind,
            m.len(),
            boxes
        );
    }
    println!("manifests under {}", out.display());
    Ok(())
}
