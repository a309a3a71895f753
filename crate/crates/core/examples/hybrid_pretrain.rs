//! Synthesize a small multi-domain corpus and run hybrid pretraining on it.
//!
//! cargo run --release --example hybrid_pretrain -- [steps] [out_dir]

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use hps_core::corpus::{generate_synthetic_corpus, ManifestKind, SynthSpec};
use hps_core::trainer::{pretrain, TrainConfig};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(200);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hps_hybrid_pretrain"));

    let spec = SynthSpec::desk(2, 1, 1, 100, 60, 40);
    let manifests = generate_synthetic_corpus(&spec, 7, &out.join("corpus"))?;

    let mut cfg = TrainConfig::desk();
    cfg.corpus.manifests = manifests
        .iter()
        .filter(|m| m.kind != ManifestKind::PersonSearch)
        .map(|m| m.path())
        .collect();
    cfg.trainer.steps = steps;
    let t0 = Instant::now();
    let run = pretrain(&cfg, &out.join("run"), false)?;
    for r in run.reports.iter().step_by((steps as usize / 10).max(1)) {
        println!(
            "step {:4}  det {:.3}  reid {:.3}  con {:.3}  adv {:.3}  total {:.3}",
            r.step, r.l_det, r.l_reid, r.l_con, r.l_adv, r.l_total
        );
    }
    println!(
        "{} steps in {:.1}s, checkpoint {}",
        steps,
        t0.elapsed().as_secs_f64(),
        run.final_checkpoint.display()
    );
    Ok(())
}
