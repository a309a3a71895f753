//! Compare the two ways of turning re-ID crops into scene-like samples:
//! expand-and-resize against pasting onto a blank canvas.
//!
//! cargo run --release --example reid_operation_ablation -- [steps] [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use hps_core::corpus::{generate_synthetic_corpus, SynthSpec};
use hps_core::evaluator::run_unify_ablation;
use hps_core::trainer::TrainConfig;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = TrainConfig::desk();
    cfg.trainer.steps = args.next().map(|s| s.parse()).transpose()?.unwrap_or(cfg.trainer.steps);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hps_unify_ablation"));
    // re-ID sources only, so the operation is the one thing that differs
    let manifests = generate_synthetic_corpus(&SynthSpec::desk(0, 1, 1, 100, 60, 40), 7, &out.join("corpus"))?;
    cfg.corpus.manifests = manifests.iter().filter(|m| !m.dataset_id.ends_with("_test")).map(|m| m.path()).collect();
    cfg.eval.gallery = manifests.iter().find(|m| m.dataset_id.ends_with("_test")).map(|m| m.path());

    let rows = run_unify_ablation(&cfg, &out)?;
    for r in &rows {
        println!("{:?}  seed {}  mAP {:.3}  top-1 {:.3}", r.unify, r.seed, r.map, r.top1);
    }
    println!("table in {}", out.join("unify_ablation.csv").display());
    Ok(())
}
