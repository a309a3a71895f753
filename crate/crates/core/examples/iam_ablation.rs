//! Pretrain with and without the domain alignment modules and compare
//! downstream mAP with how well a linear probe recovers the source domain
//! from the frozen encoder.
//!
//! cargo run --release --example iam_ablation -- [steps] [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use hps_core::corpus::{generate_synthetic_corpus, ManifestKind, SynthSpec};
use hps_core::evaluator::run_iam_ablation;
use hps_core::trainer::TrainConfig;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = TrainConfig::desk();
    cfg.trainer.steps = args.next().map(|s| s.parse()).transpose()?.unwrap_or(cfg.trainer.steps);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hps_iam_ablation"));
    let manifests = generate_synthetic_corpus(&SynthSpec::desk(2, 1, 1, 100, 60, 40), 7, &out.join("corpus"))?;
    let pick = |pred: &dyn Fn(&str, ManifestKind) -> bool| -> Vec<PathBuf> {
        manifests.iter().filter(|m| pred(&m.dataset_id, m.kind)).map(|m| m.path()).collect()
    };
    let sources = pick(&|_, k| k != ManifestKind::PersonSearch);
    cfg.corpus.manifests = pick(&|id, _| id.ends_with("_train"));
    cfg.eval.gallery = pick(&|id, _| id.ends_with("_test")).pop();

    let rows = run_iam_ablation(&cfg, &[sources], 60, &out)?;
    for r in &rows {
        println!(
            "domains {}  iam {:5}  seed {}  mAP {:.3}  probe {:.3}",
            r.domains, r.iam, r.seed, r.map, r.probe_accuracy
        );
    }
    println!("table in {}", out.join("iam_ablation.csv").display());
    Ok(())
}
