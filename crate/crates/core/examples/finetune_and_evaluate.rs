//! Pretrain briefly, fine-tune on part of the target training split and
//! evaluate person search on its test split.
//!
//! cargo run --release --example finetune_and_evaluate -- [fraction] [out_dir]

use std::path::PathBuf;

use anyhow::{Context, Result};
use hps_core::corpus::{generate_synthetic_corpus, load_manifest, ManifestKind, SynthSpec};
use hps_core::evaluator::{evaluate, FrozenModel};
use hps_core::trainer::{finetune, pretrain, FinetuneOptions, InitMode, InitScope, TrainConfig};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let fraction: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.5);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hps_finetune"));
    let manifests = generate_synthetic_corpus(&SynthSpec::desk(2, 1, 1, 60, 60, 40), 7, &out.join("corpus"))?;
    let pick = |pred: &dyn Fn(&str, ManifestKind) -> bool| -> Vec<PathBuf> {
        manifests.iter().filter(|m| pred(&m.dataset_id, m.kind)).map(|m| m.path()).collect()
    };

    let mut cfg = TrainConfig::desk();
    cfg.trainer.steps = 300;
    cfg.corpus.manifests = pick(&|_, k| k != ManifestKind::PersonSearch);
    let pre = pretrain(&cfg, &out.join("pretrain"), false)?;
    println!("pretrained {} steps -> {}", cfg.trainer.steps, pre.final_checkpoint.display());

    cfg.corpus.manifests = pick(&|id, _| id.ends_with("_train"));
    cfg.trainer.steps = cfg.eval.finetune_steps;
    let test = load_manifest(pick(&|id, _| id.ends_with("_test")).first().context("test split")?)?;
    for (label, init) in [
        ("random", InitMode::Random),
        ("pretrained", InitMode::Checkpoint(pre.final_checkpoint.clone())),
    ] {
        let opts = FinetuneOptions::new(init, InitScope::Full, fraction);
        let run = finetune(&cfg, &opts, &out.join(format!("finetune_{label}")))?;
        let frozen = FrozenModel::from_checkpoint(&run.final_checkpoint, &cfg.model)?;
        let report = evaluate(&frozen, &test, &cfg.eval.top_k)?;
        println!(
            "{label:10} mAP {:.3}  top-1 {:.3}  top-5 {:.3}  detection AP {:.3}  ({} queries)",
            report.map,
            report.top(1),
            report.top(5),
            report.detection_ap,
            report.queries
        );
    }
    Ok(())
}
