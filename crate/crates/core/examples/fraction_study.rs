//! Pretrain on synthetic source domains, then fine-tune on growing
//! fractions of a synthetic target from random, backbone-only and full
//! initialization.
//!
//! cargo run --release --example fraction_study -- [pretrain_steps] [finetune_steps] [out_dir]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use hps_core::corpus::{generate_synthetic_corpus, ManifestKind, SynthSpec};
use hps_core::evaluator::run_fig5_harness;
use hps_core::trainer::{pretrain, TrainConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = TrainConfig::desk();
    let pre_steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(cfg.trainer.steps);
    let ft_steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(cfg.eval.finetune_steps);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hps_fraction_study"));
    let t0 = Instant::now();

    let manifests = generate_synthetic_corpus(&SynthSpec::desk(2, 1, 1, 100, 60, 40), 7, &out.join("corpus"))?;
    let path_of = |pred: &dyn Fn(&str, ManifestKind) -> bool| -> Vec<PathBuf> {
        manifests
            .iter()
            .filter(|m| pred(&m.dataset_id, m.kind))
            .map(|m| m.path())
            .collect()
    };

    cfg.trainer.steps = pre_steps;
    cfg.corpus.manifests = path_of(&|_, k| k != ManifestKind::PersonSearch);
    let mut pretrained = Vec::new();
    for &seed in &cfg.eval.seeds {
        let mut c = cfg.clone();
        c.trainer.seed = seed;
        let run = pretrain(&c, &out.join(format!("pretrain_s{seed}")), false)?;
        pretrained.push(run.final_checkpoint);
    }
    println!("pretraining done in {:.0}s", t0.elapsed().as_secs_f64());

    cfg.corpus.manifests = path_of(&|id, _| id.ends_with("_train"));
    cfg.eval.gallery = path_of(&|id, _| id.ends_with("_test")).pop();
    cfg.eval.finetune_steps = ft_steps;
    let rows = run_fig5_harness(&cfg, &pretrained, &out)?;

    let mut cells: BTreeMap<(String, &str), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        cells.entry((format!("{:.2}", r.fraction), r.init.as_str())).or_default().push(r.map);
    }
    for ((f, init), maps) in cells {
        println!("fraction {f}  {init:8}  median mAP {:.4}  {:?}", median(maps.clone()), maps);
    }
    println!("total {:.0}s; tables in {}", t0.elapsed().as_secs_f64(), out.display());
    Ok(())
}
