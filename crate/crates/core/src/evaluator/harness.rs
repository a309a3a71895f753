//! Experiment grids: fine-tuning fraction study, IAM on/off ablation over
//! growing domain sets, and the re-ID unification ablation. Each writes a
//! CSV table next to its runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{domain_probe, evaluate_scenes, EvalError, EvalReport, FrozenModel, TestScenes};
use crate::corpus::{load_manifest, ManifestKind};
use crate::trainer::{
    finetune_with, pretrain_with, BatchComposition, Corpus, FinetuneOptions, InitMode, InitScope,
    Role, TrainConfig, TrainError, UnifyMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitLabel {
    Random,
    Backbone,
    Full,
}

impl InitLabel {
    pub const ALL: [InitLabel; 3] = [InitLabel::Random, InitLabel::Backbone, InitLabel::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            InitLabel::Random => "random",
            InitLabel::Backbone => "backbone",
            InitLabel::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig5Row {
    pub fraction: f64,
    pub init: InitLabel,
    pub seed: u64,
    pub map: f64,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IamAblationRow {
    pub domains: usize,
    pub iam: bool,
    pub seed: u64,
    pub map: f64,
    pub probe_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnifyAblationRow {
    pub unify: UnifyMode,
    pub seed: u64,
    pub map: f64,
    pub top1: f64,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, text).map_err(io(path))
}

fn test_scenes(cfg: &TrainConfig) -> Result<TestScenes, EvalError> {
    let gallery = cfg
        .eval
        .gallery
        .as_ref()
        .ok_or_else(|| TrainError::Finetune("eval.gallery is not set".into()))?;
    TestScenes::from_manifest(&load_manifest(gallery)?, cfg.model.image_size)
}

/// Fine-tune (full scope) and evaluate; the fine-tuning length comes from
/// `eval.finetune_steps`.
fn finetune_and_eval(
    cfg: &TrainConfig,
    target: &Corpus,
    scenes: &TestScenes,
    opts: &FinetuneOptions,
    seed: u64,
    dir: &Path,
) -> Result<EvalReport, EvalError> {
    let mut c = cfg.clone();
    c.trainer.seed = seed;
    c.trainer.steps = cfg.eval.finetune_steps;
    let run = finetune_with(&c, target.clone(), opts, dir)?;
    let frozen = FrozenModel::from_checkpoint(&run.final_checkpoint, &c.model)?;
    let frozen = match cfg.eval.score_threshold {
        Some(t) => frozen.with_score_threshold(t),
        None => frozen,
    };
    evaluate_scenes(&frozen, scenes, &cfg.eval.top_k, false)
}

/// Fine-tune at every fraction and init mode for every seed. `pretrained`
/// holds one checkpoint per seed, or a single one shared by all seeds.
pub fn run_fig5_harness(cfg: &TrainConfig, pretrained: &[PathBuf], out: &Path) -> Result<Vec<Fig5Row>, EvalError> {
    let target = Corpus::load(&cfg.corpus.manifests)?.retain(|k| k == ManifestKind::PersonSearch);
    let scenes = test_scenes(cfg)?;
    let mut rows = Vec::new();
    for (si, &seed) in cfg.eval.seeds.iter().enumerate() {
        let ck = pretrained.get(si).or(pretrained.first()).cloned();
        for &fraction in &cfg.eval.fig5_fractions {
            for init in InitLabel::ALL {
                let (mode, scope) = match init {
                    InitLabel::Random => (InitMode::Random, InitScope::Full),
                    InitLabel::Backbone => (InitMode::Checkpoint(need(&ck)?), InitScope::Backbone),
                    InitLabel::Full => (InitMode::Checkpoint(need(&ck)?), InitScope::Full),
                };
                let opts = FinetuneOptions::new(mode, scope, fraction);
                let dir = out.join("fig5").join(format!("{}_f{fraction}_s{seed}", init.as_str()));
                let r = finetune_and_eval(cfg, &target, &scenes, &opts, seed, &dir)?;
                rows.push(Fig5Row {
                    fraction,
                    init,
                    seed,
                    map: r.map,
                    top1: r.top(1),
                });
            }
        }
    }
    let mut table = String::from("fraction,init,seed,map,top1\n");
    let mut plot = String::from("series,x,y,seed\n");
    for r in &rows {
        writeln!(table, "{},{},{},{:.6},{:.6}", r.fraction, r.init.as_str(), r.seed, r.map, r.top1).unwrap();
        writeln!(plot, "{},{},{:.6},{}", r.init.as_str(), r.fraction, r.map, r.seed).unwrap();
    }
    write_file(&out.join("fig5.csv"), &table)?;
    write_file(&out.join("fig5_plot.csv"), &plot)?;
    Ok(rows)
}

fn need(ck: &Option<PathBuf>) -> Result<PathBuf, EvalError> {
    ck.clone()
        .ok_or_else(|| TrainError::Finetune("no pre-trained checkpoint given".into()).into())
}

/// Move the batch share of roles missing from `corpus` onto the present
/// roles, in role order.
pub fn fit_composition(batch: &BatchComposition, corpus: &Corpus) -> BatchComposition {
    let present: Vec<Role> = Role::ALL
        .into_iter()
        .filter(|&r| r != Role::Target && !corpus.domains(r).is_empty())
        .collect();
    let mut counts = [batch.detection, batch.reid_labeled, batch.reid_unlabeled, 0];
    let mut spare: usize = batch.target;
    for (i, r) in Role::ALL.iter().enumerate().take(3) {
        if !present.contains(r) {
            spare += counts[i];
            counts[i] = 0;
        }
    }
    let mut k = 0;
    while spare > 0 && !present.is_empty() {
        let i = Role::ALL.iter().position(|r| *r == present[k % present.len()]).unwrap();
        counts[i] += 1;
        spare -= 1;
        k += 1;
    }
    BatchComposition {
        detection: counts[0],
        reid_labeled: counts[1],
        reid_unlabeled: counts[2],
        target: 0,
    }
}

/// Pretrain on `sources`, then fine-tune on the full target corpus from
/// the complete pretrained model and evaluate.
fn pretrain_then_eval(
    cfg: &TrainConfig,
    sources: &Corpus,
    target: &Corpus,
    scenes: &TestScenes,
    seed: u64,
    dir: &Path,
) -> Result<(EvalReport, PathBuf), EvalError> {
    let mut c = cfg.clone();
    c.trainer.seed = seed;
    c.trainer.batch = fit_composition(&cfg.trainer.batch, sources);
    let run = pretrain_with(&c, sources.clone(), &dir.join("pretrain"), false)?;
    let opts = FinetuneOptions::new(InitMode::Checkpoint(run.final_checkpoint.clone()), InitScope::Full, 1.0);
    let report = finetune_and_eval(cfg, target, scenes, &opts, seed, &dir.join("finetune"))?;
    Ok((report, run.final_checkpoint))
}

/// Pretrain with and without the alignment modules on each source set and
/// report downstream mAP and domain-probe accuracy of the pretrained
/// encoder. The target corpus comes from `cfg.corpus.manifests`.
pub fn run_iam_ablation(cfg: &TrainConfig, source_sets: &[Vec<PathBuf>], probe_per_domain: usize, out: &Path) -> Result<Vec<IamAblationRow>, EvalError> {
    let target = Corpus::load(&cfg.corpus.manifests)?.retain(|k| k == ManifestKind::PersonSearch);
    let scenes = test_scenes(cfg)?;
    let mut rows = Vec::new();
    for set in source_sets {
        let sources = Corpus::load(set)?.retain(|k| k != ManifestKind::PersonSearch);
        for iam in [false, true] {
            for &seed in &cfg.eval.seeds {
                let mut c = cfg.clone();
                c.iam.enabled = iam;
                let dir = out
                    .join("iam")
                    .join(format!("d{}_{}_s{seed}", set.len(), if iam { "on" } else { "off" }));
                let (report, ck) = pretrain_then_eval(&c, &sources, &target, &scenes, seed, &dir)?;
                let frozen = FrozenModel::from_checkpoint(&ck, &c.model)?;
                let probe = domain_probe(&frozen, &sources, probe_per_domain, &c.iam.probe, seed)?;
                rows.push(IamAblationRow {
                    domains: set.len(),
                    iam,
                    seed,
                    map: report.map,
                    probe_accuracy: probe,
                });
            }
        }
    }
    let mut table = String::from("domains,iam,seed,map,probe_accuracy\n");
    for r in &rows {
        writeln!(table, "{},{},{},{:.6},{:.6}", r.domains, r.iam, r.seed, r.map, r.probe_accuracy).unwrap();
    }
    write_file(&out.join("iam_ablation.csv"), &table)?;
    Ok(rows)
}

/// Pretrain with each re-ID unification operation, fine-tune and
/// evaluate. Sources and target are both taken from
/// `cfg.corpus.manifests`, split by manifest kind.
pub fn run_unify_ablation(cfg: &TrainConfig, out: &Path) -> Result<Vec<UnifyAblationRow>, EvalError> {
    let all = Corpus::load(&cfg.corpus.manifests)?;
    let sources = all.clone().retain(|k| k != ManifestKind::PersonSearch);
    let target = all.retain(|k| k == ManifestKind::PersonSearch);
    let scenes = test_scenes(cfg)?;
    let mut rows = Vec::new();
    for unify in [UnifyMode::ExpandResize, UnifyMode::RandomPaste] {
        for &seed in &cfg.eval.seeds {
            let mut c = cfg.clone();
            c.corpus.unify = unify;
            let name = match unify {
                UnifyMode::ExpandResize => "expand_resize",
                UnifyMode::RandomPaste => "random_paste",
            };
            let dir = out.join("unify").join(format!("{name}_s{seed}"));
            let (r, _) = pretrain_then_eval(&c, &sources, &target, &scenes, seed, &dir)?;
            rows.push(UnifyAblationRow {
                unify,
                seed,
                map: r.map,
                top1: r.top(1),
            });
        }
    }
    let mut table = String::from("unify,seed,map,top1\n");
    for r in &rows {
        let name = serde_json::to_value(r.unify).unwrap();
        writeln!(table, "{},{},{:.6},{:.6}", name.as_str().unwrap(), r.seed, r.map, r.top1).unwrap();
    }
    write_file(&out.join("unify_ablation.csv"), &table)?;
    Ok(rows)
}
