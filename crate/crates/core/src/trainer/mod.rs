//! Hybrid-learning orchestration: batch sampling across domains, routing
//! samples to the supervised and self-supervised flows, the optimization
//! loop, checkpointing and fine-tuning.

mod checkpoint;
mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use hps_autograd::optim::{cosine_lr, Sgd};
use hps_autograd::{Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{latest_checkpoint, Checkpoint, CheckpointError};
pub use config::{
    BatchComposition, ConMode, ConfigError, CorpusConfig, EvalConfig, IamConfig, ObjectivesConfig,
    Schedule, TrainConfig, TrainerConfig, UnifyMode,
};

use crate::corpus::{load_manifest, CorpusError, CorpusManifest, ManifestKind, Record};
use crate::geometry::BBox;
use crate::iam::{loss_adv, AdvLoss, GradientReversal, IamBundle, IamTask};
use crate::model::{BatchStats, PersonSearchModel, ProposalSet, MODEL_PREFIXES};
use crate::objectives::{
    anchor_samples, loss_con_items, loss_det_head_image, loss_rpn_image, total_loss, LossCounts,
    LossParts, LossReport, ObjectiveError, OimTable,
};
use crate::raster::Image;
use crate::seed;
use crate::unification::{
    expand_resize, make_view_pair, random_paste, unify_detection, DomainRegistry,
    IdentityAllocator, SubTask, UnifiedSample, UnifyError, View,
};

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Unify(#[from] UnifyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("batch demands {role:?} samples but no such corpus is configured")]
    EmptyRole { role: Role },
    #[error("step {step}: {source}; samples {samples:?}")]
    NonFinite {
        step: u64,
        #[source]
        source: ObjectiveError,
        samples: Vec<String>,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("fine-tuning: {0}")]
    Finetune(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Detection,
    ReidLabeled,
    ReidUnlabeled,
    Target,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Detection, Role::ReidLabeled, Role::ReidUnlabeled, Role::Target];

    pub fn of(kind: ManifestKind) -> Role {
        match kind {
            ManifestKind::Detection => Role::Detection,
            ManifestKind::ReidLabeled => Role::ReidLabeled,
            ManifestKind::ReidUnlabeled => Role::ReidUnlabeled,
            ManifestKind::PersonSearch => Role::Target,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    fn demand(self, c: &BatchComposition) -> usize {
        match self {
            Role::Detection => c.detection,
            Role::ReidLabeled => c.reid_labeled,
            Role::ReidUnlabeled => c.reid_unlabeled,
            Role::Target => c.target,
        }
    }
}

/// Manifests with their images decoded in memory.
#[derive(Clone)]
pub struct Corpus {
    pub manifests: Vec<CorpusManifest>,
    images: Vec<Vec<Image>>,
    by_role: [Vec<usize>; 4],
}

impl Corpus {
    pub fn load(paths: &[PathBuf]) -> Result<Self, TrainError> {
        let manifests = paths
            .iter()
            .map(|p| load_manifest(p))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_manifests(manifests)
    }

    pub fn from_manifests(manifests: Vec<CorpusManifest>) -> Result<Self, TrainError> {
        let mut images = Vec::with_capacity(manifests.len());
        let mut by_role: [Vec<usize>; 4] = Default::default();
        for (i, m) in manifests.iter().enumerate() {
            images.push((0..m.len()).map(|r| m.load_image(r)).collect::<Result<Vec<_>, _>>()?);
            by_role[Role::of(m.kind).index()].push(i);
        }
        Ok(Self {
            manifests,
            images,
            by_role,
        })
    }

    pub fn domains(&self, role: Role) -> &[usize] {
        &self.by_role[role.index()]
    }

    pub fn image(&self, manifest: usize, record: usize) -> &Image {
        &self.images[manifest][record]
    }

    /// Keep only manifests whose kind passes `keep`.
    pub fn retain(mut self, keep: impl Fn(ManifestKind) -> bool) -> Self {
        let mut manifests = Vec::new();
        let mut images = Vec::new();
        let mut by_role: [Vec<usize>; 4] = Default::default();
        for (m, im) in self.manifests.drain(..).zip(self.images.drain(..)) {
            if keep(m.kind) {
                by_role[Role::of(m.kind).index()].push(manifests.len());
                manifests.push(m);
                images.push(im);
            }
        }
        Self {
            manifests,
            images,
            by_role,
        }
    }

    /// Deterministic subset of `ceil(fraction * n)` records per manifest.
    pub fn subsample(mut self, fraction: f64, seed_value: u64) -> Self {
        for (i, m) in self.manifests.iter_mut().enumerate() {
            let n = m.len();
            let k = ((fraction * n as f64).ceil() as usize).clamp(1.min(n), n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut seed::rng(&[seed_value, seed::hash_str(&m.dataset_id), 0xF4AC]));
            let mut keep = idx[..k].to_vec();
            keep.sort_unstable();
            m.records = keep.iter().map(|&r| m.records[r].clone()).collect();
            let imgs = std::mem::take(&mut self.images[i]);
            self.images[i] = keep.iter().map(|&r| imgs[r].clone()).collect();
        }
        self
    }
}

/// One batch slot: which record to draw and the seed for its randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub role: Role,
    pub manifest: usize,
    pub record: usize,
    pub seed: u64,
}

/// Stateless sampler. Within a role, the `i`-th draw ever made goes to
/// domain `i mod D`; each domain walks a per-epoch shuffled order.
pub fn sample_batch(
    corpus: &Corpus,
    comp: &BatchComposition,
    step: u64,
    seed_value: u64,
) -> Result<Vec<SampleRef>, TrainError> {
    let mut out = Vec::with_capacity(comp.total());
    for role in Role::ALL {
        let c = role.demand(comp);
        if c == 0 {
            continue;
        }
        let domains = corpus.domains(role);
        let domains: Vec<usize> = domains
            .iter()
            .copied()
            .filter(|&d| !corpus.manifests[d].is_empty())
            .collect();
        if domains.is_empty() {
            return Err(TrainError::EmptyRole { role });
        }
        for j in 0..c as u64 {
            let i = step * c as u64 + j;
            let d = domains[(i % domains.len() as u64) as usize];
            let q = i / domains.len() as u64;
            let n = corpus.manifests[d].len() as u64;
            let (epoch, pos) = (q / n, (q % n) as usize);
            let mut order: Vec<usize> = (0..n as usize).collect();
            let key = seed::hash_str(&corpus.manifests[d].dataset_id);
            order.shuffle(&mut seed::rng(&[seed_value, key, epoch, 0x5A3F]));
            out.push(SampleRef {
                role,
                manifest: d,
                record: order[pos],
                seed: seed::derive(&[seed_value, step, role.index() as u64, j]),
            });
        }
    }
    Ok(out)
}

/// Unify a sampled record. Re-ID crops go through expand_resize (random
/// ratio and anchor) or random_paste (random position).
pub fn unify_sample(
    corpus: &Corpus,
    r: &SampleRef,
    cfg: &TrainConfig,
    alloc: &mut IdentityAllocator,
    registry: &DomainRegistry,
) -> Result<UnifiedSample, TrainError> {
    let m = &corpus.manifests[r.manifest];
    let image = corpus.image(r.manifest, r.record);
    let size = cfg.model.image_size;
    let mut rng = seed::rng(&[r.seed, 0x0F1F]);
    Ok(match &m.records[r.record] {
        Record::Detection(d) => unify_detection(d, image, r.record, alloc, registry, size)?,
        Record::Reid(c) => match cfg.corpus.unify {
            UnifyMode::ExpandResize => {
                let [lo, hi] = cfg.corpus.expand_ratio;
                let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let anchor = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
                expand_resize(c, image, r.record, alloc, registry, ratio, anchor, size)?
            }
            UnifyMode::RandomPaste => {
                let sx = size.saturating_sub(image.width()) as f64;
                let sy = size.saturating_sub(image.height()) as f64;
                let pos = (rng.random_range(0.0..=sx), rng.random_range(0.0..=sy));
                random_paste(c, image, r.record, alloc, registry, pos, size)?
            }
        },
    })
}

/// One sample's share of each batch term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleContribution {
    pub role: Option<Role>,
    pub l_rpn: f64,
    pub l_det_head: f64,
    pub l_reid: f64,
    pub l_con: f64,
    pub l_adv_det: f64,
    pub l_adv_reid: f64,
}

pub struct StepOutput {
    pub report: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub contributions: Vec<SampleContribution>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Pretrain,
    Finetune,
}

/// Complete mutable training state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub model: PersonSearchModel,
    pub iam_det: Option<IamBundle>,
    pub iam_reid: Option<IamBundle>,
    pub oim: OimTable,
    pub opt: Sgd,
    pub step: u64,
    pub corpus: Corpus,
    pub alloc: IdentityAllocator,
    pub registry: DomainRegistry,
    pub flow: Flow,
    config_hash: String,
}

const INIT_SALT: u64 = 0x1A17;
const OIM_SALT: u64 = 0x0133;
const IAM_SALT: u64 = 0x01A3;

impl Trainer {
    pub fn new(cfg: TrainConfig, corpus: Corpus, flow: Flow) -> Result<Self, TrainError> {
        cfg.validate()?;
        let seed_value = cfg.trainer.seed;
        let registry = DomainRegistry::from_manifests(&corpus.manifests);
        let mut alloc = IdentityAllocator::new();
        alloc.reserve(&corpus.manifests);
        let mut store = ParamStore::new();
        let model = PersonSearchModel::new(&cfg.model, &mut store, &mut seed::rng(&[seed_value, INIT_SALT]));
        let (iam_det, iam_reid) = if flow == Flow::Pretrain {
            let mut rng = seed::rng(&[seed_value, IAM_SALT]);
            let c = model.channels();
            let nd = registry.detection_domains().len();
            let nr = registry.reid_domains().len();
            let det = (nd > 0).then(|| {
                IamBundle::new(IamTask::Detection, c, cfg.model.det_hidden, nd, cfg.iam.hidden, cfg.iam.alpha, &mut store, &mut rng)
            });
            let reid = (nr > 0).then(|| {
                IamBundle::new(IamTask::Reid, c, cfg.model.embed_dim, nr, cfg.iam.hidden, cfg.iam.alpha, &mut store, &mut rng)
            });
            (det, reid)
        } else {
            (None, None)
        };
        let oim = OimTable::new(
            alloc.len(),
            cfg.model.embed_dim,
            cfg.objectives.gamma,
            cfg.objectives.tau,
            &mut seed::rng(&[seed_value, OIM_SALT]),
        );
        let opt = Sgd::new(cfg.trainer.momentum, cfg.trainer.weight_decay, cfg.trainer.clip_norm);
        let config_hash = cfg.hash();
        Ok(Self {
            cfg,
            store,
            model,
            iam_det,
            iam_reid,
            oim,
            opt,
            step: 0,
            corpus,
            alloc,
            registry,
            flow,
            config_hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.store, self.opt.velocity(), Some(&self.oim), self.step, &self.config_hash)
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<(), TrainError> {
        let names: Vec<String> = self.store.iter().map(|(_, n, _)| n.to_string()).collect();
        let prefixes: Vec<&str> = names.iter().map(String::as_str).collect();
        self.restore_scope(ck, &prefixes)?;
        self.opt.set_velocity(ck.velocity_for(&self.store));
        if let Some(o) = &ck.oim {
            self.oim = o.clone();
        }
        self.step = ck.global_step;
        Ok(())
    }

    fn restore_scope(&mut self, ck: &Checkpoint, prefixes: &[&str]) -> Result<usize, TrainError> {
        Ok(ck.restore_params(&mut self.store, prefixes)?)
    }

    pub fn learning_rate(&self) -> f64 {
        let t = &self.cfg.trainer;
        let lr = match t.schedule {
            Schedule::Constant => t.learning_rate,
            Schedule::Cosine => cosine_lr(t.learning_rate, self.step, t.steps),
        };
        if self.step < t.warmup_steps {
            lr * (self.step + 1) as f64 / t.warmup_steps as f64
        } else {
            lr
        }
    }

    pub fn sample(&mut self, step: u64) -> Result<(Vec<SampleRef>, Vec<UnifiedSample>), TrainError> {
        let refs = sample_batch(&self.corpus, &self.cfg.trainer.batch, step, self.cfg.trainer.seed)?;
        let samples = refs
            .iter()
            .map(|r| unify_sample(&self.corpus, r, &self.cfg, &mut self.alloc, &self.registry))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((refs, samples))
    }

    /// Build the batch graph and the loss report without updating anything.
    pub fn forward(
        &self,
        g: &mut Graph,
        refs: &[SampleRef],
        samples: &[UnifiedSample],
        step: u64,
    ) -> Result<BatchForward, TrainError> {
        forward_batch(self, g, refs, samples, step)
    }

    /// One optimization step on the batch of the current step.
    pub fn train_step(&mut self) -> Result<StepOutput, TrainError> {
        let step = self.step;
        let (refs, samples) = self.sample(step)?;
        let mut g = Graph::new();
        let fwd = forward_batch(self, &mut g, &refs, &samples, step)?;
        let grads = g.backward(fwd.total);
        let lr = self.learning_rate();
        let grad_norm = self.opt.step(&mut self.store, &grads, lr);
        let emb = g.value(fwd.oim_embeddings);
        let rows: Vec<Vec<f64>> = (0..emb.rows()).map(|i| emb.row(i).to_vec()).collect();
        self.oim.update(&rows, &fwd.oim_ids)?;
        self.model.update_running_stats(&mut self.store, &fwd.bn_stats);
        self.step += 1;
        let mut report = fwd.report;
        report.step = self.step;
        Ok(StepOutput {
            report,
            grad_norm,
            contributions: fwd.contributions,
        })
    }
}

/// Everything the batch forward produces.
pub struct BatchForward {
    pub total: Var,
    pub report: LossReport,
    pub contributions: Vec<SampleContribution>,
    /// Normalized embeddings of positive ROIs and their identities, for the
    /// post-step table update.
    pub oim_embeddings: Var,
    pub oim_ids: Vec<usize>,
    /// Embedding batch statistics, folded into the running averages after
    /// the step.
    pub bn_stats: BatchStats,
    pub terms: TermVars,
}

/// Graph handles of the individual terms.
#[derive(Clone, Copy, Debug)]
pub struct TermVars {
    pub l_rpn: Var,
    pub l_det_head: Var,
    pub l_reid: Var,
    pub l_con: Var,
    pub l_adv: Var,
    pub fmap: Var,
}

fn mean_of(g: &mut Graph, items: &[Var]) -> Var {
    if items.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let s = g.add_n(items);
        g.scale(s, 1.0 / items.len() as f64)
    }
}

const ANCHOR_SALT: u64 = 0xA7C4;
const AUG_SALT: u64 = 0xA06;

fn forward_batch(
    t: &Trainer,
    g: &mut Graph,
    refs: &[SampleRef],
    samples: &[UnifiedSample],
    step: u64,
) -> Result<BatchForward, TrainError> {
    let cfg = &t.cfg;
    let store = &t.store;
    let model = &t.model;
    let seed_value = cfg.trainer.seed;
    let mut counts = LossCounts::default();
    let mut contrib: Vec<SampleContribution> = refs
        .iter()
        .map(|r| SampleContribution {
            role: Some(r.role),
            ..Default::default()
        })
        .collect();

    // Two views per sample, laid out [s0v1, s0v2, s1v1, ...].
    let mut views: Vec<View> = Vec::with_capacity(2 * samples.len());
    let mut pairs_corr = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let pair = make_view_pair(s, seed::derive(&[seed_value, step, i as u64, AUG_SALT]), &cfg.corpus.augment);
        views.push(pair.view1);
        views.push(pair.view2);
        pairs_corr.push(pair.correspondence);
    }
    let supervised: Vec<usize> = (0..views.len())
        .filter(|v| cfg.objectives.both_views || v % 2 == 0)
        .collect();
    counts.views = supervised.len();

    let images: Vec<&Image> = views.iter().map(|v| &v.image).collect();
    let x = model.image_batch(g, &images);
    let fmap = model.encode(g, store, x);
    let rpn = model.rpn_forward(g, store, fmap);
    let gts: Vec<Vec<BBox>> = views.iter().map(|v| v.boxes.clone()).collect();
    let anchor_draws = anchor_samples(&cfg.model, &rpn, &gts, &mut seed::rng(&[seed_value, step, ANCHOR_SALT]));
    let props: Vec<ProposalSet> = (0..views.len())
        .map(|v| model.propose(g, &rpn, v, Some(&gts[v])))
        .collect();
    let mut offsets = Vec::with_capacity(views.len() + 1);
    offsets.push(0);
    for p in &props {
        offsets.push(offsets.last().unwrap() + p.boxes.len());
    }
    let boxes: Vec<Vec<BBox>> = props.iter().map(|p| p.boxes.clone()).collect();
    let roi = model.roi_pool(g, fmap, &boxes);
    let det = model.detect(g, store, &roi);
    let (emb, bn_stats) = model.embed_train(g, store, roi.fmap);
    let gt_rows = |v: usize| -> Vec<usize> {
        let n_gt = views[v].boxes.len();
        (offsets[v + 1] - n_gt..offsets[v + 1]).collect()
    };

    // Detection terms, per view then averaged.
    let mut rpn_items = Vec::new();
    let mut head_items = Vec::new();
    for &v in &supervised {
        let (l, p) = loss_rpn_image(g, &rpn, v, &anchor_draws[v], &gts[v]);
        rpn_items.push((v, l));
        counts.rpn_positives += p;
        let rows: Vec<usize> = (offsets[v]..offsets[v + 1]).collect();
        let (l, p) = loss_det_head_image(g, &det, &rows, &props[v], &gts[v]);
        head_items.push((v, l));
        counts.roi_positives += p;
    }
    let nv = supervised.len().max(1) as f64;
    for &(v, l) in &rpn_items {
        contrib[v / 2].l_rpn += g.value(l).item() / nv;
    }
    for &(v, l) in &head_items {
        contrib[v / 2].l_det_head += g.value(l).item() / nv;
    }
    let l_rpn = mean_of(g, &rpn_items.iter().map(|x| x.1).collect::<Vec<_>>());
    let l_det_head = mean_of(g, &head_items.iter().map(|x| x.1).collect::<Vec<_>>());

    // Re-ID term over positive ROIs.
    let mut pos_rows = Vec::new();
    let mut pos_ids = Vec::new();
    let mut pos_view = Vec::new();
    for &v in &supervised {
        let matched = props[v].matched_gt.as_ref().expect("training proposals");
        for (p, m) in matched.iter().enumerate() {
            if let Some(j) = m {
                pos_rows.push(offsets[v] + p);
                pos_ids.push(views[v].identities[*j] as usize);
                pos_view.push(v);
            }
        }
    }
    counts.reid_boxes = pos_rows.len();
    let oim_embeddings = g.gather_rows(emb.normalized, &pos_rows);
    let l_reid = if pos_rows.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let items = t.oim.loss_items(g, oim_embeddings, &pos_ids)?;
        let vals = g.value(items).data().to_vec();
        for (k, &v) in pos_view.iter().enumerate() {
            contrib[v / 2].l_reid += vals[k] / pos_rows.len() as f64;
        }
        g.mean(items)
    };

    // Self-supervised term on detection-source and unlabeled re-ID samples.
    let mut l_con = g.constant(Tensor::scalar(0.0));
    let mut has_con = false;
    if cfg.objectives.enable_con {
        let mut rows1: Vec<Vec<usize>> = Vec::new();
        let mut rows2: Vec<Vec<usize>> = Vec::new();
        let mut owner = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if !s.feeds_consistency() {
                continue;
            }
            let (a, b) = (2 * i, 2 * i + 1);
            if views[a].boxes.is_empty() || views[b].boxes.is_empty() {
                counts.con_skipped += 1;
                continue;
            }
            match cfg.objectives.con_mode {
                ConMode::Mean => {
                    rows1.push(gt_rows(a));
                    rows2.push(gt_rows(b));
                    owner.push(i);
                }
                ConMode::PerBox => {
                    if pairs_corr[i].is_empty() {
                        counts.con_skipped += 1;
                        continue;
                    }
                    let (ga, gb) = (gt_rows(a), gt_rows(b));
                    for &(p, q) in &pairs_corr[i] {
                        rows1.push(vec![ga[p]]);
                        rows2.push(vec![gb[q]]);
                        owner.push(i);
                    }
                }
            }
        }
        if !owner.is_empty() {
            let mut segs = rows1.clone();
            segs.extend(rows2.iter().cloned());
            let h = g.segment_mean(emb.normalized, &segs);
            let z = model.predict(g, store, h);
            let k = owner.len();
            let first: Vec<usize> = (0..k).collect();
            let second: Vec<usize> = (k..2 * k).collect();
            let h1 = g.gather_rows(h, &first);
            let h2 = g.gather_rows(h, &second);
            let z1 = g.gather_rows(z, &first);
            let z2 = g.gather_rows(z, &second);
            let items = loss_con_items(g, h1, z1, h2, z2)?;
            let vals = g.value(items).data().to_vec();
            for (j, &i) in owner.iter().enumerate() {
                contrib[i].l_con += vals[j] / k as f64;
            }
            counts.con_pairs = k;
            l_con = g.mean(items);
            has_con = true;
        }
    }

    // Adversarial terms.
    let alpha = cfg.iam.alpha_at(step);
    let mut adv_terms = Vec::new();
    let mut has_adv = false;
    if cfg.iam.enabled && cfg.iam.detection {
        if let Some(b) = &t.iam_det {
            let dviews: Vec<usize> = supervised
                .iter()
                .copied()
                .filter(|&v| samples[v / 2].sub_task == SubTask::DetectionSource)
                .collect();
            if !dviews.is_empty() {
                let f_img = g.gather_rows(fmap, &dviews);
                let segs: Vec<Vec<usize>> = (0..dviews.len()).map(|k| vec![k]).collect();
                let mut ins_rows = Vec::new();
                let mut ins_image = Vec::new();
                for (k, &v) in dviews.iter().enumerate() {
                    for r in offsets[v]..offsets[v + 1] {
                        ins_rows.push(r);
                        ins_image.push(k);
                    }
                }
                let f_ins = (!ins_rows.is_empty()).then(|| g.gather_rows(det.det_vec, &ins_rows));
                let labels: Vec<usize> = dviews.iter().map(|&v| samples[v / 2].domain_label).collect();
                let bundle = IamBundle { grl: GradientReversal { alpha }, ..*b };
                let out = loss_adv(g, store, &bundle, f_img, &segs, f_ins, &ins_image, &labels, true);
                spread_adv(g, &out, &dviews, &ins_image, &mut contrib, true);
                counts.adv_det_images = out.images;
                counts.adv_det_instances = out.instances;
                adv_terms.push(out.total(g));
                has_adv = true;
            }
        }
    }
    if cfg.iam.enabled && cfg.iam.reid {
        if let Some(b) = &t.iam_reid {
            let rviews: Vec<usize> = supervised
                .iter()
                .copied()
                .filter(|&v| samples[v / 2].sub_task == SubTask::ReidSource && !views[v].boxes.is_empty())
                .collect();
            if !rviews.is_empty() {
                let mut rows = Vec::new();
                let mut segs = Vec::new();
                let mut ins_image = Vec::new();
                for (k, &v) in rviews.iter().enumerate() {
                    let gr = gt_rows(v);
                    segs.push((rows.len()..rows.len() + gr.len()).collect::<Vec<_>>());
                    ins_image.extend(std::iter::repeat_n(k, gr.len()));
                    rows.extend(gr);
                }
                let f_img = g.gather_rows(roi.fmap, &rows);
                let f_ins = Some(g.gather_rows(emb.raw, &rows));
                let labels: Vec<usize> = rviews.iter().map(|&v| samples[v / 2].domain_label).collect();
                let bundle = IamBundle { grl: GradientReversal { alpha }, ..*b };
                let out = loss_adv(g, store, &bundle, f_img, &segs, f_ins, &ins_image, &labels, true);
                spread_adv(g, &out, &rviews, &ins_image, &mut contrib, false);
                counts.adv_reid_images = out.images;
                counts.adv_reid_instances = out.instances;
                adv_terms.push(out.total(g));
                has_adv = true;
            }
        }
    }
    let l_adv = if adv_terms.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        g.add_n(&adv_terms)
    };

    let hp = cfg.objectives.hyper_params();
    let parts = LossParts {
        l_rpn: g.value(l_rpn).item(),
        l_det_head: g.value(l_det_head).item(),
        l_reid: g.value(l_reid).item(),
        l_con: g.value(l_con).item(),
        l_adv: g.value(l_adv).item(),
        has_con,
        has_adv,
        counts,
    };
    let report = total_loss(&parts, &hp).map_err(|source| TrainError::NonFinite {
        step,
        source,
        samples: refs
            .iter()
            .map(|r| format!("{}#{}", t.corpus.manifests[r.manifest].dataset_id, r.record))
            .collect(),
    })?;
    let con_w = g.scale(l_con, hp.eta);
    let adv_w = g.scale(l_adv, hp.lambda);
    let total = g.add_n(&[l_rpn, l_det_head, l_reid, con_w, adv_w]);
    Ok(BatchForward {
        total,
        report,
        contributions: contrib,
        oim_embeddings,
        oim_ids: pos_ids,
        bn_stats,
        terms: TermVars {
            l_rpn,
            l_det_head,
            l_reid,
            l_con,
            l_adv,
            fmap,
        },
    })
}

fn spread_adv(
    g: &Graph,
    out: &AdvLoss,
    views: &[usize],
    ins_image: &[usize],
    contrib: &mut [SampleContribution],
    detection: bool,
) {
    let mut add = |v: usize, x: f64| {
        let c = &mut contrib[views[v] / 2];
        if detection {
            c.l_adv_det += x;
        } else {
            c.l_adv_reid += x;
        }
    };
    if let Some(items) = out.img_items {
        let vals = g.value(items).data();
        for (k, val) in vals.iter().enumerate() {
            add(k, val / out.images as f64);
        }
    }
    for items in [out.ins_items, out.cst_items].into_iter().flatten() {
        let vals = g.value(items).data();
        for (i, val) in vals.iter().enumerate() {
            add(ins_image[i], val / out.instances as f64);
        }
    }
}

/// Result of a pretraining or fine-tuning run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub reports: Vec<LossReport>,
    pub config_hash: String,
    pub resumed_from: Option<u64>,
}

/// Read the structured loss log.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| TrainError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

fn run_loop(mut t: Trainer, out: &Path, resume: bool) -> Result<RunSummary, TrainError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join(LOSS_LOG);
    let mut resumed_from = None;
    let mut reports = Vec::new();
    if resume {
        if let Some(ck_path) = latest_checkpoint(out) {
            let ck = Checkpoint::load(&ck_path, Some(t.config_hash()))?;
            t.restore(&ck)?;
            resumed_from = Some(ck.global_step);
            if log_path.exists() {
                reports = read_loss_log(&log_path)?;
                reports.retain(|r| r.step <= ck.global_step);
            }
            if t.step >= t.cfg.trainer.steps {
                return Ok(RunSummary {
                    out_dir: out.to_path_buf(),
                    final_checkpoint: ck_path,
                    reports,
                    config_hash: t.config_hash().to_string(),
                    resumed_from,
                });
            }
        }
    }
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, t.cfg.to_toml()).map_err(io_err(&cfg_path))?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&serde_json::to_string(r).expect("report serializes"));
        text.push('\n');
    }
    fs::write(&log_path, text).map_err(io_err(&log_path))?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let every = t.cfg.trainer.checkpoint_every;
    let mut last_saved = None;
    while t.step < t.cfg.trainer.steps {
        let outp = t.train_step()?;
        let line = serde_json::to_string(&outp.report).expect("report serializes");
        writeln!(log, "{line}").map_err(io_err(&log_path))?;
        reports.push(outp.report);
        if every > 0 && t.step.is_multiple_of(every) {
            last_saved = Some(t.checkpoint().save(out)?);
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let final_checkpoint = match last_saved {
        Some(p) if p.ends_with(format!("step_{}", t.step)) => p,
        _ => t.checkpoint().save(out)?,
    };
    Ok(RunSummary {
        out_dir: out.to_path_buf(),
        final_checkpoint,
        reports,
        config_hash: t.config_hash().to_string(),
        resumed_from,
    })
}

/// Hybrid pretraining over the configured source corpora. With `resume`,
/// continues from the newest checkpoint in `out` (a finished run is a
/// no-op).
pub fn pretrain(cfg: &TrainConfig, out: &Path, resume: bool) -> Result<RunSummary, TrainError> {
    let corpus = Corpus::load(&cfg.corpus.manifests)?;
    pretrain_with(cfg, corpus, out, resume)
}

pub fn pretrain_with(cfg: &TrainConfig, corpus: Corpus, out: &Path, resume: bool) -> Result<RunSummary, TrainError> {
    let t = Trainer::new(cfg.clone(), corpus, Flow::Pretrain)?;
    run_loop(t, out, resume)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    Checkpoint(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScope {
    Backbone,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub init: InitMode,
    pub scope: InitScope,
    pub fraction: f64,
    /// Start a fresh prototype table for the target identities. Without
    /// it, the checkpoint's table is reused and must match the target's
    /// id space.
    pub reinit_oim: bool,
}

impl FinetuneOptions {
    pub fn new(init: InitMode, scope: InitScope, fraction: f64) -> Self {
        Self {
            init,
            scope,
            fraction,
            reinit_oim: true,
        }
    }
}

/// The effective configuration of a fine-tuning run: target samples only,
/// supervised flow only.
pub fn finetune_config(cfg: &TrainConfig) -> TrainConfig {
    let mut c = cfg.clone();
    c.trainer.batch = BatchComposition {
        target: c.trainer.batch_size,
        ..BatchComposition::default()
    };
    c.objectives.enable_con = false;
    c.iam.enabled = false;
    c
}

/// Supervised fine-tuning on a deterministic `fraction` of the target
/// corpus, starting from random weights or a checkpoint.
pub fn finetune(cfg: &TrainConfig, opts: &FinetuneOptions, out: &Path) -> Result<RunSummary, TrainError> {
    let corpus = Corpus::load(&cfg.corpus.manifests)?;
    finetune_with(cfg, corpus, opts, out)
}

pub fn finetune_with(
    cfg: &TrainConfig,
    corpus: Corpus,
    opts: &FinetuneOptions,
    out: &Path,
) -> Result<RunSummary, TrainError> {
    if !(opts.fraction > 0.0 && opts.fraction <= 1.0) {
        return Err(TrainError::Finetune(format!(
            "fraction {} outside (0, 1]",
            opts.fraction
        )));
    }
    let cfg = finetune_config(cfg);
    cfg.validate()?;
    if corpus.domains(Role::Target).is_empty() {
        return Err(TrainError::EmptyRole { role: Role::Target });
    }
    let corpus = corpus.retain(|k| k == ManifestKind::PersonSearch).subsample(opts.fraction, cfg.trainer.seed);
    let mut t = Trainer::new(cfg, corpus, Flow::Finetune)?;
    if let InitMode::Checkpoint(path) = &opts.init {
        let ck = Checkpoint::load(path, None)?;
        let prefixes: &[&str] = match opts.scope {
            InitScope::Backbone => &["backbone."],
            InitScope::Full => &MODEL_PREFIXES,
        };
        t.restore_scope(&ck, prefixes)?;
        if !opts.reinit_oim {
            match &ck.oim {
                Some(o) if o.len() == t.oim.len() => t.oim = o.clone(),
                Some(o) => {
                    return Err(TrainError::Finetune(format!(
                        "checkpoint id space {} differs from the target's {}; re-initialize the table",
                        o.len(),
                        t.oim.len()
                    )))
                }
                None => return Err(TrainError::Finetune("checkpoint has no prototype table".into())),
            }
        }
    }
    run_loop(t, out, false)
}
