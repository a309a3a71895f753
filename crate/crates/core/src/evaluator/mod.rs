//! Person-search evaluation: gallery indexing, query ranking, mAP and
//! top-k matching rates, detection quality, and the experiment harnesses.

mod harness;
mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use hps_autograd::ParamStore;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use harness::{
    run_fig5_harness, run_iam_ablation, run_unify_ablation, Fig5Row, IamAblationRow, InitLabel,
    UnifyAblationRow,
};
pub use metrics::{
    average_precision, compute_metrics, detection_metrics, hit_at, QueryRanking, RankedHit,
    SearchMetrics,
};

use crate::corpus::{CorpusError, CorpusManifest, ManifestKind};
use crate::geometry::BBox;
use crate::iam::{probe_separability, IamError, ProbeConfig};
use crate::model::{ModelConfig, PersonSearchModel, MODEL_PREFIXES};
use crate::raster::Image;
use crate::seed;
use crate::trainer::{Checkpoint, CheckpointError, Corpus, TrainError, Trainer};
use crate::unification::letterbox;

pub const IOU_HIT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] IamError),
    #[error("query {query} has no positives in the gallery")]
    NoPositives { query: usize },
    #[error("{0} is not a person-search manifest")]
    NotPersonSearch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Model weights frozen for inference.
pub struct FrozenModel {
    pub store: ParamStore,
    pub model: PersonSearchModel,
}

impl FrozenModel {
    /// Rebuild the architecture from `cfg` and load the model parameters of
    /// a checkpoint (auxiliary heads are ignored).
    pub fn from_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<Self, EvalError> {
        let ck = Checkpoint::load(path, None)?;
        let mut store = ParamStore::new();
        let model = PersonSearchModel::new(cfg, &mut store, &mut seed::rng(&[0]));
        ck.restore_params(&mut store, &MODEL_PREFIXES)?;
        Ok(Self { store, model })
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        let mut store = ParamStore::new();
        let model = PersonSearchModel::new(&t.cfg.model, &mut store, &mut seed::rng(&[0]));
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let src = t.store.find(&name).expect("same architecture");
            *store.get_mut(id) = t.store.get(src).clone();
        }
        Self { store, model }
    }

    pub fn with_score_threshold(mut self, threshold: f64) -> Self {
        self.model.cfg.score_threshold = threshold;
        self
    }

    pub fn image_size(&self) -> usize {
        self.model.cfg.image_size
    }
}

/// Detections of one gallery image, in model-input coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub image: usize,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct GalleryIndex {
    pub entries: Vec<GalleryEntry>,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.boxes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ground truth of one gallery image, in model-input coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryTruth {
    pub boxes: Vec<BBox>,
    pub identities: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub image: usize,
    pub bbox: BBox,
    pub identity: u64,
    pub embedding: Vec<f64>,
    /// Gallery images (other than the query's own) containing the identity.
    pub gallery_images: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<Query>,
}

/// Letterboxed test images with ground truth mapped to the same frame.
pub struct TestScenes {
    pub images: Vec<Image>,
    pub truth: Vec<GalleryTruth>,
}

impl TestScenes {
    pub fn from_manifest(m: &CorpusManifest, size: usize) -> Result<Self, EvalError> {
        if m.kind != ManifestKind::PersonSearch {
            return Err(EvalError::NotPersonSearch(m.dataset_id.clone()));
        }
        let mut images = Vec::with_capacity(m.len());
        let mut truth = Vec::with_capacity(m.len());
        for i in 0..m.len() {
            let rec = m.detection(i).expect("person-search records are scenes");
            let (img, [sx, sy, ox, oy]) = letterbox(&m.load_image(i)?, size);
            images.push(img);
            truth.push(GalleryTruth {
                boxes: rec.boxes.iter().map(|b| b.affine(sx, sy, ox, oy)).collect(),
                identities: rec.identities.clone().unwrap_or_default(),
            });
        }
        Ok(Self { images, truth })
    }
}

pub fn build_gallery(frozen: &FrozenModel, images: &[Image]) -> GalleryIndex {
    GalleryIndex {
        entries: images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let d = frozen.model.forward_search(&frozen.store, img);
                GalleryEntry {
                    image: i,
                    boxes: d.boxes,
                    scores: d.scores,
                    embeddings: d.embeddings,
                }
            })
            .collect(),
    }
}

/// One query per annotated person whose identity also appears in another
/// image; the embedding comes from the ground-truth box.
pub fn build_queries(frozen: &FrozenModel, scenes: &TestScenes) -> QuerySet {
    let mut queries = Vec::new();
    for (i, (img, t)) in scenes.images.iter().zip(&scenes.truth).enumerate() {
        let emb = frozen.model.embed_boxes(&frozen.store, img, &t.boxes);
        for (j, (&bbox, &identity)) in t.boxes.iter().zip(&t.identities).enumerate() {
            let gallery_images: Vec<usize> = scenes
                .truth
                .iter()
                .enumerate()
                .filter(|&(k, g)| k != i && g.identities.contains(&identity))
                .map(|(k, _)| k)
                .collect();
            if gallery_images.is_empty() {
                continue;
            }
            queries.push(Query {
                image: i,
                bbox,
                identity,
                embedding: emb[j].clone(),
                gallery_images,
            });
        }
    }
    QuerySet { queries }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank every detection outside the query's own image by cosine
/// similarity. A candidate is correct when it overlaps an unclaimed
/// ground-truth box of the query identity at IoU >= 0.5; further
/// detections on an already claimed box are misses.
pub fn search(query: &Query, query_index: usize, index: &GalleryIndex, truth: &[GalleryTruth]) -> QueryRanking {
    let mut hits: Vec<RankedHit> = Vec::new();
    for e in index.entries.iter().filter(|e| e.image != query.image) {
        for (d, emb) in e.embeddings.iter().enumerate() {
            hits.push(RankedHit {
                gallery_image: e.image,
                detection: d,
                similarity: dot(&query.embedding, emb),
                correct: false,
            });
        }
    }
    hits.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.gallery_image.cmp(&b.gallery_image))
            .then(a.detection.cmp(&b.detection))
    });
    let mut claimed: BTreeMap<(usize, usize), ()> = BTreeMap::new();
    let entry_of: BTreeMap<usize, &GalleryEntry> = index.entries.iter().map(|e| (e.image, e)).collect();
    for h in &mut hits {
        let t = &truth[h.gallery_image];
        let b = entry_of[&h.gallery_image].boxes[h.detection];
        let target = t
            .boxes
            .iter()
            .zip(&t.identities)
            .enumerate()
            .filter(|(_, (_, &id))| id == query.identity)
            .map(|(j, (gt, _))| (j, b.iou(gt)))
            .filter(|&(_, iou)| iou >= IOU_HIT)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = target {
            if claimed.insert((h.gallery_image, j), ()).is_none() {
                h.correct = true;
            }
        }
    }
    let positives = query
        .gallery_images
        .iter()
        .map(|&k| truth[k].identities.iter().filter(|&&id| id == query.identity).count())
        .sum();
    QueryRanking {
        query: query_index,
        hits,
        positives,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub top_k: BTreeMap<usize, f64>,
    pub detection_recall: f64,
    pub detection_ap: f64,
    pub queries: usize,
    pub gallery_images: usize,
    pub detections: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rankings: Option<Vec<QueryRanking>>,
}

impl EvalReport {
    pub fn top(&self, k: usize) -> f64 {
        self.top_k.get(&k).copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let tmp = path.with_extension("tmp");
        let io = |source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        };
        fs::write(&tmp, self.to_json()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }
}

pub fn evaluate_scenes(frozen: &FrozenModel, scenes: &TestScenes, top_k: &[usize], keep_rankings: bool) -> Result<EvalReport, EvalError> {
    let index = build_gallery(frozen, &scenes.images);
    let queries = build_queries(frozen, scenes);
    let rankings: Vec<QueryRanking> = queries
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| search(q, i, &index, &scenes.truth))
        .collect();
    let m = compute_metrics(&rankings, top_k)?;
    let dets: Vec<(Vec<BBox>, Vec<f64>)> = index.entries.iter().map(|e| (e.boxes.clone(), e.scores.clone())).collect();
    let gts: Vec<Vec<BBox>> = scenes.truth.iter().map(|t| t.boxes.clone()).collect();
    let (detection_recall, detection_ap) = detection_metrics(&dets, &gts, IOU_HIT);
    Ok(EvalReport {
        map: m.map,
        top_k: m.top_k,
        detection_recall,
        detection_ap,
        queries: rankings.len(),
        gallery_images: scenes.images.len(),
        detections: index.len(),
        rankings: keep_rankings.then_some(rankings),
    })
}

/// Evaluate on a person-search test manifest.
pub fn evaluate(frozen: &FrozenModel, manifest: &CorpusManifest, top_k: &[usize]) -> Result<EvalReport, EvalError> {
    let scenes = TestScenes::from_manifest(manifest, frozen.image_size())?;
    evaluate_scenes(frozen, &scenes, top_k, false)
}

/// Pooled encoder features of up to `per_domain` letterboxed images from
/// each manifest, labeled by manifest index.
pub fn domain_features(frozen: &FrozenModel, corpus: &Corpus, manifests: &[usize], per_domain: usize, seed_value: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (label, &m) in manifests.iter().enumerate() {
        let n = corpus.manifests[m].len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(&[seed_value, m as u64, 0x9B0B]));
        for &r in order.iter().take(per_domain) {
            let (img, _) = letterbox(corpus.image(m, r), frozen.image_size());
            feats.push(frozen.model.pooled_features(&frozen.store, &img));
            labels.push(label);
        }
    }
    (feats, labels)
}

/// Domain-probe accuracy on frozen encoder features, averaged over the
/// detection-source and re-ID-source groups that have at least two
/// domains each.
pub fn domain_probe(frozen: &FrozenModel, corpus: &Corpus, per_domain: usize, cfg: &ProbeConfig, seed_value: u64) -> Result<f64, EvalError> {
    let mut groups: [Vec<usize>; 2] = Default::default();
    for (i, m) in corpus.manifests.iter().enumerate() {
        match m.kind {
            ManifestKind::Detection => groups[0].push(i),
            ManifestKind::ReidLabeled | ManifestKind::ReidUnlabeled => groups[1].push(i),
            ManifestKind::PersonSearch => {}
        }
    }
    let mut accs = Vec::new();
    for g in groups.iter().filter(|g| g.len() >= 2) {
        let (f, l) = domain_features(frozen, corpus, g, per_domain, seed_value);
        accs.push(probe_separability(&f, &l, cfg, seed_value)?);
    }
    if accs.is_empty() {
        return Err(IamError::SingleDomain(1).into());
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}
