//! The person-search network: encoder, region proposal stage, detection
//! head, re-ID embedding head, and the prediction MLP of the
//! self-supervised branch.

use hps_autograd::nn::{Conv2d, GroupNorm, Linear};
use hps_autograd::{Graph, ParamId, ParamStore, RoiBox, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou_matrix, nms, BBox, BoxCoder};
use crate::raster::Image;

pub const RPN_CODER: BoxCoder = BoxCoder::new([1.0, 1.0, 1.0, 1.0]);
pub const ROI_CODER: BoxCoder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square training/inference image side.
    pub image_size: usize,
    /// Output channels of the four encoder stages.
    pub channels: [usize; 4],
    /// Strides of the four encoder stages.
    pub strides: [usize; 4],
    pub embed_dim: usize,
    pub det_hidden: usize,
    pub roi_size: usize,
    pub roi_sampling: usize,
    pub anchor_sizes: Vec<f64>,
    /// Anchor width/height ratios.
    pub anchor_ratios: Vec<f64>,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub rpn_batch_per_image: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_pre_nms_top: usize,
    pub rpn_nms: f64,
    pub rpn_post_nms_train: usize,
    pub rpn_post_nms_test: usize,
    /// IoU at which a proposal is matched to a ground-truth box.
    pub roi_fg_iou: f64,
    pub score_threshold: f64,
    pub det_nms: f64,
    pub max_detections: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: [16, 32, 64, 64],
            strides: [2, 2, 2, 1],
            embed_dim: 128,
            det_hidden: 64,
            roi_size: 7,
            roi_sampling: 2,
            anchor_sizes: vec![24.0],
            anchor_ratios: vec![0.4, 1.0],
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            rpn_batch_per_image: 32,
            rpn_positive_fraction: 0.5,
            rpn_pre_nms_top: 64,
            rpn_nms: 0.7,
            rpn_post_nms_train: 16,
            rpn_post_nms_test: 24,
            roi_fg_iou: 0.5,
            score_threshold: 0.5,
            det_nms: 0.4,
            max_detections: 12,
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len() * self.anchor_ratios.len()
    }
}

/// Image-level feature extractor. The encoder sits behind this trait so a
/// larger backbone can replace the miniature one.
pub trait Backbone: Send + Sync {
    /// `[N, 3, H, W] -> [N, C, ceil(H / stride), ceil(W / stride)]`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var;
    fn stride(&self) -> usize;
    fn channels(&self) -> usize;
}

/// Four 3x3 conv + group norm + ReLU stages.
pub struct MiniEncoder {
    stages: Vec<(Conv2d, GroupNorm)>,
    stride: usize,
    channels: usize,
}

impl MiniEncoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, (&c, &s)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            let groups = [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1);
            stages.push((
                Conv2d::new(store, &format!("backbone.conv{i}"), cin, c, 3, s, 1, rng),
                GroupNorm::new(store, &format!("backbone.norm{i}"), c, groups),
            ));
            cin = c;
        }
        Self {
            stages,
            stride: cfg.stride(),
            channels: cin,
        }
    }
}

impl Backbone for MiniEncoder {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        self.stages.iter().fold(x, |h, (c, n)| {
            let y = c.forward(g, store, h);
            let y = n.forward(g, store, y);
            g.relu(y)
        })
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn channels(&self) -> usize {
        self.channels
    }
}

fn scale_param(store: &mut ParamStore, id: ParamId, k: f64) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= k);
}

struct RpnHead {
    conv: Conv2d,
    cls: Conv2d,
    reg: Conv2d,
}

struct DetHead {
    fc: Linear,
    cls: Linear,
    reg: Linear,
}

struct ReidHead {
    fc: Linear,
    bn_weight: ParamId,
    bn_bias: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-dimension batch statistics of the embedding projection.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct Predictor {
    fc1: Linear,
    fc2: Linear,
}

/// Region proposals of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    pub objectness: Vec<f64>,
    /// Per proposal, the matched ground-truth index (`None` = background).
    /// Present in training mode only.
    pub matched_gt: Option<Vec<Option<usize>>>,
}

/// Raw RPN outputs for a batch, laid out as `[N, A, h, w]` logits and
/// `[N, 4A, h, w]` deltas.
pub struct RpnOutput {
    pub logits: Var,
    pub deltas: Var,
    pub anchors: Vec<BBox>,
    pub grid: (usize, usize),
}

impl RpnOutput {
    /// Flat logit index of anchor `k` in image `n`.
    pub fn logit_index(&self, n: usize, k: usize) -> usize {
        let a_count = self.anchors.len() / (self.grid.0 * self.grid.1);
        let hw = self.grid.0 * self.grid.1;
        let (cell, a) = (k / a_count, k % a_count);
        n * a_count * hw + a * hw + cell
    }

    /// Flat indices of the four deltas of anchor `k` in image `n`.
    pub fn delta_indices(&self, n: usize, k: usize) -> [usize; 4] {
        let a_count = self.anchors.len() / (self.grid.0 * self.grid.1);
        let hw = self.grid.0 * self.grid.1;
        let (cell, a) = (k / a_count, k % a_count);
        let base = n * 4 * a_count * hw;
        [0, 1, 2, 3].map(|j| base + (a * 4 + j) * hw + cell)
    }
}

/// Pooled ROI features with the boxes they came from.
pub struct RoiFeatures {
    /// `[R, C, p, p]`.
    pub fmap: Var,
    pub rois: Vec<RoiBox>,
}

pub struct DetHeadOutput {
    /// `[R, 2]`, column 1 = person.
    pub class_logits: Var,
    /// `[R, 4]`, class-agnostic.
    pub box_deltas: Var,
    /// `[R, det_hidden]`.
    pub det_vec: Var,
}

pub struct Embedding {
    /// `[R, d]`.
    pub raw: Var,
    /// `[R, d]`, unit rows.
    pub normalized: Var,
}

/// Inference output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Detections {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    /// Unit-norm embeddings, one row per box.
    pub embeddings: Vec<Vec<f64>>,
}

pub struct PersonSearchModel {
    pub cfg: ModelConfig,
    backbone: Box<dyn Backbone>,
    rpn: RpnHead,
    det: DetHead,
    reid: ReidHead,
    predictor: Predictor,
}

pub const MODEL_PREFIXES: [&str; 5] = ["backbone.", "rpn.", "det_head.", "reid_head.", "predictor."];

impl PersonSearchModel {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let backbone = Box::new(MiniEncoder::new(cfg, store, rng));
        Self::with_backbone(cfg, backbone, store, rng)
    }

    pub fn with_backbone(
        cfg: &ModelConfig,
        backbone: Box<dyn Backbone>,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let c = backbone.channels();
        let a = cfg.anchors_per_cell();
        let rpn = RpnHead {
            conv: Conv2d::new(store, "rpn.conv", c, c, 3, 1, 1, rng),
            cls: Conv2d::new(store, "rpn.cls", c, a, 1, 1, 0, rng),
            reg: Conv2d::new(store, "rpn.reg", c, 4 * a, 1, 1, 0, rng),
        };
        scale_param(store, rpn.cls.weight, 0.1);
        scale_param(store, rpn.reg.weight, 0.1);
        let flat = c * cfg.roi_size * cfg.roi_size;
        let det = DetHead {
            fc: Linear::new(store, "det_head.fc", flat, cfg.det_hidden, rng),
            cls: Linear::with_std(store, "det_head.cls", cfg.det_hidden, 2, 0.01, rng),
            reg: Linear::with_std(store, "det_head.reg", cfg.det_hidden, 4, 0.001, rng),
        };
        let reid = ReidHead {
            fc: Linear::with_std(
                store,
                "reid_head.fc",
                c * cfg.roi_size,
                cfg.embed_dim,
                (1.0 / (c * cfg.roi_size) as f64).sqrt(),
                rng,
            ),
            bn_weight: store.add("reid_head.bn.weight", Tensor::full(&[1, cfg.embed_dim], 1.0)),
            bn_bias: store.add("reid_head.bn.bias", Tensor::zeros(&[1, cfg.embed_dim])),
            running_mean: store.add("reid_head.bn.running_mean", Tensor::zeros(&[1, cfg.embed_dim])),
            running_var: store.add("reid_head.bn.running_var", Tensor::full(&[1, cfg.embed_dim], 1.0)),
        };
        store.set_trainable(reid.running_mean, false);
        store.set_trainable(reid.running_var, false);
        let hidden = (cfg.embed_dim / 4).max(1);
        let predictor = Predictor {
            fc1: Linear::new(store, "predictor.fc1", cfg.embed_dim, hidden, rng),
            fc2: Linear::new(store, "predictor.fc2", hidden, cfg.embed_dim, rng),
        };
        Self {
            cfg: cfg.clone(),
            backbone,
            rpn,
            det,
            reid,
            predictor,
        }
    }

    pub fn stride(&self) -> usize {
        self.backbone.stride()
    }

    pub fn channels(&self) -> usize {
        self.backbone.channels()
    }

    /// Stack images into an `[N, 3, H, W]` constant.
    pub fn image_batch(&self, g: &mut Graph, images: &[&Image]) -> Var {
        let (w, h) = (images[0].width(), images[0].height());
        let mut data = Vec::with_capacity(images.len() * 3 * w * h);
        for img in images {
            assert_eq!((img.width(), img.height()), (w, h), "batch images differ in size");
            data.extend(img.to_chw().into_iter().map(|v| (v - 0.5) * 4.0));
        }
        g.constant(Tensor::from_vec(&[images.len(), 3, h, w], data))
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Var {
        self.backbone.forward(g, store, images)
    }

    /// Anchors of an `h x w` feature grid, cell-major then anchor-minor.
    pub fn anchors(&self, grid: (usize, usize)) -> Vec<BBox> {
        let s = self.stride() as f64;
        let mut out = Vec::with_capacity(grid.0 * grid.1 * self.cfg.anchors_per_cell());
        for y in 0..grid.0 {
            for x in 0..grid.1 {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                for &size in &self.cfg.anchor_sizes {
                    for &r in &self.cfg.anchor_ratios {
                        let w = size * r.sqrt();
                        let h = size / r.sqrt();
                        out.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0));
                    }
                }
            }
        }
        out
    }

    pub fn rpn_forward(&self, g: &mut Graph, store: &ParamStore, fmap: Var) -> RpnOutput {
        let t = self.rpn.conv.forward(g, store, fmap);
        let t = g.relu(t);
        let logits = self.rpn.cls.forward(g, store, t);
        let deltas = self.rpn.reg.forward(g, store, t);
        let shape = g.shape(fmap);
        let grid = (shape[2], shape[3]);
        RpnOutput {
            logits,
            deltas,
            anchors: self.anchors(grid),
            grid,
        }
    }

    /// Score, decode, NMS and keep the top proposals of image `n`. With
    /// `gt` given (training), ground-truth boxes are appended and every
    /// proposal is matched to its best ground truth at `roi_fg_iou`.
    pub fn propose(
        &self,
        g: &Graph,
        rpn: &RpnOutput,
        n: usize,
        gt: Option<&[BBox]>,
    ) -> ProposalSet {
        let logits = g.value(rpn.logits).data();
        let deltas = g.value(rpn.deltas).data();
        let size = self.cfg.image_size as f64;
        let mut cand: Vec<(BBox, f64)> = Vec::with_capacity(rpn.anchors.len());
        for (k, a) in rpn.anchors.iter().enumerate() {
            let d = rpn.delta_indices(n, k).map(|i| deltas[i]);
            let b = RPN_CODER.decode(a, &d).clip(size, size);
            if b.width() >= 1.0 && b.height() >= 1.0 {
                cand.push((b, sigmoid(logits[rpn.logit_index(n, k)])));
            }
        }
        cand.sort_by(|a, b| b.1.total_cmp(&a.1));
        cand.truncate(self.cfg.rpn_pre_nms_top);
        let boxes: Vec<BBox> = cand.iter().map(|c| c.0).collect();
        let scores: Vec<f64> = cand.iter().map(|c| c.1).collect();
        let post = if gt.is_some() {
            self.cfg.rpn_post_nms_train
        } else {
            self.cfg.rpn_post_nms_test
        };
        let keep: Vec<usize> = nms(&boxes, &scores, self.cfg.rpn_nms).into_iter().take(post).collect();
        let mut out = ProposalSet {
            boxes: keep.iter().map(|&i| boxes[i]).collect(),
            objectness: keep.iter().map(|&i| scores[i]).collect(),
            matched_gt: None,
        };
        if let Some(gt) = gt {
            out.boxes.extend_from_slice(gt);
            out.objectness.extend(std::iter::repeat_n(1.0, gt.len()));
            out.matched_gt = Some(match_boxes(&out.boxes, gt, self.cfg.roi_fg_iou));
        }
        out
    }

    pub fn roi_pool(&self, g: &mut Graph, fmap: Var, boxes: &[Vec<BBox>]) -> RoiFeatures {
        let rois: Vec<RoiBox> = boxes
            .iter()
            .enumerate()
            .flat_map(|(n, bs)| {
                bs.iter().map(move |b| RoiBox {
                    batch: n,
                    x0: b.x0,
                    y0: b.y0,
                    x1: b.x1,
                    y1: b.y1,
                })
            })
            .collect();
        let fmap = g.roi_align(
            fmap,
            &rois,
            self.cfg.roi_size,
            1.0 / self.stride() as f64,
            self.cfg.roi_sampling,
        );
        RoiFeatures { fmap, rois }
    }

    pub fn detect(&self, g: &mut Graph, store: &ParamStore, roi: &RoiFeatures) -> DetHeadOutput {
        let r = roi.rois.len();
        let flat_len = self.channels() * self.cfg.roi_size * self.cfg.roi_size;
        let flat = g.reshape(roi.fmap, &[r, flat_len]);
        let h = self.det.fc.forward(g, store, flat);
        let det_vec = g.relu(h);
        DetHeadOutput {
            class_logits: self.det.cls.forward(g, store, det_vec),
            box_deltas: self.det.reg.forward(g, store, det_vec),
            det_vec,
        }
    }

    fn reid_projection(&self, g: &mut Graph, store: &ParamStore, roi_fmap: Var) -> Var {
        let shape = g.shape(roi_fmap).to_vec();
        let (r, c, p) = (shape[0], shape[1], shape[2]);
        let rows = g.sum_last(roi_fmap);
        let rows = g.scale(rows, 1.0 / shape[3] as f64);
        let rows = g.reshape(rows, &[r, c * p]);
        self.reid.fc.forward(g, store, rows)
    }

    fn reid_affine(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Embedding {
        let r = g.shape(x)[0];
        let w = g.param(store, self.reid.bn_weight);
        let b = g.param(store, self.reid.bn_bias);
        let w = g.broadcast_rows(w, r);
        let b = g.broadcast_rows(b, r);
        let t = g.mul(x, w);
        let raw = g.add(t, b);
        let normalized = g.l2_normalize_rows(raw);
        Embedding { raw, normalized }
    }

    /// Average each ROI map over its width, project to `d`, batch-normalize
    /// with the running statistics and L2-normalize.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, roi_fmap: Var) -> Embedding {
        let x = self.reid_projection(g, store, roi_fmap);
        let r = g.shape(x)[0];
        let mean = g.constant(store.get(self.reid.running_mean).clone());
        let inv = store.get(self.reid.running_var).map(|v| 1.0 / (v + BN_EPS).sqrt());
        let inv = g.constant(inv);
        let mean = g.broadcast_rows(mean, r);
        let inv = g.broadcast_rows(inv, r);
        let t = g.sub(x, mean);
        let t = g.mul(t, inv);
        self.reid_affine(g, store, t)
    }

    /// Training-mode embedding: normalizes with the statistics of this
    /// batch of ROIs, which are returned for the running averages.
    pub fn embed_train(&self, g: &mut Graph, store: &ParamStore, roi_fmap: Var) -> (Embedding, BatchStats) {
        let x = self.reid_projection(g, store, roi_fmap);
        let v = g.value(x);
        let (n, d) = (v.rows(), v.row_len());
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (m, x) in mean.iter_mut().zip(v.row(r)) {
                *m += x / n as f64;
            }
        }
        for r in 0..n {
            for ((s, x), m) in var.iter_mut().zip(v.row(r)).zip(&mean) {
                *s += (x - m).powi(2) / n as f64;
            }
        }
        let t = g.batch_norm_cols(x, BN_EPS);
        (self.reid_affine(g, store, t), BatchStats { mean, var })
    }

    /// Fold batch statistics into the running averages.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BatchStats) {
        for (id, batch) in [(self.reid.running_mean, &stats.mean), (self.reid.running_var, &stats.var)] {
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    pub fn predict(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Var {
        let t = self.predictor.fc1.forward(g, store, h);
        let t = g.layer_norm_rows(t, 1e-5);
        let t = g.relu(t);
        self.predictor.fc2.forward(g, store, t)
    }

    /// Embeddings of given boxes (e.g. query boxes), one row per box.
    pub fn embed_boxes(&self, store: &ParamStore, image: &Image, boxes: &[BBox]) -> Vec<Vec<f64>> {
        if boxes.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let x = self.image_batch(&mut g, &[image]);
        let fmap = self.encode(&mut g, store, x);
        let roi = self.roi_pool(&mut g, fmap, &[boxes.to_vec()]);
        let e = self.embed(&mut g, store, roi.fmap);
        rows_of(g.value(e.normalized))
    }

    /// Detect people in an image already at the model's input size and
    /// embed every kept box. Boxes scoring at or below the threshold are
    /// discarded.
    pub fn forward_search(&self, store: &ParamStore, image: &Image) -> Detections {
        let mut g = Graph::new();
        let x = self.image_batch(&mut g, &[image]);
        let fmap = self.encode(&mut g, store, x);
        let rpn = self.rpn_forward(&mut g, store, fmap);
        let props = self.propose(&g, &rpn, 0, None);
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        if !props.boxes.is_empty() {
            let roi = self.roi_pool(&mut g, fmap, std::slice::from_ref(&props.boxes));
            let out = self.detect(&mut g, store, &roi);
            let logits = g.value(out.class_logits).data().to_vec();
            let deltas = g.value(out.box_deltas).data().to_vec();
            let size = self.cfg.image_size as f64;
            for (i, p) in props.boxes.iter().enumerate() {
                let score = softmax2(logits[2 * i], logits[2 * i + 1]);
                if score > self.cfg.score_threshold {
                    let b = ROI_CODER.decode(p, &deltas[4 * i..4 * i + 4]).clip(size, size);
                    if b.width() >= 1.0 && b.height() >= 1.0 {
                        boxes.push(b);
                        scores.push(score);
                    }
                }
            }
        }
        let keep: Vec<usize> = nms(&boxes, &scores, self.cfg.det_nms)
            .into_iter()
            .take(self.cfg.max_detections)
            .collect();
        let boxes: Vec<BBox> = keep.iter().map(|&i| boxes[i]).collect();
        let scores: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
        let mut out = Detections {
            boxes: Vec::new(),
            scores: Vec::new(),
            embeddings: Vec::new(),
        };
        if boxes.is_empty() {
            return out;
        }
        let roi = self.roi_pool(&mut g, fmap, std::slice::from_ref(&boxes));
        let e = self.embed(&mut g, store, roi.fmap);
        let raw = rows_of(g.value(e.raw));
        // a zero embedding has no direction and cannot be ranked
        for (i, row) in rows_of(g.value(e.normalized)).into_iter().enumerate() {
            if raw[i].iter().map(|v| v * v).sum::<f64>() > 1e-20 {
                out.boxes.push(boxes[i]);
                out.scores.push(scores[i]);
                out.embeddings.push(row);
            }
        }
        out
    }

    /// Pooled encoder features per image (for domain probes).
    pub fn pooled_features(&self, store: &ParamStore, image: &Image) -> Vec<f64> {
        let mut g = Graph::new();
        let x = self.image_batch(&mut g, &[image]);
        let fmap = self.encode(&mut g, store, x);
        let p = g.global_avg_pool(fmap);
        g.value(p).data().to_vec()
    }
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability of class 1 under a 2-way softmax.
pub fn softmax2(l0: f64, l1: f64) -> f64 {
    sigmoid(l1 - l0)
}

/// Match each box to its highest-IoU ground truth when that IoU reaches
/// `threshold`; ties go to the lower ground-truth index.
pub fn match_boxes(boxes: &[BBox], gt: &[BBox], threshold: f64) -> Vec<Option<usize>> {
    let m = iou_matrix(boxes, gt);
    m.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &v) in row.iter().enumerate() {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.filter(|&(_, v)| v >= threshold).map(|(j, _)| j)
        })
        .collect()
}

/// Anchor labels for RPN training: `Some(gt)` positive, `None` negative,
/// anchors between the thresholds are omitted. Returns sampled
/// `(anchor index, Option<gt index>)`.
pub fn sample_anchors(
    cfg: &ModelConfig,
    anchors: &[BBox],
    gt: &[BBox],
    rng: &mut impl Rng,
) -> Vec<(usize, Option<usize>)> {
    let mut pos: Vec<(usize, usize)> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    if gt.is_empty() {
        neg.extend(0..anchors.len());
    } else {
        let m = iou_matrix(anchors, gt);
        let mut best_for_gt = vec![0.0f64; gt.len()];
        for row in &m {
            for (j, &v) in row.iter().enumerate() {
                best_for_gt[j] = best_for_gt[j].max(v);
            }
        }
        for (k, row) in m.iter().enumerate() {
            let (mut bj, mut bv) = (0, f64::NEG_INFINITY);
            for (j, &v) in row.iter().enumerate() {
                if v > bv {
                    bj = j;
                    bv = v;
                }
            }
            let forced = row
                .iter()
                .enumerate()
                .find(|&(j, &v)| v > 0.0 && v == best_for_gt[j]);
            if let Some((j, _)) = forced {
                pos.push((k, j));
            } else if bv >= cfg.rpn_fg_iou {
                pos.push((k, bj));
            } else if bv < cfg.rpn_bg_iou {
                neg.push(k);
            }
        }
    }
    let max_pos = ((cfg.rpn_batch_per_image as f64) * cfg.rpn_positive_fraction) as usize;
    pos.shuffle(rng);
    pos.truncate(max_pos);
    neg.shuffle(rng);
    neg.truncate(cfg.rpn_batch_per_image - pos.len());
    let mut out: Vec<(usize, Option<usize>)> = pos.into_iter().map(|(k, j)| (k, Some(j))).collect();
    out.extend(neg.into_iter().map(|k| (k, None)));
    out
}
