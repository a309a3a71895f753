//! Intra-task alignment: a gradient reversal layer feeding image-level and
//! instance-level domain classifiers, plus a consistency term between their
//! predictions. One bundle serves the detection sub-task, another re-ID.

use hps_autograd::nn::{Conv2d, Linear};
use hps_autograd::{Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum IamError {
    #[error("domain probe needs at least two domains, got {0}")]
    SingleDomain(usize),
    #[error("domain probe needs features for every label ({features} vs {labels})")]
    LengthMismatch { features: usize, labels: usize },
    #[error("domain label {label} outside 0..{count}")]
    LabelOutOfRange { label: usize, count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IamTask {
    Detection,
    Reid,
}

impl IamTask {
    pub fn prefix(self) -> &'static str {
        match self {
            IamTask::Detection => "iam.det",
            IamTask::Reid => "iam.reid",
        }
    }
}

/// Identity forward, `-alpha` times the gradient backward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientReversal {
    pub alpha: f64,
}

impl GradientReversal {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.grad_reverse(x, self.alpha)
    }
}

/// Image-level head (two channel-halving convs, global average, two FC
/// layers) and instance-level head (two FC layers).
#[derive(Clone, Copy, Debug)]
pub struct DomainHead {
    img_conv1: Conv2d,
    img_conv2: Conv2d,
    img_fc1: Linear,
    img_fc2: Linear,
    ins_fc1: Linear,
    ins_fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct IamBundle {
    pub task: IamTask,
    pub grl: GradientReversal,
    pub heads: DomainHead,
    pub domain_count: usize,
}

impl IamBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task: IamTask,
        img_channels: usize,
        ins_dim: usize,
        domain_count: usize,
        hidden: usize,
        alpha: f64,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let p = task.prefix();
        let c1 = (img_channels / 2).max(1);
        let c2 = (img_channels / 4).max(1);
        let k = domain_count.max(1);
        let heads = DomainHead {
            img_conv1: Conv2d::new(store, &format!("{p}.img_conv1"), img_channels, c1, 3, 1, 1, rng),
            img_conv2: Conv2d::new(store, &format!("{p}.img_conv2"), c1, c2, 3, 1, 1, rng),
            img_fc1: Linear::new(store, &format!("{p}.img_fc1"), c2, hidden, rng),
            img_fc2: Linear::with_std(store, &format!("{p}.img_fc2"), hidden, k, 0.01, rng),
            ins_fc1: Linear::new(store, &format!("{p}.ins_fc1"), ins_dim, hidden, rng),
            ins_fc2: Linear::with_std(store, &format!("{p}.ins_fc2"), hidden, k, 0.01, rng),
        };
        Self {
            task,
            grl: GradientReversal { alpha },
            heads,
            domain_count,
        }
    }

    /// Image-level logits `[M, K]` for feature maps `[M, C, h, w]` (no GRL).
    pub fn img_logits(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Var {
        let h = &self.heads;
        let t = h.img_conv1.forward(g, store, f);
        let t = g.relu(t);
        let t = h.img_conv2.forward(g, store, t);
        let t = g.relu(t);
        let t = g.global_avg_pool(t);
        let t = h.img_fc1.forward(g, store, t);
        let t = g.relu(t);
        h.img_fc2.forward(g, store, t)
    }

    /// Instance-level logits `[R, K]` for vectors `[R, D]` (no GRL).
    pub fn ins_logits(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Var {
        let h = &self.heads;
        let t = h.ins_fc1.forward(g, store, f);
        let t = g.relu(t);
        h.ins_fc2.forward(g, store, t)
    }
}

/// Per-item adversarial losses. `img_items` has one entry per image,
/// `ins_items` and `cst_items` one per instance.
pub struct AdvLoss {
    pub l_img: Var,
    pub l_ins: Var,
    pub l_cst: Var,
    pub img_items: Option<Var>,
    pub ins_items: Option<Var>,
    pub cst_items: Option<Var>,
    pub images: usize,
    pub instances: usize,
}

impl AdvLoss {
    pub fn total(&self, g: &mut Graph) -> Var {
        g.add_n(&[self.l_img, self.l_ins, self.l_cst])
    }
}

/// Adversarial loss of one IAM over a batch.
///
/// `f_img` rows are grouped into images by `img_segments` (one segment per
/// image; its logits are averaged). `f_ins` row `i` belongs to image
/// `ins_image[i]`. `labels[j]` is the domain of image `j`. With
/// `reverse = false` the GRL is skipped, for paired-run checks.
#[allow(clippy::too_many_arguments)]
pub fn loss_adv(
    g: &mut Graph,
    store: &ParamStore,
    bundle: &IamBundle,
    f_img: Var,
    img_segments: &[Vec<usize>],
    f_ins: Option<Var>,
    ins_image: &[usize],
    labels: &[usize],
    reverse: bool,
) -> AdvLoss {
    let zero = |g: &mut Graph| g.constant(Tensor::scalar(0.0));
    let n_img = labels.len();
    if n_img == 0 {
        return AdvLoss {
            l_img: zero(g),
            l_ins: zero(g),
            l_cst: zero(g),
            img_items: None,
            ins_items: None,
            cst_items: None,
            images: 0,
            instances: 0,
        };
    }
    let fi = if reverse { bundle.grl.apply(g, f_img) } else { f_img };
    let logits = bundle.img_logits(g, store, fi);
    let logits = g.segment_mean(logits, img_segments);
    let lp = g.log_softmax(logits);
    let picked = g.pick_cols(lp, labels);
    let img_items = g.scale(picked, -1.0);
    let l_img = g.mean(img_items);
    let p_img = g.softmax(logits);

    let n_ins = ins_image.len();
    let (l_ins, l_cst, ins_items, cst_items) = match f_ins {
        Some(f) if n_ins > 0 => {
            let fs = if reverse { bundle.grl.apply(g, f) } else { f };
            let il = bundle.ins_logits(g, store, fs);
            let ilp = g.log_softmax(il);
            let ins_labels: Vec<usize> = ins_image.iter().map(|&j| labels[j]).collect();
            let picked = g.pick_cols(ilp, &ins_labels);
            let ins_items = g.scale(picked, -1.0);
            let p_ins = g.softmax(il);
            let p_img_rows = g.gather_rows(p_img, ins_image);
            let diff = g.sub(p_img_rows, p_ins);
            let sq = g.square(diff);
            let cst_items = g.sum_last(sq);
            (g.mean(ins_items), g.mean(cst_items), Some(ins_items), Some(cst_items))
        }
        _ => (zero(g), zero(g), None, None),
    };
    AdvLoss {
        l_img,
        l_ins,
        l_cst,
        img_items: Some(img_items),
        ins_items,
        cst_items,
        images: n_img,
        instances: if ins_items.is_some() { n_ins } else { 0 },
    }
}

/// Settings of the linear domain probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            iterations: 300,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

/// Held-out accuracy of a multinomial logistic regression predicting the
/// domain from standardized features. The split is stratified per domain.
pub fn probe_separability(
    features: &[Vec<f64>],
    labels: &[usize],
    cfg: &ProbeConfig,
    seed_value: u64,
) -> Result<f64, IamError> {
    if features.len() != labels.len() {
        return Err(IamError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let present = (0..k).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(IamError::SingleDomain(present));
    }
    let mut rng = seed::rng(&[seed_value, 0x9_20BE]);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let cut = ((idx.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, idx.len().max(2) - 1);
        let cut = cut.min(idx.len());
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    if test.is_empty() {
        test = train.clone();
    }
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v / train.len() as f64;
        }
    }
    for &i in &train {
        for j in 0..d {
            sd[j] += (features[i][j] - mean[j]).powi(2) / train.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let standardize = |rows: &[usize]| {
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend((0..d).map(|j| (features[i][j] - mean[j]) / sd[j]));
        }
        Tensor::from_vec(&[rows.len(), d], data)
    };
    let xtr = standardize(&train);
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let mut w = Tensor::zeros(&[k, d]);
    let mut b = Tensor::zeros(&[k]);
    for _ in 0..cfg.iterations {
        let mut g = Graph::new();
        let x = g.constant(xtr.clone());
        let wv = g.input(w.clone());
        let bv = g.input(b.clone());
        let logits = g.linear(x, wv, Some(bv));
        let lp = g.log_softmax(logits);
        let picked = g.pick_cols(lp, &ytr);
        let nll = g.mean(picked);
        let nll = g.scale(nll, -1.0);
        let sq = g.square(wv);
        let reg = g.sum(sq);
        let reg = g.scale(reg, 0.5 * cfg.l2);
        let loss = g.add(nll, reg);
        let grads = g.backward(loss);
        let gw = grads.get(wv).expect("weight gradient");
        let gb = grads.get(bv).expect("bias gradient");
        for (p, q) in w.data_mut().iter_mut().zip(gw.data()) {
            *p -= cfg.learning_rate * q;
        }
        for (p, q) in b.data_mut().iter_mut().zip(gb.data()) {
            *p -= cfg.learning_rate * q;
        }
    }
    let xte = standardize(&test);
    let mut correct = 0;
    for (r, &i) in test.iter().enumerate() {
        let row = xte.row(r);
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..k {
            let s: f64 = b.data()[c] + w.row(c).iter().zip(row).map(|(a, x)| a * x).sum::<f64>();
            if s > best.1 {
                best = (c, s);
            }
        }
        if best.0 == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
