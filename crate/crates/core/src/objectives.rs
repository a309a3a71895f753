//! Loss terms: detection (RPN + head), OIM re-ID loss with its prototype
//! table, the symmetrized negative-cosine self-supervised loss, and total
//! loss assembly.
//!
//! Batch terms are built from per-item loss vectors so that each sample's
//! share of a term can be read back from the item values.

use hps_autograd::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::model::{DetHeadOutput, ModelConfig, ProposalSet, RpnOutput, ROI_CODER, RPN_CODER};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("loss term {term} is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("zero-norm input to the cosine loss (row {row})")]
    ZeroNorm { row: usize },
    #[error("identity {id} outside the table of {size}")]
    IdentityOutOfRange { id: usize, size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Weight of the self-supervised term.
    pub eta: f64,
    /// Weight of the adversarial term.
    pub lambda: f64,
    /// OIM prototype momentum.
    pub gamma: f64,
    /// OIM softmax temperature.
    pub tau: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta: 1.0,
            lambda: 0.1,
            gamma: 0.5,
            tau: 1.0 / 30.0,
        }
    }
}

/// Smooth-L1 transition point for RPN box regression.
pub const RPN_BETA: f64 = 1.0 / 9.0;
/// Smooth-L1 transition point for head box regression.
pub const HEAD_BETA: f64 = 1.0;

/// Per-identity unit prototypes with momentum updates.
#[derive(Clone, Debug, PartialEq)]
pub struct OimTable {
    prototypes: Tensor,
    pub momentum: f64,
    pub temperature: f64,
}

impl OimTable {
    /// Random unit rows.
    pub fn new(num_ids: usize, dim: usize, momentum: f64, temperature: f64, rng: &mut impl Rng) -> Self {
        let mut data: Vec<f64> = (0..num_ids * dim).map(|_| rng.sample(StandardNormal)).collect();
        for row in data.chunks_mut(dim.max(1)) {
            normalize(row);
        }
        Self {
            prototypes: Tensor::from_vec(&[num_ids, dim], data),
            momentum,
            temperature,
        }
    }

    /// Table from explicit rows, normalized on entry.
    pub fn from_rows(rows: &[Vec<f64>], momentum: f64, temperature: f64) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let mut r = r.clone();
            normalize(&mut r);
            data.extend(r);
        }
        Self {
            prototypes: Tensor::from_vec(&[rows.len(), dim], data),
            momentum,
            temperature,
        }
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.row_len()
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.prototypes.row(id)
    }

    pub fn set_prototypes(&mut self, t: Tensor) {
        self.prototypes = t;
    }

    fn check(&self, ids: &[usize]) -> Result<(), ObjectiveError> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(&id) => Err(ObjectiveError::IdentityOutOfRange {
                id,
                size: self.len(),
            }),
            None => Ok(()),
        }
    }

    /// Per-box OIM loss `[R]`: `-log softmax(P e / tau)[id]`. The table
    /// enters as a constant.
    pub fn loss_items(&self, g: &mut Graph, emb: Var, ids: &[usize]) -> Result<Var, ObjectiveError> {
        self.check(ids)?;
        let p = g.constant(self.prototypes.clone());
        let logits = g.linear(emb, p, None);
        let logits = g.scale(logits, 1.0 / self.temperature);
        let lp = g.log_softmax(logits);
        let picked = g.pick_cols(lp, ids);
        Ok(g.scale(picked, -1.0))
    }

    /// Mean OIM loss over boxes.
    pub fn loss(&self, g: &mut Graph, emb: Var, ids: &[usize]) -> Result<Var, ObjectiveError> {
        let items = self.loss_items(g, emb, ids)?;
        Ok(g.mean(items))
    }

    /// `proto <- normalize(gamma * proto + (1 - gamma) * emb)`, in order.
    pub fn update(&mut self, embeddings: &[Vec<f64>], ids: &[usize]) -> Result<(), ObjectiveError> {
        self.check(ids)?;
        let d = self.dim();
        let gamma = self.momentum;
        let data = self.prototypes.data_mut();
        for (e, &id) in embeddings.iter().zip(ids) {
            let row = &mut data[id * d..(id + 1) * d];
            for (p, v) in row.iter_mut().zip(e) {
                *p = gamma * *p + (1.0 - gamma) * v;
            }
            normalize(row);
        }
        Ok(())
    }
}

fn normalize(row: &mut [f64]) {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 1e-12 {
        row.iter_mut().for_each(|v| *v /= n);
    }
}

const NORM_GUARD: f64 = 1e-10;

fn check_norms(g: &Graph, x: Var) -> Result<(), ObjectiveError> {
    let t = g.value(x);
    for r in 0..t.rows() {
        if t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() < NORM_GUARD {
            return Err(ObjectiveError::ZeroNorm { row: r });
        }
    }
    Ok(())
}

/// Per-row `-cos(h_i, z_i)` as `[k]`.
pub fn neg_cosine_items(g: &mut Graph, h: Var, z: Var) -> Result<Var, ObjectiveError> {
    check_norms(g, h)?;
    check_norms(g, z)?;
    let hn = g.l2_normalize_rows(h);
    let zn = g.l2_normalize_rows(z);
    let prod = g.mul(hn, zn);
    let cos = g.sum_last(prod);
    Ok(g.scale(cos, -1.0))
}

/// Batch mean of `-cos(h, z)`.
pub fn neg_cosine(g: &mut Graph, h: Var, z: Var) -> Result<Var, ObjectiveError> {
    let items = neg_cosine_items(g, h, z)?;
    Ok(g.mean(items))
}

/// Symmetrized stop-gradient loss per pair, `[k]`:
/// `0.5 * C(sg(h2), z1) + 0.5 * C(sg(h1), z2)`.
pub fn loss_con_items(g: &mut Graph, h1: Var, z1: Var, h2: Var, z2: Var) -> Result<Var, ObjectiveError> {
    let s2 = g.stop_gradient(h2);
    let s1 = g.stop_gradient(h1);
    let a = neg_cosine_items(g, s2, z1)?;
    let b = neg_cosine_items(g, s1, z2)?;
    let sum = g.add(a, b);
    Ok(g.scale(sum, 0.5))
}

pub fn loss_con(g: &mut Graph, h1: Var, z1: Var, h2: Var, z2: Var) -> Result<Var, ObjectiveError> {
    let items = loss_con_items(g, h1, z1, h2, z2)?;
    Ok(g.mean(items))
}

/// RPN loss of image `n`: mean BCE over sampled anchors plus smooth-L1 over
/// positives divided by the number sampled.
pub fn loss_rpn_image(
    g: &mut Graph,
    rpn: &RpnOutput,
    n: usize,
    samples: &[(usize, Option<usize>)],
    gt: &[BBox],
) -> (Var, usize) {
    if samples.is_empty() {
        return (g.constant(Tensor::scalar(0.0)), 0);
    }
    let total = g.value(rpn.logits).numel();
    let flat = g.reshape(rpn.logits, &[total, 1]);
    let idx: Vec<usize> = samples.iter().map(|&(k, _)| rpn.logit_index(n, k)).collect();
    let picked = g.gather_rows(flat, &idx);
    let targets: Vec<f64> = samples.iter().map(|s| if s.1.is_some() { 1.0 } else { 0.0 }).collect();
    let bce = g.bce_with_logits(picked, &targets);
    let cls = g.mean(bce);
    let pos: Vec<(usize, usize)> = samples.iter().filter_map(|&(k, m)| m.map(|j| (k, j))).collect();
    if pos.is_empty() {
        return (cls, 0);
    }
    let dtotal = g.value(rpn.deltas).numel();
    let dflat = g.reshape(rpn.deltas, &[dtotal, 1]);
    let didx: Vec<usize> = pos.iter().flat_map(|&(k, _)| rpn.delta_indices(n, k)).collect();
    let d = g.gather_rows(dflat, &didx);
    let targets: Vec<f64> = pos
        .iter()
        .flat_map(|&(k, j)| RPN_CODER.encode(&rpn.anchors[k], &gt[j]))
        .collect();
    let sl1 = g.smooth_l1(d, &targets, RPN_BETA);
    let reg = g.sum(sl1);
    let reg = g.scale(reg, 1.0 / samples.len() as f64);
    (g.add(cls, reg), pos.len())
}

/// Detection-head loss over the proposals of one image, whose rows in
/// `out` are `rows`: mean 2-class cross-entropy plus smooth-L1 over
/// positives divided by the number of proposals.
pub fn loss_det_head_image(
    g: &mut Graph,
    out: &DetHeadOutput,
    rows: &[usize],
    props: &ProposalSet,
    gt: &[BBox],
) -> (Var, usize) {
    if rows.is_empty() {
        return (g.constant(Tensor::scalar(0.0)), 0);
    }
    let matched = props.matched_gt.as_ref().expect("training proposals carry matches");
    let logits = g.gather_rows(out.class_logits, rows);
    let lp = g.log_softmax(logits);
    let labels: Vec<usize> = matched.iter().map(|m| usize::from(m.is_some())).collect();
    let picked = g.pick_cols(lp, &labels);
    let ce = g.mean(picked);
    let cls = g.scale(ce, -1.0);
    let pos: Vec<(usize, usize)> = matched
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect();
    if pos.is_empty() {
        return (cls, 0);
    }
    let prow: Vec<usize> = pos.iter().map(|&(i, _)| rows[i]).collect();
    let d = g.gather_rows(out.box_deltas, &prow);
    let targets: Vec<f64> = pos
        .iter()
        .flat_map(|&(i, j)| ROI_CODER.encode(&props.boxes[i], &gt[j]))
        .collect();
    let sl1 = g.smooth_l1(d, &targets, HEAD_BETA);
    let reg = g.sum(sl1);
    let reg = g.scale(reg, 1.0 / rows.len() as f64);
    (g.add(cls, reg), pos.len())
}

/// Per-image detection losses averaged over the batch.
pub struct DetLoss {
    pub l_rpn: Var,
    pub l_det_head: Var,
    /// Per-image values, for breakdowns.
    pub rpn_items: Vec<Var>,
    pub head_items: Vec<Var>,
    pub rpn_positives: usize,
    pub roi_positives: usize,
}

/// `anchor_samples[n]`, `props[n]`, `gt[n]` describe image `n`; `head_rows[n]`
/// are that image's rows of `det_out`.
pub fn loss_det(
    g: &mut Graph,
    rpn: &RpnOutput,
    anchor_samples: &[Vec<(usize, Option<usize>)>],
    det_out: &DetHeadOutput,
    head_rows: &[Vec<usize>],
    props: &[ProposalSet],
    gt: &[Vec<BBox>],
) -> DetLoss {
    let n = gt.len();
    let mut rpn_items = Vec::with_capacity(n);
    let mut head_items = Vec::with_capacity(n);
    let (mut rp, mut hp) = (0, 0);
    for i in 0..n {
        let (l, p) = loss_rpn_image(g, rpn, i, &anchor_samples[i], &gt[i]);
        rpn_items.push(l);
        rp += p;
        let (l, p) = loss_det_head_image(g, det_out, &head_rows[i], &props[i], &gt[i]);
        head_items.push(l);
        hp += p;
    }
    let mean = |g: &mut Graph, items: &[Var]| {
        if items.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let s = g.add_n(items);
            g.scale(s, 1.0 / items.len() as f64)
        }
    };
    DetLoss {
        l_rpn: mean(g, &rpn_items),
        l_det_head: mean(g, &head_items),
        rpn_items,
        head_items,
        rpn_positives: rp,
        roi_positives: hp,
    }
}

/// Matched-positive and bookkeeping counts of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCounts {
    pub views: usize,
    pub rpn_positives: usize,
    pub roi_positives: usize,
    pub reid_boxes: usize,
    pub con_pairs: usize,
    pub con_skipped: usize,
    pub adv_det_images: usize,
    pub adv_det_instances: usize,
    pub adv_reid_images: usize,
    pub adv_reid_instances: usize,
}

/// Scalar values of the individual terms before assembly. Terms absent
/// from a batch are 0 with their flag cleared.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_rpn: f64,
    pub l_det_head: f64,
    pub l_reid: f64,
    pub l_con: f64,
    pub l_adv: f64,
    pub has_con: bool,
    pub has_adv: bool,
    pub counts: LossCounts,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_rpn: f64,
    pub l_det_head: f64,
    pub l_det: f64,
    pub l_reid: f64,
    pub l_ps: f64,
    pub l_con: f64,
    pub l_adv: f64,
    pub l_total: f64,
    pub has_con: bool,
    pub has_adv: bool,
    pub counts: LossCounts,
}

impl LossReport {
    /// Re-derive the composite fields from the leaves.
    pub fn recompute_total(&self, hp: &HyperParams) -> f64 {
        self.l_rpn + self.l_det_head + self.l_reid + hp.eta * self.l_con + hp.lambda * self.l_adv
    }
}

pub fn total_loss(parts: &LossParts, hp: &HyperParams) -> Result<LossReport, ObjectiveError> {
    for (term, value) in [
        ("l_rpn", parts.l_rpn),
        ("l_det_head", parts.l_det_head),
        ("l_reid", parts.l_reid),
        ("l_con", parts.l_con),
        ("l_adv", parts.l_adv),
    ] {
        if !value.is_finite() {
            return Err(ObjectiveError::NonFinite { term, value });
        }
    }
    let l_det = parts.l_rpn + parts.l_det_head;
    let l_ps = parts.l_reid + l_det;
    Ok(LossReport {
        step: 0,
        l_rpn: parts.l_rpn,
        l_det_head: parts.l_det_head,
        l_det,
        l_reid: parts.l_reid,
        l_ps,
        l_con: parts.l_con,
        l_adv: parts.l_adv,
        l_total: l_ps + hp.eta * parts.l_con + hp.lambda * parts.l_adv,
        has_con: parts.has_con,
        has_adv: parts.has_adv,
        counts: parts.counts.clone(),
    })
}

/// Sampling settings for the detection losses, pulled from the model config.
pub fn anchor_samples(
    cfg: &ModelConfig,
    rpn: &RpnOutput,
    gt: &[Vec<BBox>],
    rng: &mut impl Rng,
) -> Vec<Vec<(usize, Option<usize>)>> {
    gt.iter()
        .map(|b| crate::model::sample_anchors(cfg, &rpn.anchors, b, rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_update() {
        let mut t = OimTable::from_rows(&[vec![1.0, 0.0, 0.0]], 0.5, 1.0 / 30.0);
        t.update(&[vec![0.0, 1.0, 0.0]], &[0]).unwrap();
        let r = t.row(0);
        assert!((r[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((r[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(r[2], 0.0);
    }

    #[test]
    fn uniform_table_gives_log_n() {
        let rows = vec![vec![0.6, 0.8]; 7];
        let t = OimTable::from_rows(&rows, 0.5, 0.1);
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]));
        let l = t.loss(&mut g, e, &[3]).unwrap();
        assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cosine_special_cases() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]));
        let z = g.constant(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]));
        let zn = g.constant(Tensor::from_vec(&[1, 3], vec![-1.0, -2.0, -3.0]));
        let zo = g.constant(Tensor::from_vec(&[1, 3], vec![3.0, 0.0, -1.0]));
        let a = neg_cosine(&mut g, h, z).unwrap();
        let b = neg_cosine(&mut g, h, zn).unwrap();
        let c = neg_cosine(&mut g, h, zo).unwrap();
        assert!((g.value(a).item() + 1.0).abs() < 1e-12);
        assert!((g.value(b).item() - 1.0).abs() < 1e-12);
        assert!(g.value(c).item().abs() < 1e-12);
        let zero = g.constant(Tensor::zeros(&[1, 3]));
        assert_eq!(neg_cosine(&mut g, h, zero), Err(ObjectiveError::ZeroNorm { row: 0 }));
    }

    #[test]
    fn total_arithmetic() {
        let parts = LossParts {
            l_rpn: 0.5,
            l_det_head: 0.5,
            l_reid: 1.0,
            l_con: 1.0,
            l_adv: 1.0,
            ..LossParts::default()
        };
        let hp = HyperParams {
            eta: 0.5,
            lambda: 0.1,
            ..HyperParams::default()
        };
        let r = total_loss(&parts, &hp).unwrap();
        assert!((r.l_total - 2.6).abs() < 1e-12);
        let r0 = total_loss(&parts, &HyperParams { eta: 0.0, lambda: 0.0, ..hp }).unwrap();
        assert_eq!(r0.l_total, r0.l_ps);
        let bad = LossParts { l_con: f64::NAN, ..parts };
        assert!(matches!(total_loss(&bad, &HyperParams::default()), Err(ObjectiveError::NonFinite { term: "l_con", .. })));
    }

    #[test]
    fn random_table_rows_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = OimTable::new(5, 8, 0.5, 0.1, &mut rng);
        for i in 0..5 {
            let n: f64 = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
