//! Retrieval and detection metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::geometry::BBox;

/// One ranked gallery candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub gallery_image: usize,
    pub detection: usize,
    pub similarity: f64,
    pub correct: bool,
}

/// Ranked candidates for one query and the number of ground-truth
/// occurrences of its identity in the gallery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: usize,
    pub hits: Vec<RankedHit>,
    pub positives: usize,
}

impl QueryRanking {
    pub fn correct(&self) -> Vec<bool> {
        self.hits.iter().map(|h| h.correct).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchMetrics {
    pub map: f64,
    pub top_k: BTreeMap<usize, f64>,
    pub ap: Vec<f64>,
}

/// Precision at each correct hit, summed and divided by all positives,
/// including those never retrieved.
pub fn average_precision(correct: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &c) in correct.iter().enumerate() {
        if c {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / positives as f64
}

/// Whether any of the first `k` candidates is correct.
pub fn hit_at(correct: &[bool], k: usize) -> bool {
    correct.iter().take(k).any(|&c| c)
}

pub fn compute_metrics(rankings: &[QueryRanking], top_k: &[usize]) -> Result<SearchMetrics, EvalError> {
    if let Some(r) = rankings.iter().find(|r| r.positives == 0) {
        return Err(EvalError::NoPositives { query: r.query });
    }
    let n = rankings.len().max(1) as f64;
    let ap: Vec<f64> = rankings
        .iter()
        .map(|r| average_precision(&r.correct(), r.positives))
        .collect();
    let map = ap.iter().sum::<f64>() / n;
    let top_k = top_k
        .iter()
        .map(|&k| {
            let hits = rankings.iter().filter(|r| hit_at(&r.correct(), k)).count();
            (k, hits as f64 / n)
        })
        .collect();
    Ok(SearchMetrics { map, top_k, ap })
}

/// Detection recall and all-point interpolated AP at an IoU threshold.
/// Each ground truth may be claimed once; later matches are false
/// positives.
pub fn detection_metrics(detections: &[(Vec<BBox>, Vec<f64>)], truth: &[Vec<BBox>], iou_threshold: f64) -> (f64, f64) {
    let total: usize = truth.iter().map(Vec::len).sum();
    if total == 0 {
        return (0.0, 0.0);
    }
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (img, (boxes, scores)) in detections.iter().enumerate() {
        for (d, &s) in scores.iter().enumerate().take(boxes.len()) {
            all.push((s, img, d));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut claimed: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.len()]).collect();
    let mut tp = Vec::with_capacity(all.len());
    for &(_, img, d) in &all {
        let b = detections[img].0[d];
        let best = truth[img]
            .iter()
            .enumerate()
            .filter(|(j, _)| !claimed[img][*j])
            .map(|(j, t)| (j, b.iou(t)))
            .filter(|&(_, iou)| iou >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, _)) => {
                claimed[img][j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    let found = tp.iter().filter(|&&t| t).count();
    let recall = found as f64 / total as f64;
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / total as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last) * p;
        last = *r;
    }
    (recall, ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(correct: &[bool], positives: usize) -> QueryRanking {
        QueryRanking {
            query: 0,
            hits: correct
                .iter()
                .enumerate()
                .map(|(i, &c)| RankedHit {
                    gallery_image: i,
                    detection: 0,
                    similarity: 1.0 - i as f64 * 0.1,
                    correct: c,
                })
                .collect(),
            positives,
        }
    }

    #[test]
    fn hand_computed_ap() {
        let m = compute_metrics(&[ranking(&[true, false, true], 2)], &[1, 5, 10]).unwrap();
        assert!((m.map - 0.833_333_333).abs() < 1e-8);
        assert_eq!(m.top_k[&1], 1.0);
    }

    #[test]
    fn perfect_retrieval() {
        let m = compute_metrics(&[ranking(&[true, true], 2), ranking(&[true], 1)], &[1]).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.top_k[&1], 1.0);
    }

    #[test]
    fn unretrieved_positives_lower_ap() {
        assert_eq!(average_precision(&[true], 2), 0.5);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn zero_positive_query_is_rejected() {
        assert!(matches!(
            compute_metrics(&[ranking(&[false], 0)], &[1]),
            Err(EvalError::NoPositives { query: 0 })
        ));
    }

    #[test]
    fn detection_duplicates_are_false_positives() {
        let gt = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0)]];
        let dets = vec![(vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.5, 0.0, 10.0, 10.0)], vec![0.9, 0.8])];
        let (recall, ap) = detection_metrics(&dets, &gt, 0.5);
        assert_eq!(recall, 1.0);
        assert_eq!(ap, 1.0);
        let dets = vec![(vec![BBox::new(20.0, 20.0, 30.0, 30.0), BBox::new(0.0, 0.0, 10.0, 10.0)], vec![0.9, 0.8])];
        let (recall, ap) = detection_metrics(&dets, &gt, 0.5);
        assert_eq!(recall, 1.0);
        assert_eq!(ap, 0.5);
    }
}
