//! Axis-aligned boxes, IoU, box-delta coding and non-maximum suppression.

use serde::{Deserialize, Serialize};

/// Axis-aligned box `(x0, y0, x1, y1)` in pixels. Serialized as a 4-array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x1.min(other.x1) - self.x0.max(other.x0);
        let h = self.y1.min(other.y1) - self.y0.max(other.y0);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x0.clamp(0.0, width),
            self.y0.clamp(0.0, height),
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
        )
    }

    /// Non-degenerate and inside `[0, width] x [0, height]`.
    pub fn is_valid_in(&self, width: f64, height: f64) -> bool {
        self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x0 < self.x1
            && self.y0 < self.y1
            && self.x1 <= width
            && self.y1 <= height
    }

    /// Map through `p -> p * scale + offset` per axis.
    pub fn affine(&self, sx: f64, sy: f64, ox: f64, oy: f64) -> BBox {
        BBox::new(
            self.x0 * sx + ox,
            self.y0 * sy + oy,
            self.x1 * sx + ox,
            self.y1 * sy + oy,
        )
    }

    pub fn flip_horizontal(&self, width: f64) -> BBox {
        BBox::new(width - self.x1, self.y0, width - self.x0, self.y1)
    }
}

/// Pairwise IoU matrix, `rows.len() x cols.len()`.
pub fn iou_matrix(rows: &[BBox], cols: &[BBox]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| cols.iter().map(|c| r.iou(c)).collect())
        .collect()
}

/// Faster R-CNN style `(dx, dy, dw, dh)` parameterization relative to a
/// reference box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

/// Upper bound on `dw`/`dh` before exponentiation.
const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl BoxCoder {
    pub const fn new(weights: [f64; 4]) -> Self {
        Self { weights }
    }

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f64; 4] {
        let (rw, rh) = (reference.width(), reference.height());
        let (rx, ry) = reference.center();
        let (tw, th) = (target.width(), target.height());
        let (tx, ty) = target.center();
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (tw / rw).ln(),
            wh * (th / rh).ln(),
        ]
    }

    pub fn decode(&self, reference: &BBox, deltas: &[f64]) -> BBox {
        let (rw, rh) = (reference.width(), reference.height());
        let (rx, ry) = reference.center();
        let [wx, wy, ww, wh] = self.weights;
        let dx = deltas[0] / wx;
        let dy = deltas[1] / wy;
        let dw = (deltas[2] / ww).min(DELTA_CLAMP);
        let dh = (deltas[3] / wh).min(DELTA_CLAMP);
        let cx = rx + dx * rw;
        let cy = ry + dy * rh;
        let w = rw * dw.exp();
        let h = rh * dh.exp();
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

/// Greedy NMS. Candidates are visited by descending score (ties by index);
/// returns kept indices in that order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_known_values() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
    }

    #[test]
    fn zero_delta_decodes_to_reference() {
        let coder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
        let r = BBox::new(3.0, 4.0, 17.0, 40.0);
        let d = coder.decode(&r, &[0.0; 4]);
        assert!((d.x0 - r.x0).abs() < 1e-12 && (d.y1 - r.y1).abs() < 1e-12);
    }

    #[test]
    fn flip_mirror() {
        let b = BBox::new(10.0, 20.0, 30.0, 40.0).flip_horizontal(100.0);
        assert_eq!(b, BBox::new(70.0, 20.0, 90.0, 40.0));
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let boxes = [
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(1.0, 0.0, 11.0, 10.0),
            BBox::new(50.0, 50.0, 60.0, 60.0),
        ];
        assert_eq!(nms(&boxes, &[0.9, 0.95, 0.1], 0.5), vec![1, 2]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 1.0..40.0f64, 1.0..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(r in arb_box(), t in arb_box()) {
            let coder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
            let d = coder.decode(&r, &coder.encode(&r, &t));
            prop_assert!((d.x0 - t.x0).abs() < 1e-9);
            prop_assert!((d.y0 - t.y0).abs() < 1e-9);
            prop_assert!((d.x1 - t.x1).abs() < 1e-9);
            prop_assert!((d.y1 - t.y1).abs() < 1e-9);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (a.iou(&b), b.iou(&a));
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
