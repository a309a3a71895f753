//! Turning heterogeneous sub-task records into one training sample format,
//! and the two-view augmentation used by the self-supervised branch.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusManifest, DetectionRecord, ManifestKind, Record, ReidRecord};
use crate::geometry::BBox;
use crate::raster::Image;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum UnifyError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("dataset {0:?} is not registered")]
    UnknownDataset(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTask {
    DetectionSource,
    ReidSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    FullIdentity,
    FreshIdentity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedSample {
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub identities: Vec<u64>,
    pub domain_label: usize,
    pub sub_task: SubTask,
    pub supervision: Supervision,
}

impl UnifiedSample {
    /// Detection-source and unlabeled re-ID samples feed the
    /// self-supervised loss; labeled re-ID samples do not.
    pub fn feeds_consistency(&self) -> bool {
        self.supervision == Supervision::FreshIdentity
    }
}

/// Maps dataset ids to the domain labels of the two alignment modules.
/// Scene datasets index the detection list, crop datasets the re-ID list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainRegistry {
    detection: Vec<String>,
    reid: Vec<String>,
}

impl DomainRegistry {
    pub fn from_manifests<'a>(manifests: impl IntoIterator<Item = &'a CorpusManifest>) -> Self {
        let mut r = Self::default();
        for m in manifests {
            r.register(&m.dataset_id, m.kind);
        }
        r
    }

    pub fn register(&mut self, dataset_id: &str, kind: ManifestKind) -> usize {
        let list = if kind.is_scene() {
            &mut self.detection
        } else {
            &mut self.reid
        };
        match list.iter().position(|d| d == dataset_id) {
            Some(i) => i,
            None => {
                list.push(dataset_id.to_string());
                list.len() - 1
            }
        }
    }

    pub fn label(&self, dataset_id: &str, sub_task: SubTask) -> Result<usize, UnifyError> {
        let list = match sub_task {
            SubTask::DetectionSource => &self.detection,
            SubTask::ReidSource => &self.reid,
        };
        list.iter()
            .position(|d| d == dataset_id)
            .ok_or_else(|| UnifyError::UnknownDataset(dataset_id.to_string()))
    }

    pub fn detection_domains(&self) -> &[String] {
        &self.detection
    }

    pub fn reid_domains(&self) -> &[String] {
        &self.reid
    }
}

/// Global identity space. One counter serves both fresh and labeled ids, so
/// the two pools never overlap. Fresh ids are memoized per
/// `(dataset, record, box)` so a person keeps its id across epochs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdentityAllocator {
    next_fresh_id: u64,
    labeled: HashMap<(String, u64), u64>,
    fresh: HashMap<(String, usize, usize), u64>,
}

impl IdentityAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(next: u64) -> Self {
        Self {
            next_fresh_id: next,
            ..Self::default()
        }
    }

    pub fn next_id(&self) -> u64 {
        self.next_fresh_id
    }

    /// Size of the id space handed out so far.
    pub fn len(&self) -> usize {
        self.next_fresh_id as usize
    }

    pub fn is_empty(&self) -> bool {
        self.next_fresh_id == 0
    }

    fn bump(&mut self) -> u64 {
        let id = self.next_fresh_id;
        self.next_fresh_id += 1;
        id
    }

    pub fn labeled(&mut self, dataset_id: &str, raw: u64) -> u64 {
        if let Some(&id) = self.labeled.get(&(dataset_id.to_string(), raw)) {
            return id;
        }
        let id = self.bump();
        self.labeled.insert((dataset_id.to_string(), raw), id);
        id
    }

    pub fn fresh(&mut self, dataset_id: &str, record: usize, slot: usize) -> u64 {
        let key = (dataset_id.to_string(), record, slot);
        if let Some(&id) = self.fresh.get(&key) {
            return id;
        }
        let id = self.bump();
        self.fresh.insert(key, id);
        id
    }

    /// Assign ids to every person of every record, in manifest order, so the
    /// id space is fixed before training starts.
    pub fn reserve<'a>(&mut self, manifests: impl IntoIterator<Item = &'a CorpusManifest>) {
        for m in manifests {
            for (i, r) in m.records.iter().enumerate() {
                match r {
                    Record::Detection(d) => match &d.identities {
                        Some(ids) => ids.iter().for_each(|&raw| {
                            self.labeled(&m.dataset_id, raw);
                        }),
                        None => (0..d.boxes.len()).for_each(|b| {
                            self.fresh(&m.dataset_id, i, b);
                        }),
                    },
                    Record::Reid(c) => match c.identity {
                        Some(raw) => {
                            self.labeled(&m.dataset_id, raw);
                        }
                        None => {
                            self.fresh(&m.dataset_id, i, 0);
                        }
                    },
                }
            }
        }
    }

    pub fn labeled_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.labeled.values().copied()
    }

    pub fn fresh_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.fresh.values().copied()
    }
}

/// Aspect-preserving resize onto a `size x size` canvas, centered, padded
/// with the image's mean color. Returns the canvas and the
/// `(scale_x, scale_y, offset_x, offset_y)` box transform.
pub fn letterbox(image: &Image, size: usize) -> (Image, [f64; 4]) {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let s = size as f64 / w.max(h);
    let nw = ((w * s).round() as usize).clamp(1, size);
    let nh = ((h * s).round() as usize).clamp(1, size);
    let ox = (size - nw) / 2;
    let oy = (size - nh) / 2;
    let mut canvas = Image::filled(size, size, image.mean_color());
    canvas.paste(&image.resize(nw, nh), ox as isize, oy as isize);
    (
        canvas,
        [nw as f64 / w, nh as f64 / h, ox as f64, oy as f64],
    )
}

/// Scene record to sample. Boxes without identities get fresh ids; a
/// person-search record's identities go through the labeled mapping.
pub fn unify_detection(
    rec: &DetectionRecord,
    image: &Image,
    record_index: usize,
    alloc: &mut IdentityAllocator,
    registry: &DomainRegistry,
    size: usize,
) -> Result<UnifiedSample, UnifyError> {
    let domain_label = registry.label(&rec.dataset_id, SubTask::DetectionSource)?;
    let (canvas, [sx, sy, ox, oy]) = letterbox(image, size);
    let s = size as f64;
    let boxes = rec
        .boxes
        .iter()
        .map(|b| b.affine(sx, sy, ox, oy).clip(s, s))
        .collect();
    let (identities, supervision) = match &rec.identities {
        Some(ids) => (
            ids.iter().map(|&raw| alloc.labeled(&rec.dataset_id, raw)).collect(),
            Supervision::FullIdentity,
        ),
        None => (
            (0..rec.boxes.len())
                .map(|b| alloc.fresh(&rec.dataset_id, record_index, b))
                .collect(),
            Supervision::FreshIdentity,
        ),
    };
    Ok(UnifiedSample {
        image: canvas,
        boxes,
        identities,
        domain_label,
        sub_task: SubTask::DetectionSource,
        supervision,
    })
}

fn crop_identity(
    rec: &ReidRecord,
    record_index: usize,
    alloc: &mut IdentityAllocator,
) -> (u64, Supervision) {
    match rec.identity {
        Some(raw) => (alloc.labeled(&rec.dataset_id, raw), Supervision::FullIdentity),
        None => (
            alloc.fresh(&rec.dataset_id, record_index, 0),
            Supervision::FreshIdentity,
        ),
    }
}

/// Place the crop on a canvas `ratio` times its size at `anchor` within the
/// slack, then resize the canvas to `size x size`.
#[allow(clippy::too_many_arguments)]
pub fn expand_resize(
    rec: &ReidRecord,
    crop: &Image,
    record_index: usize,
    alloc: &mut IdentityAllocator,
    registry: &DomainRegistry,
    ratio: f64,
    anchor: (f64, f64),
    size: usize,
) -> Result<UnifiedSample, UnifyError> {
    if ratio.is_nan() || ratio < 1.0 || !ratio.is_finite() {
        return Err(UnifyError::Parameter(format!(
            "expand ratio {ratio} must be at least 1"
        )));
    }
    if !(0.0..=1.0).contains(&anchor.0) || !(0.0..=1.0).contains(&anchor.1) {
        return Err(UnifyError::Parameter(format!(
            "anchor {anchor:?} outside the unit square"
        )));
    }
    let domain_label = registry.label(&rec.dataset_id, SubTask::ReidSource)?;
    let (cw, ch) = (crop.width(), crop.height());
    let w = ((ratio * cw as f64).round() as usize).max(cw);
    let h = ((ratio * ch as f64).round() as usize).max(ch);
    let ox = (anchor.0 * (w - cw) as f64).round() as usize;
    let oy = (anchor.1 * (h - ch) as f64).round() as usize;
    let mut canvas = Image::filled(w, h, crop.mean_color());
    canvas.paste(crop, ox as isize, oy as isize);
    let image = canvas.resize(size, size);
    let (sx, sy) = (size as f64 / w as f64, size as f64 / h as f64);
    let b = BBox::new(
        ox as f64 * sx,
        oy as f64 * sy,
        (ox + cw) as f64 * sx,
        (oy + ch) as f64 * sy,
    );
    let (id, supervision) = crop_identity(rec, record_index, alloc);
    Ok(UnifiedSample {
        image,
        boxes: vec![b],
        identities: vec![id],
        domain_label,
        sub_task: SubTask::ReidSource,
        supervision,
    })
}

/// Paste the crop unscaled at pixel `position` on a mean-filled
/// `size x size` canvas.
pub fn random_paste(
    rec: &ReidRecord,
    crop: &Image,
    record_index: usize,
    alloc: &mut IdentityAllocator,
    registry: &DomainRegistry,
    position: (f64, f64),
    size: usize,
) -> Result<UnifiedSample, UnifyError> {
    let (cw, ch) = (crop.width() as f64, crop.height() as f64);
    let (x, y) = (position.0.round(), position.1.round());
    if x < 0.0 || y < 0.0 || x + cw > size as f64 || y + ch > size as f64 {
        return Err(UnifyError::Parameter(format!(
            "{cw}x{ch} crop at {position:?} does not fit a {size}x{size} canvas"
        )));
    }
    let domain_label = registry.label(&rec.dataset_id, SubTask::ReidSource)?;
    let mut image = Image::filled(size, size, crop.mean_color());
    image.paste(crop, x as isize, y as isize);
    let (id, supervision) = crop_identity(rec, record_index, alloc);
    Ok(UnifiedSample {
        image,
        boxes: vec![BBox::new(x, y, x + cw, y + ch)],
        identities: vec![id],
        domain_label,
        sub_task: SubTask::ReidSource,
        supervision,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop: bool,
    /// Smallest crop side as a fraction of the image side.
    pub crop_min_scale: f64,
    /// Apply the scale-crop to detection-source samples too.
    pub crop_detection: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub noise: f64,
    /// Boxes keeping less than this fraction of their area are dropped.
    pub min_box_retention: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            crop: true,
            crop_min_scale: 0.7,
            crop_detection: true,
            brightness: 0.15,
            contrast: 0.2,
            saturation: 0.2,
            noise: 0.02,
            min_box_retention: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Every component off.
    pub fn neutral() -> Self {
        Self {
            flip: false,
            crop: false,
            crop_detection: false,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            noise: 0.0,
            ..Self::default()
        }
    }
}

/// One sampled augmentation. `crop` is a region of the input image in
/// pixels; `None` means the full frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AugChain {
    pub crop: Option<BBox>,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub noise: f64,
    pub noise_seed: u64,
}

impl AugChain {
    pub fn identity() -> Self {
        Self {
            crop: None,
            flip: false,
            brightness: 0.0,
            contrast: 1.0,
            saturation: 1.0,
            noise: 0.0,
            noise_seed: 0,
        }
    }

    /// Draw a chain for an image of `width x height` whose boxes are
    /// `boxes`. The crop keeps the image aspect and every box center.
    pub fn sample(
        cfg: &AugmentConfig,
        width: usize,
        height: usize,
        boxes: &[BBox],
        allow_crop: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (w, h) = (width as f64, height as f64);
        let mut chain = Self::identity();
        if cfg.crop && allow_crop && cfg.crop_min_scale < 1.0 {
            let centers: Vec<(f64, f64)> = boxes.iter().map(BBox::center).collect();
            let (mut lx, mut hx, mut ly, mut hy) = (w, 0.0f64, h, 0.0f64);
            for &(cx, cy) in &centers {
                lx = lx.min(cx);
                hx = hx.max(cx);
                ly = ly.min(cy);
                hy = hy.max(cy);
            }
            let need = if centers.is_empty() {
                0.0
            } else {
                ((hx - lx) / w).max((hy - ly) / h)
            };
            let lo = cfg.crop_min_scale.max(need).min(1.0);
            let s = if lo < 1.0 { rng.random_range(lo..=1.0) } else { 1.0 };
            let (cw, ch) = (s * w, s * h);
            let (x_lo, x_hi, y_lo, y_hi) = if centers.is_empty() {
                (0.0, w - cw, 0.0, h - ch)
            } else {
                (
                    (hx - cw).max(0.0),
                    lx.min(w - cw),
                    (hy - ch).max(0.0),
                    ly.min(h - ch),
                )
            };
            let x = if x_hi > x_lo { rng.random_range(x_lo..=x_hi) } else { x_lo.min(w - cw).max(0.0) };
            let y = if y_hi > y_lo { rng.random_range(y_lo..=y_hi) } else { y_lo.min(h - ch).max(0.0) };
            if s < 1.0 {
                chain.crop = Some(BBox::new(x, y, x + cw, y + ch));
            }
        }
        chain.flip = cfg.flip && rng.random_bool(0.5);
        if cfg.brightness > 0.0 {
            chain.brightness = rng.random_range(-cfg.brightness..=cfg.brightness);
        }
        if cfg.contrast > 0.0 {
            chain.contrast = rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
        }
        if cfg.saturation > 0.0 {
            chain.saturation = rng.random_range(1.0 - cfg.saturation..=1.0 + cfg.saturation);
        }
        if cfg.noise > 0.0 {
            chain.noise = cfg.noise;
            chain.noise_seed = rng.random();
        }
        chain
    }

    /// Geometric part only (crop + flip), same output size as input.
    pub fn warp_image(&self, image: &Image) -> Image {
        let mut out = match &self.crop {
            Some(r) => image.crop_resize(r, image.width(), image.height()),
            None => image.clone(),
        };
        if self.flip {
            out = out.flip_horizontal();
        }
        out
    }

    /// Box through the geometric part, before clipping.
    pub fn warp_box(&self, b: &BBox, width: usize, height: usize) -> BBox {
        let (w, h) = (width as f64, height as f64);
        let mut out = match &self.crop {
            Some(r) => b.affine(w / r.width(), h / r.height(), -r.x0 * w / r.width(), -r.y0 * h / r.height()),
            None => *b,
        };
        if self.flip {
            out = out.flip_horizontal(w);
        }
        out
    }

    pub fn apply_photometric(&self, image: &mut Image) {
        if self.brightness != 0.0 {
            let d = self.brightness as f32;
            image.data_mut().iter_mut().for_each(|v| *v = (*v + d).clamp(0.0, 1.0));
        }
        if self.contrast != 1.0 {
            let m = image.mean_color();
            let mean = (m[0] + m[1] + m[2]) / 3.0;
            let c = self.contrast as f32;
            image
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0));
        }
        if self.saturation != 1.0 {
            let s = self.saturation as f32;
            for px in image.data_mut().chunks_mut(3) {
                let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                for v in px.iter_mut() {
                    *v = ((*v - gray) * s + gray).clamp(0.0, 1.0);
                }
            }
        }
        if self.noise > 0.0 {
            let mut rng = seed::rng(&[self.noise_seed]);
            let normal = Normal::new(0.0, self.noise).expect("finite noise");
            image
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub identities: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: View,
    pub view2: View,
    /// `(index in view1, index in view2)` for boxes of the same person.
    pub correspondence: Vec<(usize, usize)>,
}

/// Apply `chain` to a sample, dropping boxes that keep less than
/// `min_retention` of their warped area after clipping.
pub fn apply_chain(s: &UnifiedSample, chain: &AugChain, min_retention: f64) -> View {
    let (w, h) = (s.image.width(), s.image.height());
    let mut image = chain.warp_image(&s.image);
    chain.apply_photometric(&mut image);
    let mut boxes = Vec::new();
    let mut identities = Vec::new();
    for (b, &id) in s.boxes.iter().zip(&s.identities) {
        let warped = chain.warp_box(b, w, h);
        let clipped = warped.clip(w as f64, h as f64);
        if clipped.area() > 0.0 && clipped.area() >= min_retention * warped.area() {
            boxes.push(clipped);
            identities.push(id);
        }
    }
    View {
        image,
        boxes,
        identities,
    }
}

pub fn make_view_pair(s: &UnifiedSample, seed_value: u64, cfg: &AugmentConfig) -> ViewPair {
    let allow_crop = s.sub_task == SubTask::ReidSource || cfg.crop_detection;
    let (w, h) = (s.image.width(), s.image.height());
    let views: Vec<View> = (1..=2u64)
        .map(|k| {
            let mut rng = seed::rng(&[seed_value, k]);
            let chain = AugChain::sample(cfg, w, h, &s.boxes, allow_crop, &mut rng);
            apply_chain(s, &chain, cfg.min_box_retention)
        })
        .collect();
    let [view1, view2]: [View; 2] = views.try_into().expect("two views");
    let correspondence = view1
        .identities
        .iter()
        .enumerate()
        .filter_map(|(i, id)| view2.identities.iter().position(|o| o == id).map(|j| (i, j)))
        .collect();
    ViewPair {
        view1,
        view2,
        correspondence,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reid_rec(identity: Option<u64>) -> ReidRecord {
        ReidRecord {
            image_path: "x.png".into(),
            width: 64,
            height: 128,
            identity,
            dataset_id: "r".into(),
        }
    }

    fn registry() -> DomainRegistry {
        let mut r = DomainRegistry::default();
        r.register("d", ManifestKind::Detection);
        r.register("r", ManifestKind::ReidLabeled);
        r
    }

    #[test]
    fn sequential_fresh_allocation() {
        let rec = DetectionRecord {
            image_path: "a.png".into(),
            width: 100,
            height: 100,
            boxes: vec![BBox::new(0.0, 0.0, 10.0, 10.0); 3],
            identities: None,
            dataset_id: "d".into(),
        };
        let mut alloc = IdentityAllocator::starting_at(100);
        let img = Image::filled(100, 100, [0.5; 3]);
        let s = unify_detection(&rec, &img, 0, &mut alloc, &registry(), 64).unwrap();
        assert_eq!(s.identities, vec![100, 101, 102]);
        assert_eq!(alloc.next_id(), 103);
        assert_eq!(s.supervision, Supervision::FreshIdentity);
    }

    #[test]
    fn empty_detection_record() {
        let rec = DetectionRecord {
            image_path: "a.png".into(),
            width: 30,
            height: 20,
            boxes: vec![],
            identities: None,
            dataset_id: "d".into(),
        };
        let img = Image::filled(30, 20, [0.5; 3]);
        let s = unify_detection(&rec, &img, 0, &mut IdentityAllocator::new(), &registry(), 64).unwrap();
        assert!(s.boxes.is_empty() && s.identities.is_empty());
        assert_eq!((s.image.width(), s.image.height()), (64, 64));
    }

    #[test]
    fn letterbox_maps_boxes() {
        let img = Image::filled(100, 50, [0.2; 3]);
        let (canvas, [sx, sy, ox, oy]) = letterbox(&img, 64);
        assert_eq!((canvas.width(), canvas.height()), (64, 64));
        assert_eq!((sx, sy, ox, oy), (0.64, 0.64, 0.0, 16.0));
    }

    #[test]
    fn unit_ratio_covers_image() {
        let crop = Image::filled(64, 128, [0.3; 3]);
        let mut alloc = IdentityAllocator::new();
        let s = expand_resize(&reid_rec(Some(4)), &crop, 0, &mut alloc, &registry(), 1.0, (0.0, 0.0), 64)
            .unwrap();
        assert_eq!(s.boxes, vec![BBox::new(0.0, 0.0, 64.0, 64.0)]);
        assert_eq!(s.supervision, Supervision::FullIdentity);
    }

    #[test]
    fn ratio_below_one_rejected() {
        let crop = Image::filled(8, 16, [0.3; 3]);
        let err = expand_resize(&reid_rec(None), &crop, 0, &mut IdentityAllocator::new(), &registry(), 0.9, (0.0, 0.0), 64);
        assert!(matches!(err, Err(UnifyError::Parameter(_))));
    }

    #[test]
    fn paste_placement_and_overflow() {
        let crop = Image::filled(64, 128, [0.3; 3]);
        let mut alloc = IdentityAllocator::new();
        let s = random_paste(&reid_rec(None), &crop, 0, &mut alloc, &registry(), (0.0, 0.0), 256).unwrap();
        assert_eq!(s.boxes, vec![BBox::new(0.0, 0.0, 64.0, 128.0)]);
        let big = Image::filled(300, 300, [0.3; 3]);
        assert!(random_paste(&reid_rec(None), &big, 1, &mut alloc, &registry(), (0.0, 0.0), 256).is_err());
    }

    #[test]
    fn labeled_and_fresh_pools_are_disjoint() {
        let mut alloc = IdentityAllocator::new();
        let a = alloc.labeled("r", 7);
        let b = alloc.fresh("d", 0, 0);
        assert_ne!(a, b);
        assert_eq!(alloc.labeled("r", 7), a);
        assert_eq!(alloc.fresh("d", 0, 0), b);
    }

    #[test]
    fn flip_only_chain() {
        let chain = AugChain {
            flip: true,
            ..AugChain::identity()
        };
        let b = chain.warp_box(&BBox::new(10.0, 20.0, 30.0, 40.0), 100, 100);
        assert_eq!(b, BBox::new(70.0, 20.0, 90.0, 40.0));
    }
}
