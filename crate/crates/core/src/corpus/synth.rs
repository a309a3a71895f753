//! Procedural multi-domain corpus. Persons are parametric glyphs (head,
//! torso, two legs) whose torso/leg colors encode identity; each domain has
//! its own background palette, texture frequency and noise level.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    save_manifest, CorpusError, CorpusManifest, DetectionRecord, ManifestKind, Record, ReidRecord,
};
use crate::geometry::BBox;
use crate::raster::Image;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Style {
    /// Two colors the background texture oscillates between.
    pub background: [[f32; 3]; 2],
    /// Stripe cycles across the image width.
    pub texture_frequency: f64,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise: f64,
}

impl Style {
    /// A fixed family of visually distinct styles, cycled by index.
    pub fn preset(i: usize) -> Style {
        const PRESETS: [([[f32; 3]; 2], f64, f64); 8] = [
            ([[0.22, 0.42, 0.18], [0.34, 0.55, 0.24]], 3.0, 0.02),
            ([[0.42, 0.42, 0.46], [0.62, 0.62, 0.64]], 9.0, 0.05),
            ([[0.72, 0.60, 0.40], [0.82, 0.72, 0.52]], 2.0, 0.03),
            ([[0.08, 0.10, 0.24], [0.18, 0.20, 0.34]], 5.0, 0.06),
            ([[0.86, 0.83, 0.78], [0.70, 0.68, 0.64]], 13.0, 0.01),
            ([[0.50, 0.24, 0.20], [0.62, 0.36, 0.30]], 6.0, 0.04),
            ([[0.15, 0.45, 0.45], [0.25, 0.58, 0.55]], 4.0, 0.03),
            ([[0.48, 0.40, 0.58], [0.60, 0.55, 0.66]], 7.0, 0.035),
        ];
        let (background, texture_frequency, noise) = PRESETS[i % PRESETS.len()];
        Style {
            background,
            texture_frequency,
            noise,
        }
    }
}

fn default_persons() -> [usize; 2] {
    [1, 6]
}

fn default_person_height() -> [u32; 2] {
    [24, 44]
}

fn default_crop_size() -> [u32; 2] {
    [24, 48]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub dataset_id: String,
    pub kind: ManifestKind,
    /// Scene count for scene kinds; crop count for re-ID kinds.
    pub images: usize,
    /// Scene size. Ignored for re-ID kinds, whose crops jitter around
    /// `crop_size`.
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
    /// Identity pool size. Unused for detection domains.
    #[serde(default)]
    pub identities: usize,
    /// Person-search only: held-out scenes and identities written as a
    /// separate `<dataset_id>_test` manifest.
    #[serde(default)]
    pub test_images: usize,
    #[serde(default)]
    pub test_identities: usize,
    #[serde(default = "default_persons")]
    pub persons_per_image: [usize; 2],
    #[serde(default = "default_person_height")]
    pub person_height: [u32; 2],
    #[serde(default = "default_crop_size")]
    pub crop_size: [u32; 2],
    pub style: Style,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub domains: Vec<DomainSpec>,
}

impl SynthSpec {
    /// `detection` + `labeled` + `unlabeled` source domains of
    /// `per_domain` images each, plus one person-search target domain.
    pub fn desk(
        detection: usize,
        labeled: usize,
        unlabeled: usize,
        per_domain: usize,
        target_train: usize,
        target_test: usize,
    ) -> SynthSpec {
        let mut domains = Vec::new();
        let mut style = 0;
        let mut next_style = || {
            style += 1;
            Style::preset(style - 1)
        };
        let scene_sizes = [(96, 72), (80, 80), (72, 96), (88, 88)];
        for i in 0..detection {
            let (width, height) = scene_sizes[i % scene_sizes.len()];
            domains.push(DomainSpec {
                dataset_id: format!("det{i}"),
                kind: ManifestKind::Detection,
                images: per_domain,
                width,
                height,
                identities: 0,
                test_images: 0,
                test_identities: 0,
                persons_per_image: default_persons(),
                person_height: default_person_height(),
                crop_size: default_crop_size(),
                style: next_style(),
            });
        }
        for (prefix, kind, count) in [
            ("reid", ManifestKind::ReidLabeled, labeled),
            ("unlab", ManifestKind::ReidUnlabeled, unlabeled),
        ] {
            for i in 0..count {
                domains.push(DomainSpec {
                    dataset_id: format!("{prefix}{i}"),
                    kind,
                    images: per_domain,
                    width: 0,
                    height: 0,
                    identities: (per_domain / 4).clamp(1, 100),
                    test_images: 0,
                    test_identities: 0,
                    persons_per_image: default_persons(),
                    person_height: default_person_height(),
                    crop_size: default_crop_size(),
                    style: next_style(),
                });
            }
        }
        if target_train > 0 {
            domains.push(DomainSpec {
                dataset_id: "target".into(),
                kind: ManifestKind::PersonSearch,
                images: target_train,
                width: 80,
                height: 80,
                identities: (target_train / 2).clamp(4, 60),
                test_images: target_test,
                test_identities: (target_test / 2).clamp(2, 40),
                persons_per_image: [2, 4],
                person_height: default_person_height(),
                crop_size: default_crop_size(),
                style: Style::preset(7),
            });
        }
        SynthSpec { domains }
    }
}

/// Identity appearance table. Identity appearance is an ordered pair of
/// distinct torso and leg colors from a 12-color palette.
pub struct GlyphPalette;

const COLORS: [[f32; 3]; 12] = [
    [0.90, 0.10, 0.10],
    [0.95, 0.55, 0.05],
    [0.95, 0.90, 0.10],
    [0.10, 0.75, 0.15],
    [0.10, 0.85, 0.90],
    [0.10, 0.20, 0.90],
    [0.55, 0.10, 0.80],
    [0.95, 0.20, 0.70],
    [0.97, 0.97, 0.97],
    [0.05, 0.05, 0.05],
    [0.50, 0.30, 0.10],
    [0.55, 0.55, 0.55],
];

const SKIN: [[f32; 3]; 4] = [
    [0.96, 0.80, 0.65],
    [0.80, 0.60, 0.45],
    [0.55, 0.38, 0.25],
    [0.35, 0.24, 0.16],
];

#[derive(Clone, Copy, Debug)]
struct Appearance {
    torso: [f32; 3],
    legs: [f32; 3],
    head: [f32; 3],
    /// Width-to-height ratio of the glyph box.
    build: f64,
}

impl GlyphPalette {
    pub const fn capacity() -> usize {
        COLORS.len() * (COLORS.len() - 1)
    }

    fn appearance(slot: usize) -> Appearance {
        let n = COLORS.len();
        let torso = slot / (n - 1);
        let mut legs = slot % (n - 1);
        if legs >= torso {
            legs += 1;
        }
        Appearance {
            torso: COLORS[torso],
            legs: COLORS[legs],
            head: SKIN[slot % SKIN.len()],
            build: 0.38 + 0.04 * ((slot / 3) % 4) as f64,
        }
    }
}

fn domain_slots(seed: u64, dataset_id: &str) -> Vec<usize> {
    let mut slots: Vec<usize> = (0..GlyphPalette::capacity()).collect();
    slots.shuffle(&mut seed::rng(&[seed, seed::hash_str(dataset_id), u64::MAX]));
    slots
}

fn paint_background(img: &mut Image, style: &Style, rng: &mut ChaCha8Rng) {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (c, s) = (theta.cos(), theta.sin());
    let w = img.width() as f64;
    let [a, b] = style.background;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let u = (x as f64 * c + y as f64 * s) / w;
            let t = (0.5 + 0.5 * (std::f64::consts::TAU * style.texture_frequency * u + phase).sin()) as f32;
            img.set(
                x,
                y,
                [
                    a[0] + (b[0] - a[0]) * t,
                    a[1] + (b[1] - a[1]) * t,
                    a[2] + (b[2] - a[2]) * t,
                ],
            );
        }
    }
}

fn add_noise(img: &mut Image, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in img.data_mut() {
        *v = (*v + normal.sample(rng) as f32).clamp(0.0, 1.0);
    }
}

fn shade(c: [f32; 3], k: f32) -> [f32; 3] {
    [
        (c[0] * k).clamp(0.0, 1.0),
        (c[1] * k).clamp(0.0, 1.0),
        (c[2] * k).clamp(0.0, 1.0),
    ]
}

/// Render a glyph filling the integer rectangle `(x, y, w, h)` exactly: the
/// tight bounding box of the painted pixels is the rectangle itself.
fn draw_glyph(img: &mut Image, x: usize, y: usize, w: usize, h: usize, a: &Appearance, light: f32) {
    let r = (0.12 * h as f64).max(1.5).min(w as f64 / 2.0);
    let head_bottom = y + (2.0 * r).round() as usize;
    let torso_bottom = y + (0.58 * h as f64).round() as usize;
    let cx = x as f64 + w as f64 / 2.0;
    let cy = y as f64 + r;
    let leg_w = ((0.4 * w as f64).round() as usize).max(1);
    let (head, torso, legs) = (shade(a.head, light), shade(a.torso, light), shade(a.legs, light));
    for py in y..y + h {
        for px in x..x + w {
            let color = if py < head_bottom {
                let dx = px as f64 + 0.5 - cx;
                let dy = py as f64 + 0.5 - cy;
                // Keep the top row and center column painted so the
                // extent stays tight.
                let inside = dx * dx + dy * dy <= r * r
                    || (py == y && (px as f64 + 0.5 - cx).abs() < 1.0);
                inside.then_some(head)
            } else if py < torso_bottom {
                Some(torso)
            } else {
                (px < x + leg_w || px >= x + w - leg_w).then_some(legs)
            };
            if let Some(c) = color {
                img.set(px, py, c);
            }
        }
    }
}

fn glyph_size(rng: &mut ChaCha8Rng, a: &Appearance, heights: [u32; 2]) -> (usize, usize) {
    let h = rng.random_range(heights[0]..=heights[1].max(heights[0])) as usize;
    let w = ((h as f64 * a.build).round() as usize).max(3);
    (w, h)
}

struct Scene {
    image: Image,
    boxes: Vec<BBox>,
    identities: Vec<u64>,
}

fn render_scene(d: &DomainSpec, people: &[(u64, Appearance)], rng: &mut ChaCha8Rng) -> Scene {
    let (sw, sh) = (d.width as usize, d.height as usize);
    let mut image = Image::filled(sw, sh, [0.0; 3]);
    paint_background(&mut image, &d.style, rng);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut identities = Vec::new();
    for (id, a) in people {
        let (w, h) = glyph_size(rng, a, d.person_height);
        let (w, h) = (w.min(sw), h.min(sh));
        for _ in 0..64 {
            let x = rng.random_range(0..=sw - w);
            let y = rng.random_range(0..=sh - h);
            let b = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
            // One-pixel gutter keeps glyphs from touching.
            let grown = BBox::new(b.x0 - 1.0, b.y0 - 1.0, b.x1 + 1.0, b.y1 + 1.0);
            if boxes.iter().all(|o| o.intersection(&grown) == 0.0) {
                let light = rng.random_range(0.85..1.15);
                draw_glyph(&mut image, x, y, w, h, a, light);
                boxes.push(b);
                identities.push(*id);
                break;
            }
        }
    }
    add_noise(&mut image, d.style.noise, rng);
    Scene {
        image,
        boxes,
        identities,
    }
}

fn render_crop(d: &DomainSpec, a: &Appearance, rng: &mut ChaCha8Rng) -> Image {
    let jitter = |base: u32, rng: &mut ChaCha8Rng| {
        ((base as f64 * rng.random_range(0.85..1.15)).round() as usize).max(8)
    };
    let cw = jitter(d.crop_size[0], rng);
    let ch = jitter(d.crop_size[1], rng);
    let mut img = Image::filled(cw, ch, [0.0; 3]);
    paint_background(&mut img, &d.style, rng);
    let gh = ((ch as f64 * rng.random_range(0.8..0.92)).round() as usize).min(ch);
    let gw = ((gh as f64 * a.build).round() as usize).clamp(3, cw);
    let x = rng.random_range(0..=cw - gw);
    let y = rng.random_range(0..=ch - gh);
    let light = rng.random_range(0.85..1.15);
    draw_glyph(&mut img, x, y, gw, gh, a, light);
    add_noise(&mut img, d.style.noise, rng);
    img
}

fn check_domain(d: &DomainSpec) -> Result<(), CorpusError> {
    let err = |m: String| Err(CorpusError::Spec(format!("{}: {m}", d.dataset_id)));
    let needed = match d.kind {
        ManifestKind::Detection => 0,
        ManifestKind::PersonSearch => d.identities + d.test_identities,
        _ => d.identities,
    };
    if needed > GlyphPalette::capacity() {
        return err(format!(
            "{needed} identities exceed the glyph palette capacity of {}",
            GlyphPalette::capacity()
        ));
    }
    if d.kind != ManifestKind::Detection && d.identities == 0 {
        return err("identity count must be positive".into());
    }
    if d.kind.is_scene() {
        let [lo, hi] = d.persons_per_image;
        if lo > hi || hi == 0 {
            return err("persons_per_image must be a non-empty range".into());
        }
        if d.person_height[1] as usize >= d.height as usize || d.width < 8 {
            return err("scene too small for the person height range".into());
        }
    }
    if d.kind == ManifestKind::PersonSearch && d.test_images > 0 {
        if d.test_identities == 0 {
            return err("test_identities must be positive".into());
        }
        if d.persons_per_image[1] * d.test_images < 2 * d.test_identities {
            return err("test scenes cannot show every test identity twice".into());
        }
    }
    Ok(())
}

fn write_png(img: &Image, path: &Path) -> Result<(), CorpusError> {
    img.save_png(path).map_err(|e| CorpusError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn emit_scenes(
    out: &Path,
    dataset_id: &str,
    kind: ManifestKind,
    scenes: impl Iterator<Item = Scene>,
) -> Result<CorpusManifest, CorpusError> {
    let root = out.join(dataset_id);
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| CorpusError::io(&images, e))?;
    let mut records = Vec::new();
    for (i, s) in scenes.enumerate() {
        let rel = PathBuf::from(format!("images/{i:05}.png"));
        write_png(&s.image, &root.join(&rel))?;
        records.push(Record::Detection(DetectionRecord {
            image_path: rel,
            width: s.image.width() as u32,
            height: s.image.height() as u32,
            boxes: s.boxes,
            identities: (kind == ManifestKind::PersonSearch).then_some(s.identities),
            dataset_id: dataset_id.to_string(),
        }));
    }
    let m = CorpusManifest {
        dataset_id: dataset_id.to_string(),
        kind,
        records,
        root,
    };
    save_manifest(&m, &m.path())?;
    Ok(m)
}

/// Pick `count` distinct ids, preferring the front of `queue`.
fn schedule_people(
    queue: &mut Vec<u64>,
    pool: &[u64],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u64> {
    let mut chosen: Vec<u64> = Vec::new();
    let mut i = 0;
    while chosen.len() < count && i < queue.len() {
        if !chosen.contains(&queue[i]) {
            chosen.push(queue.remove(i));
        } else {
            i += 1;
        }
    }
    let mut rest: Vec<u64> = pool.iter().copied().filter(|p| !chosen.contains(p)).collect();
    rest.shuffle(rng);
    chosen.extend(rest.into_iter().take(count - chosen.len()));
    chosen
}

fn generate_domain(
    d: &DomainSpec,
    seed: u64,
    out: &Path,
) -> Result<Vec<CorpusManifest>, CorpusError> {
    check_domain(d)?;
    let slots = domain_slots(seed, &d.dataset_id);
    let key = seed::hash_str(&d.dataset_id);
    let look = |id: u64| GlyphPalette::appearance(slots[id as usize]);
    match d.kind {
        ManifestKind::Detection => {
            let scenes = (0..d.images).map(|i| {
                let mut rng = seed::rng(&[seed, key, i as u64]);
                let n = rng.random_range(d.persons_per_image[0]..=d.persons_per_image[1]);
                let people: Vec<_> = (0..n)
                    .map(|_| {
                        let slot = rng.random_range(0..GlyphPalette::capacity());
                        (0, GlyphPalette::appearance(slot))
                    })
                    .collect();
                render_scene(d, &people, &mut rng)
            });
            Ok(vec![emit_scenes(out, &d.dataset_id, d.kind, scenes)?])
        }
        ManifestKind::PersonSearch => {
            let train_pool: Vec<u64> = (0..d.identities as u64).collect();
            let test_pool: Vec<u64> =
                (d.identities as u64..(d.identities + d.test_identities) as u64).collect();
            let mut manifests = Vec::new();
            for (suffix, pool, count, salt) in [
                ("train", &train_pool, d.images, 0u64),
                ("test", &test_pool, d.test_images, 1u64),
            ] {
                if count == 0 {
                    continue;
                }
                let mut plan_rng = seed::rng(&[seed, key, salt, u64::MAX]);
                let mut order = pool.clone();
                order.shuffle(&mut plan_rng);
                // Every identity is queued twice so each appears in at
                // least two scenes.
                let mut queue: Vec<u64> = order.iter().chain(order.iter()).copied().collect();
                let mut plans = Vec::with_capacity(count);
                for i in 0..count {
                    let remaining = count - i;
                    let lo = d.persons_per_image[0]
                        .max(queue.len().div_ceil(remaining))
                        .min(d.persons_per_image[1]);
                    let n = plan_rng.random_range(lo..=d.persons_per_image[1]).min(pool.len());
                    plans.push(schedule_people(&mut queue, pool, n, &mut plan_rng));
                }
                let scenes = plans.into_iter().enumerate().map(|(i, ids)| {
                    let mut rng = seed::rng(&[seed, key, salt, i as u64]);
                    let people: Vec<_> = ids.iter().map(|&id| (id, look(id))).collect();
                    let scene = render_scene(d, &people, &mut rng);
                    debug_assert_eq!(scene.boxes.len(), scene.identities.len());
                    scene
                });
                let id = format!("{}_{suffix}", d.dataset_id);
                manifests.push(emit_scenes(out, &id, d.kind, scenes)?);
            }
            Ok(manifests)
        }
        ManifestKind::ReidLabeled | ManifestKind::ReidUnlabeled => {
            let root = out.join(&d.dataset_id);
            let images = root.join("images");
            fs::create_dir_all(&images).map_err(|e| CorpusError::io(&images, e))?;
            let mut records = Vec::with_capacity(d.images);
            for i in 0..d.images {
                let mut rng = seed::rng(&[seed, key, i as u64]);
                let id = match d.kind {
                    ManifestKind::ReidLabeled => (i % d.identities) as u64,
                    _ => rng.random_range(0..d.identities) as u64,
                };
                let img = render_crop(d, &look(id), &mut rng);
                let rel = PathBuf::from(format!("images/{i:05}.png"));
                write_png(&img, &root.join(&rel))?;
                records.push(Record::Reid(ReidRecord {
                    image_path: rel,
                    width: img.width() as u32,
                    height: img.height() as u32,
                    identity: (d.kind == ManifestKind::ReidLabeled).then_some(id),
                    dataset_id: d.dataset_id.clone(),
                }));
            }
            let m = CorpusManifest {
                dataset_id: d.dataset_id.clone(),
                kind: d.kind,
                records,
                root,
            };
            save_manifest(&m, &m.path())?;
            Ok(vec![m])
        }
    }
}

/// Render every domain of `spec` under `out/<dataset_id>/`. Output is a
/// pure function of `(spec, seed)`.
pub fn generate_synthetic_corpus(
    spec: &SynthSpec,
    seed: u64,
    out: &Path,
) -> Result<Vec<CorpusManifest>, CorpusError> {
    let mut seen = HashSet::new();
    for d in &spec.domains {
        if !seen.insert(d.dataset_id.as_str()) {
            return Err(CorpusError::Spec(format!(
                "duplicate dataset_id {:?}",
                d.dataset_id
            )));
        }
        check_domain(d)?;
    }
    fs::create_dir_all(out).map_err(|e| CorpusError::io(out, e))?;
    let mut all = Vec::new();
    for d in &spec.domains {
        all.extend(generate_domain(d, seed, out)?);
    }
    Ok(all)
}
