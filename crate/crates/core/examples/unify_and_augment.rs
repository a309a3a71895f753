//! Turn re-ID crops and detection scenes into unified samples, then draw
//! two augmented views of each. Images are written as PNGs.
//!
//! cargo run --release --example unify_and_augment -- [out_dir]

use std::path::PathBuf;

use anyhow::{Context, Result};
use hps_core::corpus::{generate_synthetic_corpus, ManifestKind, SynthSpec};
use hps_core::raster::Image;
use hps_core::unification::{
    expand_resize, make_view_pair, random_paste, unify_detection, AugmentConfig, DomainRegistry,
    IdentityAllocator, UnifiedSample,
};

fn draw_boxes(s: &UnifiedSample) -> Image {
    let mut img = s.image.clone();
    for b in &s.boxes {
        let (x0, y0) = (b.x0.max(0.0) as usize, b.y0.max(0.0) as usize);
        let x1 = (b.x1 as usize).min(img.width() - 1);
        let y1 = (b.y1 as usize).min(img.height() - 1);
        for x in x0..=x1 {
            img.set(x, y0, [1.0, 0.0, 0.0]);
            img.set(x, y1, [1.0, 0.0, 0.0]);
        }
        for y in y0..=y1 {
            img.set(x0, y, [1.0, 0.0, 0.0]);
            img.set(x1, y, [1.0, 0.0, 0.0]);
        }
    }
    img
}

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hps_unify"));
    let manifests = generate_synthetic_corpus(&SynthSpec::desk(1, 1, 0, 8, 0, 0), 3, &out.join("corpus"))?;
    let registry = DomainRegistry::from_manifests(&manifests);
    let mut alloc = IdentityAllocator::new();
    alloc.reserve(&manifests);
    let size = 64;

    let mut samples = Vec::new();
    for m in &manifests {
        let image = m.load_image(0)?;
        match m.kind {
            ManifestKind::Detection => {
                let rec = m.detection(0).context("scene record")?;
                samples.push(("scene", unify_detection(rec, &image, 0, &mut alloc, &registry, size)?));
            }
            _ => {
                let rec = m.reid(0).context("crop record")?;
                let er = expand_resize(rec, &image, 0, &mut alloc, &registry, 2.0, (0.25, 0.75), size)?;
                samples.push(("expand_resize", er));
                let pos = ((size - image.width()) as f64 / 2.0, 0.0);
                samples.push(("random_paste", random_paste(rec, &image, 0, &mut alloc, &registry, pos, size)?));
            }
        }
    }

    let aug = AugmentConfig::default();
    for (name, s) in &samples {
        println!(
            "{name:14} domain {} boxes {:?} ids {:?}",
            s.domain_label, s.boxes, s.identities
        );
        draw_boxes(s).save_png(&out.join(format!("{name}.png")))?;
        let pair = make_view_pair(s, 11, &aug);
        pair.view1.image.save_png(&out.join(format!("{name}_view1.png")))?;
        pair.view2.image.save_png(&out.join(format!("{name}_view2.png")))?;
        println!("{:14} correspondence {:?}", "", pair.correspondence);
    }
    println!("images in {}", out.display());
    Ok(())
}
