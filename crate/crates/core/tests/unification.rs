mod common;

use std::collections::HashMap;

use hps_core::corpus::{ManifestKind, Record, SynthSpec};
use hps_core::trainer::{sample_batch, unify_sample, BatchComposition, Corpus, Role, TrainConfig};
use hps_core::unification::{
    expand_resize, make_view_pair, AugmentConfig, DomainRegistry, IdentityAllocator, SubTask,
};
use proptest::prelude::*;

fn small_corpus(dir: &std::path::Path) -> Corpus {
    let manifests =
        hps_core::corpus::generate_synthetic_corpus(&SynthSpec::desk(2, 1, 1, 7, 0, 0), 5, dir).unwrap();
    Corpus::from_manifests(manifests).unwrap()
}

#[test]
fn view_pairs_keep_identities_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = TrainConfig::desk();
    let registry = DomainRegistry::from_manifests(&corpus.manifests);
    let mut alloc = IdentityAllocator::new();
    alloc.reserve(&corpus.manifests);
    let refs = sample_batch(&corpus, &cfg.trainer.batch, 0, 1).unwrap();
    let size = cfg.model.image_size as f64;
    let aug = AugmentConfig::default();
    for r in &refs {
        let s = unify_sample(&corpus, r, &cfg, &mut alloc, &registry).unwrap();
        for seed in 0..1000 {
            let pair = make_view_pair(&s, seed, &aug);
            for v in [&pair.view1, &pair.view2] {
                assert_eq!((v.image.width(), v.image.height()), (s.image.width(), s.image.height()));
                assert_eq!(v.boxes.len(), v.identities.len());
                for b in &v.boxes {
                    assert!(b.is_valid_in(size, size), "{b:?}");
                }
            }
            for &(i, j) in &pair.correspondence {
                assert_eq!(pair.view1.identities[i], pair.view2.identities[j]);
            }
        }
    }
}

#[test]
fn domain_label_depends_only_on_dataset_id() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let a = DomainRegistry::from_manifests(&corpus.manifests);
    let b = DomainRegistry::from_manifests(corpus.manifests.iter().chain(&corpus.manifests));
    for m in &corpus.manifests {
        let task = if m.kind.is_scene() { SubTask::DetectionSource } else { SubTask::ReidSource };
        let la = a.label(&m.dataset_id, task).unwrap();
        assert_eq!(la, a.label(&m.dataset_id, task).unwrap());
        assert_eq!(la, b.label(&m.dataset_id, task).unwrap());
    }
    assert!(a.label("unknown", SubTask::ReidSource).is_err());
    assert_eq!(a.detection_domains().len(), 2);
    assert_eq!(a.reid_domains().len(), 2);
}

#[test]
fn expand_resize_spans_at_least_two_scales() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let m = corpus.domains(Role::ReidLabeled)[0];
    let registry = DomainRegistry::from_manifests(&corpus.manifests);
    let mut alloc = IdentityAllocator::new();
    let Record::Reid(rec) = &corpus.manifests[m].records[0] else { panic!("crop record") };
    let crop = corpus.image(m, 0);
    let heights: Vec<f64> = (0..200)
        .map(|k| {
            let ratio = 1.0 + 2.0 * k as f64 / 199.0;
            let s = expand_resize(rec, crop, 0, &mut alloc, &registry, ratio, (0.5, 0.5), 64).unwrap();
            s.boxes[0].height()
        })
        .collect();
    let (lo, hi) = heights.iter().fold((f64::MAX, 0.0f64), |(a, b), &h| (a.min(h), b.max(h)));
    assert!(hi >= 2.0 * lo, "box heights {lo}..{hi}");
}

#[test]
fn sampler_honors_composition_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let comp = BatchComposition { detection: 2, reid_labeled: 1, reid_unlabeled: 1, target: 0 };
    let batch = sample_batch(&corpus, &comp, 3, 9).unwrap();
    let roles: Vec<Role> = batch.iter().map(|r| r.role).collect();
    assert_eq!(roles, [Role::Detection, Role::Detection, Role::ReidLabeled, Role::ReidUnlabeled]);
    for r in &batch {
        assert_eq!(Role::of(corpus.manifests[r.manifest].kind), r.role);
    }
    assert_eq!(batch, sample_batch(&corpus, &comp, 3, 9).unwrap());
    assert_ne!(batch, sample_batch(&corpus, &comp, 4, 9).unwrap());

    let with_target = BatchComposition { target: 1, ..comp };
    assert!(sample_batch(&corpus, &with_target, 0, 0).is_err());
}

#[test]
fn one_epoch_visits_domains_proportionally() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let comp = BatchComposition { detection: 3, ..BatchComposition::default() };
    // 2 domains of 7 records each: 14 draws make one epoch over both
    let mut per_domain: HashMap<usize, usize> = HashMap::new();
    let mut per_record: HashMap<(usize, usize), usize> = HashMap::new();
    let draws: Vec<_> = (0..5).flat_map(|s| sample_batch(&corpus, &comp, s, 2).unwrap()).take(14).collect();
    for r in &draws {
        *per_domain.entry(r.manifest).or_default() += 1;
        *per_record.entry((r.manifest, r.record)).or_default() += 1;
    }
    for &c in per_domain.values() {
        assert!(c.abs_diff(7) <= 1, "{per_domain:?}");
    }
    assert!(per_record.values().all(|&c| c == 1), "a record repeated within an epoch");
}

#[test]
fn identities_are_stable_across_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = TrainConfig::desk();
    let registry = DomainRegistry::from_manifests(&corpus.manifests);
    let mut alloc = IdentityAllocator::new();
    alloc.reserve(&corpus.manifests);
    let size = alloc.len();
    let mut seen: HashMap<(usize, usize), Vec<u64>> = HashMap::new();
    for step in 0..30 {
        for r in sample_batch(&corpus, &cfg.trainer.batch, step, 0).unwrap() {
            let s = unify_sample(&corpus, &r, &cfg, &mut alloc, &registry).unwrap();
            let ids = seen.entry((r.manifest, r.record)).or_insert_with(|| s.identities.clone());
            assert_eq!(*ids, s.identities);
            let kind = corpus.manifests[r.manifest].kind;
            assert_eq!(s.sub_task == SubTask::DetectionSource, kind == ManifestKind::Detection);
        }
    }
    assert_eq!(alloc.len(), size, "sampling grew the reserved id space");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn view_pairs_under_any_augment_config(
        seed in any::<u64>(),
        crop_min in 0.3..1.0f64,
        flip in any::<bool>(),
        crop_detection in any::<bool>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let manifests = hps_core::corpus::generate_synthetic_corpus(&SynthSpec::desk(1, 0, 0, 1, 0, 0), seed % 7, dir.path()).unwrap();
        let corpus = Corpus::from_manifests(manifests).unwrap();
        let registry = DomainRegistry::from_manifests(&corpus.manifests);
        let mut alloc = IdentityAllocator::new();
        let Record::Detection(rec) = &corpus.manifests[0].records[0] else { panic!("scene") };
        let s = hps_core::unification::unify_detection(rec, corpus.image(0, 0), 0, &mut alloc, &registry, 64).unwrap();
        let aug = AugmentConfig { crop_min_scale: crop_min, flip, crop_detection, ..AugmentConfig::default() };
        let pair = make_view_pair(&s, seed, &aug);
        for v in [&pair.view1, &pair.view2] {
            for b in &v.boxes {
                prop_assert!(b.is_valid_in(64.0, 64.0));
            }
        }
        for &(i, j) in &pair.correspondence {
            prop_assert_eq!(pair.view1.identities[i], pair.view2.identities[j]);
        }
    }
}
