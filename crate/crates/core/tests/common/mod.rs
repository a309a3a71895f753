//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use hps_autograd::check::{numerical_grad, relative_error};
use hps_autograd::Tensor;
use hps_core::corpus::{generate_synthetic_corpus, CorpusManifest, ManifestKind, SynthSpec};
use hps_core::raster::Image;
use rand::Rng;

pub const FD_EPS: f64 = 1e-6;

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> Image {
    Image::from_raw(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0f32)).collect())
}

/// Relative error between an analytic gradient and central differences of
/// `f` at `x`.
pub fn fd_error(x: &Tensor, analytic: &Tensor, f: impl FnMut(&Tensor) -> f64) -> f64 {
    let numeric = numerical_grad(f, x, FD_EPS);
    relative_error(analytic, &numeric)
}

/// Desk corpus: `det` detection domains, one labeled and one unlabeled
/// re-ID domain, and a person-search target split in train and test.
pub fn desk_corpus(dir: &Path, det: usize, per_domain: usize, seed: u64) -> Vec<CorpusManifest> {
    generate_synthetic_corpus(&SynthSpec::desk(det, 1, 1, per_domain, 60, 40), seed, dir).expect("synthetic corpus")
}

pub fn paths(manifests: &[CorpusManifest], keep: impl Fn(&CorpusManifest) -> bool) -> Vec<PathBuf> {
    manifests.iter().filter(|m| keep(m)).map(|m| m.path()).collect()
}

pub fn sources(m: &CorpusManifest) -> bool {
    m.kind != ManifestKind::PersonSearch
}

pub fn target_train(m: &CorpusManifest) -> bool {
    m.kind == ManifestKind::PersonSearch && m.dataset_id.ends_with("_train")
}

pub fn target_test(m: &CorpusManifest) -> bool {
    m.kind == ManifestKind::PersonSearch && m.dataset_id.ends_with("_test")
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
