#![allow(dead_code)]

use poster_core::params::{ParamSpec, ParamStore};
use poster_core::Tensor;
use poster_testkit::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameters for `specs` with every entry (gammas included) drawn from
/// `N(0, std²)`, so oracle comparisons exercise non-trivial values.
pub fn random_store(specs: &[ParamSpec], std: f64, seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    for s in specs {
        store.insert(s.name.clone(), Tensor::randn(s.shape.clone(), std, &mut r));
    }
    store
}

pub fn lookup(store: &ParamStore) -> impl Fn(&str) -> (Vec<usize>, Vec<f64>) + '_ {
    move |name| {
        let t = store.get(name).unwrap_or_else(|e| panic!("{e}"));
        (t.shape().to_vec(), t.data().to_vec())
    }
}

/// Splits a `[B, P, D]` tensor into per-sample row matrices.
pub fn samples(t: &Tensor) -> Vec<Mat> {
    let s = t.shape();
    assert_eq!(s.len(), 3);
    let per = s[1] * s[2];
    t.data()
        .chunks(per)
        .map(|c| poster_testkit::to_mat(s[1], s[2], c))
        .collect()
}

/// Largest absolute entry-wise difference between two matrices.
pub fn mat_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| {
            assert_eq!(r.len(), s.len());
            r.iter().zip(s).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}
