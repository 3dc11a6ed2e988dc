#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;
pub mod reference;

use pptformer::params::{ParamBuilder, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds a module into a fresh f64 store with a fixed seed.
pub fn build<M>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> pptformer::Result<M>) -> (M, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        f(&mut pb).unwrap()
    };
    (m, store)
}

/// Overwrites every parameter with uniform values in `[-scale, scale)` so
/// that no gradient path is degenerate (e.g. unit norm weights, zero gates).
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut lcg = oracle::Lcg(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let temperature = store.name(id).ends_with("alpha");
        for v in store.get_mut(id).data_mut() {
            let r = scale * (2.0 * lcg.next() - 1.0);
            *v = if temperature { 0.5 + r.abs() } else { r };
        }
    }
}

/// Runs `f` on a fresh graph over `store` and returns the output value.
pub fn run(
    store: &ParamStore<f64>,
    inputs: &[pptformer::Tensor<f64>],
    f: impl FnOnce(&mut pptformer::autograd::Graph<'_, f64>, &[pptformer::autograd::NodeId]) -> pptformer::Result<pptformer::autograd::NodeId>,
) -> pptformer::Tensor<f64> {
    let mut g = pptformer::autograd::Graph::with_params(store);
    let ids: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &ids).unwrap();
    g.value(out).clone()
}

pub fn set_param(store: &mut ParamStore<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let t = store.by_name_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}
