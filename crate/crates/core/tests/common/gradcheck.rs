//! Central finite-difference gradient checking at double precision.

#![allow(dead_code)]

use pptformer::autograd::{Graph, NodeId};
use pptformer::params::ParamStore;
use pptformer::{Result, Tensor};

use super::oracle::Lcg;

pub const STEP: f64 = 1e-5;
/// Denominator floor so gradients that are zero analytically compare by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares analytic and numeric gradients of `sum(weights * build(inputs))`
/// with respect to every input element and every element of every parameter
/// whose name passes `param_filter`.
pub fn check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: F, param_filter: impl Fn(&str) -> bool) -> GradReport
where
    F: Fn(&mut Graph<'_, f64>, &[NodeId]) -> Result<NodeId>,
{
    let weights = {
        let mut g = Graph::with_params(store);
        let ids: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids).unwrap();
        Lcg(0x5eed).tensor_signed(g.shape(out))
    };
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::with_params(store);
        let ids: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids).unwrap();
        let s = g.weighted_sum(out, weights.clone()).unwrap();
        g.value(s).data()[0]
    };

    let mut g = Graph::with_params(store);
    let ids: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids).unwrap();
    let s = g.weighted_sum(out, weights.clone()).unwrap();
    let grads = g.backward(s).unwrap();

    let mut report = GradReport { max_rel: 0.0, worst: String::new(), checked: 0 };
    let note = |r: f64, what: String, report: &mut GradReport| {
        report.checked += 1;
        if r > report.max_rel {
            report.max_rel = r;
            report.worst = what;
        }
    };

    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for e in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= STEP;
            let num = (eval(store, &plus) - eval(store, &minus)) / (2.0 * STEP);
            let a = analytic.data()[e];
            note(rel(a, num), format!("input {k}[{e}]: analytic {a:e} numeric {num:e}"), &mut report);
        }
    }

    let mut work = store.clone();
    let pids: Vec<_> = store.ids().filter(|&p| param_filter(store.name(p))).collect();
    for p in pids {
        let name = store.name(p).to_string();
        let analytic = grads.param(p).cloned().unwrap_or_else(|| Tensor::zeros(store.get(p).shape()));
        for e in 0..store.get(p).len() {
            let orig = work.get(p).data()[e];
            work.get_mut(p).data_mut()[e] = orig + STEP;
            let fp = eval(&work, inputs);
            work.get_mut(p).data_mut()[e] = orig - STEP;
            let fm = eval(&work, inputs);
            work.get_mut(p).data_mut()[e] = orig;
            let num = (fp - fm) / (2.0 * STEP);
            let a = analytic.data()[e];
            note(rel(a, num), format!("{name}[{e}]: analytic {a:e} numeric {num:e}"), &mut report);
        }
    }
    report
}
