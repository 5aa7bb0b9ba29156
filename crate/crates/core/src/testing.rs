//! Finite-difference gradient checking against the tape.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Norm-wise relative error `|a - b| / max(|a|, |b|)` between two gradient
/// vectors; `0` when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>();
    let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>();
    let denom = num_traits::Float::sqrt(na.max(nb));
    if denom < 1e-300 {
        0.0
    } else {
        num_traits::Float::sqrt(diff) / denom
    }
}

/// Checks gradients of `f` with respect to each input tensor by central
/// differences with step `h`. Returns one relative error per input.
pub fn check_input_gradients(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| alloc::vec![0.0; inputs[k].numel()]);
        let mut numeric = Vec::with_capacity(inputs[k].numel());
        let mut work = inputs.to_vec();
        for e in 0..inputs[k].numel() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + h;
            let fp = eval(&work);
            work[k].data_mut()[e] = orig - h;
            let fm = eval(&work);
            work[k].data_mut()[e] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    errors
}

/// Checks gradients of `f` with respect to every trainable parameter of
/// `store`; returns `(parameter name, relative error)` pairs.
pub fn check_param_gradients(
    store: &ParamStore<f64>,
    h: f64,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) -> Vec<(alloc::string::String, f64)> {
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss);
    let pg = g.param_grads(&grads, store);
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.trainable_ids() {
        let n = store.get(id).numel();
        let analytic = pg[id.index()].as_ref().map(|t| t.data().to_vec()).unwrap_or_else(|| alloc::vec![0.0; n]);
        let mut numeric = Vec::with_capacity(n);
        for e in 0..n {
            let orig = work.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + h;
            let mut gp = Graph::new();
            let lp = f(&mut gp, &work);
            let fp = gp.value(lp).item();
            work.get_mut(id).data_mut()[e] = orig - h;
            let mut gm = Graph::new();
            let lm = f(&mut gm, &work);
            let fm = gm.value(lm).item();
            work.get_mut(id).data_mut()[e] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
        out.push((alloc::string::String::from(store.name(id)), relative_error(&analytic, &numeric)));
    }
    out
}

/// `sum(out * weights)` with fixed pseudo-random weights, turning any
/// tensor-valued output into a scalar that exercises every element.
pub fn random_projection(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let w: Vec<f64> = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    let w = Tensor::from_vec(&shape, w).expect("shape");
    let p = g.mul_const(out, w);
    g.sum_all(p)
}
