#![allow(dead_code)]

use faultformer::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap().with_requires_grad(true)
}

/// Relative difference used by every gradient check.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central differences (h = 1e-4) against the tape gradient of every input
/// element; returns the worst relative error.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let h = 1e-4;
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t)).collect();
        let root = f(&mut g, &vars);
        g.scalar(root)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let root = f(&mut g, &vars);
    let grads = g.backward(root).unwrap();
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).expect("input gradient").to_vec();
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Central-difference check of `n` randomly chosen parameter entries of
/// `store`; `f` builds the scalar loss on a graph over the store.
pub fn param_gradcheck(
    store: &mut ParamStore,
    n: usize,
    rng: &mut impl Rng,
    f: impl Fn(&mut Graph) -> Var,
) -> f64 {
    let h = 1e-4;
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::with_params(store);
        let root = f(&mut g);
        let grads = g.backward(root).unwrap();
        grads.param_grads().map(|(id, gr)| (id, gr.to_vec())).collect()
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::with_params(s);
        let root = f(&mut g);
        g.scalar(root)
    };
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (id, grad) = &analytic[rng.random_range(0..analytic.len())];
        let j = rng.random_range(0..grad.len());
        let orig = store.get(*id).data()[j];
        store.get_mut(*id).data_mut()[j] = orig + h;
        let up = eval(store);
        store.get_mut(*id).data_mut()[j] = orig - h;
        let down = eval(store);
        store.get_mut(*id).data_mut()[j] = orig;
        worst = worst.max(rel_err(grad[j], (up - down) / (2.0 * h)));
    }
    worst
}

/// Reduces any node to a scalar with fixed random weights so every output
/// element contributes a distinct amount to the root.
pub fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
    let n = g.value(v).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wv = g.constant(g.shape(v).to_vec().as_slice(), w).unwrap();
    let prod = g.mul(v, wv).unwrap();
    g.sum(prod)
}
