//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use kneegrade_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Worst elementwise relative error between two gradients, with a small
/// floor so exact zeros compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Builds `f` on fresh graphs. `inputs` become trainable leaves; `f` must
/// return a scalar.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn eval(f: &Builder<'_>, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    g.value(out).data()[0]
}

/// Central finite differences of `f` with respect to every input entry.
pub fn numeric_grads(f: &Builder<'_>, inputs: &[Tensor<f64>], step: f64) -> Vec<Vec<f64>> {
    let mut result = Vec::new();
    for i in 0..inputs.len() {
        let mut grads = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= step;
            grads.push((eval(f, &plus) - eval(f, &minus)) / (2.0 * step));
        }
        result.push(grads);
    }
    result
}

pub fn analytic_grads(f: &Builder<'_>, inputs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(grad) => grad.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over all inputs.
pub fn gradcheck(f: &Builder<'_>, inputs: &[Tensor<f64>]) -> f64 {
    let analytic = analytic_grads(f, inputs);
    let numeric = numeric_grads(f, inputs, 1e-5);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Reduces `v` to a scalar through a fixed random weighting so that no
/// gradient component is trivially constant.
pub fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let w = random_tensor(&mut r, g.value(v).shape());
    let w = g.constant(w);
    let prod = g.mul(v, w)?;
    g.sum(prod)
}
pub mod cases;
pub mod oracles;
pub mod criteria;
