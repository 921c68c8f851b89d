//! Gradient-check cases for every differentiable primitive, and a sampled
//! check of the whole toy network.
#![allow(dead_code)]

use kneegrade_core::autodiff::NormMode;
use kneegrade_core::backbone::{build_network, network_forward, ForwardOptions, NetworkConfig};
use kneegrade_core::kernels::PoolMode;
use kneegrade_core::objective::{default_penalty_matrix, loss_on_logits, LossKind};
use kneegrade_core::params::{Forward, ParamKind, ParamStore};
use kneegrade_core::Tensor;
use rand::Rng;

use super::{gradcheck, random_tensor, rng, weighted_sum, Builder};

pub const TOL: f64 = 1e-4;
pub const BN_TOL: f64 = 1e-3;

pub struct GradCase {
    pub name: String,
    pub tol: f64,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Builder<'static>>,
}

impl GradCase {
    pub fn error(&self) -> f64 {
        gradcheck(&*self.build, &self.inputs)
    }
}

fn case(
    name: impl Into<String>,
    tol: f64,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut kneegrade_core::Graph<f64>, &[kneegrade_core::Var]) -> kneegrade_core::Result<kneegrade_core::Var> + 'static,
) -> GradCase {
    GradCase {
        name: name.into(),
        tol,
        inputs,
        build: Box::new(build),
    }
}

pub fn primitive_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    let mut r = rng(1);

    let x = random_tensor(&mut r, &[1, 2, 5, 5]);
    let k = random_tensor(&mut r, &[3, 2, 3, 3]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        out.push(case(format!("conv2d s{stride} p{pad}"), TOL, vec![x.clone(), k.clone()], move |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad)?;
            weighted_sum(g, y, 9)
        }));
    }
    let xb = random_tensor(&mut r, &[3, 2, 4, 4]);
    let kb = random_tensor(&mut r, &[2, 2, 1, 1]);
    out.push(case("conv2d batched 1x1", TOL, vec![xb, kb], |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 0)?;
        weighted_sum(g, y, 3)
    }));

    for factor in [2, 4, 8] {
        let x = random_tensor(&mut r, &[1, 2, 3, 3]);
        out.push(case(format!("bilinear upsample x{factor}"), TOL, vec![x], move |g, v| {
            let y = g.bilinear_upsample(v[0], factor)?;
            weighted_sum(g, y, 4)
        }));
    }

    let x = random_tensor(&mut r, &[2, 3, 4, 4]);
    for mode in [PoolMode::Avg, PoolMode::Max] {
        out.push(case(format!("global {mode:?} pool"), TOL, vec![x.clone()], move |g, v| {
            let y = g.global_pool(v[0], mode)?;
            weighted_sum(g, y, 6)
        }));
        out.push(case(format!("channel {mode:?} pool"), TOL, vec![x.clone()], move |g, v| {
            let y = g.channel_pool(v[0], mode)?;
            weighted_sum(g, y, 7)
        }));
        out.push(case(format!("2x2 {mode:?} pool"), TOL, vec![x.clone()], move |g, v| {
            let y = g.pool2d(v[0], mode, 2, 2)?;
            weighted_sum(g, y, 8)
        }));
    }

    let (x, w, b) = (random_tensor(&mut r, &[2, 4]), random_tensor(&mut r, &[3, 4]), random_tensor(&mut r, &[3]));
    out.push(case("dense", TOL, vec![x, w, b], |g, v| {
        let y = g.dense(v[0], v[1], Some(v[2]))?;
        weighted_sum(g, y, 10)
    }));

    let x = random_tensor(&mut r, &[2, 3, 2, 2]);
    let cmap = random_tensor(&mut r, &[2, 3, 1, 1]);
    let smap = random_tensor(&mut r, &[2, 1, 2, 2]);
    out.push(case("broadcast mul/add, sigmoid, relu", TOL, vec![x.clone(), cmap, smap], |g, v| {
        let a = g.mul(v[0], v[1])?;
        let b = g.mul(a, v[2])?;
        let c = g.add(b, v[1])?;
        let s = g.sigmoid(c)?;
        let rl = g.relu(v[0])?;
        let d = g.add(s, rl)?;
        weighted_sum(g, d, 12)
    }));
    out.push(case("reshape", TOL, vec![x], |g, v| {
        let y = g.reshape(v[0], &[2, 12])?;
        weighted_sum(g, y, 13)
    }));

    let x = random_tensor(&mut r, &[3, 5]);
    out.push(case("softmax", TOL, vec![x], |g, v| {
        let p = g.softmax(v[0])?;
        weighted_sum(g, p, 14)
    }));

    let (a, b) = (random_tensor(&mut r, &[2, 1, 3, 3]), random_tensor(&mut r, &[2, 2, 3, 3]));
    out.push(case("concat channels", TOL, vec![a, b], |g, v| {
        let y = g.concat_channels(&[v[0], v[1]])?;
        weighted_sum(g, y, 16)
    }));

    let x = random_tensor(&mut r, &[3, 2, 3, 3]);
    let gamma = random_tensor(&mut r, &[2]);
    let beta = random_tensor(&mut r, &[2]);
    out.push(case("batchnorm train", BN_TOL, vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Train)?;
        weighted_sum(g, y, 18)
    }));
    out.push(case("batchnorm eval", BN_TOL, vec![x, gamma, beta], |g, v| {
        let (mean, var) = ([0.3, -0.2], [0.5, 2.0]);
        let (y, _) = g.batch_norm(v[0], v[1], v[2], NormMode::Eval { mean: &mean, var: &var })?;
        weighted_sum(g, y, 19)
    }));

    let logits = random_tensor(&mut r, &[4, 5]);
    let penalty = default_penalty_matrix();
    out.push(case("ordinal loss via softmax", TOL, vec![logits.clone()], move |g, v| {
        loss_on_logits(g, v[0], &[0, 2, 4, 1], LossKind::Ordinal, &penalty)
    }));
    out.push(case("cross entropy via softmax", TOL, vec![logits], |g, v| {
        let p = g.softmax(v[0])?;
        g.cross_entropy(p, &[0, 2, 4, 1])
    }));
    out
}

fn network_loss(config: &NetworkConfig, params: &ParamStore<f64>, images: &Tensor<f64>, targets: &[usize]) -> f64 {
    let mut fw = Forward::new(params, true).frozen();
    let x = fw.graph.constant(images.clone());
    let logits = network_forward(&mut fw, config, x, ForwardOptions::train()).expect("forward");
    let loss = loss_on_logits(&mut fw.graph, logits, targets, LossKind::Ordinal, &default_penalty_matrix()).expect("loss");
    fw.graph.value(loss).data()[0]
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of the toy network's batch ordinal loss, over one random
/// coordinate of every trainable tensor.
pub fn network_gradcheck(seed: u64) -> (f64, usize) {
    let config = NetworkConfig::toy();
    let params = build_network::<f64>(&config, seed).expect("build");
    let mut r = rng(seed);
    let s = config.input_size;
    let images = random_tensor(&mut r, &[2, config.in_channels, s, s]);
    let targets = [1usize, 3];

    let mut fw = Forward::new(&params, true);
    let x = fw.graph.constant(images.clone());
    let logits = network_forward(&mut fw, &config, x, ForwardOptions::train()).expect("forward");
    let loss = loss_on_logits(&mut fw.graph, logits, &targets, LossKind::Ordinal, &default_penalty_matrix()).expect("loss");
    fw.graph.backward(loss).expect("backward");
    let analytic = fw.param_grads();

    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, grad) in &analytic {
        assert_eq!(params.get(name).map(|p| p.kind), Some(ParamKind::Trainable));
        let j = r.random_range(0..grad.numel());
        let mut plus = params.clone();
        plus.get_mut(name).unwrap().value.data_mut()[j] += step;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().value.data_mut()[j] -= step;
        let numeric = (network_loss(&config, &plus, &images, &targets) - network_loss(&config, &minus, &images, &targets)) / (2.0 * step);
        let a = grad.data()[j];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        checked += 1;
    }
    (worst, checked)
}
