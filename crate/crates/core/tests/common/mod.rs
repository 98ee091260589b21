#![allow(dead_code)]

//! Test-only oracles. Nothing here calls into the code paths it checks except to
//! evaluate forward values.

use gatenet::graph::{Graph, NodeId, ParamSet};
use gatenet::kernels::{Mode, RunningStats};
use gatenet::model::{ContextInput, ContextRows, GateNetConfig, Model, ModelConfig};
use gatenet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-6;
/// Gradient components below this magnitude are compared in absolute terms:
/// central differences carry ≈ ε·|loss|/h ≈ 1e-10 of round-off, which would swamp
/// a relative comparison of near-zero gradients.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub type Forward<'a> = dyn Fn(&ParamSet, &[Tensor], &mut Graph) -> (NodeId, Vec<NodeId>) + 'a;

/// Max relative error between backprop gradients and central differences,
/// over every parameter element and every element of `inputs`.
pub fn grad_check(params: &mut ParamSet, inputs: &mut [Tensor], f: &Forward<'_>) -> f64 {
    let mut g = Graph::new();
    let (loss, input_nodes) = f(params, inputs, &mut g);
    params.zero_grad();
    g.backward(loss, params).expect("backward");
    let param_grads: Vec<Tensor> = params.iter().map(|p| p.grad.clone()).collect();
    let input_grads: Vec<Option<Tensor>> = input_nodes.iter().map(|&n| g.input_grad(n).cloned()).collect();

    let eval = |params: &ParamSet, inputs: &[Tensor]| {
        let mut g = Graph::new();
        let (loss, _) = f(params, inputs, &mut g);
        g.value(loss).data()[0]
    };

    let mut worst: f64 = 0.0;
    for pi in 0..params.len() {
        let n = params.get(gatenet::graph::ParamId(pi)).value.len();
        for j in 0..n {
            let id = gatenet::graph::ParamId(pi);
            let orig = params.get(id).value.data()[j];
            params.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let up = eval(params, inputs);
            params.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let down = eval(params, inputs);
            params.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(param_grads[pi].data()[j], numeric));
        }
    }
    for ii in 0..inputs.len() {
        let Some(Some(analytic)) = input_grads.get(ii) else { continue };
        for j in 0..inputs[ii].len() {
            let orig = inputs[ii].data()[j];
            inputs[ii].data_mut()[j] = orig + FD_STEP;
            let up = eval(params, inputs);
            inputs[ii].data_mut()[j] = orig - FD_STEP;
            let down = eval(params, inputs);
            inputs[ii].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Per-kernel checks for one random configuration; returns the worst error.
pub fn kernel_grad_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..9);
    let c_in = rng.random_range(1..9);
    let c_out = rng.random_range(1..9);
    let mut out = Vec::new();

    // linear / pointwise conv
    {
        let mut ps = ParamSet::new();
        let w = ps.add("w", random_tensor(&mut rng, &[c_out, c_in], 1.0));
        let b = ps.add("b", random_tensor(&mut rng, &[c_out], 1.0));
        let coef = random_tensor(&mut rng, &[n, c_out], 1.0);
        let mut inputs = vec![random_tensor(&mut rng, &[n, c_in], 2.0)];
        let f = move |ps: &ParamSet, xs: &[Tensor], g: &mut Graph| {
            let x = g.input(xs[0].clone());
            let y = g.linear(ps, x, w, b).unwrap();
            (g.weighted_sum(y, coef.clone()).unwrap(), vec![x])
        };
        out.push(("linear", grad_check(&mut ps, &mut inputs, &f)));
    }

    // batchnorm in batch-statistics mode, plain and multiplicity-weighted, and eval mode
    for (name, mode, weighted) in [
        ("batchnorm", Mode::BatchStats, false),
        ("batchnorm_weighted", Mode::BatchStats, true),
        ("batchnorm_eval", Mode::Eval, false),
    ] {
        let mut ps = ParamSet::new();
        let gamma = ps.add("gamma", random_tensor(&mut rng, &[c_in], 1.5));
        let shift = ps.add("shift", random_tensor(&mut rng, &[c_in], 1.0));
        let coef = random_tensor(&mut rng, &[n, c_in], 1.0);
        let weights: Option<Vec<f64>> = weighted.then(|| (0..n).map(|_| rng.random_range(1..4) as f64).collect());
        let mut running = RunningStats::new(c_in);
        running.mean = (0..c_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        running.var = (0..c_in).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut inputs = vec![random_tensor(&mut rng, &[n, c_in], 2.0)];
        let f = move |ps: &ParamSet, xs: &[Tensor], g: &mut Graph| {
            let x = g.input(xs[0].clone());
            let y = g.batchnorm(ps, x, gamma, shift, (0, &running), mode, weights.clone()).unwrap();
            (g.weighted_sum(y, coef.clone()).unwrap(), vec![x])
        };
        out.push((name, grad_check(&mut ps, &mut inputs, &f)));
    }

    // relu: keep inputs away from the kink
    {
        let mut ps = ParamSet::new();
        let coef = random_tensor(&mut rng, &[n, c_in], 1.0);
        let mut x = random_tensor(&mut rng, &[n, c_in], 2.0);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        let mut inputs = vec![x];
        let f = move |_: &ParamSet, xs: &[Tensor], g: &mut Graph| {
            let x = g.input(xs[0].clone());
            let y = g.relu(x);
            (g.weighted_sum(y, coef.clone()).unwrap(), vec![x])
        };
        out.push(("relu", grad_check(&mut ps, &mut inputs, &f)));
    }

    // gather-mean pooling, concat, softmax
    {
        let k = rng.random_range(1..6);
        let b = rng.random_range(1..5);
        let index: Vec<u32> = (0..b * k).map(|_| rng.random_range(0..n as u32)).collect();
        let mut ps = ParamSet::new();
        let coef = random_tensor(&mut rng, &[b, c_in + c_out], 1.0);
        let mut inputs = vec![random_tensor(&mut rng, &[n, c_in], 2.0), random_tensor(&mut rng, &[b, c_out], 2.0)];
        let f = move |_: &ParamSet, xs: &[Tensor], g: &mut Graph| {
            let x = g.input(xs[0].clone());
            let e = g.input(xs[1].clone());
            let pooled = g.gather_mean(x, index.clone(), k).unwrap();
            let cat = g.concat(pooled, e).unwrap();
            let p = g.softmax(cat).unwrap();
            (g.weighted_sum(p, coef.clone()).unwrap(), vec![x, e])
        };
        out.push(("pool_concat_softmax", grad_check(&mut ps, &mut inputs, &f)));
    }

    // focal loss through softmax
    {
        let c = c_out.max(2);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let weights: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
        let gamma = [0.0, 1.0, 2.0, 5.0][rng.random_range(0..4)];
        let mut ps = ParamSet::new();
        let mut inputs = vec![random_tensor(&mut rng, &[n, c], 2.0)];
        let f = move |_: &ParamSet, xs: &[Tensor], g: &mut Graph| {
            let x = g.input(xs[0].clone());
            let p = g.softmax(x).unwrap();
            (g.focal_loss(p, targets.clone(), weights.clone(), gamma).unwrap(), vec![x])
        };
        out.push(("focal_loss", grad_check(&mut ps, &mut inputs, &f)));
    }
    out
}

/// Whole-network check with batchnorm in batch-statistics mode (running statistics frozen).
pub fn gatenet_grad_check(seed: u64, mode: Mode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..9);
    let c = rng.random_range(2..5);
    let k = rng.random_range(1..17);
    let b = rng.random_range(3..7);
    let widths = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.random_range(2..33)).collect::<Vec<usize>>();
    let cfg = GateNetConfig {
        n_markers: m,
        n_classes: c,
        n_context: k,
        single_block_filters: widths(&mut rng, 3),
        context_block_filters: widths(&mut rng, 2),
        head_hidden: rng.random_range(2..33),
        seed,
    };
    let mut model = Model::init(ModelConfig::GateNet(cfg)).unwrap();
    // move batchnorm parameters and running stats off their defaults
    for p in model.params.iter_mut() {
        if p.name.ends_with("gamma") || p.name.ends_with("shift") {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    for r in &mut model.running {
        r.mean.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        r.var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
    }
    let n_rows = rng.random_range(k.max(2)..k.max(2) + 6);
    let index: Vec<u32> = (0..b * k).map(|_| rng.random_range(0..n_rows as u32)).collect();
    let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let class_w: Vec<f64> = (0..c).map(|_| rng.random_range(0.3..2.0)).collect();
    let gamma = [0.0, 2.0, 5.0][rng.random_range(0..3)];
    let mut inputs = vec![random_tensor(&mut rng, &[b, m], 2.0), random_tensor(&mut rng, &[n_rows, m], 2.0)];

    let model_ref = model.clone();
    let f = move |ps: &ParamSet, xs: &[Tensor], g: &mut Graph| {
        let mut net = model_ref.clone();
        net.params = ps.clone();
        let ctx = ContextRows::from_draws(xs[1].clone(), index.clone(), k).unwrap();
        let probs = net.forward_graph(g, xs[0].clone(), Some(ContextInput::Rows(ctx)), mode).unwrap();
        let loss = g.focal_loss(probs, targets.clone(), class_w.clone(), gamma).unwrap();
        (loss, vec![])
    };
    let mut params = model.params.clone();
    grad_check(&mut params, &mut inputs, &f)
}
