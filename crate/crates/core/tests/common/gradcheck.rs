//! Central finite-difference checker and the instance generators for every
//! differentiable graph op, both losses and whole models. Shared by the
//! gradient tests and the acceptance suite.

use fuselab_core::graph::{Graph, Var};
use fuselab_core::losses::{bce_loss, lmcl_loss, LmclParams};
use fuselab_core::models::{CnnArch, CnnParams, FusionParams, HeadKind, Parameters, Patch};
use fuselab_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

fn close(analytic: f64, numeric: f64) -> bool {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        (analytic - numeric).abs() <= 1e-7
    } else {
        (analytic - numeric).abs() / denom <= 1e-4
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed pseudo-random weights so every
/// output entry contributes a distinct coefficient.
fn weighted_sum(g: &mut Graph, out: Var) -> Result<Var> {
    let n = g.value(out).len();
    if n == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let w = random(&mut rng, g.shape(out), -1.0, 1.0);
    let w = g.constant(w)?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    let loss = weighted_sum(&mut g, out).unwrap();
    g.value(loss).item().unwrap()
}

/// Compares analytic and central-difference gradients for every entry of
/// every input; returns the number of entries checked.
fn check(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> usize {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = f(&mut g, &vars).unwrap();
    let loss = weighted_sum(&mut g, out).unwrap();
    g.backward(loss).unwrap();
    let mut checked = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * EPS);
            assert!(
                close(analytic[j], numeric),
                "{name}: input {i} entry {j}: analytic {} vs numeric {numeric}",
                analytic[j]
            );
            checked += 1;
        }
    }
    checked
}

/// Values bounded away from zero so ReLU kinks sit outside the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Distinct values with gaps far wider than the FD step, so max-pool
/// argmaxes do not move.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn each_instance(mut body: impl FnMut(&mut ChaCha8Rng)) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        body(&mut rng);
    }
}

pub fn conv2d_gradients() {
    each_instance(|rng| {
        let c = rng.random_range(1..3);
        let co = rng.random_range(1..3);
        let h = rng.random_range(3..6);
        let w = rng.random_range(3..6);
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let inputs = vec![
            random(rng, &[c, h, w], -1.0, 1.0),
            random(rng, &[co, c, k, k], -1.0, 1.0),
            random(rng, &[co], -1.0, 1.0),
        ];
        check("conv2d", inputs, |g, v| g.conv2d(v[0], v[1], v[2], stride, pad));
    });
}

pub fn maxpool2d_gradients() {
    each_instance(|rng| {
        let c = rng.random_range(1..3);
        let h = rng.random_range(2..7);
        let w = rng.random_range(2..7);
        let window = rng.random_range(1..=h.min(w).min(3));
        let stride = rng.random_range(1..3);
        check("maxpool2d", vec![distinct(rng, &[c, h, w])], |g, v| g.maxpool2d(v[0], window, stride));
    });
}

pub fn relu_gradients() {
    each_instance(|rng| {
        let n = rng.random_range(1..12);
        check("relu", vec![away_from_zero(rng, &[n])], |g, v| g.relu(v[0]));
    });
}

pub fn dense_and_linear_rows_gradients() {
    each_instance(|rng| {
        let (n, m, b) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4));
        let w = random(rng, &[m, n], -1.0, 1.0);
        let bias = random(rng, &[m], -1.0, 1.0);
        let x = random(rng, &[n], -1.0, 1.0);
        check("dense", vec![x, w.clone(), bias.clone()], |g, v| g.dense(v[0], v[1], v[2]));
        let xs = random(rng, &[b, n], -1.0, 1.0);
        check("linear_rows", vec![xs, w, bias], |g, v| g.linear_rows(v[0], v[1], v[2]));
    });
}

pub fn softmax_family_gradients() {
    each_instance(|rng| {
        let (b, k) = (rng.random_range(1..4), rng.random_range(2..5));
        check("softmax", vec![random(rng, &[k], -3.0, 3.0)], |g, v| g.softmax(v[0]));
        check("softmax_rows", vec![random(rng, &[b, k], -3.0, 3.0)], |g, v| g.softmax_rows(v[0]));
        check("log_softmax_rows", vec![random(rng, &[b, k], -3.0, 3.0)], |g, v| {
            g.log_softmax_rows(v[0])
        });
    });
}

pub fn structural_op_gradients() {
    each_instance(|rng| {
        let (n, m, r) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4));
        check("concat", vec![random(rng, &[n], -1.0, 1.0), random(rng, &[m], -1.0, 1.0)], |g, v| {
            g.concat(v[0], v[1])
        });
        check(
            "concat_rows",
            vec![random(rng, &[r, n], -1.0, 1.0), random(rng, &[r, m], -1.0, 1.0)],
            |g, v| g.concat(v[0], v[1]),
        );
        check("reshape", vec![random(rng, &[n, m], -1.0, 1.0)], |g, v| g.reshape(v[0], &[m, n]));
        check("flatten", vec![random(rng, &[r, n, m], -1.0, 1.0)], |g, v| g.flatten(v[0]));
        check("stack", vec![random(rng, &[n], -1.0, 1.0), random(rng, &[n], -1.0, 1.0)], |g, v| {
            g.stack(&[v[0], v[1], v[0]])
        });
        let idx: Vec<usize> = (0..r).map(|_| rng.random_range(0..n)).collect();
        check("gather_rows", vec![random(rng, &[r, n], -1.0, 1.0)], move |g, v| {
            g.gather_rows(v[0], &idx)
        });
    });
}

pub fn arithmetic_op_gradients() {
    each_instance(|rng| {
        let shape = [rng.random_range(1..4), rng.random_range(1..4)];
        let a = random(rng, &shape, -1.0, 1.0);
        let b = random(rng, &shape, -1.0, 1.0);
        check("sum", vec![a.clone()], |g, v| g.sum(v[0]));
        check("mean", vec![a.clone()], |g, v| g.mean(v[0]));
        check("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        check("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        check("mul_self", vec![a.clone()], |g, v| g.mul(v[0], v[0]));
        let factor = rng.random_range(-2.0..2.0);
        check("scale", vec![a.clone()], move |g, v| g.scale(v[0], factor));
        let offset = b.clone();
        check("add_const", vec![a.clone()], move |g, v| g.add_const(v[0], &offset));
        check("log", vec![random(rng, &shape, 0.1, 2.0)], |g, v| g.log(v[0]));
        // Entries straddle the bounds but stay clear of them by more than EPS.
        check("clamp", vec![away_from_zero(rng, &shape)], |g, v| g.clamp(v[0], -0.5 + 0.0123, 0.5 + 0.0123));
    });
}

pub fn cosine_op_gradients() {
    each_instance(|rng| {
        let (b, d, k) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
        check("row_normalize", vec![away_from_zero(rng, &[b, d])], |g, v| g.row_normalize(v[0]));
        check(
            "matmul_nt",
            vec![random(rng, &[b, d], -1.0, 1.0), random(rng, &[k, d], -1.0, 1.0)],
            |g, v| g.matmul_nt(v[0], v[1]),
        );
    });
}

pub fn loss_gradients() {
    each_instance(|rng| {
        let b = rng.random_range(1..5);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
        let y = labels.clone();
        check("bce_loss", vec![random(rng, &[b, 2], -2.0, 2.0)], move |g, v| {
            let p = g.softmax_rows(v[0])?;
            bce_loss(g, p, &y)
        });
        let d = rng.random_range(1..6);
        let params = LmclParams {
            s: rng.random_range(1.0..8.0),
            m: rng.random_range(0.0..0.5),
        };
        let y = labels.clone();
        check(
            "lmcl_loss",
            vec![away_from_zero(rng, &[b, d]), away_from_zero(rng, &[2, d])],
            move |g, v| lmcl_loss(g, v[0], v[1], &y, &params),
        );
    });
}

/// FD check over a model's parameters; at most `per_tensor` entries are
/// sampled from each tensor.
fn check_model<P: Parameters + Clone>(
    name: &str,
    params: &P,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&mut Graph, &P, bool) -> Result<(Var, Vec<Var>)>,
) {
    let mut g = Graph::new();
    let (l, vars) = loss(&mut g, params, true).unwrap();
    g.backward(l).unwrap();
    let value = |p: &P| {
        let mut g = Graph::new();
        let (l, _) = loss(&mut g, p, false).unwrap();
        g.value(l).item().unwrap()
    };
    for (t, v) in vars.iter().enumerate() {
        let grad = g.grad(*v).unwrap().to_vec();
        let len = grad.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for j in picks {
            let mut plus = params.clone();
            plus.tensors_mut()[t].data_mut()[j] += EPS;
            let mut minus = params.clone();
            minus.tensors_mut()[t].data_mut()[j] -= EPS;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * EPS);
            let names = params.names();
            assert!(
                close(grad[j], numeric),
                "{name}: {} entry {j}: analytic {} vs numeric {numeric}",
                names[t],
                grad[j]
            );
        }
    }
}

fn cnn_loss(
    g: &mut Graph,
    params: &CnnParams,
    trainable: bool,
    patches: &[Patch],
    labels: &[usize],
) -> Result<(Var, Vec<Var>)> {
    let bound = params.bind(g, trainable)?;
    let xs = patches
        .iter()
        .map(|p| g.constant(p.input_tensor()))
        .collect::<Result<Vec<_>>>()?;
    let out = bound.forward(g, &xs)?;
    let loss = bound.head.loss(g, out.descriptors, out.probs, labels, &LmclParams { s: 4.0, m: 0.2 })?;
    Ok((loss, bound.vars()))
}

pub fn full_cnn_gradients_match_finite_differences() {
    let arch = CnnArch {
        patch_size: 8,
        channels: vec![2, 3],
        kernel: 3,
    };
    for (i, head) in [HeadKind::Linear, HeadKind::Cosine { scale: 4.0 }].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let params = CnnParams::init(&arch, head, 5 + i as u64).unwrap();
        let patches: Vec<Patch> = (0..2)
            .map(|_| Patch::new(8, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let labels = [0, 1];
        check_model("cnn", &params, 150, &mut rng, |g, p, t| cnn_loss(g, p, t, &patches, &labels));
    }
}

pub fn fusion_gradients_match_finite_differences() {
    for (i, head) in [HeadKind::Linear, HeadKind::Cosine { scale: 4.0 }].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i as u64);
        let params = FusionParams::init(head, i == 1, 9);
        let mg = random(&mut rng, &[3, 512], 0.0, 1.0);
        let us = random(&mut rng, &[3, 512], 0.0, 1.0);
        let labels = [1, 0, 1];
        check_model("fusion", &params, 40, &mut rng, |g, p, t| {
            let bound = p.bind(g, t)?;
            let a = g.constant(mg.clone())?;
            let b = g.constant(us.clone())?;
            let out = bound.forward(g, a, b)?;
            let loss = bound
                .head
                .loss(g, out.penultimate, out.probs, &labels, &LmclParams { s: 4.0, m: 0.2 })?;
            Ok((loss, bound.vars()))
        });
    }
}

/// Every check above, in order.
pub fn all() {
    conv2d_gradients();
    maxpool2d_gradients();
    relu_gradients();
    dense_and_linear_rows_gradients();
    softmax_family_gradients();
    structural_op_gradients();
    arithmetic_op_gradients();
    cosine_op_gradients();
    loss_gradients();
    full_cnn_gradients_match_finite_differences();
    fusion_gradients_match_finite_differences();
}
