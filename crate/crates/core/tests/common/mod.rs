//! Oracles shared by the integration tests.
#![allow(dead_code)]

use cmd_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use cmd_core::metrics::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Overwrite every parameter with uniform noise in `[-amp, amp]`.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
    let mut r = rng(seed);
    for id in 0..store.len() {
        for v in store.get_mut(id).data_mut() {
            *v = r.random_range(-amp..amp);
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Worst relative error between analytic and central-difference gradients
/// of a scalar function of the parameters and of one input tensor.
pub fn fd_check<F>(store: &ParamStore<f64>, input: Option<&Tensor<f64>>, build: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, Option<Var>) -> Var,
{
    let mut g = Graph::with_params(store);
    let x = input.map(|t| g.input(t.clone()));
    let loss = build(&mut g, x);
    let grads = g.backward(loss).unwrap();
    let eval = |s: &ParamStore<f64>, inp: Option<&Tensor<f64>>| {
        let mut g = Graph::with_params(s);
        let x = inp.map(|t| g.input(t.clone()));
        let l = build(&mut g, x);
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    for id in 0..store.len() {
        let analytic = grads.param(id as ParamId).unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in 0..store.get(id).len() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += FD_EPS;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= FD_EPS;
            let numeric = (eval(&plus, input) - eval(&minus, input)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    if let (Some(t), Some(x)) = (input, x) {
        let analytic = grads.var(x).expect("input gradient").clone();
        for i in 0..t.len() {
            let mut plus = t.clone();
            plus.data_mut()[i] += FD_EPS;
            let mut minus = t.clone();
            minus.data_mut()[i] -= FD_EPS;
            let numeric = (eval(store, Some(&plus)) - eval(store, Some(&minus))) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Reduce any output to a scalar through a fixed random projection.
pub fn project(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let shape = g.shape(out).to_vec();
    let w = g.constant(rand_tensor(&shape, &mut r, -1.0, 1.0));
    let p = g.mul(out, w).unwrap();
    g.mean(p)
}

pub fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random::<bool>()).collect()).unwrap()
}

// Brute-force metric oracles: plain pixel enumeration over nested loops.

pub fn oracle_dice(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let (mut inter, mut np, mut ng) = (0u64, 0u64, 0u64);
    for y in 0..p.height {
        for x in 0..p.width {
            let (a, b) = (p.data[y * p.width + x], g.data[y * g.width + x]);
            inter += (a && b) as u64;
            np += a as u64;
            ng += b as u64;
        }
    }
    if np + ng == 0 { 1.0 } else { 2.0 * inter as f64 / (np + ng) as f64 }
}

pub fn oracle_precision(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let (mut inter, mut np, mut ng) = (0u64, 0u64, 0u64);
    for i in 0..p.data.len() {
        inter += (p.data[i] && g.data[i]) as u64;
        np += p.data[i] as u64;
        ng += g.data[i] as u64;
    }
    match (np, ng) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => inter as f64 / np as f64,
    }
}

/// Boundary pixel list: foreground with a background 4-neighbour or on the
/// image edge, using explicit neighbour lookups.
pub fn oracle_boundary(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height as i64, m.width as i64);
    let at = |y: i64, x: i64| -> Option<bool> { (y >= 0 && x >= 0 && y < h && x < w).then(|| m.data[(y * w + x) as usize]) };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if at(y, x) == Some(true) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| at(y + dy, x + dx) != Some(true)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Boundary F1 from the full pairwise Euclidean distance matrix.
pub fn oracle_bf1(p: &BinaryMask, g: &BinaryMask, tol: f64) -> f64 {
    let (bp, bg) = (oracle_boundary(p), oracle_boundary(g));
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let dist = |a: &(i64, i64), b: &(i64, i64)| (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt();
    let matched = |from: &[(i64, i64)], to: &[(i64, i64)]| from.iter().filter(|a| to.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min) <= tol).count() as f64 / from.len() as f64;
    let (prec, rec) = (matched(&bp, &bg), matched(&bg, &bp));
    if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) }
}

/// Like [`fd_check`] over parameters only, but probing `samples` randomly
/// chosen entries with step `eps`; for networks too large to enumerate.
pub fn fd_check_sampled<F>(store: &ParamStore<f64>, samples: usize, eps: f64, seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let mut g = Graph::with_params(store);
    let loss = build(&mut g);
    let grads = g.backward(loss).unwrap();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::with_params(s);
        let l = build(&mut g);
        g.value(l).item()
    };
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for k in 0..samples {
        // cycle through tensors so every parameter tensor is probed
        let id = k % store.len();
        let i = r.random_range(0..store.get(id).len());
        let analytic = grads.param(id as ParamId).map_or(0.0, |t| t.data()[i]);
        let mut plus = store.clone();
        plus.get_mut(id).data_mut()[i] += eps;
        let mut minus = store.clone();
        minus.get_mut(id).data_mut()[i] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}
