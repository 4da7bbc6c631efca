//! Independent oracles shared by the integration tests: naive loop
//! implementations and a finite-difference gradient checker that does not
//! use the library's own checker.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uninas_core::nn::ModelError;
use uninas_core::params::{Ctx, Mode, ParamStore};
use uninas_core::tensor::{Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn positive_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.5..2.0))
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.data()[i * k + t] * b.data()[t * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Direct NCHW convolution with per-axis stride and padding.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, stride: (usize, usize), pad: (usize, usize), groups: usize) -> Tensor {
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, cig, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cig * groups, ci);
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let cog = co / groups;
    let mut out = vec![0.0; b * co * ho * wo];
    for n in 0..b {
        for o in 0..co {
            let g = o / cog;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cig {
                        let cin = g * cig + c;
                        for di in 0..kh {
                            for dj in 0..kw {
                                let yi = (i * stride.0 + di) as isize - pad.0 as isize;
                                let xj = (j * stride.1 + dj) as isize - pad.1 as isize;
                                if yi < 0 || xj < 0 || yi as usize >= h || xj as usize >= wd {
                                    continue;
                                }
                                acc += x.data()[((n * ci + cin) * h + yi as usize) * wd + xj as usize]
                                    * w.data()[((o * cig + c) * kh + di) * kw + dj];
                            }
                        }
                    }
                    out[((n * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, co, ho, wo], out).unwrap()
}

pub fn naive_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-6)
}

fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 1.3 + 0.5).cos()).collect()
}

/// `Σ w ⊙ out` with fixed pseudo-random weights, as a tape scalar.
pub fn project<'t>(out: Var<'t>) -> Var<'t> {
    let shape = out.shape();
    let n = shape.iter().product();
    let w = out.tape().constant(Tensor::new(shape, weights(n)).unwrap());
    out.mul(w).unwrap().sum().unwrap()
}

fn project_value(out: &Tensor) -> f64 {
    out.data().iter().zip(weights(out.numel())).map(|(a, b)| a * b).sum()
}

/// Maximum relative error between tape and central-difference gradients of
/// every input of a pure tensor function.
pub fn check_op<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = project(f(&vars));
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = vars[k].grad().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = Vec::with_capacity(input.numel());
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let tape = Tape::inference();
                let vars: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        tape.constant(t)
                    })
                    .collect();
                project_value(&f(&vars).value())
            };
            numeric.push((eval(EPS) - eval(-EPS)) / (2.0 * EPS));
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

fn strided(n: usize, max: usize) -> Vec<usize> {
    let step = n.div_ceil(max).max(1);
    (0..n).step_by(step).collect()
}

/// Worst relative gradient error over the input and every trainable
/// parameter of a module (at most `max_entries` entries per tensor), with
/// the offending tensor's name.
pub fn check_module<F>(store: &mut ParamStore, x: &Tensor, max_entries: usize, forward: F) -> (f64, String)
where
    F: for<'t> Fn(&Ctx<'t, '_>, Var<'t>) -> Result<Var<'t>, ModelError>,
{
    let loss_at = |store: &ParamStore, x: &Tensor| {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store, Mode::Train);
        project_value(&forward(&ctx, tape.constant(x.clone())).unwrap().value())
    };
    let (xg, grads) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Train);
        let xv = tape.leaf(x.clone(), true);
        let loss = project(forward(&ctx, xv).unwrap());
        tape.backward(loss).unwrap();
        (xv.grad().unwrap(), ctx.param_grads())
    };
    let mut worst = (0.0, String::from("input"));
    let idx = strided(x.numel(), max_entries);
    let mut numeric = Vec::new();
    for &i in &idx {
        let mut xp = x.clone();
        xp.data_mut()[i] += EPS;
        let up = loss_at(store, &xp);
        xp.data_mut()[i] -= 2.0 * EPS;
        numeric.push((up - loss_at(store, &xp)) / (2.0 * EPS));
    }
    let analytic: Vec<f64> = idx.iter().map(|&i| xg.data()[i]).collect();
    worst.0 = rel_err(&analytic, &numeric);

    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let g = grads
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let idx = strided(g.numel(), max_entries);
        let mut numeric = Vec::new();
        for &i in &idx {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + EPS;
            let up = loss_at(store, x);
            store.get_mut(id).data_mut()[i] = orig - EPS;
            let down = loss_at(store, x);
            store.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * EPS));
        }
        let analytic: Vec<f64> = idx.iter().map(|&i| g.data()[i]).collect();
        let e = rel_err(&analytic, &numeric);
        if e > worst.0 {
            worst = (e, store.name(id).to_string());
        }
    }
    worst
}
