//! Central finite-difference checks for modules built on a [`ParamStore`].

use crate::nn::ModelError;
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Entries checked per tensor, spread evenly; `0` checks all.
    pub samples_per_tensor: usize,
    /// Added to one analytic entry. Only for exercising failure paths.
    pub fault: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            samples_per_tensor: 24,
            fault: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error and the tensor it occurred in.
    pub max_rel_error: f64,
    pub worst: String,
    pub entries: usize,
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-6)` over the sampled entries.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(1e-6)
}

fn sample_indices(n: usize, k: usize) -> Vec<usize> {
    if k == 0 || n <= k {
        (0..n).collect()
    } else {
        (0..k).map(|j| (j * n) / k + (n / k) / 2).collect()
    }
}

/// Projection weights turning any output into a scalar loss.
fn projection(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| (0.7 * i as f64 + 0.3).sin())
}

fn scalar_loss<'t>(out: Var<'t>) -> Result<Var<'t>, ModelError> {
    let r = out.tape().constant(projection(&out.shape()));
    Ok(out.mul(r)?.sum()?)
}

fn loss_value<F>(store: &ParamStore, input: &Tensor, forward: &F) -> Result<f64, ModelError>
where
    F: for<'t> Fn(&Ctx<'t, '_>, Var<'t>) -> Result<Var<'t>, ModelError>,
{
    let tape = Tape::inference();
    let ctx = Ctx::new(&tape, store, Mode::Train);
    let out = forward(&ctx, tape.constant(input.clone()))?;
    Ok(scalar_loss(out)?.item().expect("scalar"))
}

/// Compare tape gradients of `Σ R ⊙ forward(x)` with central differences,
/// for the input and every trainable parameter. Batch norm runs on batch
/// statistics.
pub fn check_module<F>(
    store: &mut ParamStore,
    input: &Tensor,
    opts: &GradCheckOptions,
    forward: F,
) -> Result<GradCheckReport, ModelError>
where
    F: for<'t> Fn(&Ctx<'t, '_>, Var<'t>) -> Result<Var<'t>, ModelError>,
{
    let (input_grad, param_grads) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Train);
        let x = tape.leaf(input.clone(), true);
        let loss = scalar_loss(forward(&ctx, x)?)?;
        tape.backward(loss)?;
        (x.grad(), ctx.param_grads())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    let mut first = true;
    let mut record = |name: &str, analytic: Vec<f64>, numeric: Vec<f64>, report: &mut GradCheckReport| {
        let mut analytic = analytic;
        if first && !analytic.is_empty() {
            analytic[0] += opts.fault;
            first = false;
        }
        let e = relative_error(&analytic, &numeric);
        report.entries += analytic.len();
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e;
            report.worst = name.to_string();
        }
    };

    let idx = sample_indices(input.numel(), opts.samples_per_tensor);
    let ig = input_grad.unwrap_or_else(|| Tensor::zeros(input.shape()));
    let mut numeric = Vec::with_capacity(idx.len());
    let mut xp = input.clone();
    for &i in &idx {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + opts.eps;
        let up = loss_value(store, &xp, &forward)?;
        xp.data_mut()[i] = orig - opts.eps;
        let down = loss_value(store, &xp, &forward)?;
        xp.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * opts.eps));
    }
    record("input", idx.iter().map(|&i| ig.data()[i]).collect(), numeric, &mut report);

    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let grad = param_grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let idx = sample_indices(grad.numel(), opts.samples_per_tensor);
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.eps;
            let up = loss_value(store, input, &forward)?;
            store.get_mut(id).data_mut()[i] = orig - opts.eps;
            let down = loss_value(store, input, &forward)?;
            store.get_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * opts.eps));
        }
        let name = store.name(id).to_string();
        record(&name, idx.iter().map(|&i| grad.data()[i]).collect(), numeric, &mut report);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Builder, Linear};
    use crate::params::Initializer;

    #[test]
    fn linear_layer_passes_and_fault_fails() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let lin = Linear::new(&mut Builder::new(&mut store, &mut init), "fc", 3, 2, true);
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.31).cos());
        let ok = check_module(&mut store, &x, &GradCheckOptions::default(), |ctx, x| lin.forward(ctx, x)).unwrap();
        assert!(ok.max_rel_error < 1e-8, "{ok:?}");
        let bad = GradCheckOptions {
            fault: 0.5,
            ..GradCheckOptions::default()
        };
        let report = check_module(&mut store, &x, &bad, |ctx, x| lin.forward(ctx, x)).unwrap();
        assert!(report.max_rel_error > 1e-2);
        assert_eq!(report.worst, "input");
    }
}
