//! Named parameter storage, seeded initialisation, the forward context that
//! binds stored parameters to a tape, and an Adam optimiser.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Flat arena of named tensors. Trainable entries are parameters; the rest
/// are buffers such as batch-norm running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
    }

    /// Number of trainable scalar parameters.
    pub fn num_params(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel() as u64)
            .sum()
    }

    /// Trainable scalar count of entries whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.numel() as u64)
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Set every trainable entry whose name matches `pred` to zero.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for e in self.entries.iter_mut().filter(|e| e.trainable && pred(&e.name)) {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Blend batch statistics into running buffers with the given momentum.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            let n = u.count as f64;
            let unbias = if u.count > 1 { n / (n - 1.0) } else { 1.0 };
            for (r, &m) in self.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, &v) in self.get_mut(u.running_var).data_mut().iter_mut().zip(&u.var) {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
    }
}

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal samples with standard deviation `std`, redrawn outside ±2σ.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
    }

    /// He-uniform initialisation on fan-out for a conv weight
    /// `[C_out, C_in/groups, kh, kw]`.
    pub fn he_uniform_fan_out(&mut self, shape: &[usize], groups: usize) -> Tensor {
        let fan_out = (shape[0] * shape[2] * shape[3] / groups).max(1);
        let bound = (6.0 / fan_out as f64).sqrt();
        self.uniform(shape, bound)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..=bound))
    }
}

/// Whether batch norm uses batch statistics (and reports them) or the
/// running buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass.
///
/// Each stored tensor becomes one leaf the first time it is used, so all
/// uses share a gradient.
pub struct Ctx<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParamStore,
    mode: Mode,
    leaves: RefCell<BTreeMap<ParamId, Var<'t>>>,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'t, 'p> Ctx<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamStore, mode: Mode) -> Self {
        Ctx {
            tape,
            params,
            mode,
            leaves: RefCell::new(BTreeMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.leaves.borrow().get(&id) {
            return *v;
        }
        let var = self.tape.param(self.params.get(id).clone());
        self.leaves.borrow_mut().insert(id, var);
        var
    }

    pub fn record_bn(&self, update: BnUpdate) {
        self.bn_updates.borrow_mut().push(update);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Gradients of every parameter touched in this pass, after backward.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(&id, v)| v.grad().map(|g| (id, g)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction and optional L2 weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<(), TensorError> {
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(TensorError::NonFinite { op: "adam" });
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let param = store.get_mut(*id).data_mut();
            for i in 0..param.len() {
                let gi = g.data()[i] + c.weight_decay * param[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
