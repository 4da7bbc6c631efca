//! Parameterised layers shared by the operator blocks, the downsampling
//! modules and the network wrapper.

use thiserror::Error;

use crate::params::{BnUpdate, Ctx, Initializer, Mode, ParamId, ParamStore};
use crate::tensor::{Conv2dOptions, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;
/// Standard deviation of the truncated-normal projection init.
pub const PROJ_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    init: &'a mut Initializer,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, init: &'a mut Initializer) -> Self {
        Builder {
            store,
            init,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        Builder {
            store: &mut *self.store,
            init: &mut *self.init,
            prefix: format!("{}{}.", self.prefix, name),
        }
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value, true)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value, false)
    }

    pub fn init(&mut self) -> &mut Initializer {
        self.init
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, in_features: usize, out_features: usize, bias: bool) -> Self {
        let mut s = b.scope(name);
        let w = s.init().trunc_normal(&[in_features, out_features], PROJ_INIT_STD);
        let weight = s.param("weight", w);
        let bias = bias.then(|| s.param("bias", Tensor::zeros(&[out_features])));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.linear(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)))?)
    }

    pub fn num_params(&self) -> u64 {
        (self.in_features * self.out_features + self.bias.map_or(0, |_| self.out_features)) as u64
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOptions,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        opts: Conv2dOptions,
        bias: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let shape = [c_out, c_in / opts.groups, kernel.0, kernel.1];
        let w = s.init().he_uniform_fan_out(&shape, opts.groups);
        let weight = s.param("weight", w);
        let bias = bias.then(|| s.param("bias", Tensor::zeros(&[c_out])));
        Conv2d { weight, bias, opts }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut y = x.conv2d(ctx.p(self.weight), self.opts)?;
        if let Some(bias) = self.bias {
            y = y.add_channel_bias(ctx.p(bias))?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        let mut s = b.scope(name);
        BatchNorm2d {
            gamma: s.param("weight", Tensor::ones(&[channels])),
            beta: s.param("bias", Tensor::zeros(&[channels])),
            running_mean: s.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: s.buffer("running_var", Tensor::ones(&[channels])),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode() {
            Mode::Train => {
                let shape = x.shape();
                let (y, mean, var) = x.batch_norm(gamma, beta, BN_EPS)?;
                ctx.record_bn(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean,
                    var,
                    count: shape.iter().product::<usize>() / shape[1],
                });
                Ok(y)
            }
            Mode::Eval => {
                let params = ctx.params();
                Ok(x.batch_norm_fixed(
                    gamma,
                    beta,
                    params.get(self.running_mean).data(),
                    params.get(self.running_var).data(),
                    BN_EPS,
                )?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, features: usize) -> Self {
        let mut s = b.scope(name);
        LayerNorm {
            gamma: s.param("weight", Tensor::ones(&[features])),
            beta: s.param("bias", Tensor::zeros(&[features])),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), LN_EPS)?)
    }
}

/// `[B, C, H, W]` → `[B, H·W, C]`.
pub fn grid_to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(ModelError::Input(format!("expected [B, C, H, W], got {s:?}")));
    }
    Ok(x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])?)
}

/// `[B, N, C]` → `[B, C, H, W]` with `N = H·W`.
pub fn tokens_to_grid(x: Var<'_>, hw: (usize, usize)) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != hw.0 * hw.1 {
        return Err(ModelError::Input(format!(
            "expected [B, {}, C] tokens for a {}x{} grid, got {s:?}",
            hw.0 * hw.1,
            hw.0,
            hw.1
        )));
    }
    Ok(x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], hw.0, hw.1])?)
}
