//! Context-aware downsampling modules placed between stages.
//!
//! * `L`: strided 3×3 conv + BN over the feature grid (local context only).
//! * `LG`: the query is a strided 3×3 conv over the token grid; keys and
//!   values come from every input token.
//! * `G`: the query is two cascaded strided Conv1D over the flattened token
//!   sequence; keys and values come from every input token.
//!
//! `LG` and `G` add a shortcut of 2×2 average pooling (at stride 2) and a
//! linear projection `c_in → c_out`.

use serde::{Deserialize, Serialize};

use crate::gops::{multi_head_attention, HEAD_DIM, KERNEL};
use crate::nn::{grid_to_tokens, tokens_to_grid, BatchNorm2d, Builder, Conv2d, LayerNorm, Linear, ModelError, Result};
use crate::params::Ctx;
use crate::tensor::{Conv2dOptions, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DsmKind {
    #[serde(rename = "l")]
    L,
    #[serde(rename = "lg")]
    LG,
    #[serde(rename = "g")]
    G,
}

impl DsmKind {
    pub const ALL: [DsmKind; 3] = [DsmKind::L, DsmKind::LG, DsmKind::G];

    pub fn name(self) -> &'static str {
        match self {
            DsmKind::L => "l",
            DsmKind::LG => "lg",
            DsmKind::G => "g",
        }
    }

    /// Whether the module consumes and produces `[B, N, C]` tokens.
    pub fn is_token_based(self) -> bool {
        !matches!(self, DsmKind::L)
    }
}

impl std::fmt::Display for DsmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DsmParams {
    pub kind: DsmKind,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl DsmParams {
    pub fn new(kind: DsmKind, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(ModelError::Config(format!("dsm stride must be 1 or 2, got {stride}")));
        }
        if c_in == 0 || c_out == 0 {
            return Err(ModelError::Config("dsm channels must be positive".into()));
        }
        if kind.is_token_based() && !c_out.is_multiple_of(HEAD_DIM) {
            return Err(ModelError::Config(format!(
                "{kind}-dsm needs c_out divisible by {HEAD_DIM}, got {c_out}"
            )));
        }
        Ok(DsmParams {
            kind,
            c_in,
            c_out,
            stride,
        })
    }

    pub fn heads(&self) -> usize {
        self.c_out / HEAD_DIM
    }

    pub fn output_hw(&self, hw: (usize, usize)) -> (usize, usize) {
        (hw.0 / self.stride, hw.1 / self.stride)
    }

    /// Check that an `h×w` input can be downsampled by this module.
    pub fn check_input(&self, hw: (usize, usize)) -> Result<()> {
        let s = self.stride;
        if hw.0 == 0 || hw.1 == 0 || !hw.0.is_multiple_of(s) || !hw.1.is_multiple_of(s) {
            return Err(ModelError::Input(format!(
                "{}x{} grid is not divisible by stride {s}",
                hw.0, hw.1
            )));
        }
        if self.kind == DsmKind::G && !(hw.0 * hw.1).is_multiple_of(s * s) {
            return Err(ModelError::Input(format!(
                "token count {} not divisible by {}",
                hw.0 * hw.1,
                s * s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LocalDsm {
    pub params: DsmParams,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl LocalDsm {
    pub fn new(b: &mut Builder<'_>, params: DsmParams) -> Self {
        LocalDsm {
            params,
            conv: Conv2d::new(
                b,
                "conv",
                params.c_in,
                params.c_out,
                (KERNEL, KERNEL),
                Conv2dOptions::new(params.stride, 1, 1),
                false,
            ),
            bn: BatchNorm2d::new(b, "bn", params.c_out),
        }
    }

    /// `[B, c_in, H, W]` → `[B, c_out, H/s, W/s]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.params.c_in {
            return Err(ModelError::Input(format!(
                "l-dsm expects [B, {}, H, W], got {s:?}",
                self.params.c_in
            )));
        }
        self.params.check_input((s[2], s[3]))?;
        self.bn.forward(ctx, self.conv.forward(ctx, x)?)
    }
}

#[derive(Debug, Clone)]
pub enum QueryPath {
    /// 3×3 strided conv over the token grid.
    Grid(Conv2d),
    /// Two cascaded kernel-3 strided conv1d over the token sequence.
    Sequence(Conv2d, Conv2d),
}

#[derive(Debug, Clone)]
pub struct AttentionDsm {
    pub params: DsmParams,
    pub norm: LayerNorm,
    pub query: QueryPath,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub shortcut: Linear,
}

/// Token-DSM output with the attention maps for inspection.
pub struct DsmOutput<'t> {
    pub out: Var<'t>,
    pub hw: (usize, usize),
    pub attention: Option<Var<'t>>,
}

impl AttentionDsm {
    pub fn new(b: &mut Builder<'_>, params: DsmParams) -> Result<Self> {
        let (c_in, c_out, s) = (params.c_in, params.c_out, params.stride);
        let query = match params.kind {
            DsmKind::LG => QueryPath::Grid(Conv2d::new(
                b,
                "query",
                c_in,
                c_out,
                (KERNEL, KERNEL),
                Conv2dOptions::new(s, 1, 1),
                true,
            )),
            DsmKind::G => {
                let opts = Conv2dOptions {
                    stride: (1, s),
                    padding: (0, 1),
                    groups: 1,
                };
                QueryPath::Sequence(
                    Conv2d::new(b, "query1", c_in, c_out, (1, KERNEL), opts, true),
                    Conv2d::new(b, "query2", c_out, c_out, (1, KERNEL), opts, true),
                )
            }
            DsmKind::L => return Err(ModelError::Config("l-dsm has no attention path".into())),
        };
        Ok(AttentionDsm {
            params,
            norm: LayerNorm::new(b, "norm", c_in),
            query,
            key: Linear::new(b, "key", c_in, c_out, true),
            value: Linear::new(b, "value", c_in, c_out, true),
            out: Linear::new(b, "out", c_out, c_out, true),
            shortcut: Linear::new(b, "shortcut", c_in, c_out, true),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>, hw: (usize, usize)) -> Result<DsmOutput<'t>> {
        let p = self.params;
        let s = x.shape();
        if s.len() != 3 || s[2] != p.c_in {
            return Err(ModelError::Input(format!(
                "{}-dsm expects [B, N, {}], got {s:?}",
                p.kind, p.c_in
            )));
        }
        if s[1] != hw.0 * hw.1 {
            return Err(ModelError::Input(format!(
                "token count {} does not match grid {}x{}",
                s[1], hw.0, hw.1
            )));
        }
        p.check_input(hw)?;
        let out_hw = p.output_hw(hw);
        let xn = self.norm.forward(ctx, x)?;
        let q = match &self.query {
            QueryPath::Grid(conv) => grid_to_tokens(conv.forward(ctx, tokens_to_grid(xn, hw)?)?)?,
            QueryPath::Sequence(c1, c2) => {
                let seq = xn.permute(&[0, 2, 1])?.reshape(&[s[0], p.c_in, 1, s[1]])?;
                let q = c2.forward(ctx, c1.forward(ctx, seq)?)?;
                grid_to_tokens(q)?
            }
        };
        let k = self.key.forward(ctx, xn)?;
        let v = self.value.forward(ctx, xn)?;
        let (att, probs) = multi_head_attention(q, k, v, p.heads())?;
        let att = self.out.forward(ctx, att)?;

        let mut short = tokens_to_grid(x, hw)?;
        if p.stride == 2 {
            short = short.avg_pool2d(2, 2)?;
        }
        let short = self.shortcut.forward(ctx, grid_to_tokens(short)?)?;
        Ok(DsmOutput {
            out: short.add(att)?,
            hw: out_hw,
            attention: Some(probs),
        })
    }
}

/// A materialised downsampling module of any kind.
#[derive(Debug, Clone)]
pub enum Dsm {
    Local(LocalDsm),
    Attention(AttentionDsm),
}

impl Dsm {
    pub fn new(b: &mut Builder<'_>, params: DsmParams) -> Result<Self> {
        Ok(match params.kind {
            DsmKind::L => Dsm::Local(LocalDsm::new(b, params)),
            DsmKind::LG | DsmKind::G => Dsm::Attention(AttentionDsm::new(b, params)?),
        })
    }

    pub fn params(&self) -> DsmParams {
        match self {
            Dsm::Local(d) => d.params,
            Dsm::Attention(d) => d.params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Initializer, Mode, ParamStore};
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn param_errors() {
        assert!(DsmParams::new(DsmKind::L, 8, 8, 3).is_err());
        assert!(DsmParams::new(DsmKind::L, 0, 8, 2).is_err());
        assert!(DsmParams::new(DsmKind::LG, 8, 48, 2).is_err());
        assert!(DsmParams::new(DsmKind::L, 8, 48, 2).is_ok());
        let p = DsmParams::new(DsmKind::G, 32, 64, 2).unwrap();
        assert_eq!(p.heads(), 2);
        assert_eq!(p.output_hw((8, 6)), (4, 3));
        assert!(p.check_input((5, 4)).is_err());
        assert!(p.check_input((0, 4)).is_err());
        assert!(p.check_input((4, 6)).is_ok());
    }

    #[test]
    fn output_shapes() {
        for kind in DsmKind::ALL {
            let params = DsmParams::new(kind, 32, 64, 2).unwrap();
            let mut store = ParamStore::new();
            let mut init = Initializer::new(3);
            let dsm = Dsm::new(&mut Builder::new(&mut store, &mut init), params).unwrap();
            assert_eq!(dsm.params(), params);
            assert_eq!(store.num_params(), crate::cost::dsm_params(&params), "{kind}");
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &store, Mode::Eval);
            match &dsm {
                Dsm::Local(d) => {
                    let x = tape.constant(Tensor::ones(&[2, 32, 4, 6]));
                    assert_eq!(d.forward(&ctx, x).unwrap().shape(), vec![2, 64, 2, 3]);
                }
                Dsm::Attention(d) => {
                    let x = tape.constant(Tensor::ones(&[2, 24, 32]));
                    let out = d.forward(&ctx, x, (4, 6)).unwrap();
                    assert_eq!(out.out.shape(), vec![2, 6, 64]);
                    assert_eq!(out.hw, (2, 3));
                    assert!(d.forward(&ctx, x, (5, 5)).is_err());
                }
            }
        }
    }
}
