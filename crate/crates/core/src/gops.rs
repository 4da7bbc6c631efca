//! General operator (GOP) blocks in the unified inverted-residual form.
//!
//! Every block maps `c` channels to `c` channels and is parameterised by
//! the same `(kind, c, e)` triple:
//!
//! * conv kinds: `y = x + BN(Proj(GELU(BN(Conv(GELU(BN(Proj(x))))))))`
//! * attention kinds: `y' = x + SA(LN(x))`, `y = y' + FFN(LN(y'))`, with a
//!   depthwise-conv positional encoding added to `x` first
//! * MLP: like attention but with transpose-FFN-transpose token mixing

use serde::{Deserialize, Serialize};

use crate::nn::{grid_to_tokens, tokens_to_grid, BatchNorm2d, Builder, Conv2d, LayerNorm, Linear, ModelError, Result};
use crate::params::Ctx;
use crate::tensor::{Conv2dOptions, Var};

pub const HEAD_DIM: usize = 32;
pub const WINDOW: usize = 7;
pub const KERNEL: usize = 3;
pub const EXPANSIONS: [usize; 5] = [2, 3, 4, 5, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GopKind {
    Conv,
    #[serde(rename = "dwconv")]
    DWConv,
    #[serde(rename = "sa")]
    SA,
    #[serde(rename = "lsa")]
    LSA,
    #[serde(rename = "mlp")]
    MLP,
}

impl GopKind {
    pub const ALL: [GopKind; 5] = [GopKind::Conv, GopKind::DWConv, GopKind::SA, GopKind::LSA, GopKind::MLP];

    pub fn is_attention(self) -> bool {
        matches!(self, GopKind::SA | GopKind::LSA)
    }

    pub fn is_conv(self) -> bool {
        matches!(self, GopKind::Conv | GopKind::DWConv)
    }

    pub fn name(self) -> &'static str {
        match self {
            GopKind::Conv => "conv",
            GopKind::DWConv => "dwconv",
            GopKind::SA => "sa",
            GopKind::LSA => "lsa",
            GopKind::MLP => "mlp",
        }
    }
}

impl std::fmt::Display for GopKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockParams {
    pub kind: GopKind,
    pub channels: usize,
    pub expansion: usize,
}

impl BlockParams {
    pub fn new(kind: GopKind, channels: usize, expansion: usize) -> Result<Self> {
        if !EXPANSIONS.contains(&expansion) {
            return Err(ModelError::Config(format!("expansion {expansion} not in {EXPANSIONS:?}")));
        }
        if channels == 0 {
            return Err(ModelError::Config("channels must be positive".into()));
        }
        if kind.is_attention() && !channels.is_multiple_of(HEAD_DIM) {
            return Err(ModelError::Config(format!(
                "{kind} needs channels divisible by {HEAD_DIM}, got {channels}"
            )));
        }
        Ok(BlockParams {
            kind,
            channels,
            expansion,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.expansion
    }

    pub fn heads(&self) -> usize {
        self.channels / HEAD_DIM
    }

    pub fn window(&self) -> Option<usize> {
        (self.kind == GopKind::LSA).then_some(WINDOW)
    }
}

/// Hidden width of the token-mixing FFN for `tokens` tokens.
pub fn token_mix_hidden(tokens: usize) -> usize {
    (tokens / 2).max(1)
}

/// Row-major token indices of each non-overlapping `window×window` tile of
/// an `h×w` grid. Edge tiles hold only their valid tokens.
pub fn window_partition(hw: (usize, usize), window: usize) -> Vec<Vec<usize>> {
    let (h, w) = hw;
    let mut windows = Vec::new();
    for wi in (0..h).step_by(window) {
        for wj in (0..w).step_by(window) {
            let mut idx = Vec::new();
            for i in wi..(wi + window).min(h) {
                for j in wj..(wj + window).min(w) {
                    idx.push(i * w + j);
                }
            }
            windows.push(idx);
        }
    }
    windows
}

/// Result of multi-head attention: the merged output and one probability
/// tensor `[B·heads, N_q, N_k]` per attention group (one per window).
pub struct AttentionOutput<'t> {
    pub out: Var<'t>,
    pub probs: Vec<Var<'t>>,
}

fn split_heads(x: Var<'_>, heads: usize) -> Result<Var<'_>> {
    let s = x.shape();
    let d = s[2] / heads;
    Ok(x.reshape(&[s[0], s[1], heads, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[s[0] * heads, s[1], d])?)
}

/// Scaled dot-product attention of `q: [B, N_q, c]` over `k, v: [B, N_k, c]`
/// with `c / 32` heads of width 32.
pub fn multi_head_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<(Var<'t>, Var<'t>)> {
    let qs = q.shape();
    let (batch, nq, c) = (qs[0], qs[1], qs[2]);
    let d = c / heads;
    let qh = split_heads(q, heads)?;
    let kt = split_heads(k, heads)?.permute(&[0, 2, 1])?;
    let vh = split_heads(v, heads)?;
    let scores = qh.bmm(kt)?.scale(1.0 / (d as f64).sqrt())?;
    let probs = scores.softmax(2)?;
    let out = probs
        .bmm(vh)?
        .reshape(&[batch, heads, nq, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[batch, nq, c])?;
    Ok((out, probs))
}

#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize, hidden: usize) -> Self {
        let mut s = b.scope(name);
        Ffn {
            fc1: Linear::new(&mut s, "fc1", c, hidden, true),
            fc2: Linear::new(&mut s, "fc2", hidden, c, true),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(ctx, x)?.gelu()?;
        self.fc2.forward(ctx, h)
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub params: BlockParams,
    pub expand: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv: Conv2d,
    pub bn2: BatchNorm2d,
    pub project: Conv2d,
    pub bn3: BatchNorm2d,
}

impl ConvBlock {
    pub fn new(b: &mut Builder<'_>, params: BlockParams) -> Result<Self> {
        if !params.kind.is_conv() {
            return Err(ModelError::Config(format!("{} is not a conv kind", params.kind)));
        }
        let (c, ec) = (params.channels, params.hidden());
        let groups = if params.kind == GopKind::DWConv { ec } else { 1 };
        Ok(ConvBlock {
            params,
            expand: Conv2d::new(b, "expand", c, ec, (1, 1), Conv2dOptions::new(1, 0, 1), false),
            bn1: BatchNorm2d::new(b, "bn1", ec),
            conv: Conv2d::new(b, "conv", ec, ec, (KERNEL, KERNEL), Conv2dOptions::new(1, 1, groups), false),
            bn2: BatchNorm2d::new(b, "bn2", ec),
            project: Conv2d::new(b, "project", ec, c, (1, 1), Conv2dOptions::new(1, 0, 1), false),
            bn3: BatchNorm2d::new(b, "bn3", c),
        })
    }

    /// `x: [B, c, H, W]` → `[B, c, H, W]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.params.channels {
            return Err(ModelError::Input(format!(
                "conv block expects [B, {}, H, W], got {s:?}",
                self.params.channels
            )));
        }
        let t = self.bn1.forward(ctx, self.expand.forward(ctx, x)?)?.gelu()?;
        let t = self.bn2.forward(ctx, self.conv.forward(ctx, t)?)?.gelu()?;
        let t = self.bn3.forward(ctx, self.project.forward(ctx, t)?)?;
        Ok(x.add(t)?)
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub window: Option<usize>,
}

impl SelfAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize, window: Option<usize>) -> Self {
        let mut s = b.scope(name);
        SelfAttention {
            qkv: Linear::new(&mut s, "qkv", c, 3 * c, true),
            out: Linear::new(&mut s, "out", c, c, true),
            heads: c / HEAD_DIM,
            window,
        }
    }

    /// Global attention, or attention inside independent windows when a
    /// window size is set.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>, hw: (usize, usize)) -> Result<AttentionOutput<'t>> {
        let c = x.shape()[2];
        let qkv = self.qkv.forward(ctx, x)?;
        let q = qkv.narrow(2, 0, c)?;
        let k = qkv.narrow(2, c, c)?;
        let v = qkv.narrow(2, 2 * c, c)?;
        let windows = match self.window {
            Some(ws) if hw.0 > ws || hw.1 > ws => window_partition(hw, ws),
            _ => Vec::new(),
        };
        let (merged, probs) = if windows.is_empty() {
            let (o, p) = multi_head_attention(q, k, v, self.heads)?;
            (o, vec![p])
        } else {
            let mut outs = Vec::with_capacity(windows.len());
            let mut probs = Vec::with_capacity(windows.len());
            for idx in &windows {
                let (o, p) = multi_head_attention(
                    q.index_select(1, idx)?,
                    k.index_select(1, idx)?,
                    v.index_select(1, idx)?,
                    self.heads,
                )?;
                outs.push(o);
                probs.push(p);
            }
            let order: Vec<usize> = windows.iter().flatten().copied().collect();
            let mut inverse = vec![0; order.len()];
            for (pos, &tok) in order.iter().enumerate() {
                inverse[tok] = pos;
            }
            (Var::concat(&outs, 1)?.index_select(1, &inverse)?, probs)
        };
        Ok(AttentionOutput {
            out: self.out.forward(ctx, merged)?,
            probs,
        })
    }
}

/// Conditional positional encoding: a 3×3 depthwise conv over the token
/// grid, added residually.
#[derive(Debug, Clone)]
pub struct PosEncoding {
    pub conv: Conv2d,
    pub channels: usize,
}

impl PosEncoding {
    pub fn new(b: &mut Builder<'_>, name: &str, c: usize) -> Self {
        PosEncoding {
            conv: Conv2d::new(b, name, c, c, (KERNEL, KERNEL), Conv2dOptions::new(1, 1, c), true),
            channels: c,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>, hw: (usize, usize)) -> Result<Var<'t>> {
        let grid = tokens_to_grid(x, hw)?;
        let pe = grid_to_tokens(self.conv.forward(ctx, grid)?)?;
        Ok(x.add(pe)?)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub params: BlockParams,
    pub cpe: PosEncoding,
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

/// Transformer block output with the attention maps for inspection.
pub struct TransformerOutput<'t> {
    pub out: Var<'t>,
    pub attention: Vec<Var<'t>>,
}

impl TransformerBlock {
    pub fn new(b: &mut Builder<'_>, params: BlockParams) -> Result<Self> {
        if !params.kind.is_attention() {
            return Err(ModelError::Config(format!("{} is not an attention kind", params.kind)));
        }
        let c = params.channels;
        Ok(TransformerBlock {
            params,
            cpe: PosEncoding::new(b, "cpe", c),
            norm1: LayerNorm::new(b, "norm1", c),
            attn: SelfAttention::new(b, "attn", c, params.window()),
            norm2: LayerNorm::new(b, "norm2", c),
            ffn: Ffn::new(b, "ffn", c, params.hidden()),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>, hw: (usize, usize)) -> Result<Var<'t>> {
        Ok(self.forward_with_attention(ctx, x, hw)?.out)
    }

    /// `x: [B, N, c]` with `N = H·W` → `[B, N, c]`.
    pub fn forward_with_attention<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        x: Var<'t>,
        hw: (usize, usize),
    ) -> Result<TransformerOutput<'t>> {
        let s = x.shape();
        let c = self.params.channels;
        if s.len() != 3 || s[2] != c {
            return Err(ModelError::Input(format!("transformer block expects [B, N, {c}], got {s:?}")));
        }
        if s[1] != hw.0 * hw.1 {
            return Err(ModelError::Input(format!(
                "token count {} does not match grid {}x{}",
                s[1], hw.0, hw.1
            )));
        }
        let x = self.cpe.forward(ctx, x, hw)?;
        let att = self.attn.forward(ctx, self.norm1.forward(ctx, x)?, hw)?;
        let y1 = x.add(att.out)?;
        let y = y1.add(self.ffn.forward(ctx, self.norm2.forward(ctx, y1)?)?)?;
        Ok(TransformerOutput {
            out: y,
            attention: att.probs,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MlpBlock {
    pub params: BlockParams,
    pub tokens: usize,
    pub norm1: LayerNorm,
    pub token_mix: Ffn,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl MlpBlock {
    pub fn new(b: &mut Builder<'_>, params: BlockParams, tokens: usize) -> Result<Self> {
        if params.kind != GopKind::MLP {
            return Err(ModelError::Config(format!("{} is not the mlp kind", params.kind)));
        }
        if tokens == 0 {
            return Err(ModelError::Config("mlp block needs at least one token".into()));
        }
        let c = params.channels;
        Ok(MlpBlock {
            params,
            tokens,
            norm1: LayerNorm::new(b, "norm1", c),
            token_mix: Ffn::new(b, "token_mix", tokens, token_mix_hidden(tokens)),
            norm2: LayerNorm::new(b, "norm2", c),
            ffn: Ffn::new(b, "ffn", c, params.hidden()),
        })
    }

    /// `x: [B, N, c]` → `[B, N, c]`; `N` must equal the construction-time count.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let c = self.params.channels;
        if s.len() != 3 || s[2] != c || s[1] != self.tokens {
            return Err(ModelError::Input(format!(
                "mlp block expects [B, {}, {c}], got {s:?}",
                self.tokens
            )));
        }
        let t = self.norm1.forward(ctx, x)?.permute(&[0, 2, 1])?;
        let t = self.token_mix.forward(ctx, t)?.permute(&[0, 2, 1])?;
        let y1 = x.add(t)?;
        Ok(y1.add(self.ffn.forward(ctx, self.norm2.forward(ctx, y1)?)?)?)
    }
}

/// A materialised GOP block of any kind.
#[derive(Debug, Clone)]
pub enum GopBlock {
    Conv(ConvBlock),
    Transformer(TransformerBlock),
    Mlp(MlpBlock),
}

impl GopBlock {
    /// Build a block; `hw` fixes the token count for MLP blocks.
    pub fn new(b: &mut Builder<'_>, params: BlockParams, hw: (usize, usize)) -> Result<Self> {
        Ok(match params.kind {
            GopKind::Conv | GopKind::DWConv => GopBlock::Conv(ConvBlock::new(b, params)?),
            GopKind::SA | GopKind::LSA => GopBlock::Transformer(TransformerBlock::new(b, params)?),
            GopKind::MLP => GopBlock::Mlp(MlpBlock::new(b, params, hw.0 * hw.1)?),
        })
    }

    pub fn params(&self) -> BlockParams {
        match self {
            GopBlock::Conv(b) => b.params,
            GopBlock::Transformer(b) => b.params,
            GopBlock::Mlp(b) => b.params,
        }
    }

    /// Conv blocks take `[B, c, H, W]`; the others take `[B, N, c]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>, hw: (usize, usize)) -> Result<Var<'t>> {
        match self {
            GopBlock::Conv(b) => b.forward(ctx, x),
            GopBlock::Transformer(b) => b.forward(ctx, x, hw),
            GopBlock::Mlp(b) => b.forward(ctx, x),
        }
    }
}
