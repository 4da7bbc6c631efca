//! Closed-form multiply-accumulate and parameter counts.
//!
//! FLOPs are reported as MACs. Normalisation, activation, softmax and
//! pooling cost nothing; their parameters are counted. Attention counts
//! `N_q·N_k·d` per head for both `QKᵀ` and `softmax·V`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::archspace::{materialize, ArchError, ArchitectureSpec, INPUT_CHANNELS};
use crate::dsm::{DsmKind, DsmParams};
use crate::gops::{token_mix_hidden, window_partition, BlockParams, GopKind, KERNEL};
use crate::params::{Ctx, Mode};
use crate::tensor::{conv_output_len, Tape, Tensor};

const K2: u64 = (KERNEL * KERNEL) as u64;

/// MACs of one GOP block on an `h×w` map, excluding the positional
/// encoding of attention blocks (see [`pos_encoding_macs`]).
pub fn block_macs(p: &BlockParams, h: usize, w: usize) -> u64 {
    let (c, ec) = (p.channels as u64, p.hidden() as u64);
    let n = (h * w) as u64;
    let ffn = 2 * n * c * ec;
    match p.kind {
        GopKind::Conv => n * (c * ec + ec * ec * K2 + ec * c),
        GopKind::DWConv => n * (c * ec + ec * K2 + ec * c),
        GopKind::SA => 3 * n * c * c + 2 * n * n * c + n * c * c + ffn,
        GopKind::LSA => {
            let windows: u64 = if h == 0 || w == 0 {
                0
            } else {
                window_partition((h, w), p.window().unwrap_or(h.max(w)))
                    .iter()
                    .map(|win| (win.len() * win.len()) as u64)
                    .sum()
            };
            3 * n * c * c + 2 * windows * c + n * c * c + ffn
        }
        GopKind::MLP => 2 * c * n * token_mix_hidden(h * w) as u64 + ffn,
    }
}

/// Depthwise 3×3 positional-encoding conv inside attention blocks.
pub fn pos_encoding_macs(channels: usize, h: usize, w: usize) -> u64 {
    channels as u64 * K2 * (h * w) as u64
}

pub fn pos_encoding_params(channels: usize) -> u64 {
    channels as u64 * (K2 + 1)
}

/// Trainable parameters of one GOP block (no positional encoding);
/// `tokens` fixes the token-mixing width of MLP blocks.
pub fn block_params(p: &BlockParams, tokens: usize) -> u64 {
    let (c, ec) = (p.channels as u64, p.hidden() as u64);
    let ffn = (c * ec + ec) + (ec * c + c);
    match p.kind {
        GopKind::Conv | GopKind::DWConv => {
            let inner = if p.kind == GopKind::DWConv { ec * K2 } else { ec * ec * K2 };
            c * ec + 2 * ec + inner + 2 * ec + ec * c + 2 * c
        }
        GopKind::SA | GopKind::LSA => 2 * c + (3 * c * c + 3 * c) + (c * c + c) + 2 * c + ffn,
        GopKind::MLP => {
            let n = tokens as u64;
            let nh = token_mix_hidden(tokens) as u64;
            2 * c + (n * nh + nh) + (nh * n + n) + 2 * c + ffn
        }
    }
}

/// Total per-block cost including the positional encoding where present.
pub fn block_total_macs(p: &BlockParams, h: usize, w: usize) -> u64 {
    block_macs(p, h, w) + if p.kind.is_attention() { pos_encoding_macs(p.channels, h, w) } else { 0 }
}

pub fn block_total_params(p: &BlockParams, tokens: usize) -> u64 {
    block_params(p, tokens) + if p.kind.is_attention() { pos_encoding_params(p.channels) } else { 0 }
}

/// MACs of a downsampling module applied to an `h×w` input.
pub fn dsm_macs(p: &DsmParams, h: usize, w: usize) -> u64 {
    let (ci, co, s) = (p.c_in as u64, p.c_out as u64, p.stride);
    let n_in = (h * w) as u64;
    let n_out = ((h / s) * (w / s)) as u64;
    match p.kind {
        DsmKind::L => ci * co * K2 * n_out,
        DsmKind::LG | DsmKind::G => {
            let query = match p.kind {
                DsmKind::LG => ci * co * K2 * n_out,
                _ => {
                    let n_mid = (h * w / s) as u64;
                    co * ci * KERNEL as u64 * n_mid + co * co * KERNEL as u64 * n_out
                }
            };
            let kv = 2 * n_in * ci * co;
            let attn = 2 * n_out * n_in * co;
            let out = n_out * co * co;
            let shortcut = n_out * ci * co;
            query + kv + attn + out + shortcut
        }
    }
}

pub fn dsm_params(p: &DsmParams) -> u64 {
    let (ci, co) = (p.c_in as u64, p.c_out as u64);
    match p.kind {
        DsmKind::L => ci * co * K2 + 2 * co,
        DsmKind::LG | DsmKind::G => {
            let query = match p.kind {
                DsmKind::LG => ci * co * K2 + co,
                _ => (ci * co * KERNEL as u64 + co) + (co * co * KERNEL as u64 + co),
            };
            2 * ci + query + 2 * (ci * co + co) + (co * co + co) + (ci * co + co)
        }
    }
}

/// Per-component MAC and parameter totals of a full network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_size: usize,
    pub stem_macs: u64,
    pub per_stage_macs: Vec<u64>,
    /// Boundary modules entering stages `1..`.
    pub per_boundary_dsm_macs: Vec<u64>,
    pub head_macs: u64,
    pub total_macs: u64,
    pub stem_params: u64,
    pub per_stage_params: Vec<u64>,
    pub per_boundary_dsm_params: Vec<u64>,
    pub head_params: u64,
    pub total_params: u64,
}

impl CostReport {
    /// `(component, macs, params)` rows in execution order, using the
    /// component names of the materialised network.
    pub fn components(&self) -> Vec<(String, u64, u64)> {
        let mut rows = vec![("stem".to_string(), self.stem_macs, self.stem_params)];
        for i in 0..self.per_stage_macs.len() {
            if i > 0 {
                rows.push((
                    format!("stage{i}.dsm"),
                    self.per_boundary_dsm_macs[i - 1],
                    self.per_boundary_dsm_params[i - 1],
                ));
            }
            rows.push((format!("stage{i}.blocks"), self.per_stage_macs[i], self.per_stage_params[i]));
        }
        rows.push(("head".to_string(), self.head_macs, self.head_params));
        rows
    }
}

pub fn arch_cost(spec: &ArchitectureSpec) -> CostReport {
    let mut side = spec.input_size;
    let mut c_prev = INPUT_CHANNELS;
    let (mut stem_macs, mut stem_params) = (0u64, 0u64);
    for &c in &spec.stem.channels {
        side = conv_output_len(side, KERNEL, 2, 1);
        stem_macs += (c_prev * c) as u64 * K2 * (side * side) as u64;
        stem_params += (c_prev * c) as u64 * K2 + 2 * c as u64;
        c_prev = c;
    }

    let mut per_stage_macs = Vec::new();
    let mut per_stage_params = Vec::new();
    let mut dsm_m = Vec::new();
    let mut dsm_p = Vec::new();
    let mut hw = (side, side);
    for (i, s) in spec.stages.iter().enumerate() {
        if i > 0 {
            let p = DsmParams {
                kind: s.dsm,
                c_in: c_prev,
                c_out: s.channels,
                stride: s.stride_in,
            };
            dsm_m.push(dsm_macs(&p, hw.0, hw.1));
            dsm_p.push(dsm_params(&p));
            hw = (hw.0 / s.stride_in, hw.1 / s.stride_in);
        }
        let bp = BlockParams {
            kind: s.gop,
            channels: s.channels,
            expansion: s.expansion,
        };
        per_stage_macs.push(s.repeats as u64 * block_total_macs(&bp, hw.0, hw.1));
        per_stage_params.push(s.repeats as u64 * block_total_params(&bp, hw.0 * hw.1));
        c_prev = s.channels;
    }
    let classes = spec.head.classes as u64;
    let head_macs = c_prev as u64 * classes;
    let head_params = c_prev as u64 * classes + classes;
    let total_macs = stem_macs + per_stage_macs.iter().sum::<u64>() + dsm_m.iter().sum::<u64>() + head_macs;
    let total_params = stem_params + per_stage_params.iter().sum::<u64>() + dsm_p.iter().sum::<u64>() + head_params;
    CostReport {
        input_size: spec.input_size,
        stem_macs,
        per_stage_macs,
        per_boundary_dsm_macs: dsm_m,
        head_macs,
        total_macs,
        stem_params,
        per_stage_params,
        per_boundary_dsm_params: dsm_p,
        head_params,
        total_params,
    }
}

/// Analytic and instrumented counts for one network component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    pub analytic_macs: u64,
    pub counted_macs: u64,
    pub analytic_params: u64,
    pub counted_params: u64,
}

impl ComponentCheck {
    pub fn matches(&self) -> bool {
        self.analytic_macs == self.counted_macs && self.analytic_params == self.counted_params
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountingReport {
    pub rows: Vec<ComponentCheck>,
}

impl CountingReport {
    pub fn mismatches(&self) -> Vec<&ComponentCheck> {
        self.rows.iter().filter(|r| !r.matches()).collect()
    }

    pub fn all_match(&self) -> bool {
        self.mismatches().is_empty()
    }
}

/// Run the materialised network on one input with MAC counting enabled and
/// compare every component against [`arch_cost`].
pub fn verify_against_counting(spec: &ArchitectureSpec, seed: u64) -> Result<CountingReport, ArchError> {
    let net = materialize(spec, seed)?;
    let tape = Tape::inference();
    tape.enable_mac_counting();
    let ctx = Ctx::new(&tape, net.params(), Mode::Eval);
    let side = spec.input_size;
    let x = tape.constant(Tensor::from_fn(&[1, INPUT_CHANNELS, side, side], |i| ((i % 17) as f64 - 8.0) / 8.0));
    net.forward(&ctx, x)?;
    let counted: BTreeMap<String, u64> = tape.mac_counts().unwrap_or_default();
    let report = arch_cost(spec);
    let rows = report
        .components()
        .into_iter()
        .map(|(name, macs, params)| {
            let prefix = match name.strip_suffix(".blocks") {
                Some(stage) => format!("{stage}.block"),
                None => format!("{name}."),
            };
            ComponentCheck {
                counted_macs: counted.get(&name).copied().unwrap_or(0),
                counted_params: net.params().num_params_with_prefix(&prefix),
                component: name,
                analytic_macs: macs,
                analytic_params: params,
            }
        })
        .collect();
    Ok(CountingReport { rows })
}
