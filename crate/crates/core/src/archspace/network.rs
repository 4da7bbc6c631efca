use super::spec::ArchitectureSpec;
use super::ArchError;
use crate::dsm::{Dsm, DsmParams};
use crate::gops::{BlockParams, GopBlock};
use crate::nn::{grid_to_tokens, tokens_to_grid, BatchNorm2d, Builder, Conv2d, Linear, ModelError};
use crate::params::{Ctx, Initializer, ParamStore};
use crate::tensor::{Conv2dOptions, Var};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
struct StemLayer {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
struct Stage {
    dsm: Option<Dsm>,
    blocks: Vec<GopBlock>,
    hw: (usize, usize),
}

/// Executable network built from an [`ArchitectureSpec`].
///
/// Parameter names are prefixed `stem.`, `stage{i}.dsm.`, `stage{i}.block{j}.`
/// and `head.`; MAC counting uses the components `stem`, `stage{i}.dsm`,
/// `stage{i}.blocks` and `head`.
#[derive(Debug, Clone)]
pub struct Network {
    spec: ArchitectureSpec,
    params: ParamStore,
    stem: Vec<StemLayer>,
    stages: Vec<Stage>,
    head: Linear,
}

enum Feature<'t> {
    Grid(Var<'t>),
    Tokens(Var<'t>),
}

impl<'t> Feature<'t> {
    fn grid(self, hw: (usize, usize)) -> Result<Var<'t>, ModelError> {
        match self {
            Feature::Grid(v) => Ok(v),
            Feature::Tokens(v) => tokens_to_grid(v, hw),
        }
    }

    fn tokens(self) -> Result<Var<'t>, ModelError> {
        match self {
            Feature::Grid(v) => grid_to_tokens(v),
            Feature::Tokens(v) => Ok(v),
        }
    }
}

fn model_err(e: ModelError) -> ArchError {
    ArchError::Model(e)
}

/// Build the network for `spec` with weights drawn from `seed`.
pub fn materialize(spec: &ArchitectureSpec, seed: u64) -> Result<Network, ArchError> {
    spec.validate()?;
    let mut params = ParamStore::new();
    let mut init = Initializer::new(seed);
    let mut b = Builder::new(&mut params, &mut init);

    let mut stem = Vec::new();
    {
        let mut sb = b.scope("stem");
        let mut c_prev = INPUT_CHANNELS;
        for (i, &c) in spec.stem.channels.iter().enumerate() {
            stem.push(StemLayer {
                conv: Conv2d::new(&mut sb, &format!("conv{i}"), c_prev, c, (3, 3), Conv2dOptions::new(2, 1, 1), false),
                bn: BatchNorm2d::new(&mut sb, &format!("bn{i}"), c),
            });
            c_prev = c;
        }
    }

    let resolutions = spec.stage_resolutions();
    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut c_prev = *spec.stem.channels.last().unwrap();
    for (i, (s, &hw)) in spec.stages.iter().zip(&resolutions).enumerate() {
        let mut stage_b = b.scope(&format!("stage{i}"));
        let dsm = if i == 0 {
            None
        } else {
            let params = DsmParams::new(s.dsm, c_prev, s.channels, s.stride_in).map_err(model_err)?;
            let mut db = stage_b.scope("dsm");
            Some(Dsm::new(&mut db, params).map_err(model_err)?)
        };
        let bp = BlockParams::new(s.gop, s.channels, s.expansion).map_err(model_err)?;
        let blocks = (0..s.repeats)
            .map(|j| {
                let mut bb = stage_b.scope(&format!("block{j}"));
                GopBlock::new(&mut bb, bp, hw)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(model_err)?;
        stages.push(Stage { dsm, blocks, hw });
        c_prev = s.channels;
    }
    let head = {
        let mut hb = b.scope("head");
        Linear::new(&mut hb, "fc", c_prev, spec.head.classes, true)
    };
    Ok(Network {
        spec: spec.clone(),
        params,
        stem,
        stages,
        head,
    })
}

impl Network {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> u64 {
        self.params.num_params()
    }

    /// Images `[B, 3, S, S]` → logits `[B, classes]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        let s = x.shape();
        let side = self.spec.input_size;
        if s.len() != 4 || s[1] != INPUT_CHANNELS || s[2] != side || s[3] != side {
            return Err(ModelError::Input(format!(
                "network expects [B, {INPUT_CHANNELS}, {side}, {side}], got {s:?}"
            )));
        }
        let tape = ctx.tape();
        let mut h = tape.with_component("stem", || -> Result<Var<'t>, ModelError> {
            let mut h = x;
            for layer in &self.stem {
                h = layer.bn.forward(ctx, layer.conv.forward(ctx, h)?)?.gelu()?;
            }
            Ok(h)
        })?;
        let mut feat = Feature::Grid(h);
        let mut hw = (h.shape()[2], h.shape()[3]);
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(dsm) = &stage.dsm {
                feat = tape.with_component(&format!("stage{i}.dsm"), || -> Result<Feature<'t>, ModelError> {
                    Ok(match dsm {
                        Dsm::Local(d) => Feature::Grid(d.forward(ctx, feat.grid(hw)?)?),
                        Dsm::Attention(d) => Feature::Tokens(d.forward(ctx, feat.tokens()?, hw)?.out),
                    })
                })?;
                hw = stage.hw;
            }
            feat = tape.with_component(&format!("stage{i}.blocks"), || -> Result<Feature<'t>, ModelError> {
                for block in &stage.blocks {
                    feat = match block {
                        GopBlock::Conv(_) => Feature::Grid(block.forward(ctx, feat.grid(hw)?, hw)?),
                        _ => Feature::Tokens(block.forward(ctx, feat.tokens()?, hw)?),
                    };
                }
                Ok(feat)
            })?;
        }
        h = match feat {
            Feature::Grid(v) => {
                let s = v.shape();
                v.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2)?
            }
            Feature::Tokens(v) => v.mean_axis(1)?,
        };
        tape.with_component("head", || self.head.forward(ctx, h))
    }
}
