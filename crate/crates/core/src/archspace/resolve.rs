use serde::{Deserialize, Serialize};

use super::spec::{ArchitectureSpec, HeadSpec, StageSpec, StemSpec, TOTAL_STRIDE};
use super::space::{StageChoice, CHANNEL_MULTS, NUM_STAGES, REPEAT_DELTAS};
use super::ArchError;
use crate::dsm::DsmKind;
use crate::gops::{GopKind, EXPANSIONS, HEAD_DIM};

/// Reference sizes that stage choices are resolved against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBase {
    pub base_channels: [usize; NUM_STAGES],
    pub base_repeats: [usize; NUM_STAGES],
    pub stride_in: [usize; NUM_STAGES],
    pub stem_convs: usize,
    pub input_size: usize,
    pub classes: usize,
}

impl ReferenceBase {
    /// The bundled base: the B0 reference network is reachable with
    /// channel multipliers `1.5, 1.25, 1, 1, 1` and zero repeat deltas.
    pub fn bundled() -> Self {
        ReferenceBase {
            base_channels: [32, 64, 128, 128, 256],
            base_repeats: [2, 4, 4, 4, 8],
            stride_in: [1, 2, 2, 1, 2],
            stem_convs: 2,
            input_size: 160,
            classes: 1000,
        }
    }
}

/// Round a raw channel width to a legal one: up to a multiple of 32 when
/// attention heads are needed, otherwise to the nearest multiple of 8.
pub fn round_channels(raw: f64, needs_heads: bool) -> usize {
    let c = raw.round().max(1.0) as usize;
    if needs_heads {
        c.div_ceil(HEAD_DIM).max(1) * HEAD_DIM
    } else {
        (((c + 4) / 8) * 8).max(8)
    }
}

/// Stem of stride-2 convs ending at the stage-0 width, each earlier conv at
/// half the width of the next.
pub fn stem_for(stage0_channels: usize, convs: usize) -> StemSpec {
    let mut channels = vec![stage0_channels];
    for _ in 1..convs {
        let next = channels[0];
        channels.insert(0, next.div_ceil(2));
    }
    StemSpec {
        channels,
        stride: 1 << convs,
    }
}

fn needs_heads(gop: GopKind, dsm: DsmKind, index: usize) -> bool {
    gop.is_attention() || (index > 0 && dsm.is_token_based())
}

pub fn resolve(choices: &[StageChoice], base: &ReferenceBase) -> Result<ArchitectureSpec, ArchError> {
    if choices.len() != NUM_STAGES {
        return Err(ArchError::Spec(format!("expected {NUM_STAGES} stage choices, got {}", choices.len())));
    }
    let stages: Vec<StageSpec> = choices
        .iter()
        .enumerate()
        .map(|(i, ch)| {
            ch.to_tokens()?;
            Ok(StageSpec {
                gop: ch.gop,
                dsm: ch.dsm,
                expansion: ch.expansion,
                channels: round_channels(base.base_channels[i] as f64 * ch.channel_mult, needs_heads(ch.gop, ch.dsm, i)),
                repeats: (base.base_repeats[i] as i64 + ch.repeat_delta as i64).max(1) as usize,
                stride_in: base.stride_in[i],
            })
        })
        .collect::<Result<_, ArchError>>()?;
    let spec = ArchitectureSpec {
        input_size: base.input_size,
        stem: stem_for(stages[0].channels, base.stem_convs),
        stages,
        head: HeadSpec { classes: base.classes },
    };
    spec.validate()?;
    Ok(spec)
}

/// Find stage choices that resolve to `spec` under `base`, if any.
pub fn recover_choices(spec: &ArchitectureSpec, base: &ReferenceBase) -> Option<Vec<StageChoice>> {
    if spec.stages.len() != NUM_STAGES {
        return None;
    }
    let mut out = Vec::with_capacity(NUM_STAGES);
    for (i, s) in spec.stages.iter().enumerate() {
        let found = CHANNEL_MULTS.iter().find_map(|&cm| {
            REPEAT_DELTAS.iter().find_map(|&rd| {
                let ch = StageChoice::new(s.gop, s.dsm, s.expansion, cm, rd).ok()?;
                let c = round_channels(base.base_channels[i] as f64 * cm, needs_heads(s.gop, s.dsm, i));
                let r = (base.base_repeats[i] as i64 + rd as i64).max(1) as usize;
                (c == s.channels && r == s.repeats).then_some(ch)
            })
        })?;
        out.push(found);
    }
    let respec = resolve(&out, base).ok()?;
    (respec == *spec).then_some(out)
}

fn scale_width(c: usize, coef: f64, needs_heads: bool) -> usize {
    let c = ((c as f64 * coef).round() as usize).max(1);
    if needs_heads {
        c.div_ceil(HEAD_DIM) * HEAD_DIM
    } else {
        c
    }
}

/// Scale depth, width and input resolution together.
pub fn compound_scale(
    spec: &ArchitectureSpec,
    depth_coef: f64,
    width_coef: f64,
    input_size: usize,
) -> Result<ArchitectureSpec, ArchError> {
    if !(depth_coef >= 1.0) || !(width_coef >= 1.0) {
        return Err(ArchError::Scale(format!(
            "coefficients must be >= 1, got depth {depth_coef} width {width_coef}"
        )));
    }
    let stages: Vec<StageSpec> = spec
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| StageSpec {
            repeats: (s.repeats as f64 * depth_coef).ceil() as usize,
            channels: scale_width(s.channels, width_coef, s.needs_head_channels(i)),
            ..s.clone()
        })
        .collect();
    let n = spec.stem.channels.len();
    let mut stem_channels: Vec<usize> = spec.stem.channels[..n - 1]
        .iter()
        .map(|&c| scale_width(c, width_coef, false))
        .collect();
    stem_channels.push(stages[0].channels);
    let scaled = ArchitectureSpec {
        input_size,
        stem: StemSpec {
            channels: stem_channels,
            stride: spec.stem.stride,
        },
        stages,
        head: spec.head.clone(),
    };
    scaled.validate()?;
    Ok(scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelId {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
    B6,
}

impl ModelId {
    pub const ALL: [ModelId; 7] = [
        ModelId::B0,
        ModelId::B1,
        ModelId::B2,
        ModelId::B3,
        ModelId::B4,
        ModelId::B5,
        ModelId::B6,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for ModelId {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "b0" => Ok(ModelId::B0),
            "b1" => Ok(ModelId::B1),
            "b2" => Ok(ModelId::B2),
            "b3" => Ok(ModelId::B3),
            "b4" => Ok(ModelId::B4),
            "b5" => Ok(ModelId::B5),
            "b6" => Ok(ModelId::B6),
            _ => Err(ArchError::UnknownModel(s.to_string())),
        }
    }
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "b{}", self.index())
    }
}

const FAMILY_GOPS: [GopKind; 5] = [GopKind::DWConv, GopKind::DWConv, GopKind::DWConv, GopKind::SA, GopKind::SA];
const FAMILY_DSMS: [DsmKind; 5] = [DsmKind::L, DsmKind::L, DsmKind::L, DsmKind::LG, DsmKind::LG];
const FAMILY_EXPANSIONS: [usize; 5] = [4, 6, 3, 2, 5];

/// (channels, repeats, input size) per family member.
const FAMILY_SIZES: [([usize; 5], [usize; 5], usize); 7] = [
    ([48, 80, 128, 128, 256], [2, 4, 4, 4, 8], 160),
    ([48, 80, 128, 128, 256], [2, 4, 4, 4, 8], 224),
    ([48, 80, 128, 128, 256], [3, 6, 6, 6, 12], 256),
    ([56, 96, 160, 160, 288], [3, 7, 7, 7, 14], 288),
    ([64, 112, 192, 192, 352], [4, 9, 9, 9, 18], 320),
    ([64, 112, 224, 224, 448], [5, 10, 10, 10, 20], 384),
    ([96, 160, 256, 256, 512], [6, 12, 12, 12, 24], 448),
];

/// The bundled B0–B6 architectures.
pub fn family(model: ModelId) -> ArchitectureSpec {
    let (channels, repeats, input_size) = FAMILY_SIZES[model.index()];
    let stride_in = ReferenceBase::bundled().stride_in;
    let stages: Vec<StageSpec> = (0..NUM_STAGES)
        .map(|i| StageSpec {
            gop: FAMILY_GOPS[i],
            dsm: FAMILY_DSMS[i],
            expansion: FAMILY_EXPANSIONS[i],
            channels: channels[i],
            repeats: repeats[i],
            stride_in: stride_in[i],
        })
        .collect();
    let spec = ArchitectureSpec {
        input_size,
        stem: stem_for(channels[0], 2),
        stages,
        head: HeadSpec { classes: 1000 },
    };
    debug_assert!(spec.validate().is_ok());
    debug_assert_eq!(spec.total_stride(), TOTAL_STRIDE);
    spec
}

/// B0's stage choices under the bundled base.
pub fn b0_choices() -> Vec<StageChoice> {
    let mults = [1.5, 1.25, 1.0, 1.0, 1.0];
    (0..NUM_STAGES)
        .map(|i| StageChoice {
            gop: FAMILY_GOPS[i],
            dsm: FAMILY_DSMS[i],
            expansion: FAMILY_EXPANSIONS[i],
            channel_mult: mults[i],
            repeat_delta: 0,
        })
        .collect()
}

/// Small two-stage network for desk-scale training and oracle checks:
/// a stride-4 stem, one block per stage, and one stride-2 boundary.
pub fn micro_spec(
    stages: [(GopKind, DsmKind); 2],
    channels: usize,
    input_size: usize,
    classes: usize,
) -> Result<ArchitectureSpec, ArchError> {
    let stage_specs = stages
        .iter()
        .enumerate()
        .map(|(i, &(gop, dsm))| StageSpec {
            gop,
            dsm,
            expansion: EXPANSIONS[0],
            channels,
            repeats: 1,
            stride_in: if i == 0 { 1 } else { 2 },
        })
        .collect();
    let spec = ArchitectureSpec {
        input_size,
        stem: stem_for(channels, 2),
        stages: stage_specs,
        head: HeadSpec { classes },
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::tokenize;

    #[test]
    fn channel_rounding() {
        assert_eq!(round_channels(64.0 * 1.25, true), 96);
        assert_eq!(round_channels(64.0 * 1.25, false), 80);
        assert_eq!(round_channels(32.0 * 1.5, false), 48);
        assert_eq!(round_channels(32.0 * 0.5, true), 32);
        assert_eq!(round_channels(3.0, false), 8);
        assert_eq!(round_channels(100.0, false), 104);
    }

    #[test]
    fn stem_halves_towards_the_input() {
        let s = stem_for(48, 2);
        assert_eq!(s.channels, vec![24, 48]);
        assert_eq!(s.stride, 4);
        assert_eq!(stem_for(45, 3).channels, vec![12, 23, 45]);
    }

    #[test]
    fn b0_choices_resolve_to_b0() {
        let base = ReferenceBase::bundled();
        let b0 = family(ModelId::B0);
        assert_eq!(resolve(&b0_choices(), &base).unwrap(), b0);
        assert_eq!(recover_choices(&b0, &base), Some(b0_choices()));
        assert_eq!(b0.stage_resolutions().iter().map(|r| r.0).collect::<Vec<_>>(), vec![40, 20, 10, 10, 5]);
        assert_eq!(b0.total_stride(), TOTAL_STRIDE);
    }

    #[test]
    fn resolve_clamps_repeats_and_rounds_for_heads() {
        let base = ReferenceBase::bundled();
        let mut choices = b0_choices();
        choices[0] = StageChoice::new(GopKind::SA, DsmKind::L, 2, 0.75, -2).unwrap();
        choices[1] = StageChoice::new(GopKind::Conv, DsmKind::G, 2, 1.25, 0).unwrap();
        let spec = resolve(&choices, &base).unwrap();
        // 32 * 0.75 = 24 needs heads, so rounds up to 32; max(2 - 2, 1) = 1
        assert_eq!((spec.stages[0].channels, spec.stages[0].repeats), (32, 1));
        // token-based boundary forces a head multiple: 80 -> 96
        assert_eq!(spec.stages[1].channels, 96);
        assert!(resolve(&choices[..4], &base).is_err());
        assert_eq!(tokenize(&recover_choices(&spec, &base).unwrap()).unwrap().len(), 25);
    }

    #[test]
    fn depth_scaling_of_b0() {
        let b0 = family(ModelId::B0);
        let s = compound_scale(&b0, 1.5, 1.0, 256).unwrap();
        assert_eq!(s.stages.iter().map(|s| s.repeats).collect::<Vec<_>>(), vec![3, 6, 6, 6, 12]);
        assert_eq!(s.stages.iter().map(|s| s.repeats).collect::<Vec<_>>(), family(ModelId::B2).stages.iter().map(|s| s.repeats).collect::<Vec<_>>());
        assert_eq!(s.input_size, 256);
        assert!(compound_scale(&b0, 0.9, 1.0, 160).is_err());
        assert!(matches!(compound_scale(&b0, 1.0, 1.0, 100), Err(ArchError::Spec(_))));
    }

    #[test]
    fn width_scaling_keeps_head_multiples() {
        let s = compound_scale(&family(ModelId::B0), 1.0, 1.1, 160).unwrap();
        for st in &s.stages[3..] {
            assert_eq!(st.channels % HEAD_DIM, 0);
        }
        assert_eq!(s.stem.channels.last(), Some(&s.stages[0].channels));
    }

    #[test]
    fn family_is_valid_and_grows() {
        let mut last = 0;
        for id in ModelId::ALL {
            let spec = family(id);
            spec.validate().unwrap();
            assert_eq!(id.to_string().parse::<ModelId>().unwrap(), id);
            let work: usize = spec.stages.iter().map(|s| s.channels * s.repeats).sum::<usize>() * spec.input_size;
            assert!(work > last);
            last = work;
        }
        assert!(matches!("b7".parse::<ModelId>(), Err(ArchError::UnknownModel(_))));
        assert_eq!("B3".parse::<ModelId>().unwrap(), ModelId::B3);
    }

    #[test]
    fn micro_specs() {
        let spec = micro_spec([(GopKind::DWConv, DsmKind::L), (GopKind::SA, DsmKind::LG)], 32, 32, 4).unwrap();
        assert_eq!(spec.stage_resolutions(), vec![(8, 8), (4, 4)]);
        assert!(micro_spec([(GopKind::SA, DsmKind::L), (GopKind::SA, DsmKind::L)], 24, 32, 4).is_err());
    }
}
