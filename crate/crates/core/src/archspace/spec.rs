use serde::{Deserialize, Serialize};

use super::ArchError;
use crate::dsm::DsmKind;
use crate::gops::{GopKind, EXPANSIONS, HEAD_DIM};
use crate::tensor::conv_output_len;

pub const SCHEMA_VERSION: u32 = 1;
/// Product of the stem stride and every boundary stride of a full network.
pub const TOTAL_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    /// Output channels of each stride-2 3×3 conv.
    pub channels: Vec<usize>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub gop: GopKind,
    /// Module at this stage's input boundary; recorded but not built for stage 0.
    pub dsm: DsmKind,
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    /// Stride of the boundary module entering this stage (1 for stage 0).
    pub stride_in: usize,
}

impl StageSpec {
    /// Whether this stage's channels must split into 32-wide heads, either
    /// for its blocks or for an attention-based input boundary.
    pub fn needs_head_channels(&self, index: usize) -> bool {
        self.gop.is_attention() || (index > 0 && self.dsm.is_token_based())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub classes: usize,
}

/// Fully resolved network description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub input_size: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
}

#[derive(Serialize, Deserialize)]
struct ArchFile {
    schema_version: u32,
    input_size: usize,
    stem: StemSpec,
    stages: Vec<StageSpec>,
    head: HeadSpec,
}

impl ArchitectureSpec {
    pub fn total_stride(&self) -> usize {
        self.stem.stride * self.stages.iter().map(|s| s.stride_in).product::<usize>()
    }

    /// Spatial side after the stem.
    pub fn stem_output_size(&self) -> usize {
        self.stem
            .channels
            .iter()
            .fold(self.input_size, |h, _| conv_output_len(h, 3, 2, 1))
    }

    /// Feature-map `(h, w)` inside each stage.
    pub fn stage_resolutions(&self) -> Vec<(usize, usize)> {
        let mut side = self.stem_output_size();
        self.stages
            .iter()
            .map(|s| {
                side /= s.stride_in;
                (side, side)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let bad = |m: String| Err(ArchError::Spec(m));
        if self.stages.is_empty() || self.stages.len() > super::NUM_STAGES {
            return bad(format!("expected 1..={} stages, got {}", super::NUM_STAGES, self.stages.len()));
        }
        if self.head.classes == 0 {
            return bad("head needs at least one class".into());
        }
        if self.stem.channels.is_empty() || self.stem.channels.contains(&0) {
            return bad("stem needs at least one conv with positive channels".into());
        }
        if self.stem.stride != 1 << self.stem.channels.len() {
            return bad(format!(
                "stem of {} stride-2 convs has stride {}, declared {}",
                self.stem.channels.len(),
                1 << self.stem.channels.len(),
                self.stem.stride
            ));
        }
        if self.stem.channels.last() != Some(&self.stages[0].channels) {
            return bad(format!(
                "stem ends at {} channels but stage 0 has {}",
                self.stem.channels.last().unwrap(),
                self.stages[0].channels
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !EXPANSIONS.contains(&s.expansion) {
                return bad(format!("stage {i}: expansion {} not in {EXPANSIONS:?}", s.expansion));
            }
            if s.channels == 0 {
                return bad(format!("stage {i}: channels must be positive"));
            }
            if s.repeats == 0 {
                return bad(format!("stage {i}: repeats must be at least 1"));
            }
            if i == 0 && s.stride_in != 1 {
                return bad(format!("stage 0 has no boundary module, stride_in must be 1, got {}", s.stride_in));
            }
            if s.stride_in != 1 && s.stride_in != 2 {
                return bad(format!("stage {i}: stride_in must be 1 or 2, got {}", s.stride_in));
            }
            if s.needs_head_channels(i) && s.channels % HEAD_DIM != 0 {
                return bad(format!(
                    "stage {i}: {}/{}-dsm needs channels divisible by {HEAD_DIM}, got {}",
                    s.gop, s.dsm, s.channels
                ));
            }
        }
        let total = self.total_stride();
        if self.stages.len() == super::NUM_STAGES && total != TOTAL_STRIDE {
            return bad(format!("total stride is {total}, expected {TOTAL_STRIDE}"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(total) {
            return bad(format!("input size {} not divisible by total stride {total}", self.input_size));
        }
        Ok(())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(ArchFile {
            schema_version: SCHEMA_VERSION,
            input_size: self.input_size,
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            head: self.head.clone(),
        })
        .expect("architecture serialises")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("architecture serialises")
    }

    /// Parse and validate an architecture document. Unknown top-level
    /// fields such as an attached `cost` are ignored.
    pub fn from_json(text: &str) -> Result<Self, ArchError> {
        let file: ArchFile = serde_json::from_str(text).map_err(|e| ArchError::Json {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(ArchError::Spec(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                file.schema_version
            )));
        }
        let spec = ArchitectureSpec {
            input_size: file.input_size,
            stem: file.stem,
            stages: file.stages,
            head: file.head,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_input_size(&self, input_size: usize) -> Result<Self, ArchError> {
        let spec = ArchitectureSpec {
            input_size,
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Short stable fingerprint of the canonical JSON form.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(&self.to_json_value()).expect("architecture serialises");
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Operator letters per stage, e.g. `DDDAA`.
    pub fn operator_signature(&self) -> String {
        self.stages
            .iter()
            .map(|s| match s.gop {
                GopKind::Conv => 'C',
                GopKind::DWConv => 'D',
                GopKind::SA => 'A',
                GopKind::LSA => 'W',
                GopKind::MLP => 'M',
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{family, ModelId};

    #[test]
    fn json_round_trip_and_digest() {
        let b0 = family(ModelId::B0);
        let text = b0.to_json();
        let back = ArchitectureSpec::from_json(&text).unwrap();
        assert_eq!(back, b0);
        assert_eq!(back.digest(), b0.digest());
        assert_eq!(b0.digest().len(), 16);
        assert_ne!(b0.digest(), family(ModelId::B1).digest());
        assert_eq!(b0.operator_signature(), "DDDAA");
    }

    #[test]
    fn extra_fields_are_ignored() {
        let mut v = family(ModelId::B0).to_json_value();
        v["cost"] = serde_json::json!({ "macs": 1 });
        assert!(ArchitectureSpec::from_json(&v.to_string()).is_ok());
    }

    #[test]
    fn json_errors() {
        match ArchitectureSpec::from_json("{\n  \"schema_version\": 1,\n  oops\n}") {
            Err(ArchError::Json { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let mut v = family(ModelId::B0).to_json_value();
        v["schema_version"] = 2.into();
        assert!(matches!(ArchitectureSpec::from_json(&v.to_string()), Err(ArchError::Spec(_))));
        let mut v = family(ModelId::B0).to_json_value();
        v["stages"][3]["gop"] = "transformer".into();
        assert!(matches!(ArchitectureSpec::from_json(&v.to_string()), Err(ArchError::Json { .. })));
    }

    #[test]
    fn validation_failures() {
        let b0 = family(ModelId::B0);
        let broken = |f: &dyn Fn(&mut ArchitectureSpec)| {
            let mut s = b0.clone();
            f(&mut s);
            s.validate().unwrap_err()
        };
        broken(&|s| s.stages[3].channels = 120);
        broken(&|s| s.stages[0].stride_in = 2);
        broken(&|s| s.stages[2].stride_in = 1);
        broken(&|s| s.stages[1].repeats = 0);
        broken(&|s| s.stages[1].expansion = 8);
        broken(&|s| s.stem.channels[1] = 40);
        broken(&|s| s.stem.stride = 2);
        broken(&|s| s.head.classes = 0);
        broken(&|s| s.input_size = 100);
        assert!(b0.with_input_size(224).is_ok());
        assert!(b0.with_input_size(200).is_err());
    }
}
