use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::ArchError;
use crate::dsm::DsmKind;
use crate::gops::{GopKind, EXPANSIONS};

pub const NUM_STAGES: usize = 5;
pub const CHANNEL_MULTS: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];
pub const REPEAT_DELTAS: [i32; 5] = [-2, -1, 0, 1, 2];
/// Decisions per stage, in token order: gop, dsm, expansion, channel
/// multiplier, repeat delta.
pub const DECISIONS_PER_STAGE: usize = 5;
pub const ARITIES: [usize; DECISIONS_PER_STAGE] = [5, 3, 5, 5, 5];

/// Human-readable names of the per-stage decisions.
pub const DECISION_NAMES: [&str; DECISIONS_PER_STAGE] = ["gop", "dsm", "expansion", "channel_mult", "repeat_delta"];

/// One stage's searchable choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageChoice {
    pub gop: GopKind,
    pub dsm: DsmKind,
    pub expansion: usize,
    pub channel_mult: f64,
    pub repeat_delta: i32,
}

impl StageChoice {
    pub fn new(gop: GopKind, dsm: DsmKind, expansion: usize, channel_mult: f64, repeat_delta: i32) -> Result<Self, ArchError> {
        let choice = StageChoice {
            gop,
            dsm,
            expansion,
            channel_mult,
            repeat_delta,
        };
        choice.to_tokens()?;
        Ok(choice)
    }

    /// The identity-size choice for a given operator pair.
    pub fn identity(gop: GopKind, dsm: DsmKind, expansion: usize) -> Self {
        StageChoice {
            gop,
            dsm,
            expansion,
            channel_mult: 1.0,
            repeat_delta: 0,
        }
    }

    pub fn to_tokens(&self) -> Result<[usize; DECISIONS_PER_STAGE], ArchError> {
        let gop = GopKind::ALL.iter().position(|&g| g == self.gop).unwrap();
        let dsm = DsmKind::ALL.iter().position(|&d| d == self.dsm).unwrap();
        let e = EXPANSIONS
            .iter()
            .position(|&e| e == self.expansion)
            .ok_or_else(|| ArchError::Domain(format!("expansion {} not in {EXPANSIONS:?}", self.expansion)))?;
        let c = CHANNEL_MULTS
            .iter()
            .position(|&c| c == self.channel_mult)
            .ok_or_else(|| ArchError::Domain(format!("channel multiplier {} not in {CHANNEL_MULTS:?}", self.channel_mult)))?;
        let r = REPEAT_DELTAS
            .iter()
            .position(|&r| r == self.repeat_delta)
            .ok_or_else(|| ArchError::Domain(format!("repeat delta {} not in {REPEAT_DELTAS:?}", self.repeat_delta)))?;
        Ok([gop, dsm, e, c, r])
    }

    pub fn from_tokens(tokens: &[usize]) -> Result<Self, ArchError> {
        if tokens.len() != DECISIONS_PER_STAGE {
            return Err(ArchError::Token(format!(
                "a stage needs {DECISIONS_PER_STAGE} tokens, got {}",
                tokens.len()
            )));
        }
        for (i, (&t, &arity)) in tokens.iter().zip(&ARITIES).enumerate() {
            if t >= arity {
                return Err(ArchError::Token(format!(
                    "{} token {t} out of range 0..{arity}",
                    DECISION_NAMES[i]
                )));
            }
        }
        Ok(StageChoice {
            gop: GopKind::ALL[tokens[0]],
            dsm: DsmKind::ALL[tokens[1]],
            expansion: EXPANSIONS[tokens[2]],
            channel_mult: CHANNEL_MULTS[tokens[3]],
            repeat_delta: REPEAT_DELTAS[tokens[4]],
        })
    }
}

/// Flat per-stage token encoding of an architecture, stage-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Result<Self, ArchError> {
        if tokens.is_empty() || !tokens.len().is_multiple_of(DECISIONS_PER_STAGE) {
            return Err(ArchError::Token(format!(
                "token count {} is not a positive multiple of {DECISIONS_PER_STAGE}",
                tokens.len()
            )));
        }
        for stage in tokens.chunks(DECISIONS_PER_STAGE) {
            StageChoice::from_tokens(stage)?;
        }
        Ok(TokenSequence(tokens))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_stages(&self) -> usize {
        self.0.len() / DECISIONS_PER_STAGE
    }

    /// Semicolon-separated rendering used in history files.
    pub fn to_delimited(&self) -> String {
        self.0.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";")
    }

    pub fn from_delimited(s: &str) -> Result<Self, ArchError> {
        let tokens = s
            .split(';')
            .map(|t| t.trim().parse::<usize>().map_err(|e| ArchError::Token(format!("bad token {t:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        TokenSequence::new(tokens)
    }
}

impl std::fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_delimited())
    }
}

pub fn tokenize(choices: &[StageChoice]) -> Result<TokenSequence, ArchError> {
    let mut tokens = Vec::with_capacity(choices.len() * DECISIONS_PER_STAGE);
    for c in choices {
        tokens.extend(c.to_tokens()?);
    }
    TokenSequence::new(tokens)
}

pub fn detokenize(tokens: &TokenSequence) -> Vec<StageChoice> {
    tokens
        .as_slice()
        .chunks(DECISIONS_PER_STAGE)
        .map(|s| StageChoice::from_tokens(s).expect("validated on construction"))
        .collect()
}

/// Sizes of the unified search space with `stages` stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceSize {
    pub per_stage: BigUint,
    pub total: BigUint,
}

pub fn space_size(stages: usize) -> SpaceSize {
    let per_stage: BigUint = ARITIES.iter().map(|&a| BigUint::from(a)).product();
    let total = num_bigint::BigUint::pow(&per_stage, stages as u32);
    SpaceSize { per_stage, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::b0_choices;

    #[test]
    fn sizes() {
        let s = space_size(NUM_STAGES);
        assert_eq!(s.per_stage, BigUint::from(1875u32));
        assert_eq!(s.total.to_string(), "23174285888671875");
        assert_eq!(space_size(1).total, s.per_stage);
    }

    #[test]
    fn b0_tokens() {
        let seq = tokenize(&b0_choices()).unwrap();
        assert_eq!(
            seq.as_slice(),
            &[1, 0, 2, 4, 2, 1, 0, 4, 3, 2, 1, 0, 1, 2, 2, 2, 1, 0, 2, 2, 2, 1, 3, 2, 2]
        );
        assert_eq!(seq.num_stages(), 5);
        assert_eq!(detokenize(&seq), b0_choices());
        assert_eq!(TokenSequence::from_delimited(&seq.to_delimited()).unwrap(), seq);
    }

    #[test]
    fn token_errors() {
        assert!(matches!(TokenSequence::new(vec![]), Err(ArchError::Token(_))));
        assert!(TokenSequence::new(vec![0; 7]).is_err());
        // dsm arity is three
        assert!(TokenSequence::new(vec![0, 3, 0, 0, 0]).is_err());
        assert!(TokenSequence::new(vec![4, 2, 4, 4, 4]).is_ok());
        assert!(TokenSequence::from_delimited("0;0;x;0;0").is_err());
        assert!(StageChoice::from_tokens(&[0, 0, 0]).is_err());
    }

    #[test]
    fn off_domain_choices_are_rejected() {
        use crate::dsm::DsmKind;
        use crate::gops::GopKind;
        assert!(matches!(
            StageChoice::new(GopKind::SA, DsmKind::L, 7, 1.0, 0),
            Err(ArchError::Domain(_))
        ));
        assert!(StageChoice::new(GopKind::SA, DsmKind::L, 2, 1.1, 0).is_err());
        assert!(StageChoice::new(GopKind::SA, DsmKind::L, 2, 1.0, 3).is_err());
        assert!(StageChoice::new(GopKind::SA, DsmKind::L, 2, 0.5, -2).is_ok());
    }
}
