use serde::{Deserialize, Serialize};

use super::SearchError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Target MACs `t`.
    pub target_flops: f64,
    pub alpha: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            target_flops: 550e6,
            alpha: 0.07,
        }
    }
}

impl RewardConfig {
    pub fn new(target_flops: f64, alpha: f64) -> Result<Self, SearchError> {
        if !(target_flops > 0.0) || !target_flops.is_finite() {
            return Err(SearchError::Config(format!("target FLOPs must be positive, got {target_flops}")));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(SearchError::Config(format!("alpha must be non-negative, got {alpha}")));
        }
        Ok(RewardConfig { target_flops, alpha })
    }
}

/// Weighted product `a · (t / f)^α`.
pub fn reward(accuracy: f64, macs: f64, cfg: &RewardConfig) -> Result<f64, SearchError> {
    if !(macs > 0.0) {
        return Err(SearchError::Config(format!("FLOPs must be positive, got {macs}")));
    }
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(SearchError::Config(format!("accuracy must lie in [0, 1], got {accuracy}")));
    }
    Ok(accuracy * (cfg.target_flops / macs).powf(cfg.alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_ratio_and_zero_alpha() {
        let cfg = RewardConfig::default();
        assert_eq!(reward(0.63, 550e6, &cfg).unwrap(), 0.63);
        let flat = RewardConfig::new(550e6, 0.0).unwrap();
        assert_eq!(reward(0.4, 1e9, &flat).unwrap(), 0.4);
        assert_eq!(reward(0.4, 1e3, &flat).unwrap(), 0.4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = RewardConfig::default();
        assert!(reward(0.5, 0.0, &cfg).is_err());
        assert!(reward(0.5, -3.0, &cfg).is_err());
        assert!(reward(1.5, 1.0, &cfg).is_err());
        assert!(RewardConfig::new(0.0, 0.07).is_err());
        assert!(RewardConfig::new(1.0, -0.1).is_err());
    }
}
