use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    CteShaped,
    ThrottleShaped,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub mode: RewardMode,
    /// Throttle penalty weight when leaving the track.
    pub w1: f64,
    /// Throttle bonus weight while on track.
    pub w2: f64,
    pub max_cte: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            mode: RewardMode::ThrottleShaped,
            w1: 5.0,
            w2: 0.1,
            max_cte: super::track::DEFAULT_MAX_CTE,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1.is_finite() && self.w2.is_finite() && self.w1 >= 0.0 && self.w2 >= 0.0) {
            return Err(Error::Config(format!("reward weights must be finite and non-negative: w1={}, w2={}", self.w1, self.w2)));
        }
        if !(self.max_cte > 0.0) {
            return Err(Error::Config(format!("max_cte must be positive, got {}", self.max_cte)));
        }
        Ok(())
    }
}

/// `1 − (|cte| / max_cte) · speed`, evaluated exactly as written.
pub fn reward_cte_shaped(cte: f64, max_cte: f64, speed: f64) -> Result<f64> {
    if !(max_cte > 0.0) {
        return Err(Error::Config(format!("max_cte must be positive, got {max_cte}")));
    }
    Ok(1.0 - (cte.abs() / max_cte) * speed)
}

/// `1 + w2·throttle` on track, `−10 − w1·throttle` when leaving it.
pub fn reward_throttle_shaped(on_track: bool, throttle: f64, params: &RewardParams) -> f64 {
    if on_track {
        1.0 + params.w2 * throttle
    } else {
        -10.0 - params.w1 * throttle
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cte_shaped_examples() {
        assert_eq!(reward_cte_shaped(0.0, 2.5, 3.7).unwrap(), 1.0);
        assert_eq!(reward_cte_shaped(2.5, 2.5, 1.0).unwrap(), 0.0);
        assert_eq!(reward_cte_shaped(1.25, 2.5, 2.0).unwrap(), 0.0);
        assert_eq!(reward_cte_shaped(-1.25, 2.5, 2.0).unwrap(), 0.0);
        assert!(matches!(reward_cte_shaped(1.0, 0.0, 1.0), Err(Error::Config(_))));
        assert!(reward_cte_shaped(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn throttle_shaped_examples() {
        let p = RewardParams { w1: 3.0, w2: 0.7, ..Default::default() };
        assert_eq!(reward_throttle_shaped(true, 0.0, &p), 1.0);
        assert_eq!(reward_throttle_shaped(false, 0.0, &p), -10.0);
        let p = RewardParams { w2: 0.1, ..Default::default() };
        assert!((reward_throttle_shaped(true, 0.5, &p) - 1.05).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn throttle_shaped_ranges(on in any::<bool>(), th in 0.0f64..=1.0, w1 in 0.0f64..100.0, w2 in 0.0f64..100.0) {
            let p = RewardParams { w1, w2, ..Default::default() };
            let r = reward_throttle_shaped(on, th, &p);
            if on {
                prop_assert!((1.0..=1.0 + w2).contains(&r));
                prop_assert!(r > -4.5);
            } else {
                prop_assert!((-10.0 - w1..=-10.0).contains(&r));
                prop_assert!(r < -4.5);
            }
        }
    }
}
