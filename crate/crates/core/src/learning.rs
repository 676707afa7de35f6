//! Active-learning functions: the U-function, the HF/LF filtering decision,
//! the sign probability of a corrected prediction and the running quantile
//! that tracks the intermediate threshold of a level.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::std_normal_cdf;

#[derive(Debug, Error, PartialEq)]
pub enum LearningError {
    #[error("u_threshold must be positive and finite, got {0}")]
    UThreshold(f64),
    #[error("sigma_floor must be positive and finite, got {0}")]
    SigmaFloor(f64),
    #[error("p0 must lie in (0, 1), got {0}")]
    P0(f64),
}

/// Which threshold the U-function measures against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningMode {
    /// GP surrogate of the HF model itself, running level threshold.
    SingleFidelitySubsetDependent,
    /// Corrected LF model, always against the final threshold.
    MultifidelitySubsetIndependent,
    /// Corrected LF model, running level threshold on intermediate levels.
    MultifidelitySubsetDependent,
}

impl LearningMode {
    pub fn is_subset_dependent(self) -> bool {
        !matches!(self, LearningMode::MultifidelitySubsetIndependent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    pub mode: LearningMode,
    pub u_threshold: f64,
    pub sigma_floor: f64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self { mode: LearningMode::MultifidelitySubsetDependent, u_threshold: 2.0, sigma_floor: 1e-12 }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        if !(self.u_threshold > 0.0 && self.u_threshold.is_finite()) {
            return Err(LearningError::UThreshold(self.u_threshold));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(LearningError::SigmaFloor(self.sigma_floor));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    AcceptLf,
    CallHf,
}

/// Number of values at or above the (1 − p0) quantile of `n` values.
pub fn upper_count(p0: f64, n: usize) -> usize {
    // Guard against p0·n landing a hair above an integer.
    let raw = p0 * n as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 * raw.max(1.0) {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

/// Minimum number of values before the tracker reports a finite threshold.
pub fn warm_up_count(p0: f64) -> usize {
    upper_count(1.0 / p0, 1).max(1)
}

/// Batch form of the tracker: the m-th largest value with m = ceil(p0·N).
pub fn batch_quantile(values: &[f64], p0: f64) -> f64 {
    if values.len() < warm_up_count(p0) {
        return f64::INFINITY;
    }
    let m = upper_count(p0, values.len()).max(1);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[m - 1]
}

/// Running (1 − p0) quantile with O(log N) insertion.
///
/// `upper` holds the m largest values seen (a min-heap), `lower` the rest
/// (a max-heap).
#[derive(Debug, Clone)]
pub struct QuantileTracker {
    p0: f64,
    upper: BinaryHeap<Reverse<OrderedFloat<f64>>>,
    lower: BinaryHeap<OrderedFloat<f64>>,
}

impl QuantileTracker {
    pub fn new(p0: f64) -> Result<Self, LearningError> {
        if !(p0 > 0.0 && p0 < 1.0) {
            return Err(LearningError::P0(p0));
        }
        Ok(Self { p0, upper: BinaryHeap::new(), lower: BinaryHeap::new() })
    }

    pub fn len(&self) -> usize {
        self.upper.len() + self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, value: f64) {
        let v = OrderedFloat(value);
        match self.upper.peek() {
            Some(Reverse(min_upper)) if v <= *min_upper => self.lower.push(v),
            _ => self.upper.push(Reverse(v)),
        }
        let m = upper_count(self.p0, self.len()).max(1);
        while self.upper.len() > m {
            let Reverse(x) = self.upper.pop().expect("non-empty");
            self.lower.push(x);
        }
        while self.upper.len() < m {
            let x = self.lower.pop().expect("non-empty");
            self.upper.push(Reverse(x));
        }
    }

    pub fn threshold(&self) -> f64 {
        if self.len() < warm_up_count(self.p0) {
            return f64::INFINITY;
        }
        self.upper.peek().map_or(f64::INFINITY, |Reverse(x)| x.0)
    }
}

/// Distance to the threshold in units of predictive standard deviation.
pub fn u_value(
    config: &LearningConfig,
    mean: f64,
    std: f64,
    level_threshold: f64,
    final_threshold: f64,
    is_final_level: bool,
) -> f64 {
    let threshold = if config.mode.is_subset_dependent() && !is_final_level {
        level_threshold
    } else {
        final_threshold
    };
    raw_u(mean, std, threshold, config.sigma_floor)
}

/// U against an explicit threshold with the degenerate-std rules applied.
pub fn raw_u(mean: f64, std: f64, threshold: f64, sigma_floor: f64) -> f64 {
    let numerator = (mean - threshold).abs();
    if numerator.is_nan() {
        return 0.0;
    }
    if std < sigma_floor {
        return if numerator > 0.0 { f64::INFINITY } else { 0.0 };
    }
    numerator / std
}

pub fn decide_fidelity(u: f64, config: &LearningConfig) -> Fidelity {
    if u >= config.u_threshold {
        Fidelity::AcceptLf
    } else {
        Fidelity::CallHf
    }
}

/// Probability that the corrected prediction falls on the correct side of
/// the threshold.
pub fn sign_probability(u: f64) -> f64 {
    if u == f64::INFINITY {
        1.0
    } else {
        std_normal_cdf(u)
    }
}

/// Probability that the true output is at or above `threshold`, given a
/// Gaussian prediction. Equals the sign probability when the prediction is
/// above the threshold and its complement otherwise.
pub fn exceedance_probability(mean: f64, std: f64, threshold: f64, sigma_floor: f64) -> f64 {
    if std < sigma_floor {
        return if mean >= threshold { 1.0 } else { 0.0 };
    }
    let u = raw_u(mean, std, threshold, sigma_floor);
    let phi = sign_probability(u);
    if mean >= threshold {
        phi
    } else {
        1.0 - phi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracker_examples() {
        let mut t = QuantileTracker::new(0.1).unwrap();
        for v in 1..=3 {
            t.push(v as f64);
        }
        assert_eq!(t.threshold(), f64::INFINITY);
        for v in 4..=10 {
            t.push(v as f64);
        }
        assert_eq!(t.threshold(), 10.0);
        for v in 11..=100 {
            t.push(v as f64);
        }
        assert_eq!(t.threshold(), 91.0);
    }

    #[test]
    fn upper_count_is_exact_for_representable_products() {
        assert_eq!(upper_count(0.1, 20_000), 2_000);
        assert_eq!(upper_count(0.1, 40_000), 4_000);
        assert_eq!(upper_count(0.1, 10), 1);
        assert_eq!(upper_count(0.1, 11), 2);
        assert_eq!(warm_up_count(0.1), 10);
        assert_eq!(warm_up_count(0.3), 4);
    }

    #[test]
    fn u_examples() {
        let cfg = LearningConfig::default();
        assert_eq!(u_value(&cfg, 3.0, 1.0, 3.0, 0.0, false), 0.0);
        assert_eq!(u_value(&cfg, 5.0, 1.0, 3.0, 0.0, false), 2.0);
        assert_eq!(u_value(&cfg, 280.0, 5.0, 100.0, 270.0, true), 2.0);
        assert_eq!(u_value(&cfg, 1.0, 0.0, 0.0, 9.0, false), f64::INFINITY);
        assert_eq!(u_value(&cfg, 0.0, 0.0, 0.0, 9.0, false), 0.0);
        let independent = LearningConfig { mode: LearningMode::MultifidelitySubsetIndependent, ..cfg };
        assert_eq!(u_value(&independent, 5.0, 1.0, 3.0, 0.0, false), 5.0);
    }

    #[test]
    fn decision_boundary_is_inclusive() {
        let cfg = LearningConfig::default();
        assert_eq!(decide_fidelity(2.0, &cfg), Fidelity::AcceptLf);
        assert_eq!(decide_fidelity(1.99, &cfg), Fidelity::CallHf);
        assert_eq!(decide_fidelity(f64::INFINITY, &cfg), Fidelity::AcceptLf);
    }

    #[test]
    fn sign_probability_examples() {
        assert_eq!(sign_probability(0.0), 0.5);
        assert!((sign_probability(2.0) - 0.977_249_868_051_820_8).abs() < 1e-12);
        assert!((1.0 - sign_probability(2.0) - 0.0228).abs() < 1e-4);
        assert_eq!(sign_probability(f64::INFINITY), 1.0);
    }

    #[test]
    fn exceedance_uses_the_correct_side() {
        assert!((exceedance_probability(5.0, 1.0, 3.0, 1e-12) - sign_probability(2.0)).abs() < 1e-15);
        assert!((exceedance_probability(1.0, 1.0, 3.0, 1e-12) - (1.0 - sign_probability(2.0))).abs() < 1e-15);
        assert_eq!(exceedance_probability(4.0, 0.0, 3.0, 1e-12), 1.0);
        assert_eq!(exceedance_probability(2.0, 0.0, 3.0, 1e-12), 0.0);
        assert_eq!(exceedance_probability(3.0, 0.0, 3.0, 1e-12), 1.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = LearningConfig { u_threshold: 0.0, ..Default::default() };
        assert_eq!(cfg.validate(), Err(LearningError::UThreshold(0.0)));
        assert!(QuantileTracker::new(1.5).is_err());
    }
}
