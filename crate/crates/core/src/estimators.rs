//! Failure-probability and coefficient-of-variation estimators for subset
//! simulation with probability-weighted samples.
//!
//! Conditional-level records are laid out chain-major: the `L = N / N_c`
//! steps of chain 0, then chain 1, and so on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("level has no records")]
    Empty,
    #[error("{n} records cannot be split into {chains} equal chains")]
    Layout { n: usize, chains: usize },
    #[error("lag {lag} outside 0..{len}")]
    Lag { lag: usize, len: usize },
}

/// How the chain-correlation factor combines the autocorrelations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationForm {
    /// γ = 2 Σ (1 − k N_c / N) ρ(k).
    #[default]
    AuBeck,
    /// γ = 2 Σ (1 − (k N_c / N) ρ(k)), kept for comparison only.
    Literal,
}

pub fn level_probability(values: &[f64]) -> Result<f64, EstimatorError> {
    if values.is_empty() {
        return Err(EstimatorError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn chain_length(n: usize, chains: usize) -> Result<usize, EstimatorError> {
    if n == 0 {
        return Err(EstimatorError::Empty);
    }
    if chains == 0 || n % chains != 0 {
        return Err(EstimatorError::Layout { n, chains });
    }
    Ok(n / chains)
}

/// R(k): the lag-k cross moment averaged over chains and offsets, minus P².
/// R(0) is P(1 − P).
pub fn chain_autocovariance(values: &[f64], chains: usize, lag: usize) -> Result<f64, EstimatorError> {
    let len = chain_length(values.len(), chains)?;
    if lag >= len {
        return Err(EstimatorError::Lag { lag, len });
    }
    let p = level_probability(values)?;
    if lag == 0 {
        return Ok(p * (1.0 - p));
    }
    let mut sum = 0.0;
    for chain in values.chunks_exact(len) {
        for l in 0..len - lag {
            sum += chain[l] * chain[l + lag];
        }
    }
    Ok(sum / (chains * (len - lag)) as f64 - p * p)
}

/// ρ(k) = R(k) / R(0) for k = 1..L−1. Empty when R(0) = 0.
pub fn chain_autocorrelation(values: &[f64], chains: usize) -> Result<Vec<f64>, EstimatorError> {
    let len = chain_length(values.len(), chains)?;
    let r0 = chain_autocovariance(values, chains, 0)?;
    if r0 <= 0.0 {
        return Ok(Vec::new());
    }
    (1..len).map(|k| chain_autocovariance(values, chains, k).map(|r| r / r0)).collect()
}

/// γ from the autocorrelations of a level with `n` samples in `chains` chains.
pub fn correlation_factor(rho: &[f64], n: usize, chains: usize, form: CorrelationForm) -> f64 {
    let ratio = chains as f64 / n as f64;
    2.0 * rho
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let k = (i + 1) as f64;
            match form {
                CorrelationForm::AuBeck => (1.0 - k * ratio) * r,
                CorrelationForm::Literal => 1.0 - k * ratio * r,
            }
        })
        .sum::<f64>()
}

/// δ = sqrt((1 − P)/(N P) · (1 + γ)); infinite for degenerate P.
pub fn level_cov(p: f64, n: usize, gamma: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return f64::INFINITY;
    }
    ((1.0 - p) / (n as f64 * p) * (1.0 + gamma)).sqrt()
}

pub fn total_cov(level_covs: &[f64]) -> f64 {
    level_covs.iter().map(|d| d * d).sum::<f64>().sqrt()
}

/// Statistics of one level's records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStatistics {
    pub p_hat: f64,
    pub cov: f64,
    pub cov_uncorrelated: f64,
    pub gamma: f64,
    pub autocorrelation: Vec<f64>,
    pub degenerate: bool,
}

/// `chains = None` treats the records as independent draws.
pub fn level_statistics(
    values: &[f64],
    chains: Option<usize>,
    form: CorrelationForm,
) -> Result<LevelStatistics, EstimatorError> {
    let p_hat = level_probability(values)?;
    let n = values.len();
    let (gamma, autocorrelation) = match chains {
        Some(c) => {
            let rho = chain_autocorrelation(values, c)?;
            (correlation_factor(&rho, n, c, form), rho)
        }
        None => (0.0, Vec::new()),
    };
    Ok(LevelStatistics {
        p_hat,
        cov: level_cov(p_hat, n, gamma),
        cov_uncorrelated: level_cov(p_hat, n, 0.0),
        gamma,
        autocorrelation,
        degenerate: !(p_hat > 0.0 && p_hat < 1.0),
    })
}

/// p0^(levels − 1) · final-level failure fraction.
pub fn pf_indicator(p0: f64, levels: usize, final_fraction: f64) -> f64 {
    p0.powi(levels as i32 - 1) * final_fraction
}

pub fn pf_weighted(level_probabilities: &[f64]) -> f64 {
    level_probabilities.iter().product()
}
