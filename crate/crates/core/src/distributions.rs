//! Marginal input distributions and the parameter space they span.
//!
//! Every variable lives in a *latent* coordinate: the value the marginal
//! density is defined on. For `log_space` variables the physical value handed
//! to a model is `exp(latent)`; otherwise latent and physical coincide. The
//! samplers and the correction GP work in latent coordinates.

use std::collections::HashSet;
use std::f64::consts::{PI, SQRT_2};

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use libm::erfc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DistributionError {
    #[error("invalid parameters for {family}: {reason}")]
    InvalidParameters { family: &'static str, reason: String },
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("duplicate variable name `{0}`")]
    DuplicateName(String),
    #[error("variable index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("variable `{0}` is used by neither model")]
    Uncovered(String),
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

/// Inverse of the standard normal CDF.
///
/// Acklam's rational approximation (relative error ~1e-9) followed by one
/// Halley refinement against the `erfc`-based CDF, which brings the result to
/// machine precision across (0, 1).
pub fn std_normal_quantile(p: f64) -> Result<f64, DistributionError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DistributionError::ProbabilityOutOfRange(p));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Halley step; the residual is taken on whichever tail keeps precision.
    let e = if x <= 0.0 {
        std_normal_cdf(x) - p
    } else {
        (1.0 - p) - std_normal_cdf(-x)
    };
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Family and parameters of one marginal, defined on the latent coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    Uniform { lower: f64, upper: f64 },
    Normal { mean: f64, std: f64 },
    TruncatedNormal { mean: f64, std: f64, lower: f64, upper: f64 },
}

impl Family {
    fn name(&self) -> &'static str {
        match self {
            Family::Uniform { .. } => "uniform",
            Family::Normal { .. } => "normal",
            Family::TruncatedNormal { .. } => "truncated_normal",
        }
    }

    fn validate(&self) -> Result<(), DistributionError> {
        let bad = |reason: &str| {
            Err(DistributionError::InvalidParameters {
                family: self.name(),
                reason: reason.to_string(),
            })
        };
        match *self {
            Family::Uniform { lower, upper } => {
                if !(lower.is_finite() && upper.is_finite()) {
                    return bad("bounds must be finite");
                }
                if lower >= upper {
                    return bad("lower must be below upper");
                }
            }
            Family::Normal { mean, std } => {
                if !mean.is_finite() {
                    return bad("mean must be finite");
                }
                if !(std > 0.0 && std.is_finite()) {
                    return bad("std must be positive");
                }
            }
            Family::TruncatedNormal { mean, std, lower, upper } => {
                if !mean.is_finite() {
                    return bad("mean must be finite");
                }
                if !(std > 0.0 && std.is_finite()) {
                    return bad("std must be positive");
                }
                if lower.is_nan() || upper.is_nan() || lower >= upper {
                    return bad("lower must be below upper");
                }
                let (za, zb) = ((lower - mean) / std, (upper - mean) / std);
                if truncated_mass(za, zb) <= 0.0 {
                    return bad("truncation interval carries no probability mass");
                }
            }
        }
        Ok(())
    }
}

/// Φ(zb) − Φ(za) evaluated on the tail that avoids cancellation.
fn truncated_mass(za: f64, zb: f64) -> f64 {
    if za > 0.0 {
        std_normal_cdf(-za) - std_normal_cdf(-zb)
    } else {
        std_normal_cdf(zb) - std_normal_cdf(za)
    }
}

/// One independent marginal of the input vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomVariable {
    family: Family,
    log_space: bool,
}

impl RandomVariable {
    pub fn new(family: Family, log_space: bool) -> Result<Self, DistributionError> {
        family.validate()?;
        Ok(Self { family, log_space })
    }

    pub fn uniform(lower: f64, upper: f64) -> Result<Self, DistributionError> {
        Self::new(Family::Uniform { lower, upper }, false)
    }

    pub fn normal(mean: f64, std: f64) -> Result<Self, DistributionError> {
        Self::new(Family::Normal { mean, std }, false)
    }

    pub fn truncated_normal(
        mean: f64,
        std: f64,
        lower: f64,
        upper: f64,
    ) -> Result<Self, DistributionError> {
        Self::new(Family::TruncatedNormal { mean, std, lower, upper }, false)
    }

    /// Marks the distribution as governing `ln` of the physical variable.
    pub fn in_log_space(mut self) -> Self {
        self.log_space = true;
        self
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn log_space(&self) -> bool {
        self.log_space
    }

    /// Latent support as a closed interval (possibly infinite).
    pub fn support(&self) -> (f64, f64) {
        match self.family {
            Family::Uniform { lower, upper } => (lower, upper),
            Family::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Family::TruncatedNormal { lower, upper, .. } => (lower, upper),
        }
    }

    pub fn is_bounded(&self) -> bool {
        let (a, b) = self.support();
        a.is_finite() && b.is_finite()
    }

    pub fn to_physical(&self, latent: f64) -> f64 {
        if self.log_space {
            latent.exp()
        } else {
            latent
        }
    }

    pub fn to_latent(&self, physical: f64) -> f64 {
        if self.log_space {
            physical.ln()
        } else {
            physical
        }
    }

    /// Draws a latent value by inverse CDF.
    pub fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(Open01);
        // Open01 never yields 0 or 1, so the quantile cannot fail.
        self.quantile(u).expect("open-interval uniform")
    }

    /// Draws a physical value (exponentiated for log-space variables).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.to_physical(self.sample_latent(rng))
    }

    /// Log density of the latent value; `-inf` outside the support.
    pub fn log_density(&self, x: f64) -> f64 {
        match self.family {
            Family::Uniform { lower, upper } => {
                if x >= lower && x <= upper {
                    -(upper - lower).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Family::Normal { mean, std } => {
                let z = (x - mean) / std;
                -0.5 * z * z - LN_SQRT_2PI - std.ln()
            }
            Family::TruncatedNormal { mean, std, lower, upper } => {
                if x < lower || x > upper {
                    return f64::NEG_INFINITY;
                }
                let z = (x - mean) / std;
                let mass = truncated_mass((lower - mean) / std, (upper - mean) / std);
                -0.5 * z * z - LN_SQRT_2PI - std.ln() - mass.ln()
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self.family {
            Family::Uniform { lower, upper } => ((x - lower) / (upper - lower)).clamp(0.0, 1.0),
            Family::Normal { mean, std } => std_normal_cdf((x - mean) / std),
            Family::TruncatedNormal { mean, std, lower, upper } => {
                if x <= lower {
                    return 0.0;
                }
                if x >= upper {
                    return 1.0;
                }
                let za = (lower - mean) / std;
                let zb = (upper - mean) / std;
                let z = (x - mean) / std;
                (truncated_mass(za, z) / truncated_mass(za, zb)).clamp(0.0, 1.0)
            }
        }
    }

    pub fn quantile(&self, p: f64) -> Result<f64, DistributionError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(DistributionError::ProbabilityOutOfRange(p));
        }
        Ok(match self.family {
            Family::Uniform { lower, upper } => lower + p * (upper - lower),
            Family::Normal { mean, std } => mean + std * std_normal_quantile(p)?,
            Family::TruncatedNormal { mean, std, lower, upper } => {
                let za = (lower - mean) / std;
                let zb = (upper - mean) / std;
                let z = if za > 0.0 {
                    // Right tail: invert the survival function for precision.
                    let sa = std_normal_cdf(-za);
                    let sb = std_normal_cdf(-zb);
                    let s = sa - p * (sa - sb);
                    -std_normal_quantile(s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))?
                } else {
                    let fa = std_normal_cdf(za);
                    let fb = std_normal_cdf(zb);
                    let f = fa + p * (fb - fa);
                    std_normal_quantile(f.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))?
                };
                (mean + std * z).clamp(lower, upper)
            }
        })
    }

    /// Mean of the latent distribution.
    pub fn mean(&self) -> f64 {
        match self.family {
            Family::Uniform { lower, upper } => 0.5 * (lower + upper),
            Family::Normal { mean, .. } => mean,
            Family::TruncatedNormal { mean, std, lower, upper } => {
                let (za, zb) = ((lower - mean) / std, (upper - mean) / std);
                let mass = truncated_mass(za, zb);
                mean + std * (pdf_or_zero(za) - pdf_or_zero(zb)) / mass
            }
        }
    }

    /// Standard deviation of the latent distribution.
    pub fn std_dev(&self) -> f64 {
        match self.family {
            Family::Uniform { lower, upper } => (upper - lower) / 12f64.sqrt(),
            Family::Normal { std, .. } => std,
            Family::TruncatedNormal { mean, std, lower, upper } => {
                let (za, zb) = ((lower - mean) / std, (upper - mean) / std);
                let mass = truncated_mass(za, zb);
                let (pa, pb) = (pdf_or_zero(za), pdf_or_zero(zb));
                let ta = if za.is_finite() { za * pa } else { 0.0 };
                let tb = if zb.is_finite() { zb * pb } else { 0.0 };
                let shift = (pa - pb) / mass;
                let var = 1.0 + (ta - tb) / mass - shift * shift;
                std * var.max(0.0).sqrt()
            }
        }
    }
}

fn pdf_or_zero(z: f64) -> f64 {
    if z.is_finite() {
        std_normal_pdf(z)
    } else {
        0.0
    }
}

/// A named marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedVariable {
    pub name: String,
    pub variable: RandomVariable,
}

/// The superset input space X = X_HF ∪ X_LF with independent marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    variables: Vec<NamedVariable>,
    hf_indices: Vec<usize>,
    lf_indices: Vec<usize>,
}

impl ParameterSpace {
    pub fn new(
        variables: Vec<NamedVariable>,
        hf_indices: Vec<usize>,
        lf_indices: Vec<usize>,
    ) -> Result<Self, DistributionError> {
        let mut seen = HashSet::new();
        for v in &variables {
            if !seen.insert(v.name.as_str()) {
                return Err(DistributionError::DuplicateName(v.name.clone()));
            }
        }
        let n = variables.len();
        for &i in hf_indices.iter().chain(&lf_indices) {
            if i >= n {
                return Err(DistributionError::IndexOutOfRange(i));
            }
        }
        for (i, v) in variables.iter().enumerate() {
            if !hf_indices.contains(&i) && !lf_indices.contains(&i) {
                return Err(DistributionError::Uncovered(v.name.clone()));
            }
        }
        Ok(Self { variables, hf_indices, lf_indices })
    }

    /// Space whose variables are all shared by both models.
    pub fn shared(variables: Vec<NamedVariable>) -> Result<Self, DistributionError> {
        let all: Vec<usize> = (0..variables.len()).collect();
        Self::new(variables, all.clone(), all)
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn variables(&self) -> &[NamedVariable] {
        &self.variables
    }

    pub fn variable(&self, i: usize) -> &RandomVariable {
        &self.variables[i].variable
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.variables.iter().map(|v| v.name.as_str())
    }

    pub fn hf_indices(&self) -> &[usize] {
        &self.hf_indices
    }

    pub fn lf_indices(&self) -> &[usize] {
        &self.lf_indices
    }

    pub fn hf_names(&self) -> Vec<String> {
        self.hf_indices.iter().map(|&i| self.variables[i].name.clone()).collect()
    }

    pub fn lf_names(&self) -> Vec<String> {
        self.lf_indices.iter().map(|&i| self.variables[i].name.clone()).collect()
    }

    pub fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.variables.iter().map(|v| v.variable.sample_latent(rng)).collect()
    }

    pub fn to_physical(&self, latent: &[f64]) -> Vec<f64> {
        self.variables
            .iter()
            .zip(latent)
            .map(|(v, &x)| v.variable.to_physical(x))
            .collect()
    }

    /// Physical values of the HF inputs, in `hf_indices` order.
    pub fn hf_values(&self, latent: &[f64]) -> Vec<f64> {
        self.select(latent, &self.hf_indices)
    }

    /// Physical values of the LF inputs, in `lf_indices` order.
    pub fn lf_values(&self, latent: &[f64]) -> Vec<f64> {
        self.select(latent, &self.lf_indices)
    }

    fn select(&self, latent: &[f64], indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .map(|&i| self.variables[i].variable.to_physical(latent[i]))
            .collect()
    }

    /// Joint log density of a latent point (sum of marginals).
    pub fn log_density(&self, latent: &[f64]) -> f64 {
        self.variables
            .iter()
            .zip(latent)
            .map(|(v, &x)| v.variable.log_density(x))
            .sum()
    }
}
