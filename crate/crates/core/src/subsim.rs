//! Sampling engines: plain Monte Carlo, subset simulation on the HF model,
//! adaptive-kriging Monte Carlo with a multifidelity model, and subset
//! simulation with multifidelity active learning.
//!
//! Every point is held in latent coordinates of the parameter space. Failure
//! is "output at or above the threshold".

use std::path::PathBuf;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand::distr::Open01;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{std_normal_quantile, ParameterSpace};
use crate::estimators::{self, CorrelationForm, EstimatorError, LevelStatistics};
use crate::gp::GpArchive;
use crate::learning::{
    self, decide_fidelity, exceedance_probability, u_value, Fidelity, LearningConfig, LearningMode,
    QuantileTracker,
};
use crate::models::{ModelError, MultifidelityModel};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("checkpoint I/O failed: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "SS")]
    Ss,
    #[serde(rename = "MF_AK_MCS")]
    MfAkMcs,
    #[serde(rename = "MF_AL_SS")]
    MfAlSs,
}

impl Method {
    pub fn is_multifidelity(self) -> bool {
        matches!(self, Method::MfAkMcs | Method::MfAlSs)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Mc => "MC",
            Method::Ss => "SS",
            Method::MfAkMcs => "MF_AK_MCS",
            Method::MfAlSs => "MF_AL_SS",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MC" => Ok(Method::Mc),
            "SS" => Ok(Method::Ss),
            "MF_AK_MCS" => Ok(Method::MfAkMcs),
            "MF_AL_SS" => Ok(Method::MfAlSs),
            other => Err(format!("unknown method {other:?}; expected MC, SS, MF_AK_MCS or MF_AL_SS")),
        }
    }
}

/// Component-wise random-walk proposal in latent coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// Step size as a multiple of each marginal's standard deviation.
    pub scale: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub p0: f64,
    pub n_per_level: usize,
    pub max_levels: usize,
    /// Defaults to p0 · n_per_level.
    pub n_chains: Option<usize>,
    pub n_init: usize,
    pub failure_threshold: f64,
    pub method: Method,
    pub learning: LearningConfig,
    pub proposal: ProposalConfig,
    pub rng_seed: u64,
    pub correlation_form: CorrelationForm,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            p0: 0.1,
            n_per_level: 10_000,
            max_levels: 10,
            n_chains: None,
            n_init: 20,
            failure_threshold: 0.0,
            method: Method::MfAlSs,
            learning: LearningConfig::default(),
            proposal: ProposalConfig::default(),
            rng_seed: 0,
            correlation_form: CorrelationForm::AuBeck,
        }
    }
}

impl RunConfig {
    pub fn seeds_per_level(&self) -> usize {
        learning::upper_count(self.p0, self.n_per_level)
    }

    pub fn chains(&self) -> usize {
        self.n_chains.unwrap_or_else(|| self.seeds_per_level())
    }

    pub fn chain_length(&self) -> usize {
        self.n_per_level / self.chains()
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |msg: String| Err(RunError::Config(msg));
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return bad(format!("p0 must lie in (0, 1), got {}", self.p0));
        }
        if self.n_per_level == 0 {
            return bad("n_per_level must be positive".into());
        }
        let raw = self.p0 * self.n_per_level as f64;
        if (raw - raw.round()).abs() > 1e-9 * raw.max(1.0) || raw.round() < 1.0 {
            return bad(format!("p0 · n_per_level = {raw} must be a positive integer"));
        }
        let chains = self.chains();
        if chains == 0 || self.n_per_level % chains != 0 {
            return bad(format!("n_per_level = {} is not a multiple of n_chains = {chains}", self.n_per_level));
        }
        if chains > self.seeds_per_level() {
            return bad(format!("n_chains = {chains} exceeds the {} seeds per level", self.seeds_per_level()));
        }
        if self.max_levels == 0 {
            return bad("max_levels must be at least 1".into());
        }
        if self.method.is_multifidelity() && self.n_init < 2 {
            return bad(format!("n_init must be at least 2, got {}", self.n_init));
        }
        if !self.failure_threshold.is_finite() {
            return bad("failure_threshold must be finite".into());
        }
        if !(self.proposal.scale > 0.0 && self.proposal.scale.is_finite()) {
            return bad(format!("proposal scale must be positive, got {}", self.proposal.scale));
        }
        self.learning.validate().map_err(|e| RunError::Config(e.to_string()))
    }

    fn effective_learning(&self) -> LearningConfig {
        let mut cfg = self.learning.clone();
        if self.method == Method::MfAkMcs {
            cfg.mode = LearningMode::MultifidelitySubsetIndependent;
        }
        cfg
    }
}

/// RNG streams derived from the run seed.
pub const MAIN_STREAM: u64 = 0;
pub const INIT_STREAM: u64 = 1;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One stored sample of a level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    /// Output used by the level: the HF value or the corrected LF mean.
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    pub hf: bool,
    pub u: Option<f64>,
    pub chain: usize,
    pub step: usize,
    /// False when the record repeats the previous chain state.
    pub evaluated: bool,
    pub cumulative_hf: u64,
    /// Probability that the sample lies in the level's upper region.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelState {
    /// 1-based level index.
    pub level: usize,
    pub samples: Vec<Sample>,
    /// `None` for independent draws.
    pub n_chains: Option<usize>,
    /// Realized (1 − p0) quantile of the outputs.
    pub threshold: f64,
    /// Threshold the probability records refer to: `threshold`, or the
    /// failure threshold on the final level.
    pub active_threshold: f64,
    pub is_final: bool,
    /// Minimum seed output, for conditional levels.
    pub f_lim: Option<f64>,
    pub hf_calls: u64,
    pub lf_calls: u64,
}

impl LevelState {
    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.value).collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.probability).collect()
    }

    pub fn indicators(&self) -> Vec<f64> {
        self.samples.iter().map(|s| f64::from(u8::from(s.value >= self.active_threshold))).collect()
    }

    /// Top `m` samples by output; ties keep the earlier sample.
    pub fn seeds(&self, m: usize) -> Vec<&Sample> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.sort_by(|&a, &b| self.samples[b].value.total_cmp(&self.samples[a].value).then(a.cmp(&b)));
        order.into_iter().take(m).map(|i| &self.samples[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub threshold: f64,
    pub active_threshold: f64,
    pub is_final: bool,
    pub n_samples: usize,
    pub n_chains: Option<usize>,
    pub hf_calls: u64,
    pub lf_calls: u64,
    pub weighted: LevelStatistics,
    pub indicator: LevelStatistics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    /// Headline estimate: the probability-weighted product.
    pub pf: f64,
    pub pf_indicator: f64,
    pub pf_weighted: f64,
    pub cov: f64,
    pub cov_uncorrelated: f64,
    /// COV from indicator records, the classical subset-simulation form.
    pub cov_indicator: f64,
    pub levels: Vec<LevelReport>,
    pub level_thresholds: Vec<f64>,
    pub converged: bool,
    pub degenerate: bool,
    pub warnings: Vec<String>,
    /// HF calls made by the sampling loop.
    pub hf_calls: u64,
    pub lf_calls: u64,
    pub init_hf_calls: u64,
    pub init_lf_calls: u64,
    /// HF calls used to train a surrogate LF model before the run.
    pub lf_training_hf_calls: u64,
    pub hf_calls_total: u64,
}

/// Resumable state written after initialization and after every level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub levels: Vec<LevelState>,
    pub rng: ChaCha8Rng,
    pub correction: Option<GpArchive>,
    pub hf_calls: u64,
    pub lf_calls: u64,
    pub init_hf_calls: u64,
    pub init_lf_calls: u64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<(), RunError> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(self).map_err(|e| RunError::Checkpoint(e.to_string()))?;
        std::fs::write(&tmp, text).map_err(|e| RunError::Checkpoint(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| RunError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Checkpoint(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| RunError::Checkpoint(e.to_string()))
    }
}

/// Proposes a candidate by component-wise modified Metropolis-Hastings.
///
/// Unbounded marginals use a normal random walk, bounded ones a uniform
/// window reflected at the support edges; both are symmetric, so each
/// component is accepted with probability min(1, q(x*)/q(x)).
pub fn mmh_propose_accept<R: Rng + ?Sized>(
    current: &[f64],
    space: &ParameterSpace,
    proposal: &ProposalConfig,
    rng: &mut R,
) -> Vec<f64> {
    current
        .iter()
        .enumerate()
        .map(|(j, &xj)| {
            let var = space.variable(j);
            let step = proposal.scale * var.std_dev();
            let candidate = if var.is_bounded() {
                let (lo, hi) = var.support();
                let u: f64 = rng.random();
                reflect(xj + step * (2.0 * u - 1.0), lo, hi)
            } else {
                let u: f64 = rng.sample(Open01);
                xj + step * std_normal_quantile(u).expect("open interval")
            };
            let log_alpha = var.log_density(candidate) - var.log_density(xj);
            let log_u = rng.sample::<f64, _>(Open01).ln();
            if log_alpha >= log_u {
                candidate
            } else {
                xj
            }
        })
        .collect()
}

fn reflect(mut x: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    if width <= 0.0 {
        return lo;
    }
    if x < lo || x > hi {
        let period = 2.0 * width;
        let mut t = (x - lo).rem_euclid(period);
        if t > width {
            t = period - t;
        }
        x = lo + t;
    }
    x
}

/// Draws `n_init` points from the init stream and fits the correction.
pub fn initialize_correction(mf: &mut MultifidelityModel, n_init: usize, rng: &mut ChaCha8Rng) -> Result<(), RunError> {
    if n_init < 2 {
        return Err(RunError::Config(format!("n_init must be at least 2, got {n_init}")));
    }
    let points: Vec<Vec<f64>> = (0..n_init).map(|_| mf.space().sample_latent(rng)).collect();
    mf.initialize_correction(points)?;
    Ok(())
}

/// Drives one run and owns its mutable state.
pub struct Runner<'a> {
    config: RunConfig,
    learning: LearningConfig,
    mf: &'a mut MultifidelityModel,
    rng: ChaCha8Rng,
    levels: Vec<LevelState>,
    init_hf_calls: u64,
    init_lf_calls: u64,
    lf_training_hf_calls: u64,
    converged: bool,
    warnings: Vec<String>,
    checkpoint_path: Option<PathBuf>,
    initialized: bool,
}

impl<'a> Runner<'a> {
    pub fn new(config: RunConfig, mf: &'a mut MultifidelityModel) -> Result<Self, RunError> {
        config.validate()?;
        let learning = config.effective_learning();
        let rng = stream_rng(config.rng_seed, MAIN_STREAM);
        Ok(Self {
            config,
            learning,
            mf,
            rng,
            levels: Vec::new(),
            init_hf_calls: 0,
            init_lf_calls: 0,
            lf_training_hf_calls: 0,
            converged: false,
            warnings: Vec::new(),
            checkpoint_path: None,
            initialized: false,
        })
    }

    /// Restores a runner from a checkpoint; the model must match the one the
    /// checkpoint was written with.
    pub fn resume(checkpoint: Checkpoint, mf: &'a mut MultifidelityModel) -> Result<Self, RunError> {
        let mut runner = Self::new(checkpoint.config, mf)?;
        runner.mf.restore_correction(checkpoint.correction)?;
        runner.mf.set_calls(checkpoint.hf_calls, checkpoint.lf_calls);
        runner.rng = checkpoint.rng;
        runner.levels = checkpoint.levels;
        runner.init_hf_calls = checkpoint.init_hf_calls;
        runner.init_lf_calls = checkpoint.init_lf_calls;
        runner.converged = checkpoint.converged;
        runner.warnings = checkpoint.warnings;
        runner.initialized = true;
        Ok(runner)
    }

    pub fn with_checkpoint(mut self, path: Option<PathBuf>) -> Self {
        self.checkpoint_path = path;
        self
    }

    pub fn with_lf_training_calls(mut self, calls: u64) -> Self {
        self.lf_training_hf_calls = calls;
        self
    }

    pub fn levels(&self) -> &[LevelState] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<LevelState> {
        self.levels
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            levels: self.levels.clone(),
            rng: self.rng.clone(),
            correction: self.mf.correction_archive(),
            hf_calls: self.mf.hf_calls(),
            lf_calls: self.mf.lf_calls(),
            init_hf_calls: self.init_hf_calls,
            init_lf_calls: self.init_lf_calls,
            converged: self.converged,
            warnings: self.warnings.clone(),
        }
    }

    fn save_checkpoint(&self) -> Result<(), RunError> {
        if let Some(path) = &self.checkpoint_path {
            self.checkpoint().save(path)?;
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.levels.last().is_some_and(|l| l.is_final)
    }

    pub fn run(&mut self) -> Result<EstimateReport, RunError> {
        if !self.initialized {
            if self.config.method.is_multifidelity() {
                let (hf0, lf0) = (self.mf.hf_calls(), self.mf.lf_calls());
                let mut init_rng = stream_rng(self.config.rng_seed, INIT_STREAM);
                initialize_correction(self.mf, self.config.n_init, &mut init_rng)?;
                self.init_hf_calls = self.mf.hf_calls() - hf0;
                self.init_lf_calls = self.mf.lf_calls() - lf0;
            }
            self.initialized = true;
            self.save_checkpoint()?;
        }
        while !self.finished() {
            let level = match self.levels.last() {
                None => self.run_first_level()?,
                Some(prev) => {
                    let prev = prev.clone();
                    self.run_conditional_level(&prev)?
                }
            };
            info!(
                "level {}: threshold {:.6e}, {} HF calls{}",
                level.level,
                level.threshold,
                level.hf_calls,
                if level.is_final { " (final)" } else { "" }
            );
            self.levels.push(level);
            self.save_checkpoint()?;
        }
        self.report()
    }

    fn is_final_level(&self, level: usize) -> bool {
        match self.config.method {
            Method::Mc | Method::MfAkMcs => true,
            Method::Ss | Method::MfAlSs => level >= self.config.max_levels,
        }
    }

    /// Evaluates a new point; returns (value, mean, std, hf, u).
    fn evaluate(
        &mut self,
        x: &[f64],
        running: f64,
        final_level: bool,
    ) -> Result<(f64, f64, f64, bool, Option<f64>), RunError> {
        let failure = self.config.failure_threshold;
        match self.config.method {
            Method::Mc | Method::Ss => {
                let v = self.mf.evaluate_hf(x)?;
                Ok((v, v, 0.0, true, None))
            }
            Method::MfAkMcs | Method::MfAlSs => {
                let (mean, std, lf) = self.mf.evaluate_lf_corrected(x)?;
                let is_final = final_level || (running.is_finite() && running >= failure);
                let (u, decision) = if self.mf.correction().is_none() {
                    (0.0, Fidelity::CallHf)
                } else {
                    let u = u_value(&self.learning, mean, std, running, failure, is_final);
                    (u, decide_fidelity(u, &self.learning))
                };
                match decision {
                    Fidelity::AcceptLf => Ok((mean, mean, std, false, Some(u))),
                    Fidelity::CallHf => {
                        let v = self.mf.adapt_with_lf(x, lf)?;
                        Ok((v, mean, std, true, Some(u)))
                    }
                }
            }
        }
    }

    pub fn run_first_level(&mut self) -> Result<LevelState, RunError> {
        let n = self.config.n_per_level;
        let (hf0, lf0) = (self.mf.hf_calls(), self.mf.lf_calls());
        let mut tracker = QuantileTracker::new(self.config.p0).map_err(|e| RunError::Config(e.to_string()))?;
        let final_level = self.is_final_level(1);
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let x = self.mf.space().sample_latent(&mut self.rng);
            let (value, mean, std, hf, u) = self.evaluate(&x, tracker.threshold(), final_level)?;
            tracker.push(value);
            samples.push(Sample {
                x,
                value,
                mean,
                std,
                hf,
                u,
                chain: i,
                step: 0,
                evaluated: true,
                cumulative_hf: self.mf.hf_calls(),
                probability: f64::NAN,
            });
        }
        let mut level = LevelState {
            level: 1,
            samples,
            n_chains: None,
            threshold: tracker.threshold(),
            active_threshold: f64::NAN,
            is_final: final_level,
            f_lim: None,
            hf_calls: self.mf.hf_calls() - hf0,
            lf_calls: self.mf.lf_calls() - lf0,
        };
        self.close_level(&mut level, None);
        Ok(level)
    }

    pub fn run_conditional_level(&mut self, prev: &LevelState) -> Result<LevelState, RunError> {
        let s = prev.level + 1;
        let chains = self.config.chains();
        let length = self.config.chain_length();
        let (hf0, lf0) = (self.mf.hf_calls(), self.mf.lf_calls());
        let seeds: Vec<Sample> = prev.seeds(chains).into_iter().cloned().collect();
        let f_lim = seeds.iter().map(|s| s.value).fold(f64::INFINITY, f64::min);
        if chains == self.config.seeds_per_level() && f_lim != prev.threshold {
            warn!("level {s}: minimum seed output {f_lim} differs from threshold {}", prev.threshold);
        }
        let mut tracker = QuantileTracker::new(self.config.p0).map_err(|e| RunError::Config(e.to_string()))?;
        for seed in &seeds {
            tracker.push(seed.value);
        }
        let final_level = self.is_final_level(s);
        let mut samples = Vec::with_capacity(chains * length);
        for (c, seed) in seeds.into_iter().enumerate() {
            let mut state = Sample {
                chain: c,
                step: 0,
                evaluated: false,
                cumulative_hf: self.mf.hf_calls(),
                probability: f64::NAN,
                ..seed
            };
            samples.push(state.clone());
            for k in 1..length {
                let candidate =
                    mmh_propose_accept(&state.x, self.mf.space(), &self.config.proposal, &mut self.rng);
                if candidate != state.x {
                    let (value, mean, std, hf, u) = self.evaluate(&candidate, tracker.threshold(), final_level)?;
                    if value >= f_lim {
                        state = Sample {
                            x: candidate,
                            value,
                            mean,
                            std,
                            hf,
                            u,
                            chain: c,
                            step: k,
                            evaluated: true,
                            cumulative_hf: 0,
                            probability: f64::NAN,
                        };
                    } else {
                        state.evaluated = false;
                    }
                } else {
                    state.evaluated = false;
                }
                state.step = k;
                state.cumulative_hf = self.mf.hf_calls();
                tracker.push(state.value);
                samples.push(state.clone());
            }
        }
        let mut level = LevelState {
            level: s,
            samples,
            n_chains: Some(chains),
            threshold: tracker.threshold(),
            active_threshold: f64::NAN,
            is_final: final_level,
            f_lim: Some(f_lim),
            hf_calls: self.mf.hf_calls() - hf0,
            lf_calls: self.mf.lf_calls() - lf0,
        };
        self.close_level(&mut level, Some(prev.threshold));
        Ok(level)
    }

    /// Decides whether the level is final and fills the probability records.
    fn close_level(&mut self, level: &mut LevelState, previous_threshold: Option<f64>) {
        let failure = self.config.failure_threshold;
        if level.threshold >= failure {
            level.is_final = true;
            self.converged = true;
        } else if let Some(prev) = previous_threshold.filter(|&p| level.threshold <= p) {
            let msg = format!(
                "level {} threshold {:.6e} did not rise above {:.6e}; stopping",
                level.level, level.threshold, prev
            );
            warn!("{msg}");
            self.warnings.push(msg);
            level.is_final = true;
            self.converged = false;
        } else if level.is_final {
            if matches!(self.config.method, Method::Mc | Method::MfAkMcs) {
                self.converged = true;
            } else {
                let msg = format!(
                    "reached max_levels = {} with threshold {:.6e} below {:.6e}",
                    self.config.max_levels, level.threshold, failure
                );
                warn!("{msg}");
                self.warnings.push(msg);
                self.converged = false;
            }
        }
        level.active_threshold = if level.is_final { failure } else { level.threshold };
        let floor = self.learning.sigma_floor;
        for s in &mut level.samples {
            s.probability = if s.hf {
                f64::from(u8::from(s.value >= level.active_threshold))
            } else {
                exceedance_probability(s.mean, s.std, level.active_threshold, floor)
            };
        }
        debug!("level {} closed with active threshold {}", level.level, level.active_threshold);
    }

    pub fn report(&self) -> Result<EstimateReport, RunError> {
        build_report(
            &self.config,
            &self.levels,
            self.converged,
            self.warnings.clone(),
            Calls {
                hf: self.mf.hf_calls() - self.init_hf_calls,
                lf: self.mf.lf_calls() - self.init_lf_calls,
                init_hf: self.init_hf_calls,
                init_lf: self.init_lf_calls,
                lf_training: self.lf_training_hf_calls,
            },
        )
    }
}

pub struct Calls {
    pub hf: u64,
    pub lf: u64,
    pub init_hf: u64,
    pub init_lf: u64,
    pub lf_training: u64,
}

pub fn build_report(
    config: &RunConfig,
    levels: &[LevelState],
    converged: bool,
    mut warnings: Vec<String>,
    calls: Calls,
) -> Result<EstimateReport, RunError> {
    let mut reports = Vec::with_capacity(levels.len());
    for level in levels {
        let weighted = estimators::level_statistics(&level.probabilities(), level.n_chains, config.correlation_form)?;
        let indicator = estimators::level_statistics(&level.indicators(), level.n_chains, config.correlation_form)?;
        reports.push(LevelReport {
            level: level.level,
            threshold: level.threshold,
            active_threshold: level.active_threshold,
            is_final: level.is_final,
            n_samples: level.samples.len(),
            n_chains: level.n_chains,
            hf_calls: level.hf_calls,
            lf_calls: level.lf_calls,
            weighted,
            indicator,
        });
    }
    let final_fraction = reports.last().map_or(0.0, |r| r.indicator.p_hat);
    let pf_indicator = estimators::pf_indicator(config.p0, reports.len(), final_fraction);
    let pf_weighted = estimators::pf_weighted(&reports.iter().map(|r| r.weighted.p_hat).collect::<Vec<_>>());
    let cov = estimators::total_cov(&reports.iter().map(|r| r.weighted.cov).collect::<Vec<_>>());
    let cov_uncorrelated =
        estimators::total_cov(&reports.iter().map(|r| r.weighted.cov_uncorrelated).collect::<Vec<_>>());
    let cov_indicator = estimators::total_cov(&reports.iter().map(|r| r.indicator.cov).collect::<Vec<_>>());
    let degenerate = reports.iter().any(|r| r.weighted.degenerate);
    if degenerate {
        warnings.push("a level has probability 0 or 1; COV is undefined".into());
    }
    if pf_indicator == 0.0 {
        warnings.push("no failures observed; the sample size is insufficient for this probability".into());
    }
    Ok(EstimateReport {
        method: config.method,
        pf: pf_weighted,
        pf_indicator,
        pf_weighted,
        cov,
        cov_uncorrelated,
        cov_indicator,
        level_thresholds: reports.iter().map(|r| r.threshold).collect(),
        levels: reports,
        converged,
        degenerate,
        warnings,
        hf_calls: calls.hf,
        lf_calls: calls.lf,
        init_hf_calls: calls.init_hf,
        init_lf_calls: calls.init_lf,
        lf_training_hf_calls: calls.lf_training,
        hf_calls_total: calls.hf + calls.init_hf + calls.lf_training,
    })
}

/// Runs `config` against `mf` from scratch.
pub fn run(config: &RunConfig, mf: &mut MultifidelityModel) -> Result<EstimateReport, RunError> {
    Runner::new(config.clone(), mf)?.run()
}
