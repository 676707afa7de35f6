//! Command-line entry point: parse a JSON run specification, build the
//! models, run the chosen method and write the report and traces.
//!
//! Outputs are "oriented": `oriented = output_sign × raw output`, and failure
//! is `oriented ≥ oriented threshold`. Benchmarks that fail below their
//! threshold therefore report negated values.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{Family, NamedVariable, ParameterSpace, RandomVariable};
use crate::estimators::CorrelationForm;
use crate::gp::GpConfig;
use crate::learning::{LearningConfig, LearningMode};
use crate::models::{
    Benchmark, Evaluator, ExternalAdapter, FnEvaluator, ModelError, ModelEvaluator, MultifidelityModel, Negated,
};
use crate::subsim::{Checkpoint, EstimateReport, LevelState, Method, ProposalConfig, RunConfig, RunError, Runner};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid spec: {0}")]
    Parse(String),
    #[error("invalid spec: {0}")]
    Validation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("cannot write output: {0}")]
    Output(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    FourBranch,
    Rastrigin,
    Borehole,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureWhen {
    Above,
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Verbosity {
    #[default]
    Summary,
    PerLevel,
    PerSample,
}

/// LF model for the analytic benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LfModelSpec {
    /// GP trained on `n_train` HF evaluations.
    Surrogate {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default)]
        center_outputs: bool,
    },
    /// The HF function itself.
    Exact,
}

fn default_n_train() -> usize {
    20
}

impl Default for LfModelSpec {
    fn default() -> Self {
        LfModelSpec::Surrogate { n_train: default_n_train(), center_outputs: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub distribution: Family,
    #[serde(default)]
    pub log_space: bool,
    #[serde(default = "yes")]
    pub hf: bool,
    #[serde(default = "yes")]
    pub lf: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub problem: Problem,
    pub hf_command: Option<Vec<String>>,
    pub lf_command: Option<Vec<String>>,
    pub adapter_timeout_secs: f64,
    pub audit_every: Option<u64>,
    pub variables: Option<Vec<VariableSpec>>,
    pub failure_threshold: Option<f64>,
    pub failure_when: Option<FailureWhen>,
    pub lf_model: LfModelSpec,
    pub method: Method,
    pub p0: f64,
    pub n_per_level: usize,
    pub max_levels: usize,
    pub n_chains: Option<usize>,
    pub n_init: usize,
    pub learning: LearningConfig,
    pub proposal: ProposalConfig,
    pub seed: u64,
    pub correlation_form: CorrelationForm,
    pub gp: GpConfig,
    pub output_dir: PathBuf,
    pub verbosity: Verbosity,
}

impl Default for RunSpec {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            problem: Problem::FourBranch,
            hf_command: None,
            lf_command: None,
            adapter_timeout_secs: 3600.0,
            audit_every: None,
            variables: None,
            failure_threshold: None,
            failure_when: None,
            lf_model: LfModelSpec::default(),
            method: run.method,
            p0: run.p0,
            n_per_level: run.n_per_level,
            max_levels: run.max_levels,
            n_chains: run.n_chains,
            n_init: run.n_init,
            learning: run.learning,
            proposal: run.proposal,
            seed: run.rng_seed,
            correlation_form: run.correlation_form,
            gp: GpConfig::default(),
            output_dir: PathBuf::from("mfals-output"),
            verbosity: Verbosity::Summary,
        }
    }
}

pub fn parse_spec_str(text: &str) -> Result<RunSpec, CliError> {
    let spec: RunSpec = serde_json::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn parse_spec(path: &Path) -> Result<RunSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    parse_spec_str(&text)
}

impl RunSpec {
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let benchmark = self.benchmark();
        let threshold = match (self.failure_threshold, &benchmark) {
            (Some(t), _) => t,
            (None, Some(b)) => b.threshold,
            (None, None) => return Err(CliError::Validation("external problems need failure_threshold".into())),
        };
        Ok(RunConfig {
            p0: self.p0,
            n_per_level: self.n_per_level,
            max_levels: self.max_levels,
            n_chains: self.n_chains,
            n_init: self.n_init,
            failure_threshold: self.output_sign() * threshold,
            method: self.method,
            learning: self.learning.clone(),
            proposal: self.proposal.clone(),
            rng_seed: self.seed,
            correlation_form: self.correlation_form,
        })
    }

    fn benchmark(&self) -> Option<Benchmark> {
        match self.problem {
            Problem::FourBranch => Some(Benchmark::four_branch()),
            Problem::Rastrigin => Some(Benchmark::rastrigin()),
            Problem::Borehole => Some(Benchmark::borehole()),
            Problem::External => None,
        }
    }

    fn failure_below(&self) -> bool {
        match (self.failure_when, self.benchmark()) {
            (Some(w), _) => w == FailureWhen::Below,
            (None, Some(b)) => b.failure_below,
            (None, None) => false,
        }
    }

    /// −1 when outputs are negated so that failure reads "at or above".
    pub fn output_sign(&self) -> f64 {
        if self.failure_below() {
            -1.0
        } else {
            1.0
        }
    }

    pub fn space(&self) -> Result<ParameterSpace, CliError> {
        let invalid = |e: crate::distributions::DistributionError| CliError::Validation(e.to_string());
        match &self.variables {
            None => match self.benchmark() {
                Some(b) => Ok(b.space),
                None => Err(CliError::Validation("external problems need a variables table".into())),
            },
            Some(vars) => {
                let mut named = Vec::with_capacity(vars.len());
                let (mut hf, mut lf) = (Vec::new(), Vec::new());
                for (i, v) in vars.iter().enumerate() {
                    let variable = RandomVariable::new(v.distribution, v.log_space)
                        .map_err(|e| CliError::Validation(format!("variable {:?}: {e}", v.name)))?;
                    named.push(NamedVariable { name: v.name.clone(), variable });
                    if v.hf {
                        hf.push(i);
                    }
                    if v.lf {
                        lf.push(i);
                    }
                }
                ParameterSpace::new(named, hf, lf).map_err(invalid)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.run_config()?.validate().map_err(|e| match e {
            RunError::Config(msg) => CliError::Validation(msg),
            other => CliError::Validation(other.to_string()),
        })?;
        if !(self.adapter_timeout_secs > 0.0 && self.adapter_timeout_secs.is_finite()) {
            return Err(CliError::Validation(format!(
                "adapter_timeout_secs must be positive, got {}",
                self.adapter_timeout_secs
            )));
        }
        let space = self.space()?;
        match self.benchmark() {
            Some(b) => {
                let expected = b.space.hf_names();
                let names: Vec<String> = space.names().map(String::from).collect();
                if names != expected || space.hf_indices().len() != names.len() {
                    return Err(CliError::Validation(format!(
                        "variables must be {expected:?} in that order, all used by the HF model"
                    )));
                }
                if let LfModelSpec::Surrogate { n_train, .. } = self.lf_model {
                    if n_train < 2 {
                        return Err(CliError::Validation(format!("lf_model.n_train must be at least 2, got {n_train}")));
                    }
                }
            }
            None => {
                if self.hf_command.as_ref().is_none_or(|c| c.is_empty()) {
                    return Err(CliError::Validation("external problems need hf_command".into()));
                }
                let needs_lf = self.method.is_multifidelity()
                    && self.learning.mode != LearningMode::SingleFidelitySubsetDependent;
                if needs_lf && self.lf_command.as_ref().is_none_or(|c| c.is_empty()) {
                    return Err(CliError::Validation("external multifidelity runs need lf_command".into()));
                }
                if self.failure_threshold.is_none() {
                    return Err(CliError::Validation("external problems need failure_threshold".into()));
                }
            }
        }
        Ok(())
    }
}

/// Models built from a spec.
pub struct BuiltModel {
    pub model: MultifidelityModel,
    pub lf_training_hf_calls: u64,
}

fn unavailable(inputs: Vec<String>) -> Box<dyn Evaluator> {
    Box::new(FnEvaluator::new(inputs, |_: &[f64]| Err(ModelError::Evaluation("no LF model configured".into()))))
}

fn zero_model(inputs: Vec<String>) -> Box<dyn Evaluator> {
    Box::new(FnEvaluator::new(inputs, |_: &[f64]| Ok(0.0)))
}

pub fn build_model(spec: &RunSpec) -> Result<BuiltModel, CliError> {
    let space = spec.space()?;
    let negate = spec.failure_below();
    let orient = |e: Box<dyn Evaluator>| -> Box<dyn Evaluator> {
        if negate {
            Box::new(Negated(e))
        } else {
            e
        }
    };
    let single_fidelity = spec.learning.mode == LearningMode::SingleFidelitySubsetDependent;
    let needs_lf = spec.method.is_multifidelity() && !single_fidelity;
    let mut lf_training_hf_calls = 0;
    let (hf, lf): (Box<dyn Evaluator>, Box<dyn Evaluator>) = match spec.benchmark() {
        Some(b) => {
            let b = Benchmark { space: space.clone(), failure_below: negate, ..b };
            let hf = b.oriented_model();
            let lf = if !needs_lf {
                if single_fidelity {
                    zero_model(space.lf_names())
                } else {
                    unavailable(space.lf_names())
                }
            } else {
                match spec.lf_model {
                    LfModelSpec::Exact => b.oriented_model(),
                    LfModelSpec::Surrogate { n_train, center_outputs } => {
                        let cfg = GpConfig { center_outputs, ..spec.gp.clone() };
                        lf_training_hf_calls = n_train as u64;
                        Box::new(b.surrogate_lf(n_train, cfg, spec.seed)?)
                    }
                }
            };
            (hf, lf)
        }
        None => {
            let timeout = spec.adapter_timeout_secs;
            let hf_cmd = spec.hf_command.as_deref().unwrap_or_default();
            let hf = orient(Box::new(ExternalAdapter::spawn(hf_cmd, &space.hf_names(), timeout)?));
            let lf = if needs_lf {
                let lf_cmd = spec.lf_command.as_deref().unwrap_or_default();
                orient(Box::new(ExternalAdapter::spawn(lf_cmd, &space.lf_names(), timeout)?))
            } else if single_fidelity {
                zero_model(space.lf_names())
            } else {
                unavailable(space.lf_names())
            };
            (hf, lf)
        }
    };
    let hf = ModelEvaluator::new(hf).with_audit(spec.audit_every);
    let lf = ModelEvaluator::new(lf).with_audit(spec.audit_every);
    Ok(BuiltModel { model: MultifidelityModel::new(space, hf, lf, spec.gp.clone()), lf_training_hf_calls })
}

/// Contents of report.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub version: String,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    pub timestamp: u64,
    pub output_sign: f64,
    pub spec: RunSpec,
    pub report: EstimateReport,
}

pub const LEVELS_HEADER: [&str; 14] = [
    "level",
    "threshold",
    "active_threshold",
    "is_final",
    "n_samples",
    "p_hat",
    "p_hat_indicator",
    "cov",
    "cov_uncorrelated",
    "gamma",
    "hf_calls",
    "lf_calls",
    "cumulative_hf",
    "cumulative_lf",
];

fn out_err(e: impl std::fmt::Display) -> CliError {
    CliError::Output(e.to_string())
}

pub fn write_levels_csv(path: &Path, report: &EstimateReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(out_err)?;
    w.write_record(LEVELS_HEADER).map_err(out_err)?;
    let (mut hf, mut lf) = (report.init_hf_calls + report.lf_training_hf_calls, report.init_lf_calls);
    for l in &report.levels {
        hf += l.hf_calls;
        lf += l.lf_calls;
        w.write_record([
            l.level.to_string(),
            l.threshold.to_string(),
            l.active_threshold.to_string(),
            l.is_final.to_string(),
            l.n_samples.to_string(),
            l.weighted.p_hat.to_string(),
            l.indicator.p_hat.to_string(),
            l.weighted.cov.to_string(),
            l.weighted.cov_uncorrelated.to_string(),
            l.weighted.gamma.to_string(),
            l.hf_calls.to_string(),
            l.lf_calls.to_string(),
            hf.to_string(),
            lf.to_string(),
        ])
        .map_err(out_err)?;
    }
    w.flush().map_err(out_err)
}

/// One row per stored sample in evaluation order. Inputs are physical values.
pub fn write_samples_csv(path: &Path, space: &ParameterSpace, levels: &[LevelState]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(out_err)?;
    let mut header: Vec<String> = ["level", "chain", "step"].iter().map(|s| s.to_string()).collect();
    header.extend(space.names().map(String::from));
    header.extend(
        ["value", "mean", "std", "fidelity", "u", "probability", "evaluated", "cumulative_hf"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header).map_err(out_err)?;
    for level in levels {
        for s in &level.samples {
            let mut row = vec![level.level.to_string(), s.chain.to_string(), s.step.to_string()];
            row.extend(space.to_physical(&s.x).iter().map(|v| v.to_string()));
            row.extend([
                s.value.to_string(),
                s.mean.to_string(),
                s.std.to_string(),
                if s.hf { "HF" } else { "LF" }.to_string(),
                s.u.map_or(String::new(), |u| u.to_string()),
                s.probability.to_string(),
                s.evaluated.to_string(),
                s.cumulative_hf.to_string(),
            ]);
            w.write_record(&row).map_err(out_err)?;
        }
    }
    w.flush().map_err(out_err)
}

#[derive(Debug, Parser)]
#[command(name = "mfals", version, about = "Failure probabilities by multifidelity active-learning subset simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a specification.
    Run {
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        verbosity: Option<Verbosity>,
        /// Continue from checkpoint.json in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Parse and validate a specification without running it.
    Validate { spec: PathBuf },
}

impl clap::ValueEnum for Method {
    fn value_variants<'a>() -> &'a [Self] {
        &[Method::Mc, Method::Ss, Method::MfAkMcs, Method::MfAlSs]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

/// Exit status of a finished run.
pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

/// Runs a parsed spec and writes all outputs. Returns the report.
pub fn execute(spec: &RunSpec, resume: bool) -> Result<EstimateReport, CliError> {
    let out = &spec.output_dir;
    fs::create_dir_all(out).map_err(out_err)?;
    let checkpoint_path = out.join("checkpoint.json");
    let mut built = build_model(spec)?;
    let runner = if resume {
        let checkpoint = Checkpoint::load(&checkpoint_path)?;
        if checkpoint.config != spec.run_config()? {
            return Err(CliError::Validation("checkpoint was written for a different configuration".into()));
        }
        info!("resuming after level {}", checkpoint.levels.len());
        Runner::resume(checkpoint, &mut built.model)?
    } else {
        Runner::new(spec.run_config()?, &mut built.model)?
    };
    let mut runner = runner.with_checkpoint(Some(checkpoint_path)).with_lf_training_calls(built.lf_training_hf_calls);
    let report = runner.run()?;
    let levels = runner.into_levels();

    let file = ReportFile {
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        output_sign: spec.output_sign(),
        spec: spec.clone(),
        report: report.clone(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(out_err)?;
    fs::write(out.join("report.json"), json + "\n").map_err(out_err)?;
    write_levels_csv(&out.join("levels.csv"), &report)?;
    if spec.verbosity == Verbosity::PerSample {
        write_samples_csv(&out.join("samples.csv"), built.model.space(), &levels)?;
    }
    Ok(report)
}

fn summary(report: &EstimateReport, verbosity: Verbosity) -> String {
    let mut s = format!(
        "P_f = {:.4e} (indicator {:.4e}), COV = {:.4} ({:.4} without chain correlation), HF calls = {} ({} including initialization){}",
        report.pf,
        report.pf_indicator,
        report.cov,
        report.cov_uncorrelated,
        report.hf_calls,
        report.hf_calls_total,
        if report.converged { "" } else { ", NOT CONVERGED" }
    );
    if verbosity != Verbosity::Summary {
        for l in &report.levels {
            s.push_str(&format!(
                "\n  level {}: threshold {:.6e}, P = {:.4}, COV = {:.4}, HF calls = {}",
                l.level, l.threshold, l.weighted.p_hat, l.weighted.cov, l.hf_calls
            ));
        }
    }
    for w in &report.warnings {
        s.push_str(&format!("\n  warning: {w}"));
    }
    s
}

/// Parses arguments, runs and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().filter_or("MFALS_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_CONVERGED };
        }
    };
    match cli.command {
        Command::Validate { spec } => match parse_spec(&spec) {
            Ok(_) => {
                println!("{}: ok", spec.display());
                EXIT_CONVERGED
            }
            Err(e) => {
                eprintln!("{}: {e}", spec.display());
                EXIT_ERROR
            }
        },
        Command::Run { spec, seed, method, out, verbosity, resume } => {
            let parsed = parse_spec(&spec).and_then(|mut s| {
                if let Some(seed) = seed {
                    s.seed = seed;
                }
                if let Some(method) = method {
                    s.method = method;
                }
                if let Some(out) = out {
                    s.output_dir = out;
                }
                if let Some(v) = verbosity {
                    s.verbosity = v;
                }
                s.validate()?;
                Ok(s)
            });
            let spec = match parsed {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_ERROR;
                }
            };
            match execute(&spec, resume) {
                Ok(report) => {
                    println!("{}", summary(&report, spec.verbosity));
                    if report.converged {
                        EXIT_CONVERGED
                    } else {
                        EXIT_NOT_CONVERGED
                    }
                }
                Err(e) => {
                    error!("{e}");
                    eprintln!("error: {e}");
                    EXIT_ERROR
                }
            }
        }
    }
}
