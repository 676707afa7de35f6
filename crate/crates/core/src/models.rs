//! HF and LF evaluators, the analytic benchmark limit states, the subprocess
//! adapter for external solvers and the multifidelity composite that fuses a
//! LF model with a GP correction.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::distributions::{NamedVariable, ParameterSpace, RandomVariable};
use crate::gp::{GaussianProcess, GpArchive, GpConfig, GpError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input outside the model domain: {0}")]
    Domain(String),
    #[error("expected {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("adapter did not answer within {0} s")]
    Timeout(f64),
    #[error("adapter protocol violation: {0}")]
    Protocol(String),
    #[error("adapter reported an evaluation error: {0}")]
    Evaluation(String),
    #[error("adapter process terminated: {0}")]
    Crash(String),
    #[error("adapter I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-deterministic model: {first} then {second} for identical inputs")]
    Nondeterministic { first: f64, second: f64 },
    #[error("model returned a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Anything that maps an ordered parameter assignment to a scalar.
pub trait Evaluator: Send {
    fn inputs(&self) -> &[String];
    fn evaluate(&mut self, params: &[f64]) -> Result<f64, ModelError>;
}

pub fn four_branch(x: &[f64]) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    let s = std::f64::consts::SQRT_2;
    let d = (x1 - x2) * (x1 - x2) / 10.0;
    [
        3.0 + d - (x1 + x2) / s,
        3.0 + d + (x1 + x2) / s,
        (x1 - x2) + 6.0 / s,
        (x2 - x1) + 6.0 / s,
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}

pub fn rastrigin_limit(x: &[f64]) -> f64 {
    10.0 - x
        .iter()
        .map(|&xi| xi * xi - 5.0 * (2.0 * std::f64::consts::PI * xi).cos())
        .sum::<f64>()
}

pub const BOREHOLE_INPUTS: [&str; 8] = ["r_w", "r", "T_u", "H_u", "T_l", "H_l", "L", "K_w"];

/// Water flow through a borehole; inputs ordered as [`BOREHOLE_INPUTS`].
pub fn borehole(p: &[f64]) -> Result<f64, ModelError> {
    let [r_w, r, t_u, h_u, t_l, h_l, l, k_w] = [p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]];
    if !(r_w > 0.0) || !(r > r_w) {
        return Err(ModelError::Domain(format!("need r > r_w > 0, got r = {r}, r_w = {r_w}")));
    }
    if !(t_u > 0.0 && t_l > 0.0 && k_w > 0.0 && l >= 0.0) {
        return Err(ModelError::Domain("transmissivities, conductivity and length must be positive".into()));
    }
    let log_ratio = (r / r_w).ln();
    let denom = log_ratio * (1.0 + 2.0 * l * t_u / (log_ratio * r_w * r_w * k_w) + t_u / t_l);
    Ok(2.0 * std::f64::consts::PI * t_u * (h_u - h_l) / denom)
}

/// Wraps a plain function as an evaluator.
pub struct FnEvaluator<F> {
    inputs: Vec<String>,
    f: F,
}

impl<F> FnEvaluator<F>
where
    F: FnMut(&[f64]) -> Result<f64, ModelError> + Send,
{
    pub fn new(inputs: Vec<String>, f: F) -> Self {
        Self { inputs, f }
    }
}

impl<F> Evaluator for FnEvaluator<F>
where
    F: FnMut(&[f64]) -> Result<f64, ModelError> + Send,
{
    fn inputs(&self) -> &[String] {
        &self.inputs
    }

    fn evaluate(&mut self, params: &[f64]) -> Result<f64, ModelError> {
        (self.f)(params)
    }
}

/// Flips the sign of an evaluator so that failure reads as "output at or
/// above the threshold".
pub struct Negated(pub Box<dyn Evaluator>);

impl Evaluator for Negated {
    fn inputs(&self) -> &[String] {
        self.0.inputs()
    }

    fn evaluate(&mut self, params: &[f64]) -> Result<f64, ModelError> {
        self.0.evaluate(params).map(|v| -v)
    }
}

/// A frozen GP mean used as a cheap model. Inputs are mapped to the latent
/// coordinates of their distributions before prediction.
pub struct SurrogateEvaluator {
    inputs: Vec<String>,
    transforms: Vec<RandomVariable>,
    gp: GaussianProcess,
}

impl SurrogateEvaluator {
    pub fn new(inputs: Vec<String>, transforms: Vec<RandomVariable>, gp: GaussianProcess) -> Self {
        Self { inputs, transforms, gp }
    }

    /// Trains a surrogate of `model` on `n` draws from `variables`.
    pub fn train(
        model: &mut dyn Evaluator,
        variables: &[NamedVariable],
        n: usize,
        gp_config: GpConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let latent: Vec<f64> = variables.iter().map(|v| v.variable.sample_latent(rng)).collect();
            let physical: Vec<f64> =
                variables.iter().zip(&latent).map(|(v, &z)| v.variable.to_physical(z)).collect();
            ys.push(model.evaluate(&physical)?);
            xs.push(latent);
        }
        let gp = GaussianProcess::fit(xs, ys, gp_config)?;
        Ok(Self::new(
            variables.iter().map(|v| v.name.clone()).collect(),
            variables.iter().map(|v| v.variable.clone()).collect(),
            gp,
        ))
    }

    pub fn gp(&self) -> &GaussianProcess {
        &self.gp
    }
}

impl Evaluator for SurrogateEvaluator {
    fn inputs(&self) -> &[String] {
        &self.inputs
    }

    fn evaluate(&mut self, params: &[f64]) -> Result<f64, ModelError> {
        let latent: Vec<f64> = self.transforms.iter().zip(params).map(|(t, &p)| t.to_latent(p)).collect();
        Ok(self.gp.predict_mean(&latent))
    }
}

/// Subprocess speaking the line-delimited JSON protocol.
pub struct ExternalAdapter {
    inputs: Vec<String>,
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
    next_id: u64,
}

#[derive(Debug, Deserialize)]
struct Handshake {
    ready: bool,
    inputs: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Request<'a> {
    id: u64,
    params: &'a Map<String, Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Response {
    id: u64,
    #[serde(default)]
    value: Option<f64>,
    #[serde(default)]
    error: Option<String>,
}

impl ExternalAdapter {
    /// Spawns `command` (program followed by arguments) and waits for the
    /// handshake. `expected_inputs` must be a subset of the advertised inputs.
    pub fn spawn(command: &[String], expected_inputs: &[String], timeout_secs: f64) -> Result<Self, ModelError> {
        let (program, args) =
            command.split_first().ok_or_else(|| ModelError::Protocol("empty adapter command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut adapter = Self {
            inputs: expected_inputs.to_vec(),
            child,
            stdin,
            lines: rx,
            timeout: Duration::from_secs_f64(timeout_secs),
            next_id: 1,
        };
        let line = adapter.read_line()?;
        let handshake: Handshake = serde_json::from_str(&line)
            .map_err(|e| ModelError::Protocol(format!("bad handshake {line:?}: {e}")))?;
        if !handshake.ready {
            return Err(ModelError::Protocol("adapter reported ready = false".into()));
        }
        if let Some(missing) = expected_inputs.iter().find(|n| !handshake.inputs.contains(n)) {
            return Err(ModelError::Protocol(format!("adapter does not accept input {missing:?}")));
        }
        debug!("adapter {program} ready with inputs {:?}", handshake.inputs);
        Ok(adapter)
    }

    fn read_line(&mut self) -> Result<String, ModelError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(ModelError::Io(e)),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                Err(ModelError::Timeout(self.timeout.as_secs_f64()))
            }
            Err(RecvTimeoutError::Disconnected) => {
                let status = self.child.wait()?;
                Err(ModelError::Crash(format!("adapter closed its output ({status})")))
            }
        }
    }

    pub fn request(&mut self, params: &Map<String, Value>) -> Result<f64, ModelError> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&Request { id, params }).expect("serializable request");
        line.push('\n');
        if let Err(e) = self.stdin.write_all(line.as_bytes()).and_then(|_| self.stdin.flush()) {
            let status = self.child.try_wait().ok().flatten();
            return Err(match status {
                Some(s) => ModelError::Crash(format!("adapter exited ({s})")),
                None => ModelError::Io(e),
            });
        }
        let reply = self.read_line()?;
        let response: Response = serde_json::from_str(&reply)
            .map_err(|e| ModelError::Protocol(format!("malformed response {reply:?}: {e}")))?;
        if response.id != id {
            return Err(ModelError::Protocol(format!("response id {} does not match request id {id}", response.id)));
        }
        match (response.value, response.error) {
            (_, Some(msg)) => Err(ModelError::Evaluation(msg)),
            (Some(v), None) => Ok(v),
            (None, None) => Err(ModelError::Protocol(format!("response {reply:?} has neither value nor error"))),
        }
    }
}

impl Evaluator for ExternalAdapter {
    fn inputs(&self) -> &[String] {
        &self.inputs
    }

    fn evaluate(&mut self, params: &[f64]) -> Result<f64, ModelError> {
        let map: Map<String, Value> = self
            .inputs
            .iter()
            .zip(params)
            .map(|(n, &v)| (n.clone(), serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)))
            .collect();
        self.request(&map)
    }
}

impl Drop for ExternalAdapter {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Counts calls and optionally re-evaluates every `audit_every`-th input to
/// detect non-deterministic models.
pub struct ModelEvaluator {
    inner: Box<dyn Evaluator>,
    calls: u64,
    audit_every: Option<u64>,
    audit_calls: u64,
}

impl ModelEvaluator {
    pub fn new(inner: Box<dyn Evaluator>) -> Self {
        Self { inner, calls: 0, audit_every: None, audit_calls: 0 }
    }

    pub fn with_audit(mut self, every: Option<u64>) -> Self {
        self.audit_every = every.filter(|&k| k > 0);
        self
    }

    pub fn inputs(&self) -> &[String] {
        self.inner.inputs()
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn audit_calls(&self) -> u64 {
        self.audit_calls
    }

    pub fn set_calls(&mut self, calls: u64) {
        self.calls = calls;
    }

    pub fn evaluate(&mut self, params: &[f64]) -> Result<f64, ModelError> {
        if params.len() != self.inner.inputs().len() {
            return Err(ModelError::Arity { expected: self.inner.inputs().len(), got: params.len() });
        }
        self.calls += 1;
        let value = self.inner.evaluate(params)?;
        if !value.is_finite() {
            return Err(ModelError::NonFinite);
        }
        if self.audit_every.is_some_and(|k| self.calls % k == 0) {
            self.audit_calls += 1;
            let again = self.inner.evaluate(params)?;
            if again.to_bits() != value.to_bits() {
                return Err(ModelError::Nondeterministic { first: value, second: again });
            }
        }
        Ok(value)
    }
}

/// LF model plus a GP correction over the full parameter vector.
///
/// All points are latent coordinates of the parameter space.
pub struct MultifidelityModel {
    space: ParameterSpace,
    hf: ModelEvaluator,
    lf: ModelEvaluator,
    correction: Option<GaussianProcess>,
    gp_config: GpConfig,
}

impl MultifidelityModel {
    pub fn new(space: ParameterSpace, hf: ModelEvaluator, lf: ModelEvaluator, gp_config: GpConfig) -> Self {
        Self { space, hf, lf, correction: None, gp_config }
    }

    pub fn space(&self) -> &ParameterSpace {
        &self.space
    }

    pub fn hf_calls(&self) -> u64 {
        self.hf.calls()
    }

    pub fn lf_calls(&self) -> u64 {
        self.lf.calls()
    }

    pub fn set_calls(&mut self, hf: u64, lf: u64) {
        self.hf.set_calls(hf);
        self.lf.set_calls(lf);
    }

    pub fn correction(&self) -> Option<&GaussianProcess> {
        self.correction.as_ref()
    }

    pub fn correction_archive(&self) -> Option<GpArchive> {
        self.correction.as_ref().map(GaussianProcess::to_archive)
    }

    pub fn restore_correction(&mut self, archive: Option<GpArchive>) -> Result<(), ModelError> {
        self.correction = archive.map(GaussianProcess::from_archive).transpose()?;
        Ok(())
    }

    /// HF model alone, no adaptation.
    pub fn evaluate_hf(&mut self, x: &[f64]) -> Result<f64, ModelError> {
        let params = self.space.hf_values(x);
        self.hf.evaluate(&params)
    }

    pub fn evaluate_lf(&mut self, x: &[f64]) -> Result<f64, ModelError> {
        let params = self.space.lf_values(x);
        self.lf.evaluate(&params)
    }

    /// Fits the correction on the differences at `points`.
    pub fn initialize_correction(&mut self, points: Vec<Vec<f64>>) -> Result<(), ModelError> {
        let mut residuals = Vec::with_capacity(points.len());
        for x in &points {
            let lf = self.evaluate_lf(x)?;
            let hf = self.evaluate_hf(x)?;
            residuals.push(hf - lf);
        }
        self.correction = Some(GaussianProcess::fit(points, residuals, self.gp_config.clone())?);
        Ok(())
    }

    /// Corrected LF prediction and the correction's standard deviation.
    pub fn evaluate_lf_corrected(&mut self, x: &[f64]) -> Result<(f64, f64, f64), ModelError> {
        let lf = self.evaluate_lf(x)?;
        let (mean, std) = self.correct(x, lf);
        Ok((mean, std, lf))
    }

    /// Applies the correction to a known LF value.
    pub fn correct(&self, x: &[f64], lf: f64) -> (f64, f64) {
        match &self.correction {
            Some(gp) => {
                let (eps, std) = gp.predict(x);
                (lf + eps, std)
            }
            None => (lf, 0.0),
        }
    }

    pub fn evaluate_hf_and_adapt(&mut self, x: &[f64]) -> Result<f64, ModelError> {
        let lf = self.evaluate_lf(x)?;
        self.adapt_with_lf(x, lf)
    }

    /// Calls HF at `x`, records the difference to the known LF value and
    /// retrains the correction.
    pub fn adapt_with_lf(&mut self, x: &[f64], lf: f64) -> Result<f64, ModelError> {
        let hf = self.evaluate_hf(x)?;
        let residual = hf - lf;
        match &mut self.correction {
            Some(gp) => {
                if let Err(e) = gp.update(x.to_vec(), residual) {
                    warn!("correction update failed: {e}");
                    return Err(e.into());
                }
            }
            None => warn!("HF call without a correction to adapt"),
        }
        Ok(hf)
    }
}

/// A benchmark limit state with its input distributions.
pub struct Benchmark {
    pub space: ParameterSpace,
    pub threshold: f64,
    /// True when failure means the raw output falls below the threshold.
    pub failure_below: bool,
    pub model: fn(&[f64]) -> Result<f64, ModelError>,
}

impl Benchmark {
    pub fn four_branch() -> Self {
        Self {
            space: standard_normal_space(2),
            threshold: 0.0,
            failure_below: true,
            model: |x| Ok(four_branch(x)),
        }
    }

    pub fn rastrigin() -> Self {
        Self {
            space: standard_normal_space(2),
            threshold: 0.0,
            failure_below: true,
            model: |x| Ok(rastrigin_limit(x)),
        }
    }

    pub fn borehole() -> Self {
        Self { space: borehole_space(), threshold: 270.0, failure_below: false, model: borehole }
    }

    /// The HF evaluator oriented so that failure is "output ≥ threshold".
    pub fn oriented_model(&self) -> Box<dyn Evaluator> {
        let inner = Box::new(FnEvaluator::new(self.space.hf_names(), self.model));
        if self.failure_below {
            Box::new(Negated(inner))
        } else {
            inner
        }
    }

    /// Threshold in the oriented convention.
    pub fn oriented_threshold(&self) -> f64 {
        if self.failure_below {
            -self.threshold
        } else {
            self.threshold
        }
    }

    /// LF model: a GP trained on `n` HF evaluations drawn from the inputs.
    pub fn surrogate_lf(&self, n: usize, gp_config: GpConfig, seed: u64) -> Result<SurrogateEvaluator, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(LF_TRAINING_STREAM);
        let mut hf = self.oriented_model();
        SurrogateEvaluator::train(hf.as_mut(), self.space.variables(), n, gp_config, &mut rng)
    }
}

/// RNG stream reserved for LF surrogate training data.
pub const LF_TRAINING_STREAM: u64 = 2;

fn standard_normal_space(dim: usize) -> ParameterSpace {
    let variables = (1..=dim)
        .map(|i| NamedVariable {
            name: format!("x{i}"),
            variable: RandomVariable::normal(0.0, 1.0).expect("valid"),
        })
        .collect();
    ParameterSpace::shared(variables).expect("valid space")
}

pub fn borehole_variables() -> Vec<NamedVariable> {
    let u = |a, b| RandomVariable::uniform(a, b).expect("valid");
    let defs = [
        u(0.05, 0.15),
        RandomVariable::normal(7.71, 1.0056).expect("valid").in_log_space(),
        u(63_070.0, 115_600.0),
        u(990.0, 1_110.0),
        u(63.1, 116.0),
        u(700.0, 820.0),
        u(1_120.0, 1_680.0),
        u(9_855.0, 12_045.0),
    ];
    BOREHOLE_INPUTS
        .iter()
        .zip(defs)
        .map(|(name, variable)| NamedVariable { name: name.to_string(), variable })
        .collect()
}

fn borehole_space() -> ParameterSpace {
    ParameterSpace::shared(borehole_variables()).expect("valid space")
}
