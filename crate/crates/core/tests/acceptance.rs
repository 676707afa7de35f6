//! End-to-end acceptance checks for the benchmark reproductions and the
//! property suites. Runs without the libtest harness so that every check
//! prints one line, then fails the target if any check failed.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use mfals::distributions::{std_normal_cdf, NamedVariable, ParameterSpace, RandomVariable};
use mfals::estimators::{level_statistics, CorrelationForm};
use mfals::gp::{GaussianProcess, GpConfig};
use mfals::learning::{batch_quantile, LearningConfig, LearningMode, QuantileTracker};
use mfals::models::{
    four_branch, Benchmark, Evaluator, ExternalAdapter, FnEvaluator, ModelError, ModelEvaluator, MultifidelityModel,
};
use mfals::subsim::{mmh_propose_accept, stream_rng, EstimateReport, Method, ProposalConfig, RunConfig, Runner};
use rand::Rng;

const FOUR_BRANCH_REF: f64 = 4.37e-3;
const FOUR_BRANCH_MC_REF: f64 = 4.32e-3;
const RASTRIGIN_REF: f64 = 7.28e-2;
const BOREHOLE_FULL: (f64, f64) = (1.8e-5, 4.5e-5);
const BOREHOLE_SCALED: (f64, f64) = (1.2e-5, 6e-5);
const DESK_BUDGET: Duration = Duration::from_secs(60 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Timed {
    report: EstimateReport,
    elapsed: Duration,
}

fn unavailable(names: Vec<String>) -> Box<dyn Evaluator> {
    Box::new(FnEvaluator::new(names, |_: &[f64]| Err(ModelError::Evaluation("no LF model".into()))))
}

/// A multifidelity run with a 20-point GP surrogate as the LF model.
fn mf_run(b: &Benchmark, n: usize, levels: usize, mode: LearningMode, seed: u64) -> Timed {
    let t = Instant::now();
    let lf = b.surrogate_lf(20, GpConfig { center_outputs: false, ..GpConfig::default() }, seed).unwrap();
    let mut mf = MultifidelityModel::new(
        b.space.clone(),
        ModelEvaluator::new(b.oriented_model()),
        ModelEvaluator::new(Box::new(lf)),
        GpConfig::default(),
    );
    let cfg = RunConfig {
        n_per_level: n,
        max_levels: levels,
        failure_threshold: b.oriented_threshold(),
        rng_seed: seed,
        learning: LearningConfig { mode, ..LearningConfig::default() },
        ..RunConfig::default()
    };
    let report = Runner::new(cfg, &mut mf).unwrap().with_lf_training_calls(20).run().unwrap();
    Timed { report, elapsed: t.elapsed() }
}

/// A run whose LF model is `lf` (or none), without surrogate training.
fn plain_run(b: &Benchmark, method: Method, n: usize, levels: usize, seed: u64, lf: Option<Box<dyn Evaluator>>) -> EstimateReport {
    let lf = lf.unwrap_or_else(|| unavailable(b.space.lf_names()));
    let mut mf = MultifidelityModel::new(
        b.space.clone(),
        ModelEvaluator::new(b.oriented_model()),
        ModelEvaluator::new(lf),
        GpConfig::default(),
    );
    let cfg = RunConfig {
        method,
        n_per_level: n,
        max_levels: levels,
        failure_threshold: b.oriented_threshold(),
        rng_seed: seed,
        ..RunConfig::default()
    };
    Runner::new(cfg, &mut mf).unwrap().run().unwrap()
}

fn within_cov(pf: f64, reference: f64, cov: f64) -> bool {
    (pf - reference).abs() <= 3.0 * cov * reference
}

fn summary(r: &EstimateReport) -> String {
    format!(
        "pf {:.3e} cov {:.3} hf {} (total {}) levels {} converged {}",
        r.pf,
        r.cov,
        r.hf_calls,
        r.hf_calls_total,
        r.levels.len(),
        r.converged
    )
}

fn four_branch_reproduction(run: &Timed) -> Outcome {
    let r = &run.report;
    let pass = r.converged
        && within_cov(r.pf, FOUR_BRANCH_REF, r.cov)
        && r.hf_calls_total <= 1_500
        && (0.03..=0.07).contains(&r.cov)
        && run.elapsed <= Duration::from_secs(600);
    outcome(pass, format!("{} in {:.0?}", summary(r), run.elapsed))
}

fn subset_independent_variant(dependent: &[Timed]) -> Outcome {
    let b = Benchmark::four_branch();
    let independent: Vec<Timed> = (1..=5)
        .map(|seed| mf_run(&b, 20_000, 3, LearningMode::MultifidelitySubsetIndependent, seed))
        .collect();
    let mean = |runs: &[Timed]| runs.iter().map(|t| t.report.hf_calls_total as f64).sum::<f64>() / runs.len() as f64;
    let (hf_dep, hf_ind) = (mean(dependent), mean(&independent));
    let first = &independent[0].report;
    let pfs: Vec<String> = independent.iter().map(|t| format!("{:.3e}", t.report.pf)).collect();
    let pass = first.converged && within_cov(first.pf, FOUR_BRANCH_REF, first.cov) && hf_ind <= 1_000.0 && hf_ind < hf_dep;
    outcome(
        pass,
        format!(
            "seed 1: {}; mean HF {hf_ind:.1} vs {hf_dep:.1} subset-dependent; pf by seed [{}]",
            summary(first),
            pfs.join(", ")
        ),
    )
}

fn rastrigin_reproduction() -> Outcome {
    let run = mf_run(&Benchmark::rastrigin(), 40_000, 2, LearningMode::MultifidelitySubsetDependent, 1);
    let r = &run.report;
    let pass = r.converged
        && within_cov(r.pf, RASTRIGIN_REF, r.cov)
        && r.hf_calls_total <= 2_500
        && run.elapsed <= Duration::from_secs(900);
    outcome(pass, format!("{} in {:.0?}", summary(r), run.elapsed))
}

fn borehole_reproduction() -> Outcome {
    let b = Benchmark::borehole();
    let full = mf_run(&b, 40_000, 5, LearningMode::MultifidelitySubsetDependent, 1);
    let r = &full.report;
    let ok = |r: &EstimateReport, (lo, hi): (f64, f64)| r.converged && (lo..=hi).contains(&r.pf) && r.hf_calls_total <= 4_000;
    if full.elapsed <= DESK_BUDGET {
        return outcome(ok(r, BOREHOLE_FULL), format!("5 x 40,000: {} in {:.0?}", summary(r), full.elapsed));
    }
    let scaled = mf_run(&b, 10_000, 5, LearningMode::MultifidelitySubsetDependent, 1);
    outcome(
        ok(&scaled.report, BOREHOLE_SCALED),
        format!("full run took {:.0?}; 5 x 10,000: {}", full.elapsed, summary(&scaled.report)),
    )
}

fn borehole_breakdown() -> Outcome {
    let b = Benchmark::borehole();
    let run = mf_run(&b, 40_000, 5, LearningMode::MultifidelitySubsetIndependent, 1);
    let r = &run.report;
    let highest = r.level_thresholds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pass = (!r.converged || r.pf == 0.0) && highest < 0.5 * b.oriented_threshold();
    outcome(pass, format!("{}; thresholds {:.1?}", summary(r), r.level_thresholds))
}

fn baseline_cross_check() -> Outcome {
    let b = Benchmark::four_branch();
    let ss = plain_run(&b, Method::Ss, 20_000, 3, 1, None);
    let mc = plain_run(&b, Method::Mc, 110_000, 1, 1, None);
    let pass = ss.converged && within_cov(ss.pf, FOUR_BRANCH_MC_REF, ss.cov) && (3.6e-3..=5.1e-3).contains(&mc.pf);
    outcome(pass, format!("SS {}; MC pf {:.3e} cov {:.3}", summary(&ss), mc.pf, mc.cov))
}

fn cov_limit() -> Outcome {
    let mut rng = stream_rng(2024, 0);
    let mut details = Vec::new();
    let mut pass = true;
    for p in [0.1, 0.5] {
        let (n, chains) = (100_000, 10_000);
        let values: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
        let stats = level_statistics(&values, Some(chains), CorrelationForm::AuBeck).unwrap();
        let mc = ((1.0 - stats.p_hat) / (n as f64 * stats.p_hat)).sqrt();
        let rel = (stats.cov / mc - 1.0).abs();
        pass &= stats.gamma.abs() < 0.05 && rel < 0.05;
        details.push(format!("p {p}: gamma {:.4} cov/mc - 1 = {rel:.4}", stats.gamma));
    }
    outcome(pass, details.join("; "))
}

fn autocorrelation_agreement(run: &Timed) -> Outcome {
    let r = &run.report;
    let gaps: Vec<f64> = r.levels[1..]
        .iter()
        .map(|l| {
            l.weighted
                .autocorrelation
                .iter()
                .zip(&l.indicator.autocorrelation)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let pass = r.converged && r.levels.len() == 3 && gaps.iter().all(|&g| g <= 0.05);
    outcome(pass, format!("max lag discrepancy by level {gaps:.4?}"))
}

fn perfect_lf() -> Outcome {
    let b = Benchmark::four_branch();
    let ss = plain_run(&b, Method::Ss, 20_000, 3, 1, None);
    let mf = plain_run(&b, Method::MfAlSs, 20_000, 3, 1, Some(b.oriented_model()));
    let pass = mf.hf_calls == 0 && mf.pf.to_bits() == ss.pf.to_bits() && mf.level_thresholds == ss.level_thresholds;
    outcome(pass, format!("MF hf after warm-up {}; pf {:e} vs SS {:e}", mf.hf_calls, mf.pf, ss.pf))
}

fn gp_invariants() -> Result<(), String> {
    let mut rng = stream_rng(3, 0);
    let xs: Vec<Vec<f64>> = (0..15).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
    let f = |x: &[f64]| x[0].sin() + 0.5 * (1.3 * x[1]).cos() + 0.1 * x[0] * x[1];
    let ys: Vec<f64> = xs.iter().map(|x| f(x)).collect();
    let gp = GaussianProcess::fit(xs.clone(), ys.clone(), GpConfig::default()).map_err(|e| e.to_string())?;
    for (x, y) in xs.iter().zip(&ys) {
        let (m, s) = gp.predict(x);
        if (m - y).abs() > 1e-6 || s > 1e-3 {
            return Err(format!("no interpolation at {x:?}: mean {m} vs {y}, std {s}"));
        }
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let prior = var * gp.hyperparameters().signal_variance;
    for _ in 0..200 {
        let probe = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
        let (_, s) = gp.predict(&probe);
        if s * s > prior + 1e-8 {
            return Err(format!("variance {} above prior {prior}", s * s));
        }
    }
    Ok(())
}

fn tracker_matches_batch() -> Result<(), String> {
    let mut rng = stream_rng(4, 0);
    for p0 in [0.1, 0.2, 0.05] {
        let values: Vec<f64> = (0..3_000).map(|_| (rng.random_range(0.0..50.0) as f64).floor()).collect();
        let mut t = QuantileTracker::new(p0).map_err(|e| e.to_string())?;
        for (i, &v) in values.iter().enumerate() {
            t.push(v);
            if t.threshold() != batch_quantile(&values[..=i], p0) {
                return Err(format!("p0 {p0}: prefix {} differs", i + 1));
            }
        }
    }
    Ok(())
}

fn mmh_standard_normal() -> Result<(), String> {
    let space = ParameterSpace::shared(vec![NamedVariable {
        name: "x".into(),
        variable: RandomVariable::normal(0.0, 1.0).unwrap(),
    }])
    .unwrap();
    let proposal = ProposalConfig::default();
    let mut rng = stream_rng(17, 0);
    let mut samples = Vec::new();
    for _ in 0..400 {
        let mut x = vec![3.0];
        for step in 0..600 {
            x = mmh_propose_accept(&x, &space, &proposal, &mut rng);
            if step >= 100 && step % 10 == 0 {
                samples.push(x[0]);
            }
        }
    }
    let n = samples.len();
    let d = common::ks_statistic(&mut samples, std_normal_cdf);
    if d < common::ks_critical_001(n) {
        Ok(())
    } else {
        Err(format!("KS statistic {d} with {n} samples"))
    }
}

fn distribution_round_trips() -> Result<(), String> {
    let vars = [
        RandomVariable::normal(1.5, 2.0).unwrap(),
        RandomVariable::uniform(-2.0, 5.0).unwrap(),
        RandomVariable::truncated_normal(0.0, 1.0, -1.0, 2.5).unwrap(),
        RandomVariable::normal(7.71, 1.0056).unwrap().in_log_space(),
    ];
    for v in &vars {
        for i in 1..1_000 {
            let p = i as f64 / 1_000.0;
            let q = v.quantile(p).map_err(|e| e.to_string())?;
            if (v.cdf(q) - p).abs() > 1e-9 {
                return Err(format!("{v:?}: cdf(quantile({p})) = {}", v.cdf(q)));
            }
            let back = v.to_latent(v.to_physical(q));
            if (back - q).abs() > 1e-9 * q.abs().max(1.0) {
                return Err(format!("{v:?}: latent round trip {q} -> {back}"));
            }
        }
    }
    Ok(())
}

fn report_determinism() -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, r#"{"problem": "four_branch", "method": "SS", "n_per_level": 2000, "max_levels": 6}"#)
        .map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_mfals"))
            .args(["run", spec.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        if o.status.code() != Some(0) {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
        let text = std::fs::read_to_string(out.join("report.json")).map_err(|e| e.to_string())?;
        let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        v.as_object_mut().unwrap().remove("timestamp");
        v["spec"]["output_dir"] = serde_json::Value::Null;
        reports.push(v.to_string());
    }
    if reports[0] == reports[1] {
        Ok(())
    } else {
        Err("report.json differs between identical runs".into())
    }
}

fn echo_adapter_round_trip() -> Result<(), String> {
    let names = vec!["x1".to_string(), "x2".to_string()];
    let mut adapter = ExternalAdapter::spawn(&[env!("CARGO_BIN_EXE_mfals-echo-adapter").into(), "four_branch".into()], &names, 10.0)
        .map_err(|e| e.to_string())?;
    for x in [[0.0, 0.0], [3.0, 3.0], [-1.5, 0.25], [0.1, -4.0]] {
        let v = adapter.evaluate(&x).map_err(|e| e.to_string())?;
        if v != four_branch(&x) {
            return Err(format!("echo returned {v} at {x:?}"));
        }
    }
    Ok(())
}

fn property_suites() -> Outcome {
    let t = Instant::now();
    let suites: [(&str, fn() -> Result<(), String>); 6] = [
        ("gp", gp_invariants),
        ("tracker", tracker_matches_batch),
        ("mmh", mmh_standard_normal),
        ("distributions", distribution_round_trips),
        ("determinism", report_determinism),
        ("adapter", echo_adapter_round_trip),
    ];
    let failures: Vec<String> = suites
        .iter()
        .filter_map(|(name, check)| check().err().map(|e| format!("{name}: {e}")))
        .collect();
    let elapsed = t.elapsed();
    let pass = failures.is_empty() && elapsed <= Duration::from_secs(120);
    let detail = if failures.is_empty() { "all suites hold".to_string() } else { failures.join("; ") };
    outcome(pass, format!("{detail} in {elapsed:.1?}"))
}

fn report_line(id: usize, name: &str, o: &Outcome) {
    println!("[{}] criterion {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    // Dependent four-branch runs are shared by criteria 1, 2 and 8.
    let b = Benchmark::four_branch();
    let dependent: Vec<Timed> =
        (1..=5).map(|seed| mf_run(&b, 20_000, 3, LearningMode::MultifidelitySubsetDependent, seed)).collect();

    let checks: Vec<(usize, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "four-branch reproduction", Box::new(|| four_branch_reproduction(&dependent[0]))),
        (2, "four-branch subset-independent", Box::new(|| subset_independent_variant(&dependent))),
        (3, "rastrigin reproduction", Box::new(rastrigin_reproduction)),
        (4, "borehole reproduction", Box::new(borehole_reproduction)),
        (5, "borehole breakdown", Box::new(borehole_breakdown)),
        (6, "baseline cross-check", Box::new(baseline_cross_check)),
        (7, "COV limit", Box::new(cov_limit)),
        (8, "autocorrelation agreement", Box::new(|| autocorrelation_agreement(&dependent[0]))),
        (9, "perfect-LF degeneracy", Box::new(perfect_lf)),
        (10, "property suites", Box::new(property_suites)),
    ];
    let mut failed = 0;
    for (id, name, check) in &checks {
        let o = check();
        report_line(*id, name, &o);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
