use mfals::gp::{nll_and_gradient, GaussianProcess, GpConfig, KernelHyperparameters, RefitSchedule};
use mfals::models::{four_branch, Benchmark, Evaluator};
use mfals::subsim::stream_rng;
use proptest::prelude::*;
use rand::Rng;

fn standardize_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    rows.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) / sd[j]).collect()).collect()
}

fn standardize(y: &[f64]) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = y.iter().map(|&v| vec![v]).collect();
    standardize_rows(&rows).into_iter().map(|r| r[0]).collect()
}

fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, 7);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
}

fn smooth(x: &[f64]) -> f64 {
    x.iter().enumerate().map(|(i, v)| (v * (1.0 + i as f64 * 0.3)).sin()).sum::<f64>() + 0.2 * x[0] * x[0]
}

/// Four-branch HF minus a 20-point GP surrogate of it, on 20 fresh points.
fn four_branch_differences() -> (Vec<Vec<f64>>, Vec<f64>) {
    let b = Benchmark::four_branch();
    let mut lf = b.surrogate_lf(20, GpConfig { center_outputs: false, ..GpConfig::default() }, 3).unwrap();
    let mut rng = stream_rng(11, 1);
    let xs: Vec<Vec<f64>> = (0..20).map(|_| b.space.sample_latent(&mut rng)).collect();
    let ys = xs.iter().map(|x| -four_branch(x) - lf.evaluate(x).unwrap()).collect();
    (xs, ys)
}

#[test]
fn optimum_beats_random_search() {
    let (xs, ys) = four_branch_differences();
    let config = GpConfig::default();
    let gp = GaussianProcess::fit(xs.clone(), ys.clone(), config.clone()).unwrap();
    let z = standardize_rows(&xs);
    let zy = standardize(&ys);
    let unit = nll_and_gradient(&z, &zy, &[0.0; 3], config.initial_jitter, config.max_jitter).unwrap().0;
    assert!(gp.nll() < unit, "optimum {} vs unit start {unit}", gp.nll());

    let mut rng = stream_rng(5, 3);
    let (sv_lo, sv_hi) = config.signal_variance_bounds;
    let (l_lo, l_hi) = config.lengthscale_bounds;
    let mut best = f64::INFINITY;
    for _ in 0..10_000 {
        let theta = [
            rng.random_range(sv_lo.ln()..sv_hi.ln()),
            rng.random_range(l_lo.ln()..l_hi.ln()),
            rng.random_range(l_lo.ln()..l_hi.ln()),
        ];
        if let Some((v, _)) = nll_and_gradient(&z, &zy, &theta, config.initial_jitter, config.max_jitter) {
            best = best.min(v);
        }
    }
    assert!(gp.nll() <= best + 1e-3, "optimum {} vs best random draw {best}", gp.nll());
}

#[test]
fn refit_after_append_matches_fresh_fit() {
    let xs = random_points(21, 2, 1);
    let ys: Vec<f64> = xs.iter().map(|x| smooth(x)).collect();
    let config = GpConfig { refit: RefitSchedule { every: 1, ..RefitSchedule::default() }, ..GpConfig::default() };
    let mut grown = GaussianProcess::fit(xs[..20].to_vec(), ys[..20].to_vec(), config.clone()).unwrap();
    assert_eq!(grown.len(), 20);
    grown.update(xs[20].clone(), ys[20]).unwrap();
    assert_eq!(grown.len(), 21);
    let fresh = GaussianProcess::fit(xs, ys, config).unwrap();
    assert!((grown.nll() - fresh.nll()).abs() < 1e-6, "{} vs {}", grown.nll(), fresh.nll());
}

#[test]
fn correction_archive_grows_by_one_per_hf_call() {
    let b = Benchmark::four_branch();
    let lf = b.surrogate_lf(20, GpConfig { center_outputs: false, ..GpConfig::default() }, 1).unwrap();
    let mut mf = mfals::models::MultifidelityModel::new(
        b.space.clone(),
        mfals::models::ModelEvaluator::new(b.oriented_model()),
        mfals::models::ModelEvaluator::new(Box::new(lf)),
        GpConfig::default(),
    );
    let mut rng = stream_rng(1, 1);
    mfals::subsim::initialize_correction(&mut mf, 20, &mut rng).unwrap();
    assert_eq!(mf.correction().unwrap().len(), 20);
    mf.evaluate_hf_and_adapt(&[2.5, -1.0]).unwrap();
    assert_eq!(mf.correction().unwrap().len(), 21);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_matches_finite_differences(
        seed in 0u64..1_000,
        theta in prop::collection::vec(-1.5f64..1.5, 3),
    ) {
        let z = standardize_rows(&random_points(5, 2, seed));
        let y = standardize(&z.iter().map(|x| smooth(x)).collect::<Vec<_>>());
        // Fixed jitter so the objective is smooth in theta.
        let jitter = 1e-6;
        let (_, grad) = nll_and_gradient(&z, &y, &theta, jitter, jitter).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (nll_and_gradient(&z, &y, &up, jitter, jitter).unwrap().0
                - nll_and_gradient(&z, &y, &down, jitter, jitter).unwrap().0)
                / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-3);
            prop_assert!((fd - grad[i]).abs() / scale < 1e-4, "component {i}: analytic {} fd {fd}", grad[i]);
        }
    }

    #[test]
    fn variance_never_exceeds_prior(
        seed in 0u64..1_000,
        sv in 0.1f64..10.0,
        ls in prop::collection::vec(0.2f64..3.0, 2),
        probe in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let xs = random_points(8, 2, seed);
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * smooth(x) + 7.0).collect();
        let hyper = KernelHyperparameters { signal_variance: sv, lengthscales: ls, jitter: 1e-8 };
        let gp = GaussianProcess::with_hyperparameters(xs, ys.clone(), hyper, GpConfig::default()).unwrap();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let scale = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        let prior_var = scale * scale * sv;
        let (_, std) = gp.predict(&probe);
        prop_assert!(std * std <= prior_var + 1e-8, "{} > {prior_var}", std * std);
    }

    #[test]
    fn adding_a_point_never_increases_variance(
        seed in 0u64..1_000,
        sv in 0.1f64..10.0,
        ls in prop::collection::vec(0.2f64..3.0, 2),
        probe in prop::collection::vec(-4.0f64..4.0, 2),
    ) {
        let xs = random_points(9, 2, seed);
        let ys: Vec<f64> = xs.iter().map(|x| smooth(x)).collect();
        let hyper = KernelHyperparameters { signal_variance: sv, lengthscales: ls, jitter: 1e-8 };
        let config = GpConfig { refit: RefitSchedule { every: usize::MAX, large_archive: usize::MAX, every_large: usize::MAX, growth: 0.0 }, ..GpConfig::default() };
        let small = GaussianProcess::with_hyperparameters(xs[..8].to_vec(), ys[..8].to_vec(), hyper.clone(), config.clone()).unwrap();
        let mut archive = small.to_archive();
        archive.inputs.push(xs[8].clone());
        archive.outputs.push(ys[8]);
        let large = GaussianProcess::from_archive(archive).unwrap();
        let (_, s_small) = small.predict(&probe);
        let (_, s_large) = large.predict(&probe);
        prop_assert!(s_large * s_large <= s_small * s_small + 1e-8, "{} > {}", s_large * s_large, s_small * s_small);
    }

    #[test]
    fn predictions_commute_with_affine_output_maps(
        seed in 0u64..1_000,
        a in prop_oneof![0.01f64..100.0, -100.0f64..-0.01],
        b in -1_000.0f64..1_000.0,
        probe in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let xs = random_points(10, 2, seed);
        let ys: Vec<f64> = xs.iter().map(|x| smooth(x)).collect();
        let mapped: Vec<f64> = ys.iter().map(|y| a * y + b).collect();
        let config = GpConfig { n_starts: 3, ..GpConfig::default() };
        let raw = GaussianProcess::fit(xs.clone(), ys, config.clone()).unwrap();
        let affine = GaussianProcess::fit(xs, mapped, config).unwrap();
        let (m0, s0) = raw.predict(&probe);
        let (m1, s1) = affine.predict(&probe);
        let tol = 1e-6 * (1.0 + a.abs() + b.abs());
        prop_assert!((m1 - (a * m0 + b)).abs() < tol, "mean {m1} vs {}", a * m0 + b);
        prop_assert!((s1 - a.abs() * s0).abs() < tol, "std {s1} vs {}", a.abs() * s0);
    }

    #[test]
    fn interpolates_every_training_point(seed in 0u64..1_000) {
        let xs = random_points(12, 3, seed);
        let ys: Vec<f64> = xs.iter().map(|x| smooth(x)).collect();
        let gp = GaussianProcess::fit(xs.clone(), ys.clone(), GpConfig { n_starts: 2, ..GpConfig::default() }).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (m, s) = gp.predict(x);
            prop_assert!((m - y).abs() < 1e-6, "{m} vs {y}");
            prop_assert!(s < 1e-3, "std {s}");
        }
    }
}
