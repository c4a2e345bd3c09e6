use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::condexp::RegressionSpec;
use crate::paths::sample_ensemble;
use crate::problems::{builtin, Coeff, GeneratorSpec, Params};

fn params(kv: &[(&str, f64)]) -> Params {
    kv.iter()
        .map(|(k, v)| (k.to_string(), serde_json::Value::from(*v)))
        .collect()
}

fn setup(name: &str, kv: &[(&str, f64)], fine_n: usize, paths: usize) -> (BsdeProblem, PathEnsemble) {
    let problem = builtin(name, 1.0, &params(kv)).unwrap();
    let fine = Partition::uniform(1.0, fine_n).unwrap();
    (problem, sample_ensemble(&fine, paths, 11).unwrap())
}

fn lsmc() -> EstimatorKind {
    EstimatorKind::Regression(RegressionSpec::default())
}

fn all_schemes(
    problem: &BsdeProblem,
    part: &Partition,
    e: &PathEnsemble,
    est: &EstimatorKind,
) -> Vec<DiscreteSolution> {
    vec![
        solve_explicit(problem, part, e, est).unwrap(),
        solve_implicit(problem, part, e, est, PicardConfig::default()).unwrap(),
        solve_malliavin(problem, part, e, est, WeightVariant::Integral).unwrap(),
    ]
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn martingale_is_reproduced_exactly() {
    let (problem, e) = setup("martingale", &[], 16, 200);
    let part = e.fine().coarse_uniform(8).unwrap();
    let view = e.coarsen(&part).unwrap();
    let sol = solve_explicit(&problem, &part, &e, &EstimatorKind::Exact).unwrap();
    for i in 0..part.n() {
        assert_eq!(sol.y[i], view.w(i));
        assert!(sol.z[i].iter().all(|&z| z == 1.0));
    }
    assert!(sol.z[8].iter().all(|&z| z == 0.0));
}

#[test]
fn quadratic_explicit_matches_conditional_expectation() {
    let (problem, e) = setup("quadratic", &[], 32, 300);
    let part = e.fine().coarse_uniform(8).unwrap();
    let view = e.coarsen(&part).unwrap();
    let sol = solve_explicit(&problem, &part, &e, &EstimatorKind::Exact).unwrap();
    for i in 0..=part.n() {
        let want: Vec<f64> = view.w(i).iter().map(|w| w * w + 1.0 - part.t(i)).collect();
        assert!(max_abs_diff(&sol.y[i], &want) < 1e-12);
    }
    for i in 0..part.n() {
        let want: Vec<f64> = view.w(i).iter().map(|w| 2.0 * w).collect();
        assert!(max_abs_diff(&sol.z[i], &want) < 1e-12);
    }
}

#[test]
fn linear_const_two_steps_by_hand() {
    // With ξ = W_T, f = a y + b z and Δ = 1/2:
    //   Y_1 = (1 + aΔ) W_1,  Z_1 = 1 + aΔ
    //   Y_0 = b (1 + aΔ) Δ,  Z_0 = (1 + aΔ)²
    let (a, b, dt) = (0.1, 0.2, 0.5);
    let (problem, e) = setup("linear_const", &[("a", a), ("b", b)], 8, 50);
    let part = e.fine().coarse_uniform(2).unwrap();
    let view = e.coarsen(&part).unwrap();
    let sol = solve_explicit(&problem, &part, &e, &EstimatorKind::Exact).unwrap();
    let k = 1.0 + a * dt;
    for p in 0..e.n_paths() {
        assert!((sol.y[0][p] - b * k * dt).abs() < 1e-15);
        assert!((sol.z[0][p] - k * k).abs() < 1e-15);
        assert!((sol.y[1][p] - k * view.w(1)[p]).abs() < 1e-14);
        assert!((sol.z[1][p] - k).abs() < 1e-15);
    }
}

#[test]
fn linear_const_two_steps_by_regression() {
    let (a, b, dt) = (0.1, 0.2, 0.5);
    let (problem, e) = setup("linear_const", &[("a", a), ("b", b)], 2, 40_000);
    let part = e.fine().clone();
    let sol = solve_explicit(&problem, &part, &e, &lsmc()).unwrap();
    let k = 1.0 + a * dt;
    // constant basis at t_0: Y_0 is the sample mean of M_1
    assert!((sol.y[0][0] - b * k * dt).abs() < 0.02);
    assert!((sol.z[0][0] - k * k).abs() < 0.03);
}

#[test]
fn terminal_row_is_bit_identical() {
    for (name, kv) in [
        ("martingale", vec![]),
        ("hermite2", vec![]),
        ("linear_const", vec![("a", 0.3), ("b", -0.2), ("c", 0.1)]),
    ] {
        let (problem, e) = setup(name, &kv, 16, 64);
        let part = e.fine().coarse_uniform(4).unwrap();
        let xi = eval_terminal(&problem, &e).unwrap();
        for est in [EstimatorKind::Exact, lsmc()] {
            for sol in all_schemes(&problem, &part, &e, &est) {
                assert_eq!(sol.y[part.n()], xi);
            }
        }
    }
    let (problem, e) = setup("fbsde_energy", &[("sigma", 0.3), ("a", 0.1)], 16, 256);
    let part = e.fine().coarse_uniform(4).unwrap();
    let sol = solve_explicit(&problem, &part, &e, &lsmc()).unwrap();
    assert_eq!(sol.y[4], eval_terminal(&problem, &e).unwrap());
}

#[test]
fn z_free_generator_makes_implicit_equal_explicit() {
    let (problem, e) = setup("linear_const", &[("a", 0.4), ("b", 0.0), ("c", 0.3)], 32, 500);
    let part = e.fine().coarse_uniform(8).unwrap();
    for est in [EstimatorKind::Exact, lsmc()] {
        let ex = solve_explicit(&problem, &part, &e, &est).unwrap();
        let im = solve_implicit(&problem, &part, &e, &est, PicardConfig::default()).unwrap();
        for i in 0..part.n() {
            assert!(max_abs_diff(&ex.y[i], &im.y[i]) <= 1e-12);
            assert!(max_abs_diff(&ex.z[i], &im.z[i]) <= 1e-12);
        }
        assert!(im.picard.unwrap().iters.iter().all(|&k| k == 1));
    }
}

#[test]
fn zero_generator_schemes_agree() {
    for name in ["martingale", "quadratic", "hermite2"] {
        let (problem, e) = setup(name, &[], 32, 200);
        let part = e.fine().coarse_uniform(16).unwrap();
        let sols = all_schemes(&problem, &part, &e, &EstimatorKind::Exact);
        for s in &sols[1..] {
            assert_eq!(s.y, sols[0].y, "{name}");
        }
        let reg = all_schemes(&problem, &part, &e, &lsmc());
        for s in &reg[1..] {
            for i in 0..part.n() {
                assert!(max_abs_diff(&s.y[i], &reg[0].y[i]) < 1e-12, "{name}");
            }
        }
    }
}

#[test]
fn shared_prefixes_receive_identical_values() {
    // paths 2k and 2k+1 agree up to fine index 8 and differ afterwards
    let fine = Partition::uniform(1.0, 16).unwrap();
    let base = sample_ensemble(&fine, 200, 5).unwrap();
    let mut inc = Vec::new();
    for p in 0..100 {
        let a = base.increments(2 * p);
        let b = base.increments(2 * p + 1);
        inc.extend_from_slice(a);
        inc.extend_from_slice(&a[..8]);
        inc.extend_from_slice(&b[8..]);
    }
    let e = PathEnsemble::from_increments(fine, inc).unwrap();
    let problem = builtin("linear_const", 1.0, &params(&[("a", 0.2), ("b", 0.5)])).unwrap();
    let part = e.fine().coarse_uniform(4).unwrap();
    for est in [EstimatorKind::Exact, lsmc()] {
        for sol in all_schemes(&problem, &part, &e, &est) {
            for i in 0..=2 {
                for p in 0..100 {
                    assert_eq!(sol.y[i][2 * p], sol.y[i][2 * p + 1]);
                    assert_eq!(sol.z[i][2 * p], sol.z[i][2 * p + 1]);
                }
            }
        }
    }
}

#[test]
fn picard_iterations_do_not_grow_with_n() {
    let (problem, e) = setup("linear_const", &[("a", 0.1), ("b", 0.2)], 64, 2000);
    for est in [EstimatorKind::Exact, lsmc()] {
        let mut last = usize::MAX;
        for n in [4, 8, 16, 32, 64] {
            let part = e.fine().coarse_uniform(n).unwrap();
            let sol = solve_implicit(&problem, &part, &e, &est, PicardConfig::default()).unwrap();
            let k = sol.picard.unwrap().max_iters();
            assert!(k <= last, "n = {n}: {k} > {last}");
            last = k;
        }
    }
}

#[test]
fn picard_reports_divergence() {
    let (problem, e) = setup("linear_const", &[("a", 0.1), ("b", 0.2)], 8, 50);
    let part = e.fine().clone();
    let cfg = PicardConfig {
        tol: 1e-10,
        max_iter: 1,
    };
    let err = solve_implicit(&problem, &part, &e, &EstimatorKind::Exact, cfg).unwrap_err();
    assert!(matches!(err, BsdeError::PicardDiverged { interval: 7, iters: 1, .. }));
}

#[test]
fn picard_config_validation() {
    assert!(PicardConfig { tol: 0.0, max_iter: 5 }.validate().is_err());
    assert!(PicardConfig { tol: 1e-3, max_iter: 0 }.validate().is_err());
    let parsed: PicardConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(parsed, PicardConfig::default());
}

#[test]
fn malliavin_linear_const_z_is_shifted_exponential() {
    let (a, b) = (0.1, 0.2);
    let (problem, e) = setup("linear_const", &[("a", a), ("b", b)], 64, 100);
    for n in [4, 16, 64] {
        let part = e.fine().coarse_uniform(n).unwrap();
        let sol = solve_malliavin(&problem, &part, &e, &EstimatorKind::Exact, WeightVariant::Integral).unwrap();
        for i in 0..n {
            let want = (a * (1.0 - part.t(i + 1))).exp();
            assert!(sol.z[i].iter().all(|z| (z - want).abs() < 1e-14 * want));
            let truth = (a * (1.0 - part.t(i))).exp();
            assert!((sol.z[i][0] - truth).abs() <= a.abs() * a.abs().exp() * part.mesh());
        }
        assert!(sol.z[n].iter().all(|&z| z == 1.0));
        assert!(sol.terminal_z_is_estimate);
    }
}

#[test]
fn malliavin_quadratic_z_is_exact() {
    let (problem, e) = setup("quadratic", &[], 32, 100);
    let part = e.fine().coarse_uniform(8).unwrap();
    let view = e.coarsen(&part).unwrap();
    let sol = solve_malliavin(&problem, &part, &e, &EstimatorKind::Exact, WeightVariant::LeftPoint).unwrap();
    for i in 0..=8 {
        let want: Vec<f64> = view.w(i).iter().map(|w| 2.0 * w).collect();
        assert!(max_abs_diff(&sol.z[i], &want) < 1e-12);
    }
}

#[test]
fn malliavin_rejects_unsupported_problems() {
    let (smooth, e) = setup("smooth_terminal", &[], 8, 10);
    let part = e.fine().clone();
    let err = solve_malliavin(&smooth, &part, &e, &lsmc(), WeightVariant::Integral).unwrap_err();
    assert!(matches!(err, BsdeError::PreconditionViolated(_)));
    let (fbsde, e) = setup("fbsde_energy", &[("sigma", 0.2)], 8, 10);
    let err = solve_malliavin(&fbsde, &part, &e, &lsmc(), WeightVariant::Integral).unwrap_err();
    assert!(matches!(err, BsdeError::PreconditionViolated(_)));
}

#[test]
fn exact_estimator_needs_a_closed_form() {
    let (smooth, e) = setup("smooth_terminal", &[], 8, 10);
    let part = e.fine().clone();
    let err = solve_explicit(&smooth, &part, &e, &EstimatorKind::Exact).unwrap_err();
    assert!(matches!(err, BsdeError::UnsupportedProblem(_)));
}

#[test]
fn time_varying_weights_exact_matches_regression() {
    let mut problem = builtin("martingale", 1.0, &Params::new()).unwrap();
    problem.generator = GeneratorSpec::linear(
        Coeff::Function(Arc::new(|t| 0.2 * t)),
        Coeff::Function(Arc::new(|t| 0.3 + 0.4 * t)),
        Coeff::Constant(0.0),
    );
    let fine = Partition::uniform(1.0, 32).unwrap();
    let e = sample_ensemble(&fine, 40_000, 3).unwrap();
    let part = fine.coarse_uniform(4).unwrap();
    let ex = solve_malliavin(&problem, &part, &e, &EstimatorKind::Exact, WeightVariant::Integral).unwrap();
    let reg = solve_malliavin(&problem, &part, &e, &lsmc(), WeightVariant::Integral).unwrap();
    for i in 0..4 {
        let rms = l2_distance(&ex.z[i], &reg.z[i]);
        assert!(rms < 0.02, "node {i}: {rms}");
        let rms = l2_distance(&ex.y[i], &reg.y[i]);
        assert!(rms < 0.02, "node {i}: {rms}");
    }
}

#[test]
fn regression_tracks_exact_on_linear_const() {
    let (problem, e) = setup("linear_const", &[("a", 0.3), ("b", 0.5)], 32, 80_000);
    let part = e.fine().coarse_uniform(8).unwrap();
    let ex = solve_implicit(&problem, &part, &e, &EstimatorKind::Exact, PicardConfig::default()).unwrap();
    let reg = solve_implicit(&problem, &part, &e, &lsmc(), PicardConfig::default()).unwrap();
    for i in 0..8 {
        assert!(l2_distance(&ex.y[i], &reg.y[i]) < 0.03);
        assert!(l2_distance(&ex.z[i], &reg.z[i]) < 0.1);
    }
}

#[test]
fn nested_cross_checks_exact() {
    let (a, b) = (0.3, 0.4);
    let (problem, e) = setup("linear_const", &[("a", a), ("b", b)], 8, 400);
    let part = e.fine().coarse_uniform(4).unwrap();
    let nested = EstimatorKind::NestedMc { inner: 400 };
    let ma = solve_malliavin(&problem, &part, &e, &nested, WeightVariant::Integral).unwrap();
    for i in 0..4 {
        let want = (a * (1.0 - part.t(i + 1))).exp();
        let mean = ma.z[i].iter().sum::<f64>() / 400.0;
        assert!((mean - want).abs() < 0.01, "node {i}: {mean} vs {want}");
    }
    let ex = solve_explicit(&problem, &part, &e, &EstimatorKind::Exact).unwrap();
    let ne = solve_explicit(&problem, &part, &e, &nested).unwrap();
    for i in 0..4 {
        assert!(l2_distance(&ex.y[i], &ne.y[i]) < 0.05, "node {i}");
    }
    let again = solve_explicit(&problem, &part, &e, &nested).unwrap();
    assert_eq!(ne.y, again.y);
}

#[test]
fn mesh_ratio_warning() {
    let (problem, e) = setup("martingale", &[], 8, 10);
    let part = Partition::new(vec![0.0, 0.5, 0.625, 0.75, 1.0]).unwrap();
    let cfg = SchemeConfig {
        mesh_ratio_limit: Some(2.0),
        ..Default::default()
    };
    let sol = solve(SchemeKind::Explicit, &problem, &part, &e, &EstimatorKind::Exact, &cfg).unwrap();
    assert_eq!(sol.warnings.len(), 1);
    let calm = SchemeConfig {
        mesh_ratio_limit: Some(8.0),
        ..Default::default()
    };
    let sol = solve(SchemeKind::Explicit, &problem, &part, &e, &EstimatorKind::Exact, &calm).unwrap();
    assert!(sol.warnings.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop_z_free_implicit_equals_explicit(a in -1.0f64..1.0, c in -1.0f64..1.0, seed in 0u64..1000) {
        let problem = builtin("linear_const", 1.0, &params(&[("a", a), ("b", 0.0), ("c", c)])).unwrap();
        let fine = Partition::uniform(1.0, 16).unwrap();
        let e = sample_ensemble(&fine, 64, seed).unwrap();
        let part = fine.coarse_uniform(4).unwrap();
        let est = EstimatorKind::Regression(RegressionSpec { degree: 2, ..Default::default() });
        let ex = solve_explicit(&problem, &part, &e, &est).unwrap();
        let im = solve_implicit(&problem, &part, &e, &est, PicardConfig::default()).unwrap();
        for i in 0..=4 {
            prop_assert!(max_abs_diff(&ex.y[i], &im.y[i]) <= 1e-12);
        }
    }

    #[test]
    fn prop_weight_variants_coincide_for_constant_h(
        g in -1.0f64..1.0,
        h in -1.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let gen = GeneratorSpec::linear(Coeff::Constant(g), Coeff::Constant(h), Coeff::Constant(0.0));
        let fine = Partition::uniform(2.0, 24).unwrap();
        let e = sample_ensemble(&fine, 16, seed).unwrap();
        let part = fine.coarse_uniform(6).unwrap();
        for k in 0..6 {
            let a = discrete_weights(&gen, &e, &part, k, k + 1, WeightVariant::Integral).unwrap();
            let b = discrete_weights(&gen, &e, &part, k, k + 1, WeightVariant::LeftPoint).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn prop_weights_multiply(i in 0usize..4, j in 0usize..4, k in 0usize..4, seed in 0u64..1000) {
        let mut idx = [i, j, k];
        idx.sort();
        let [i, j, k] = idx;
        let gen = GeneratorSpec::linear(
            Coeff::Function(Arc::new(|t| t.cos())),
            Coeff::Function(Arc::new(|t| 0.5 - t)),
            Coeff::Constant(0.0),
        );
        let fine = Partition::uniform(1.0, 16).unwrap();
        let e = sample_ensemble(&fine, 16, seed).unwrap();
        let part = fine.coarse_uniform(4).unwrap();
        for v in [WeightVariant::Integral, WeightVariant::LeftPoint] {
            let ik = discrete_weights(&gen, &e, &part, i, k, v).unwrap();
            let ij = discrete_weights(&gen, &e, &part, i, j, v).unwrap();
            let jk = discrete_weights(&gen, &e, &part, j, k, v).unwrap();
            for p in 0..16 {
                prop_assert!((ik[p] - ij[p] * jk[p]).abs() <= 1e-12 * ik[p]);
            }
        }
    }
}
