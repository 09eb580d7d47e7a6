mod common;

use collapse_lab::closed_form::{global_minimum, optimal_sigma, DecVarMode, Hyperparams, SigmaMode};
use collapse_lab::data::{center, Dataset};
use collapse_lab::decoder_variance::solve_decoder_variance;
use collapse_lab::linalg::{random_commuting_orthogonal, random_orthogonal, singular_values};
use collapse_lab::spectrum::{compute_spectrum, DataSpectrum, DEFAULT_REL_TOL};
use collapse_lab::trainer::*;
use collapse_lab::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn lbfgs() -> TrainConfig {
    TrainConfig { optimizer: Optimizer::Lbfgs, learning_rate: 0.1, max_steps: 20_000, grad_tol: 1e-9, ..Default::default() }
}

fn central_difference(p: &ModelParams, mom: &Moments, hp: &Hyperparams) -> Vec<f64> {
    let x = p.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            (eval_loss(&p.with_values(&a), mom, hp).unwrap() - eval_loss(&p.with_values(&b), mom, hp).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn assert_gradient_matches(p: &ModelParams, mom: &Moments, hp: &Hyperparams) {
    let analytic = eval_grad(p, mom, hp).unwrap().to_vec();
    let numeric = central_difference(p, mom, hp);
    let scale = analytic.iter().fold(1.0f64, |m, g| m.max(g.abs()));
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!((a - n).abs() <= 1e-5 * scale, "analytic {a} vs numeric {n}");
    }
}

fn jitter(p: &ModelParams, seed: u64, size: f64) -> ModelParams {
    let mut r = common::rng(seed);
    let v: Vec<f64> = p.to_vec().iter().map(|x| x + size * r.random_range(-1.0..1.0)).collect();
    p.with_values(&v)
}

#[test]
fn gradient_matches_finite_differences() {
    let ds = common::shifted_dataset(4, 3, 60, 1);
    let mom = Moments::from_dataset(&ds);
    let (centered, _, _) = center(&ds);
    let centered_mom = Moments::from_dataset(&centered);
    for k in 0..10u64 {
        let hp = Hyperparams::new(0.5 + k as f64, 3).with_etas(0.8, 1.3);
        let plain = jitter(&init_params(4, 3, &hp, ParamOptions::default(), k), 100 + k, 0.5);
        assert_gradient_matches(&plain, &mom, &hp);

        let hp = hp.with_decvar_mode(DecVarMode::Learnable);
        let opts = ParamOptions { bias: true, data_dependent_variance: false, learnable_decoder_variance: true };
        let full = jitter(&init_params(4, 3, &hp, opts, k), 200 + k, 0.5);
        assert_gradient_matches(&full, &mom, &hp);

        let opts = ParamOptions { bias: true, data_dependent_variance: true, learnable_decoder_variance: true };
        let ddv = jitter(&init_params(4, 3, &hp, opts, k), 300 + k, 0.05);
        assert_gradient_matches(&ddv, &centered_mom, &hp);
    }
}

#[test]
fn gradient_vanishes_at_the_global_minimum() {
    for seed in 0..10 {
        let ds = common::random_dataset(5, 4, 80, 0.3, seed);
        let sp = compute_spectrum(&ds, DEFAULT_REL_TOL).unwrap();
        let mom = Moments::from_dataset(&ds);
        for mode in [SigmaMode::Fixed, SigmaMode::Learnable] {
            let hp = Hyperparams::new(0.7 + seed as f64 * 0.4, 3).with_sigma_mode(mode).with_etas(1.2, 0.9);
            let gm = global_minimum(&sp, &hp, None).unwrap();
            let p = ModelParams::from_factors(gm.u, gm.w, &gm.sigma);
            let g = eval_grad(&p, &mom, &hp).unwrap();
            let mut checked: Vec<f64> = g.u.iter().chain(g.w.iter()).copied().collect();
            if mode == SigmaMode::Learnable {
                checked.extend(g.to_vec()[checked.len()..].iter());
            }
            assert!(checked.iter().all(|v| v.abs() <= 1e-6), "{checked:?}");
            assert!((eval_loss(&p, &mom, &hp).unwrap() - gm.predicted_loss).abs() < 1e-9 * gm.predicted_loss);
        }
    }
}

fn biased_minimum(ds: &Dataset, hp: &Hyperparams) -> ModelParams {
    let (centered, mu, nu) = center(ds);
    let sp = compute_spectrum(&centered, DEFAULT_REL_TOL).unwrap();
    let gm = global_minimum(&sp, hp, None).unwrap();
    let b_e = -(gm.w.transpose() * mu);
    ModelParams { b_e: Some(b_e), b_d: Some(nu), ..ModelParams::from_factors(gm.u, gm.w, &gm.sigma) }
}

#[test]
fn biases_absorb_the_means() {
    for seed in 0..20 {
        let ds = common::shifted_dataset(4, 3, 70, seed);
        let hp = Hyperparams::new(1.0 + 0.3 * seed as f64, 3);
        let p = biased_minimum(&ds, &hp);
        let g = eval_grad(&p, &Moments::from_dataset(&ds), &hp).unwrap();
        for b in [g.b_e.unwrap(), g.b_d.unwrap()] {
            assert!(b.amax() <= 1e-8, "{b}");
        }
    }
}

#[test]
fn training_with_biases_recovers_the_means() {
    let ds = common::shifted_dataset(4, 3, 70, 7);
    let hp = Hyperparams::new(1.5, 3);
    let want = biased_minimum(&ds, &hp);
    let mom = Moments::from_dataset(&ds);
    let opts = ParamOptions { bias: true, ..Default::default() };
    let res = train(&init_params(4, 3, &hp, opts, 1), &mom, &hp, &lbfgs()).unwrap();
    let want_loss = eval_loss(&want, &mom, &hp).unwrap();
    assert!((res.final_loss - want_loss).abs() < 1e-8 * want_loss);
    let b_d = res.params.b_d.as_ref().unwrap();
    assert!((b_d - want.b_d.as_ref().unwrap()).amax() < 1e-5);
    // b_e is determined up to the same rotation as W, so compare the encoder means
    let shift = |p: &ModelParams| &p.u * (p.w.transpose() * center(&ds).1 + p.b_e.as_ref().unwrap());
    assert!(shift(&res.params).amax() < 1e-5);
    assert!(shift(&want).amax() < 1e-10);
}

#[test]
fn monte_carlo_agrees_with_closed_form() {
    let ds = common::shifted_dataset(3, 2, 50, 3);
    let mom = Moments::from_dataset(&ds);
    let hp = Hyperparams::new(2.0, 2).with_etas(1.1, 0.8).with_decvar_mode(DecVarMode::Learnable);
    let opts = ParamOptions { bias: true, data_dependent_variance: false, learnable_decoder_variance: true };
    let p = jitter(&init_params(3, 2, &hp, opts, 2), 5, 0.6);
    let exact = eval_loss(&p, &mom, &hp).unwrap();
    let mc = eval_loss_monte_carlo(&p, &mom, &hp, 100_000, 9).unwrap();
    assert!((mc.mean - exact).abs() <= 3.0 * mc.std_err, "{exact} vs {mc:?}");

    let (centered, _, _) = center(&ds);
    let cmom = Moments::from_dataset(&centered);
    let opts = ParamOptions { data_dependent_variance: true, ..Default::default() };
    let p = jitter(&init_params(3, 2, &hp, opts, 3), 6, 0.3);
    let exact = eval_loss(&p, &cmom, &hp).unwrap();
    let mc = eval_loss_monte_carlo(&p, &cmom, &hp, 100_000, 10).unwrap();
    assert!((mc.mean - exact).abs() <= 3.0 * mc.std_err, "{exact} vs {mc:?}");
}

#[test]
fn starting_at_the_minimum_stops_immediately() {
    let ds = common::random_dataset(4, 4, 60, 0.2, 4);
    let sp = compute_spectrum(&ds, DEFAULT_REL_TOL).unwrap();
    let hp = Hyperparams::new(2.0, 3);
    let gm = global_minimum(&sp, &hp, None).unwrap();
    let p = ModelParams::from_factors(gm.u, gm.w, &gm.sigma);
    let cfg = TrainConfig { grad_tol: 1e-6, ..Default::default() };
    let res = train(&p, &Moments::from_dataset(&ds), &hp, &cfg).unwrap();
    assert!(res.converged);
    assert_eq!(res.steps, 0);
}

#[test]
fn complete_collapse_training_reaches_the_origin() {
    let ds = common::random_dataset(4, 3, 60, 0.2, 5);
    let sp = compute_spectrum(&ds, DEFAULT_REL_TOL).unwrap();
    let hp = Hyperparams::new(1.5 * sp.zeta[0].powi(2), 3).with_etas(1.3, 1.0);
    let res = train(&init_params(4, 3, &hp, ParamOptions::default(), 6), &Moments::from_dataset(&ds), &hp, &lbfgs()).unwrap();
    assert!(res.params.u.norm() < 1e-3 && res.params.w.norm() < 1e-3);
    assert!(res.params.sigma().unwrap().iter().all(|s| (s - 1.3).abs() < 1e-3));
}

#[test]
fn plain_descent_never_increases_the_loss() {
    let ds = common::random_dataset(4, 3, 60, 0.2, 8);
    let hp = Hyperparams::new(0.8, 3);
    let cfg = TrainConfig { optimizer: Optimizer::PlainGd, learning_rate: 0.05, max_steps: 2000, record_trace: true, ..Default::default() };
    let res = train(&init_params(4, 3, &hp, ParamOptions::default(), 9), &Moments::from_dataset(&ds), &hp, &cfg).unwrap();
    assert!(res.trace.len() > 100);
    assert!(res.trace.windows(2).all(|w| w[1].loss <= w[0].loss));
}

#[test]
fn trained_solutions_match_closed_form_and_are_rotation_invariant() {
    let mut r = common::rng(10);
    for seed in 0..6u64 {
        let ds = common::random_dataset(5, 4, 90, 0.3, 20 + seed);
        let sp = compute_spectrum(&ds, DEFAULT_REL_TOL).unwrap();
        let mom = Moments::from_dataset(&ds);
        for mode in [SigmaMode::Fixed, SigmaMode::Learnable] {
            let hp = Hyperparams::new(r.random_range(0.5..6.0), 3).with_sigma_mode(mode);
            let gm = global_minimum(&sp, &hp, None).unwrap();
            let res = train(&init_params(5, 4, &hp, ParamOptions::default(), seed), &mom, &hp, &lbfgs()).unwrap();
            assert!((res.final_loss - gm.predicted_loss).abs() < 1e-8 * gm.predicted_loss);
            let want: Vec<f64> = gm.lambda.iter().zip(&gm.theta).map(|(l, t)| l * t).collect();
            let got = product_singular_values(&res.params, &sp);
            for (i, w) in want.iter().enumerate() {
                assert!((got[i] - w).abs() < 1e-3, "{got:?} vs {want:?}");
            }
            let p = match mode {
                SigmaMode::Fixed => random_orthogonal(3, &mut r),
                SigmaMode::Learnable => random_commuting_orthogonal(&res.params.sigma().unwrap(), 1e-6, &mut r),
            };
            let rotated = ModelParams::from_factors(&res.params.u * &p, &res.params.w * &p, &res.params.sigma().unwrap());
            let rotated = match mode {
                SigmaMode::Fixed => rotated,
                SigmaMode::Learnable => {
                    let s: Vec<f64> = res.params.sigma().unwrap();
                    let sp_sigma = DMatrix::from_diagonal(&DVector::from_vec(s.clone()));
                    let permuted = p.transpose() * sp_sigma * &p;
                    ModelParams::from_factors(rotated.u, rotated.w, &permuted.diagonal().iter().copied().collect::<Vec<_>>())
                }
            };
            let l = eval_loss(&rotated, &mom, &hp).unwrap();
            assert!((l - res.final_loss).abs() < 1e-10 * res.final_loss.max(1.0));
        }
    }
}

#[test]
fn data_dependent_variance_training_switches_off_the_input_term() {
    let ds = common::random_dataset(4, 3, 80, 0.3, 11);
    let mom = Moments::from_dataset(&ds);
    let hp = Hyperparams::new(1.2, 3);
    let opts = ParamOptions { data_dependent_variance: true, ..Default::default() };
    let res = train(&init_params(4, 3, &hp, opts, 12), &mom, &hp, &lbfgs()).unwrap();
    let EncoderVariance::DataDependent { c, .. } = &res.params.variance else { panic!() };
    assert!(c.norm() <= 1e-3, "{}", c.norm());
    let sp = compute_spectrum(&ds, DEFAULT_REL_TOL).unwrap();
    let gm = global_minimum(&sp, &hp, None).unwrap();
    assert!((res.final_loss - gm.predicted_loss).abs() < 1e-6 * gm.predicted_loss);
    let mut got = res.params.sigma_bar(&mom);
    got.sort_by(|a, b| a.total_cmp(b));
    let mut want = optimal_sigma(&sp, &hp).unwrap();
    want.sort_by(|a, b| a.total_cmp(b));
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-3);
    }
}

#[test]
fn learned_decoder_variance_matches_stationary_point() {
    for seed in 0..5 {
        for row in [common::RegimeRow::NoCollapse, common::RegimeRow::PartialCollapse, common::RegimeRow::CompleteCollapse] {
            let (sp, hp) = common::regime_instance(row, seed);
            let sol = solve_decoder_variance(&sp, &hp).unwrap();
            let s_star = sol.s_star().unwrap();
            let mom = Moments::from_spectrum(&sp);
            let opts = ParamOptions::for_hyperparams(&hp);
            let res = train(&init_params(sp.input_dim, sp.output_dim, &hp, opts, seed), &mom, &hp, &lbfgs()).unwrap();
            let s = res.params.decoder_variance(&hp);
            assert!((s - s_star).abs() < 1e-3 * s_star, "{row:?}: {s} vs {s_star}");
        }
    }
}

#[test]
fn ill_posed_decoder_variance_keeps_shrinking() {
    let sp = DataSpectrum::from_singular_values(&[2.0, 1.0], 2, 2).unwrap();
    let hp = Hyperparams::new(0.5, 2).with_decvar_mode(DecVarMode::Learnable);
    let mom = Moments::from_spectrum(&sp);
    let cfg = TrainConfig {
        optimizer: Optimizer::PlainGd,
        learning_rate: 0.1,
        max_steps: 400_000,
        grad_tol: 0.0,
        record_trace: true,
        ..Default::default()
    };
    let init = init_params(2, 2, &hp, ParamOptions::for_hyperparams(&hp), 1);
    let res = train(&init, &mom, &hp, &cfg).unwrap();
    let s: Vec<f64> = res.trace.iter().map(|t| t.decoder_variance).collect();
    // the first few dozen steps can zigzag while the step size grows
    let warm_up = 200;
    assert!(s[warm_up..].windows(2).all(|w| w[1] <= w[0]));
    assert!(res.trace.windows(2).all(|w| w[1].loss <= w[0].loss));
    assert!(*s.last().unwrap() < 1e-4, "{}", s.last().unwrap());
}

#[test]
fn exploding_steps_are_reported() {
    let ds = common::random_dataset(3, 2, 30, 0.1, 13);
    let hp = Hyperparams::new(1.0, 2);
    let cfg = TrainConfig { learning_rate: 1e200, max_steps: 50, ..Default::default() };
    let err = train(&init_params(3, 2, &hp, ParamOptions::default(), 1), &Moments::from_dataset(&ds), &hp, &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn mismatched_shapes_are_rejected() {
    let ds = common::random_dataset(3, 2, 30, 0.1, 14);
    let mom = Moments::from_dataset(&ds);
    let hp = Hyperparams::new(1.0, 2);
    let p = init_params(4, 2, &hp, ParamOptions::default(), 1);
    assert!(matches!(eval_loss(&p, &mom, &hp), Err(Error::Shape(_))));
    assert!(matches!(train(&p, &mom, &hp, &TrainConfig::default()), Err(Error::Shape(_))));
    let bad = TrainConfig { learning_rate: -1.0, ..Default::default() };
    let ok = init_params(3, 2, &hp, ParamOptions::default(), 1);
    assert!(matches!(train(&ok, &mom, &hp, &bad), Err(Error::InvalidHyperparams(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn constant_variance_is_never_worse(seed in 0u64..100_000, size in 0.01f64..1.0) {
        let ds = common::random_dataset(3, 2, 40, 0.3, seed % 7);
        let mom = Moments::from_dataset(&ds);
        let hp = Hyperparams::new(1.0 + (seed % 5) as f64, 2);
        let opts = ParamOptions { data_dependent_variance: true, ..Default::default() };
        let p = jitter(&init_params(3, 2, &hp, opts, seed), seed, size);
        let (lhs, rhs) = ddv_inequality_check(&p, &mom, &hp).unwrap();
        prop_assert!(rhs <= lhs + 1e-12 * lhs.abs());
    }
}

#[test]
fn product_singular_values_see_through_whitening() {
    let ds = common::random_dataset(3, 3, 50, 0.0, 15);
    let sp = compute_spectrum(&ds, DEFAULT_REL_TOL).unwrap();
    let hp = Hyperparams::new(0.1, 3);
    let gm = global_minimum(&sp, &hp, None).unwrap();
    let p = ModelParams::from_factors(gm.u.clone(), gm.w.clone(), &gm.sigma);
    let direct = singular_values(&(&gm.u * gm.w.transpose() * &sp.p_a * DMatrix::from_diagonal(&DVector::from_iterator(sp.rank, sp.phi.iter().map(|v| v.sqrt())))));
    let got = product_singular_values(&p, &sp);
    for (a, b) in got.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-10);
    }
}
