//! Closed-form linear estimators against independent oracles, and their
//! structural properties on random instances.

mod support;

use pil_core::linear::{
    fit_bc, fit_pil_alternating, fit_pil_fixed_g, fit_pil_h1, fit_predictors_ols, LossWeightsLinear,
    PredictorSetLinear,
};
use pil_core::numkit::{Mat, RngStream};
use proptest::prelude::*;
use support::*;

fn random_psd(n: usize, floor: f64, rng: &mut RngStream) -> Mat {
    let l = random_mat(n, n, 0.7, rng);
    &l.matmul_t(&l) + &Mat::scaled_identity(n, floor)
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).max_abs()
}

const GD_TOL: f64 = 1e-12;
const GD_ITERS: usize = 2_000_000;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn closed_forms_match_gradient_descent(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=2, h in 1usize..=3) {
        let mut rng = RngStream::new(seed);
        let (sys, k) = random_plant(n, m, 0.8, &mut rng);
        let ds = dataset(&sys, &k, 3, 50, 0.05, 0.05, seed ^ 0x5eed);
        let view = ds.observations();

        let bc = fit_bc(&view).unwrap();
        let gd = gd_minimize(|x| bc_loss(&ds, &to_mat(m, n, x)), m * n, GD_TOL, GD_ITERS);
        prop_assert!(max_abs_diff(bc.matrix(), &to_mat(m, n, &gd.x)) < 1e-6,
            "bc: gd stopped at |g| = {:e} after {} steps", gd.grad_norm, gd.iterations);

        let g = fit_predictors_ols(&view, h, 0.0).unwrap();
        for tau in 1..=h {
            let gd = gd_minimize(|x| ols_loss(&ds, tau, &to_mat(n, n, x)), n * n, GD_TOL, GD_ITERS);
            prop_assert!(max_abs_diff(&g.get(tau), &to_mat(n, n, &gd.x)) < 1e-6, "ols tau {}", tau);
        }

        let q = random_psd(n, 0.1, &mut rng);
        let r = random_psd(m, 0.1, &mut rng);
        let h1 = fit_pil_h1(&view, &sys, &q, &r).unwrap();
        let gd = gd_minimize(|x| h1_loss(&ds, sys.a(), sys.b(), &q, &r, &to_mat(m, n, x)), m * n, GD_TOL, GD_ITERS);
        prop_assert!(max_abs_diff(h1.matrix(), &to_mat(m, n, &gd.x)) < 1e-6,
            "h1: gd stopped at |g| = {:e} after {} steps", gd.grad_norm, gd.iterations);

        let p = random_psd(n, 0.1, &mut rng);
        let alpha = 0.5 + 0.5 * rng.uniform(0.0, 1.0);
        let w = LossWeightsLinear::new(q.clone(), r.clone(), p.clone(), h, alpha).unwrap();
        let fixed = fit_pil_fixed_g(&view, &sys, &g, &w).unwrap();
        let preds: Vec<Mat> = g.matrices()[..h].to_vec();
        let gd = gd_minimize(
            |x| fixed_g_loss(&ds, sys.a(), sys.b(), &preds, &q, &r, &p, alpha, &to_mat(m, n, x)),
            m * n,
            GD_TOL,
            GD_ITERS,
        );
        prop_assert!(max_abs_diff(fixed.matrix(), &to_mat(m, n, &gd.x)) < 1e-6,
            "fixed G: gd stopped at |g| = {:e} after {} steps", gd.grad_norm, gd.iterations);
    }

    #[test]
    fn noise_free_data_recovers_the_gain(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=2, h in 1usize..=4) {
        let mut rng = RngStream::new(seed);
        let (sys, k) = random_plant(n, m, 0.9, &mut rng);
        let ds = dataset(&sys, &k, 5, 40, 0.0, 0.0, seed);
        let view = ds.observations();
        let scale = k.matrix().max_abs().max(1.0);
        prop_assert!(max_abs_diff(fit_bc(&view).unwrap().matrix(), k.matrix()) < 1e-8 * scale);
        let q = random_psd(n, 0.1, &mut rng);
        let r = random_psd(m, 0.1, &mut rng);
        prop_assert!(max_abs_diff(fit_pil_h1(&view, &sys, &q, &r).unwrap().matrix(), k.matrix()) < 1e-8 * scale);
        let g = PredictorSetLinear::from_closed_loop(&sys.closed_loop(&k), h).unwrap();
        let w = LossWeightsLinear::new(q, r, random_psd(n, 0.1, &mut rng), h, 0.9).unwrap();
        prop_assert!(max_abs_diff(fit_pil_fixed_g(&view, &sys, &g, &w).unwrap().matrix(), k.matrix()) < 1e-8 * scale);
    }

    #[test]
    fn unit_decay_single_step_fixed_g_equals_h1(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=2) {
        // With least-squares G_1, G_1 Σ y_t y_tᵀ = Σ y_{t+1} y_tᵀ, so the two
        // normal equations coincide when P = Q.
        let mut rng = RngStream::new(seed);
        let (sys, k) = random_plant(n, m, 0.8, &mut rng);
        let ds = dataset(&sys, &k, 3, 30, 0.1, 0.1, seed);
        let view = ds.observations();
        let q = random_psd(n, 0.1, &mut rng);
        let r = random_psd(m, 0.1, &mut rng);
        let g = fit_predictors_ols(&view, 1, 0.0).unwrap();
        let w = LossWeightsLinear::new(q.clone(), r.clone(), q.clone(), 1, 1.0).unwrap();
        let fixed = fit_pil_fixed_g(&view, &sys, &g, &w).unwrap();
        let h1 = fit_pil_h1(&view, &sys, &q, &r).unwrap();
        prop_assert!(max_abs_diff(fixed.matrix(), h1.matrix()) < 1e-9 * h1.matrix().max_abs().max(1.0));
    }

    #[test]
    fn alternating_fit_never_increases_the_objective(seed in any::<u64>(), n in 1usize..=3, m in 1usize..=2, h in 1usize..=4) {
        let mut rng = RngStream::new(seed);
        let (sys, k) = random_plant(n, m, 0.8, &mut rng);
        let ds = dataset(&sys, &k, 4, 30, 0.1, 0.1, seed);
        let w = LossWeightsLinear::new(
            random_psd(n, 0.1, &mut rng),
            random_psd(m, 0.1, &mut rng),
            random_psd(n, 0.1, &mut rng),
            h,
            0.9,
        )
        .unwrap();
        let fit = fit_pil_alternating(&ds.observations(), &sys, &w, 50, 1e-14).unwrap();
        for pair in fit.loss_history.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12 * pair[0].abs().max(1.0), "{} -> {}", pair[0], pair[1]);
        }
    }
}
