//! Jacobians and encodings of the nonlinear environments.


use pil_core::dynamics::{Dynamics, ObsEncoder};
use pil_core::lti::LtiSystem;
use pil_core::nonlinear::{generate_pendulum_dataset, Pendulum, PendulumExpert, PendulumNoise};
use pil_core::numkit::{Mat, RngStream};
use proptest::prelude::*;

fn fd_jacobians(f: &dyn Dynamics, x: &[f64], u: &[f64]) -> (Mat, Mat) {
    let h = 1e-6;
    let (n, m) = (f.state_dim(), f.input_dim());
    let column = |perturb: &dyn Fn(f64) -> Vec<f64>| -> Vec<f64> {
        let (p, q) = (perturb(h), perturb(-h));
        p.iter().zip(&q).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    };
    let mut a = Mat::zeros(n, n);
    let mut b = Mat::zeros(n, m);
    for j in 0..n {
        let col = column(&|d| {
            let mut xp = x.to_vec();
            xp[j] += d;
            f.step(&xp, u)
        });
        (0..n).for_each(|i| a[(i, j)] = col[i]);
    }
    for j in 0..m {
        let col = column(&|d| {
            let mut up = u.to_vec();
            up[j] += d;
            f.step(x, &up)
        });
        (0..n).for_each(|i| b[(i, j)] = col[i]);
    }
    (a, b)
}

fn assert_close(analytic: &Mat, fd: &Mat) -> Result<(), TestCaseError> {
    for (a, b) in analytic.data().iter().zip(fd.data()) {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        prop_assert!(rel < 1e-5, "analytic {} vs finite difference {}", a, b);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pendulum_jacobians_match_finite_differences(
        theta in -4.0f64..4.0,
        rate in -8.0f64..8.0,
        // inside the torque limit, away from the clipping kink
        u in -1.99f64..1.99,
    ) {
        let p = Pendulum::default();
        let (x, uu) = ([theta, rate], [u]);
        let (a, b) = p.jacobians(&x, &uu);
        let (fa, fb) = fd_jacobians(&p, &x, &uu);
        assert_close(&a, &fa)?;
        assert_close(&b, &fb)?;
    }

    #[test]
    fn linear_jacobians_match_finite_differences(x0 in -5.0f64..5.0, x1 in -5.0f64..5.0, u in -5.0f64..5.0) {
        let sys = LtiSystem::benchmark();
        let (a, b) = sys.jacobians(&[x0, x1], &[u]);
        let (fa, fb) = fd_jacobians(&sys, &[x0, x1], &[u]);
        assert_close(&a, &fa)?;
        assert_close(&b, &fb)?;
    }

    #[test]
    fn trig_observations_lie_on_the_circle(seed in any::<u64>(), noisy in any::<bool>()) {
        let p = Pendulum::default();
        let expert = PendulumExpert::new(p).unwrap();
        let noise = if noisy { PendulumNoise::default() } else { PendulumNoise::none() };
        let ds = generate_pendulum_dataset(&p, &expert, 3, 40, &noise, &RngStream::new(seed)).unwrap();
        prop_assert_eq!(ds.meta.encoder, ObsEncoder::TrigAngle);
        for tr in &ds.trajectories {
            for y in &tr.y {
                prop_assert!((y[0] * y[0] + y[1] * y[1] - 1.0).abs() <= 4.0 * f64::EPSILON);
            }
        }
    }
}
