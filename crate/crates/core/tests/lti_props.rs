//! Properties of the linear plant, the LQR expert and the data generator.

mod support;

use pil_core::lti::{lqr_gain, LtiSystem};
use pil_core::numkit::{spectral_norm, Mat, RngStream};
use proptest::prelude::*;
use support::{dataset, random_plant};

#[test]
fn benchmark_lqr_closed_loop_contracts() {
    let sys = LtiSystem::benchmark();
    let k = lqr_gain(&sys, &Mat::identity(2), &Mat::scaled_identity(1, 0.01)).unwrap();
    let cl = sys.closed_loop(&k);
    let norms: Vec<f64> = [1u32, 10, 25, 50, 100].iter().map(|&p| spectral_norm(&cl.powi(p))).collect();
    assert!(norms[3] < 1.0, "{norms:?}");
    assert!(norms.windows(2).skip(1).all(|w| w[1] < w[0]), "{norms:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lqr_stabilizes_random_plants(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=2) {
        let mut rng = RngStream::new(seed);
        let (sys, _) = random_plant(n, m, 0.95, &mut rng);
        let k = lqr_gain(&sys, &Mat::identity(n), &Mat::scaled_identity(m, 0.1)).unwrap();
        prop_assert!(spectral_norm(&sys.closed_loop(&k).powi(200)) < 1.0);
    }

    #[test]
    fn measurement_noise_is_recorded_exactly(seed in any::<u64>(), xi in 0.0f64..0.5, eta in 0.0f64..0.5) {
        let mut rng = RngStream::new(seed);
        let (sys, k) = random_plant(2, 1, 0.9, &mut rng);
        let ds = dataset(&sys, &k, 3, 20, xi, eta, seed);
        for tr in &ds.trajectories {
            let noise = tr.noise.as_ref().unwrap();
            for t in 0..tr.y.len() {
                for i in 0..2 {
                    prop_assert_eq!(tr.y[t][i] - tr.x[t][i], noise.xi[t][i]);
                }
            }
            for t in 0..tr.v.len() {
                prop_assert_eq!(tr.v[t][0] - tr.u[t][0], noise.eta[t][0]);
            }
        }
    }

    #[test]
    fn expert_states_follow_the_plant(seed in any::<u64>(), n in 1usize..=4, m in 1usize..=2) {
        let mut rng = RngStream::new(seed);
        let (sys, k) = random_plant(n, m, 0.9, &mut rng);
        let ds = dataset(&sys, &k, 2, 30, 0.1, 0.1, seed);
        for tr in &ds.trajectories {
            for t in 0..tr.u.len() {
                let ax = sys.a().matvec(&tr.x[t]);
                let bu = sys.b().matvec(&tr.u[t]);
                let scale = tr.x[t].iter().chain(&tr.u[t]).fold(1.0f64, |a, b| a.max(b.abs()));
                for i in 0..n {
                    prop_assert!((tr.x[t + 1][i] - ax[i] - bu[i]).abs() <= 1e-14 * scale);
                }
                let kx = k.matrix().matvec(&tr.x[t]);
                prop_assert_eq!(&kx, &tr.u[t]);
            }
        }
    }
}
