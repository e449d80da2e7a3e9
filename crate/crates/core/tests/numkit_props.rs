//! Properties of the numerical kernels on random instances.

mod support;

use pil_core::numkit::{solve_linear, spectral_norm, symmetric_eigen, Mat, NoiseModel, RngStream};
use proptest::prelude::*;
use support::random_mat;

/// Condition number via the eigenvalues of `AᵀA`.
fn condition(a: &Mat) -> f64 {
    let (ev, _) = symmetric_eigen(&a.t_matmul(a));
    let max = ev.iter().cloned().fold(f64::MIN, f64::max);
    let min = ev.iter().cloned().fold(f64::MAX, f64::min);
    (max / min.max(f64::MIN_POSITIVE)).sqrt()
}

proptest! {
    #[test]
    fn solve_residual_is_small(seed in any::<u64>(), n in 1usize..=8, k in 1usize..=4) {
        let mut rng = RngStream::new(seed);
        let a = &random_mat(n, n, 1.0, &mut rng) + &Mat::scaled_identity(n, 0.5);
        prop_assume!(condition(&a) < 1e6);
        let b = random_mat(n, k, 3.0, &mut rng);
        let x = solve_linear(&a, &b).unwrap();
        let resid = (&a.matmul(&x) - &b).norm_inf();
        prop_assert!(resid <= 1e-9 * b.norm_inf().max(f64::MIN_POSITIVE), "residual {resid:e}");
    }

    #[test]
    fn spectral_norm_is_transpose_invariant(seed in any::<u64>(), r in 1usize..=6, c in 1usize..=6) {
        let mut rng = RngStream::new(seed);
        let m = random_mat(r, c, 2.0, &mut rng);
        let (a, b) = (spectral_norm(&m), spectral_norm(&m.transpose()));
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn seeded_streams_are_reproducible(seed in any::<u64>(), key in any::<u64>()) {
        let draw = |s: &RngStream| {
            let mut r = s.substream(key);
            let model = NoiseModel::isotropic_gaussian(3, 0.5).unwrap();
            let mut out: Vec<f64> = (0..5).map(|_| r.normal()).collect();
            out.extend(model.sample(&mut r));
            out.push(r.uniform(-1.0, 2.0));
            out.push(r.below(17) as f64);
            out
        };
        let a = draw(&RngStream::new(seed));
        let b = draw(&RngStream::new(seed));
        prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn uniform_noise_stays_in_bounds(seed in any::<u64>(), b0 in 0.0f64..3.0, b1 in 0.0f64..3.0) {
        let model = NoiseModel::uniform(vec![b0, b1]).unwrap();
        let mut rng = RngStream::new(seed);
        for _ in 0..100 {
            let s = model.sample(&mut rng);
            prop_assert!(s[0].abs() <= b0 && s[1].abs() <= b1);
        }
    }
}
