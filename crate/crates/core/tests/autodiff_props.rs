//! Reverse-mode gradients of random composite graphs against central
//! differences, plus value transparency of stop-gradient and tape
//! determinism.

use pil_core::autodiff::{ParamStore, Tape, Var};
use pil_core::lti::LtiSystem;
use pil_core::numkit::{Mat, RngStream};
use pil_core::Dynamics;
use proptest::prelude::*;

const BATCH: usize = 3;
const KINK: f64 = 1e-3;

fn store(seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    s.alloc("x", BATCH * 2).unwrap();
    s.alloc("w", 4).unwrap();
    s.alloc("bias", 2).unwrap();
    s.alloc("k", 2).unwrap();
    let mut rng = RngStream::new(seed);
    for p in s.flat_mut() {
        *p = rng.normal();
    }
    s
}

fn near_kink(m: &Mat) -> bool {
    m.data().iter().any(|x| x.abs() < KINK)
}

fn near_seam(m: &Mat) -> bool {
    let two_pi = 2.0 * std::f64::consts::PI;
    (0..m.rows()).any(|i| {
        let d = (m[(i, 0)] - std::f64::consts::PI).rem_euclid(two_pi);
        d < KINK || two_pi - d < KINK
    })
}

/// Builds a random graph over `batch × 2` nodes; `stops[i]` inserts a
/// stop-gradient after step `i`. Returns the tape, the scalar root and
/// whether the graph passed within `KINK` of a non-smooth point.
fn build(s: &ParamStore, prog: &[u8], stops: &[bool], dynamics: &dyn Dynamics) -> (Tape, Var, bool) {
    let mut t = Tape::new();
    let x = t.param(s, 0, BATCH, 2).unwrap();
    let w = t.param(s, BATCH * 2, 2, 2).unwrap();
    let bias = t.param(s, BATCH * 2 + 4, 1, 2).unwrap();
    let k = t.param(s, BATCH * 2 + 6, 2, 1).unwrap();
    let mut cur = x;
    let mut pool = vec![x];
    let mut kink = false;
    for (i, &op) in prog.iter().enumerate() {
        let other = pool[(op as usize / 11) % pool.len()];
        cur = match op % 11 {
            0 => t.matmul(cur, w).unwrap(),
            1 => t.add(cur, other).unwrap(),
            2 => t.sub(cur, other).unwrap(),
            3 => t.add_row(cur, bias).unwrap(),
            4 => t.scale(cur, 0.5 + (op as f64) / 256.0),
            5 => {
                kink |= near_kink(t.value(cur));
                t.leaky_relu(cur, 0.01)
            }
            6 => {
                kink |= near_kink(t.value(cur));
                t.relu(cur)
            }
            7 => t.tanh(cur),
            8 => {
                kink |= near_seam(t.value(cur));
                t.wrap_angles(cur, &[true, false]).unwrap()
            }
            9 => {
                let u = t.matmul(cur, k).unwrap();
                t.dynamics(dynamics, cur, u).unwrap()
            }
            _ => {
                let sq = t.matmul(cur, w).unwrap();
                let th = t.tanh(sq);
                t.add(th, other).unwrap()
            }
        };
        if stops.get(i).copied().unwrap_or(false) {
            cur = t.stop_gradient(cur);
        }
        pool.push(cur);
    }
    let wgt = Mat::from_rows(&[[1.5, 0.2], [0.2, 0.7]]);
    let a = t.square_norm_weighted(cur, &wgt).unwrap();
    let b = t.square_norm_weighted(pool[pool.len() / 2], &Mat::identity(2)).unwrap();
    let root = t.add(a, b).unwrap();
    (t, root, kink)
}

/// Relative error, floored so that entries far below the largest gradient
/// entry are judged against central-difference rounding instead.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn sys() -> LtiSystem {
    LtiSystem::benchmark()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_graphs_match_central_differences(seed in any::<u64>(), prog in prop::collection::vec(any::<u8>(), 1..10)) {
        let f = sys();
        let mut s = store(seed);
        let (tape, root, kink) = build(&s, &prog, &[], &f);
        prop_assume!(!kink);
        s.zero_grad();
        tape.backward(root, &mut s).unwrap();
        let grad = s.grad().to_vec();
        let base = s.flat().to_vec();
        let floor = 1e-4 * grad.iter().fold(1.0f64, |m, g| m.max(g.abs()));
        let h = 1e-5;
        for i in 0..base.len() {
            let mut eval = |delta: f64| {
                s.flat_mut()[i] = base[i] + delta;
                let (t, r, _) = build(&s, &prog, &[], &f);
                t.scalar(r).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            s.flat_mut()[i] = base[i];
            prop_assert!(rel_err(grad[i], fd, floor) < 1e-5, "param {}: reverse {} vs central {}", i, grad[i], fd);
        }
    }

    #[test]
    fn stop_gradient_leaves_values_unchanged(seed in any::<u64>(), prog in prop::collection::vec(any::<u8>(), 1..10), stops in prop::collection::vec(any::<bool>(), 10)) {
        let f = sys();
        let s = store(seed);
        let (plain, r1, _) = build(&s, &prog, &[], &f);
        let (stopped, r2, _) = build(&s, &prog, &stops, &f);
        prop_assert_eq!(plain.scalar(r1).unwrap().to_bits(), stopped.scalar(r2).unwrap().to_bits());
    }

    #[test]
    fn identical_inputs_give_identical_gradients(seed in any::<u64>(), prog in prop::collection::vec(any::<u8>(), 1..10)) {
        let f = sys();
        let mut s = store(seed);
        let run = |s: &mut ParamStore| {
            s.zero_grad();
            let (t, r, _) = build(s, &prog, &[], &f);
            t.backward(r, s).unwrap();
            (t.scalar(r).unwrap().to_bits(), s.grad().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
        };
        let a = run(&mut s);
        let b = run(&mut s);
        prop_assert_eq!(a, b);
    }
}
