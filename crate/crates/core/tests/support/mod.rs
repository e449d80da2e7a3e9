//! Shared test helpers: random linear instances and independent oracles.
//!
//! The oracles re-derive each estimator's loss from its definition with
//! plain loops and minimize it by gradient descent. They use nothing from
//! the estimator code beyond the dataset container. The model gradient
//! check compares reverse-mode directional derivatives with central
//! differences.

#![allow(dead_code)]

use std::sync::Mutex;

use pil_core::autodiff::Tape;
use pil_core::dynamics::Dynamics;
use pil_core::lti::{generate_expert_dataset, FeedbackGain, LtiSystem, TrajectoryDataset};
use pil_core::numkit::{spectral_radius, Mat, NoiseModel, RngStream};
use pil_core::pil_nn::{batch_loss, Batch, PilLossConfig, PilModel};

pub fn random_mat(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect())
}

/// A random plant and gain whose closed loop has spectral radius `rho`.
pub fn random_plant(n: usize, m: usize, rho: f64, rng: &mut RngStream) -> (LtiSystem, FeedbackGain) {
    let b = random_mat(n, m, 1.0, rng);
    let k = random_mat(m, n, 0.5, rng);
    let mut cl = random_mat(n, n, 1.0, rng);
    let sr = spectral_radius(&cl);
    cl = cl.scale(rho / sr.max(1e-12));
    let a = &cl - &b.matmul(&k);
    (LtiSystem::new(a, b).unwrap(), FeedbackGain::new(k))
}

pub fn noise(dim: usize, std: f64) -> NoiseModel {
    if std == 0.0 {
        NoiseModel::none(dim)
    } else {
        NoiseModel::isotropic_gaussian(dim, std).unwrap()
    }
}

pub fn dataset(
    sys: &LtiSystem,
    k: &FeedbackGain,
    n_traj: usize,
    horizon: usize,
    xi: f64,
    eta: f64,
    seed: u64,
) -> TrajectoryDataset {
    generate_expert_dataset(
        sys,
        k,
        n_traj,
        horizon,
        &noise(sys.n(), 1.0),
        &noise(sys.n(), xi),
        &noise(sys.m(), eta),
        &RngStream::new(seed),
    )
    .unwrap()
}

fn quad(w: &Mat, e: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..e.len() {
        for j in 0..e.len() {
            s += e[i] * w[(i, j)] * e[j];
        }
    }
    s
}

fn mv(m: &Mat, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m[(i, j)] * x[j]).sum()).collect()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn samples(ds: &TrajectoryDataset) -> usize {
    ds.trajectories.iter().map(|t| t.u.len()).sum()
}

/// `Σ ‖v_t − K y_t‖²`, per sample.
pub fn bc_loss(ds: &TrajectoryDataset, k: &Mat) -> f64 {
    let mut s = 0.0;
    for tr in &ds.trajectories {
        for t in 0..tr.v.len() {
            s += quad(&Mat::identity(k.rows()), &diff(&tr.v[t], &mv(k, &tr.y[t])));
        }
    }
    s / samples(ds) as f64
}

/// `Σ_{t ≤ T−τ} ‖y_{t+τ} − G y_t‖²`, per sample.
pub fn ols_loss(ds: &TrajectoryDataset, tau: usize, g: &Mat) -> f64 {
    let mut s = 0.0;
    for tr in &ds.trajectories {
        for t in 0..=tr.v.len() - tau {
            s += quad(&Mat::identity(g.rows()), &diff(&tr.y[t + tau], &mv(g, &tr.y[t])));
        }
    }
    s / samples(ds) as f64
}

/// `Σ ‖y_{t+1} − (A + BK) y_t‖²_Q + ‖v_t − K y_t‖²_R`, per sample.
pub fn h1_loss(ds: &TrajectoryDataset, a: &Mat, b: &Mat, q: &Mat, r: &Mat, k: &Mat) -> f64 {
    let cl = a + &b.matmul(k);
    let mut s = 0.0;
    for tr in &ds.trajectories {
        for t in 0..tr.v.len() {
            s += quad(q, &diff(&tr.y[t + 1], &mv(&cl, &tr.y[t])));
            s += quad(r, &diff(&tr.v[t], &mv(k, &tr.y[t])));
        }
    }
    s / samples(ds) as f64
}

/// Predictive objective with fixed predictors `G_0 = I, G_1..G_H`:
/// `Σ_{t ≤ T−H} Σ_τ α^{τ−1} (‖y_{t+τ} − G_τ y_t‖²_Q + ‖v_{t+τ−1} − K G_{τ−1} y_t‖²_R
///  + ‖G_τ y_t − (A + BK) G_{τ−1} y_t‖²_P)`, per sample.
#[allow(clippy::too_many_arguments)]
pub fn fixed_g_loss(
    ds: &TrajectoryDataset,
    a: &Mat,
    b: &Mat,
    g: &[Mat],
    q: &Mat,
    r: &Mat,
    p: &Mat,
    alpha: f64,
    k: &Mat,
) -> f64 {
    let h = g.len();
    let n = a.rows();
    let cl = a + &b.matmul(k);
    let mut all = vec![Mat::identity(n)];
    all.extend(g.iter().cloned());
    let mut s = 0.0;
    for tr in &ds.trajectories {
        for t in 0..=tr.v.len() - h {
            for tau in 1..=h {
                let d = alpha.powi(tau as i32 - 1);
                let prev = mv(&all[tau - 1], &tr.y[t]);
                let pred = mv(&all[tau], &tr.y[t]);
                s += d * quad(q, &diff(&tr.y[t + tau], &pred));
                s += d * quad(r, &diff(&tr.v[t + tau - 1], &mv(k, &prev)));
                s += d * quad(p, &diff(&pred, &mv(&cl, &prev)));
            }
        }
    }
    s / samples(ds) as f64
}

/// Outcome of [`gd_minimize`].
pub struct GdResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Gradient descent on a quadratic `f`. The gradient at the origin and the
/// Hessian are read off `f` by unit-step central differences (exact for
/// quadratics up to rounding), after which descent with step `1/L` runs on
/// that model without further calls to `f`. `L` comes from power iteration.
pub fn gd_minimize(f: impl Fn(&[f64]) -> f64, dim: usize, tol: f64, max_iter: usize) -> GdResult {
    let mut x = vec![0.0; dim];
    let f0 = f(&x);
    let mut g0 = vec![0.0; dim];
    let mut hess = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        x[i] = 1.0;
        let fp = f(&x);
        x[i] = -1.0;
        let fm = f(&x);
        x[i] = 0.0;
        g0[i] = (fp - fm) / 2.0;
        hess[i][i] = fp + fm - 2.0 * f0;
    }
    for i in 0..dim {
        for j in 0..i {
            x[i] = 1.0;
            x[j] = 1.0;
            let fij = f(&x);
            x[i] = 0.0;
            x[j] = 0.0;
            // f(e_i + e_j) = f0 + g_i + g_j + (H_ii + H_jj) / 2 + H_ij
            let hij = fij - f0 - g0[i] - g0[j] - 0.5 * (hess[i][i] + hess[j][j]);
            hess[i][j] = hij;
            hess[j][i] = hij;
        }
    }
    let hv = |v: &[f64]| -> Vec<f64> { hess.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect() };
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lmax = 0.0;
    for _ in 0..500 {
        let nv = (v.iter().map(|x| x * x).sum::<f64>()).sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        let w = hv(&v);
        lmax = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        v = w;
    }
    let step = 1.0 / (1.05 * lmax);
    let grad = |x: &[f64]| -> Vec<f64> { hv(x).iter().zip(&g0).map(|(a, b)| a + b).collect() };
    let norm = |g: &[f64]| g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut g = g0.clone();
    let mut it = 0;
    while norm(&g) > tol && it < max_iter {
        for i in 0..dim {
            x[i] -= step * g[i];
        }
        g = grad(&x);
        it += 1;
    }
    GdResult {
        grad_norm: norm(&g),
        x,
        iterations: it,
    }
}

pub fn to_mat(rows: usize, cols: usize, x: &[f64]) -> Mat {
    Mat::from_vec(rows, cols, x.to_vec())
}

/// Wraps a plant and, once armed, replays the outputs recorded during the
/// first pass instead of stepping. Finite differences through the replay
/// see the plant's output as a constant, which is the reference for the
/// losses trained without dynamics gradients.
pub struct Frozen<'a> {
    pub inner: &'a dyn Dynamics,
    record: Mutex<(bool, Vec<Vec<f64>>, usize)>,
}

impl<'a> Frozen<'a> {
    pub fn new(inner: &'a dyn Dynamics) -> Self {
        Self {
            inner,
            record: Mutex::new((false, Vec::new(), 0)),
        }
    }

    pub fn arm(&self) {
        let mut r = self.record.lock().unwrap();
        r.0 = true;
        r.2 = 0;
    }

    pub fn rewind(&self) {
        self.record.lock().unwrap().2 = 0;
    }
}

impl Dynamics for Frozen<'_> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut r = self.record.lock().unwrap();
        if r.0 {
            let i = r.2;
            r.2 += 1;
            r.1[i].clone()
        } else {
            let out = self.inner.step(x, u);
            r.1.push(out.clone());
            out
        }
    }

    fn jacobians(&self, x: &[f64], u: &[f64]) -> (Mat, Mat) {
        self.inner.jacobians(x, u)
    }

    fn descriptor(&self) -> String {
        self.inner.descriptor()
    }

    fn angle_mask(&self) -> Vec<bool> {
        self.inner.angle_mask()
    }
}

/// Worst relative error between the reverse-mode directional derivative of
/// the batch loss and a central difference, over `dirs` random directions.
/// Without dynamics gradients the reference holds the plant outputs fixed.
pub fn model_fd_error(model: &PilModel, f: &dyn Dynamics, batch: &Batch, cfg: &PilLossConfig, dirs: usize, seed: u64) -> f64 {
    let frozen = Frozen::new(f);
    let plant: &dyn Dynamics = if cfg.dynamics_gradient { f } else { &frozen };
    let mut m = model.clone();
    m.store.zero_grad();
    let mut tape = Tape::new();
    let (root, _) = batch_loss(&m, plant, batch, cfg, &mut tape).unwrap();
    tape.backward(root, &mut m.store).unwrap();
    frozen.arm();
    let grad = m.store.grad().to_vec();
    let base = m.store.flat().to_vec();
    let mut rng = RngStream::new(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..dirs {
        let d: Vec<f64> = (0..base.len()).map(|_| rng.normal()).collect();
        let mut eval = |s: f64| {
            for (p, (b, di)) in m.store.flat_mut().iter_mut().zip(base.iter().zip(&d)) {
                *p = b + s * di;
            }
            frozen.rewind();
            let mut t = Tape::new();
            batch_loss(&m, plant, batch, cfg, &mut t).unwrap().1.total
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let ad: f64 = grad.iter().zip(&d).map(|(g, di)| g * di).sum();
        worst = worst.max((ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8));
    }
    worst
}
