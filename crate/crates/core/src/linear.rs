//! Closed-form imitation learners for linear plants and linear policies.
//!
//! Every estimator pools all trajectories of the dataset: the sums over
//! time run over each trajectory's valid offsets and are added together.
//! Predictor sets use the convention `G₀ = I`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::{FeedbackGain, LtiSystem, ObservationView, TrajectoryDataset};
use crate::numkit::{check_psd, solve_linear, solve_right, spectral_norm, Mat};

const RIDGE_HINT: &str = " (the Gram matrix of the measurements is singular; try a positive ridge)";

/// Multi-step transition matrices `G₁..G_H`, each `n × n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorSetLinear {
    g: Vec<Mat>,
}

impl PredictorSetLinear {
    pub fn new(g: Vec<Mat>) -> Result<Self> {
        let n = g
            .first()
            .ok_or_else(|| Error::InvalidArgument("predictor set needs H >= 1".into()))?
            .rows();
        if g.iter().any(|m| m.shape() != (n, n)) {
            return Err(Error::Dimension("predictors must all be n x n".into()));
        }
        Ok(Self { g })
    }

    /// `(A + BK)^τ` for `τ = 1..H`.
    pub fn from_closed_loop(closed_loop: &Mat, horizon: usize) -> Result<Self> {
        let mut g = Vec::with_capacity(horizon);
        let mut power = Mat::identity(closed_loop.rows());
        for _ in 0..horizon {
            power = power.matmul(closed_loop);
            g.push(power.clone());
        }
        Self::new(g)
    }

    pub fn horizon(&self) -> usize {
        self.g.len()
    }

    pub fn state_dim(&self) -> usize {
        self.g[0].rows()
    }

    /// `G_τ` for `τ ∈ 0..=H`, with `G₀ = I`.
    pub fn get(&self, tau: usize) -> Mat {
        if tau == 0 {
            Mat::identity(self.state_dim())
        } else {
            self.g[tau - 1].clone()
        }
    }

    pub fn matrices(&self) -> &[Mat] {
        &self.g
    }

    fn with_identity(&self) -> Vec<Mat> {
        let mut all = Vec::with_capacity(self.g.len() + 1);
        all.push(Mat::identity(self.state_dim()));
        all.extend(self.g.iter().cloned());
        all
    }
}

/// Weights of the predictive imitation objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeightsLinear {
    pub q: Mat,
    pub r: Mat,
    pub p: Mat,
    pub horizon: usize,
    pub alpha: f64,
}

impl LossWeightsLinear {
    pub fn new(q: Mat, r: Mat, p: Mat, horizon: usize, alpha: f64) -> Result<Self> {
        check_psd(&q)?;
        check_psd(&r)?;
        check_psd(&p)?;
        if q.shape() != p.shape() {
            return Err(Error::Shape {
                op: "LossWeightsLinear",
                lhs: q.shape(),
                rhs: p.shape(),
            });
        }
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("decay {alpha} outside (0, 1]")));
        }
        Ok(Self {
            q,
            r,
            p,
            horizon,
            alpha,
        })
    }

    /// Decay weight `α^{τ−1}` for horizon offset `τ ≥ 1`.
    pub fn decay(&self, tau: usize) -> f64 {
        self.alpha.powi(tau as i32 - 1)
    }
}

fn check_horizon(view: &ObservationView<'_>, horizon: usize) -> Result<()> {
    if view.n_traj() == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if horizon == 0 || view.horizon() < horizon {
        return Err(Error::InvalidArgument(format!(
            "trajectory length {} incompatible with horizon {horizon}",
            view.horizon()
        )));
    }
    Ok(())
}

fn check_system(view: &ObservationView<'_>, sys: &LtiSystem) -> Result<()> {
    if view.obs_dim() != sys.n() || view.input_dim() != sys.m() {
        return Err(Error::Dimension(format!(
            "dataset (n={}, m={}) does not match system (n={}, m={})",
            view.obs_dim(),
            view.input_dim(),
            sys.n(),
            sys.m()
        )));
    }
    Ok(())
}

fn with_hint(e: Error, hint: &'static str) -> Error {
    match e {
        Error::Singular { rcond, .. } => Error::Singular { rcond, hint },
        other => other,
    }
}

/// Least-squares multi-step predictors
/// `Ĝ_τ = (Σ_t y_{t+τ} y_tᵀ)(Σ_t y_t y_tᵀ + ridge·I)⁻¹`, `t = 0..T−τ`.
pub fn fit_predictors_ols(view: &ObservationView<'_>, horizon: usize, ridge: f64) -> Result<PredictorSetLinear> {
    check_horizon(view, horizon)?;
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge {ridge} must be nonnegative")));
    }
    let n = view.obs_dim();
    let big_t = view.horizon();
    let mut g = Vec::with_capacity(horizon);
    for tau in 1..=horizon {
        let mut gram = Mat::scaled_identity(n, ridge);
        let mut cross = Mat::zeros(n, n);
        for i in 0..view.n_traj() {
            let y = view.y(i);
            for t in 0..=big_t - tau {
                gram.add_outer(&y[t], &y[t], 1.0);
                cross.add_outer(&y[t + tau], &y[t], 1.0);
            }
        }
        let hint = if ridge == 0.0 { RIDGE_HINT } else { "" };
        g.push(solve_right(&cross, &gram).map_err(|e| with_hint(e, hint))?);
    }
    PredictorSetLinear::new(g)
}

/// Behavior cloning: `K̂ = (Σ_t v_t y_tᵀ)(Σ_t y_t y_tᵀ)⁻¹`.
pub fn fit_bc(view: &ObservationView<'_>) -> Result<FeedbackGain> {
    check_horizon(view, 1)?;
    let (n, m) = (view.obs_dim(), view.input_dim());
    let mut gram = Mat::zeros(n, n);
    let mut cross = Mat::zeros(m, n);
    for i in 0..view.n_traj() {
        let (y, v) = (view.y(i), view.v(i));
        for t in 0..v.len() {
            gram.add_outer(&y[t], &y[t], 1.0);
            cross.add_outer(&v[t], &y[t], 1.0);
        }
    }
    Ok(FeedbackGain::new(solve_right(&cross, &gram)?))
}

/// Predictive imitation gain for fixed predictors:
///
/// `K̂ = (R + BᵀPB)⁻¹ [Σ d_τ (R v_{t+τ−1} + BᵀP G_τ y_t − BᵀP A G_{τ−1} y_t)(G_{τ−1} y_t)ᵀ]
///      [Σ d_τ (G_{τ−1} y_t)(G_{τ−1} y_t)ᵀ]⁻¹`
///
/// with `t = 0..T−H`, `τ = 1..H` and `d_τ = α^{τ−1}`.
pub fn fit_pil_fixed_g(
    view: &ObservationView<'_>,
    sys: &LtiSystem,
    predictors: &PredictorSetLinear,
    w: &LossWeightsLinear,
) -> Result<FeedbackGain> {
    let h = w.horizon;
    check_horizon(view, h)?;
    check_system(view, sys)?;
    if predictors.horizon() < h || predictors.state_dim() != sys.n() {
        return Err(Error::Dimension(format!(
            "predictor set (H={}, n={}) does not cover horizon {h} for n={}",
            predictors.horizon(),
            predictors.state_dim(),
            sys.n()
        )));
    }
    let (n, m) = (sys.n(), sys.m());
    let g = predictors.with_identity();
    let bt_p = sys.b().t_matmul(&w.p);
    // BᵀP (G_τ − A G_{τ−1}) per τ
    let drift: Vec<Mat> = (1..=h)
        .map(|tau| bt_p.matmul(&(&g[tau] - &sys.a().matmul(&g[tau - 1]))))
        .collect();
    let mut numer = Mat::zeros(m, n);
    let mut denom = Mat::zeros(n, n);
    let big_t = view.horizon();
    for i in 0..view.n_traj() {
        let (y, v) = (view.y(i), view.v(i));
        for t in 0..=big_t - h {
            for tau in 1..=h {
                let d = w.decay(tau);
                let z = g[tau - 1].matvec(&y[t]);
                let rv = w.r.matvec(&v[t + tau - 1]);
                let dy = drift[tau - 1].matvec(&y[t]);
                let lhs: Vec<f64> = rv.iter().zip(&dy).map(|(a, b)| a + b).collect();
                numer.add_outer(&lhs, &z, d);
                denom.add_outer(&z, &z, d);
            }
        }
    }
    let s = &w.r + &sys.b().t_matmul(&w.p.matmul(sys.b()));
    let left = solve_linear(&s, &numer)?;
    Ok(FeedbackGain::new(solve_right(&left, &denom)?))
}

/// One-step predictive gain with the predictor tied to `A + BK`:
/// `K̂ = (BᵀQB + R)⁻¹ [BᵀQ Σ (y_{t+1} − A y_t) y_tᵀ + R Σ v_t y_tᵀ] (Σ y_t y_tᵀ)⁻¹`.
pub fn fit_pil_h1(view: &ObservationView<'_>, sys: &LtiSystem, q: &Mat, r: &Mat) -> Result<FeedbackGain> {
    check_horizon(view, 1)?;
    check_system(view, sys)?;
    let (n, m) = (sys.n(), sys.m());
    let mut gram = Mat::zeros(n, n);
    let mut transition = Mat::zeros(n, n);
    let mut cross = Mat::zeros(m, n);
    for i in 0..view.n_traj() {
        let (y, v) = (view.y(i), view.v(i));
        for t in 0..v.len() {
            gram.add_outer(&y[t], &y[t], 1.0);
            let ay = sys.a().matvec(&y[t]);
            let resid: Vec<f64> = y[t + 1].iter().zip(&ay).map(|(a, b)| a - b).collect();
            transition.add_outer(&resid, &y[t], 1.0);
            cross.add_outer(&v[t], &y[t], 1.0);
        }
    }
    let bt_q = sys.b().t_matmul(q);
    let numer = &bt_q.matmul(&transition) + &r.matmul(&cross);
    let s = &bt_q.matmul(sys.b()) + r;
    let left = solve_linear(&s, &numer)?;
    Ok(FeedbackGain::new(solve_right(&left, &gram)?))
}

/// The full predictive imitation objective for a linear policy and linear
/// predictors:
///
/// `Σ_{t=0}^{T−H} Σ_{τ=1}^{H} d_τ (‖y_{t+τ} − G_τ y_t‖²_Q + ‖v_{t+τ−1} − K G_{τ−1} y_t‖²_R
///  + ‖G_τ y_t − (A+BK) G_{τ−1} y_t‖²_P)`.
pub fn pil_objective(
    view: &ObservationView<'_>,
    sys: &LtiSystem,
    gain: &FeedbackGain,
    predictors: &PredictorSetLinear,
    w: &LossWeightsLinear,
) -> Result<f64> {
    let h = w.horizon;
    check_horizon(view, h)?;
    check_system(view, sys)?;
    let g = predictors.with_identity();
    let k = gain.matrix();
    let cl = sys.closed_loop(gain);
    let quad = |m: &Mat, x: &[f64]| -> f64 {
        let mx = m.matvec(x);
        mx.iter().zip(x).map(|(a, b)| a * b).sum()
    };
    let mut total = 0.0;
    let big_t = view.horizon();
    for i in 0..view.n_traj() {
        let (y, v) = (view.y(i), view.v(i));
        for t in 0..=big_t - h {
            for tau in 1..=h {
                let d = w.decay(tau);
                let pred = g[tau].matvec(&y[t]);
                let prev = g[tau - 1].matvec(&y[t]);
                let ey: Vec<f64> = y[t + tau].iter().zip(&pred).map(|(a, b)| a - b).collect();
                let kp = k.matvec(&prev);
                let ev: Vec<f64> = v[t + tau - 1].iter().zip(&kp).map(|(a, b)| a - b).collect();
                let fp = cl.matvec(&prev);
                let res: Vec<f64> = pred.iter().zip(&fp).map(|(a, b)| a - b).collect();
                total += d * (quad(&w.q, &ey) + quad(&w.r, &ev) + quad(&w.p, &res));
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct AlternatingFit {
    pub gain: FeedbackGain,
    pub predictors: PredictorSetLinear,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every half-step (K-step, then G-sweep).
    pub loss_history: Vec<f64>,
}

/// Joint minimization over `K` and `G₁..G_H` by block coordinate descent.
///
/// The K-step is [`fit_pil_fixed_g`]. The G-sweep visits `τ = 1..H` in order
/// and sets each `G_τ` to the exact minimizer of the objective with every
/// other block held fixed; this includes the terms at offset `τ + 1`, where
/// `G_τ` plays the role of `G_{τ−1}`. Starts from `G_τ = I`.
pub fn fit_pil_alternating(
    view: &ObservationView<'_>,
    sys: &LtiSystem,
    w: &LossWeightsLinear,
    max_iters: usize,
    tol: f64,
) -> Result<AlternatingFit> {
    let h = w.horizon;
    check_horizon(view, h)?;
    check_system(view, sys)?;
    let n = sys.n();
    let big_t = view.horizon();

    // Sufficient statistics over t = 0..T−H.
    let mut s = Mat::zeros(n, n);
    let mut c: Vec<Mat> = vec![Mat::zeros(n, n); h + 1];
    let mut vy: Vec<Mat> = vec![Mat::zeros(sys.m(), n); h + 1];
    for i in 0..view.n_traj() {
        let (y, v) = (view.y(i), view.v(i));
        for t in 0..=big_t - h {
            s.add_outer(&y[t], &y[t], 1.0);
            for tau in 1..=h {
                c[tau].add_outer(&y[t + tau], &y[t], 1.0);
                vy[tau].add_outer(&v[t + tau - 1], &y[t], 1.0);
            }
        }
    }

    let mut predictors = PredictorSetLinear::new(vec![Mat::identity(n); h])?;
    let mut gain = fit_pil_fixed_g(view, sys, &predictors, w)?;
    let mut loss_history = vec![pil_objective(view, sys, &gain, &predictors, w)?];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let prev_gain = gain.clone();
        let prev_g = predictors.clone();

        let k = gain.matrix();
        let cl = sys.closed_loop(&gain);
        let krk = k.t_matmul(&w.r.matmul(k));
        let mpm = cl.t_matmul(&w.p.matmul(&cl));
        let mut g = predictors.with_identity();
        for tau in 1..=h {
            let d = w.decay(tau);
            let mut lhs = (&w.q + &w.p).scale(d);
            let mut rhs = &w.q.matmul(&c[tau]) + &w.p.matmul(&cl).matmul(&g[tau - 1]).matmul(&s);
            rhs = rhs.scale(d);
            if tau < h {
                let dn = w.decay(tau + 1);
                lhs.add_scaled(&(&krk + &mpm), dn);
                let next = &k.t_matmul(&w.r.matmul(&vy[tau + 1]))
                    + &cl.t_matmul(&w.p.matmul(&g[tau + 1]).matmul(&s));
                rhs.add_scaled(&next, dn);
            }
            let left = solve_linear(&lhs, &rhs)?;
            g[tau] = solve_right(&left, &s)?;
        }
        predictors = PredictorSetLinear::new(g.split_off(1))?;
        loss_history.push(pil_objective(view, sys, &gain, &predictors, w)?);

        gain = fit_pil_fixed_g(view, sys, &predictors, w)?;
        loss_history.push(pil_objective(view, sys, &gain, &predictors, w)?);

        let mut change = (gain.matrix() - prev_gain.matrix()).max_abs();
        for (a, b) in predictors.matrices().iter().zip(prev_g.matrices()) {
            change = change.max((a - b).max_abs());
        }
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(AlternatingFit {
        gain,
        predictors,
        iterations,
        converged,
        loss_history,
    })
}

/// Noise terms that separate the one-step predictive gain from behavior
/// cloning, and the sufficient condition comparing their bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub omega_pil: Mat,
    pub omega_bc: Mat,
    pub lhs: f64,
    pub rhs: f64,
    pub condition_holds: bool,
}

impl ComparisonReport {
    pub fn omega_pil_norm(&self) -> f64 {
        spectral_norm(&self.omega_pil)
    }

    pub fn omega_bc_norm(&self) -> f64 {
        spectral_norm(&self.omega_bc)
    }
}

/// `ω_PIL = Σ_t BᵀQ(ξ_{t+1} − Aξ_t) y_tᵀ`, `ω_BC = Σ_t BᵀQB η_t y_tᵀ`,
/// `lhs = ‖BᵀQ(I−A)‖·√tr Σ_ξ`, `rhs = ‖BᵀQB‖·√tr Σ_η`.
///
/// Requires the realized noise records, so only simulated datasets qualify.
pub fn compare_pil_bc(
    dataset: &TrajectoryDataset,
    sys: &LtiSystem,
    q: &Mat,
    sigma_xi: &Mat,
    sigma_eta: &Mat,
) -> Result<ComparisonReport> {
    let view = dataset.observations();
    check_horizon(&view, 1)?;
    check_system(&view, sys)?;
    let (n, m) = (sys.n(), sys.m());
    let bt_q = sys.b().t_matmul(q);
    let bt_qb = bt_q.matmul(sys.b());
    let mut omega_pil = Mat::zeros(m, n);
    let mut omega_bc = Mat::zeros(m, n);
    for (i, tr) in dataset.trajectories.iter().enumerate() {
        let rec = tr
            .noise
            .as_ref()
            .ok_or_else(|| Error::Missing(format!("trajectory {i} has no noise record")))?;
        let y = view.y(i);
        for t in 0..tr.len() {
            let axi = sys.a().matvec(&rec.xi[t]);
            let dxi: Vec<f64> = rec.xi[t + 1].iter().zip(&axi).map(|(a, b)| a - b).collect();
            omega_pil.add_outer(&bt_q.matvec(&dxi), &y[t], 1.0);
            omega_bc.add_outer(&bt_qb.matvec(&rec.eta[t]), &y[t], 1.0);
        }
    }
    let i_minus_a = &Mat::identity(n) - sys.a();
    let lhs = spectral_norm(&bt_q.matmul(&i_minus_a)) * sigma_xi.trace().max(0.0).sqrt();
    let rhs = spectral_norm(&bt_qb) * sigma_eta.trace().max(0.0).sqrt();
    Ok(ComparisonReport {
        omega_pil,
        omega_bc,
        lhs,
        rhs,
        condition_holds: lhs <= rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{generate_expert_dataset, lqr_gain};
    use crate::numkit::{NoiseModel, RngStream};

    fn setup() -> (LtiSystem, FeedbackGain) {
        let sys = LtiSystem::benchmark();
        let k = lqr_gain(&sys, &Mat::identity(2), &Mat::scaled_identity(1, 0.01)).unwrap();
        (sys, k)
    }

    fn dataset(sys: &LtiSystem, k: &FeedbackGain, xi: f64, eta: f64, n_traj: usize, t: usize, seed: u64) -> TrajectoryDataset {
        let noise = |dim, s: f64| {
            if s == 0.0 {
                NoiseModel::none(dim)
            } else {
                NoiseModel::isotropic_gaussian(dim, s).unwrap()
            }
        };
        generate_expert_dataset(
            sys,
            k,
            n_traj,
            t,
            &NoiseModel::isotropic_gaussian(2, 1.0).unwrap(),
            &noise(2, xi),
            &noise(1, eta),
            &RngStream::new(seed),
        )
        .unwrap()
    }

    fn weights(h: usize, alpha: f64) -> LossWeightsLinear {
        LossWeightsLinear::new(Mat::identity(2), Mat::identity(1), Mat::identity(2), h, alpha).unwrap()
    }

    #[test]
    fn ols_recovers_closed_loop_powers() {
        let (sys, k) = setup();
        let ds = dataset(&sys, &k, 0.0, 0.0, 10, 50, 1);
        let g = fit_predictors_ols(&ds.observations(), 5, 0.0).unwrap();
        let cl = sys.closed_loop(&k);
        for tau in 1..=5 {
            assert!((&g.get(tau) - &cl.powi(tau as u32)).max_abs() < 1e-8);
        }
    }

    #[test]
    fn ols_exact_on_synthetic_linear_data() {
        let g_true = Mat::from_rows(&[[0.9, -0.2], [0.1, 0.8]]);
        let mut ds = dataset(&LtiSystem::benchmark(), &setup().1, 0.0, 0.0, 3, 20, 2);
        for tr in &mut ds.trajectories {
            for t in 0..20 {
                tr.y[t + 1] = g_true.matvec(&tr.y[t]);
            }
        }
        let g = fit_predictors_ols(&ds.observations(), 1, 0.0).unwrap();
        assert!((&g.get(1) - &g_true).max_abs() < 1e-10);
    }

    #[test]
    fn ols_constant_trajectory_is_singular() {
        let mut ds = dataset(&LtiSystem::benchmark(), &setup().1, 0.0, 0.0, 1, 10, 3);
        ds.trajectories[0].y.iter_mut().for_each(|y| *y = vec![1.0, 1.0]);
        match fit_predictors_ols(&ds.observations(), 1, 0.0) {
            Err(Error::Singular { hint, .. }) => assert!(hint.contains("ridge")),
            other => panic!("expected singular error, got {other:?}"),
        }
        assert!(fit_predictors_ols(&ds.observations(), 1, 1e-3).is_ok());
    }

    #[test]
    fn exact_recovery_without_noise() {
        let (sys, k) = setup();
        let ds = dataset(&sys, &k, 0.0, 0.0, 5, 60, 4);
        let view = ds.observations();
        let bc = fit_bc(&view).unwrap();
        assert!((bc.matrix() - k.matrix()).max_abs() < 1e-8);
        let g = PredictorSetLinear::from_closed_loop(&sys.closed_loop(&k), 4).unwrap();
        let pil = fit_pil_fixed_g(&view, &sys, &g, &weights(4, 0.9)).unwrap();
        assert!((pil.matrix() - k.matrix()).max_abs() < 1e-8);
        let h1 = fit_pil_h1(&view, &sys, &Mat::identity(2), &Mat::identity(1)).unwrap();
        assert!((h1.matrix() - k.matrix()).max_abs() < 1e-8);
    }

    #[test]
    fn pil_h1_with_zero_state_weight_is_bc() {
        let (sys, k) = setup();
        let ds = dataset(&sys, &k, 0.1, 0.1, 5, 40, 5);
        let view = ds.observations();
        let bc = fit_bc(&view).unwrap();
        let h1 = fit_pil_h1(&view, &sys, &Mat::zeros(2, 2), &Mat::identity(1)).unwrap();
        assert!((bc.matrix() - h1.matrix()).max_abs() < 1e-12);
    }

    #[test]
    fn pil_h1_without_input_weight_solves_transition_regression() {
        // Oracle: least squares of (y_{t+1} − A y_t) on B K y_t, solved as a
        // regression for the m·n entries of K via normal equations built
        // from explicit Kronecker features.
        let (sys, k) = setup();
        let ds = dataset(&sys, &k, 0.0, 0.0, 4, 30, 6);
        let view = ds.observations();
        let h1 = fit_pil_h1(&view, &sys, &Mat::identity(2), &Mat::scaled_identity(1, 1e-12)).unwrap();
        let (n, m) = (2, 1);
        let mut ata = Mat::zeros(n * m, n * m);
        let mut atb = Mat::zeros(n * m, 1);
        for i in 0..view.n_traj() {
            let y = view.y(i);
            for t in 0..view.horizon() {
                let target: Vec<f64> = y[t + 1]
                    .iter()
                    .zip(sys.a().matvec(&y[t]))
                    .map(|(a, b)| a - b)
                    .collect();
                // d(B K y)/dK_{ij} = B[:, i] * y_j
                for r in 0..n {
                    let feats: Vec<f64> = (0..m * n).map(|idx| sys.b()[(r, idx / n)] * y[t][idx % n]).collect();
                    ata.add_outer(&feats, &feats, 1.0);
                    atb.add_outer(&feats, &[target[r]], 1.0);
                }
            }
        }
        let sol = solve_linear(&ata, &atb).unwrap();
        for idx in 0..m * n {
            assert!((h1.matrix()[(idx / n, idx % n)] - sol[(idx, 0)]).abs() < 1e-6);
            assert!((sol[(idx, 0)] - k.matrix()[(idx / n, idx % n)]).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_g_horizon_one_without_p_is_bc() {
        let (sys, k) = setup();
        let ds = dataset(&sys, &k, 0.2, 0.1, 5, 40, 7);
        let view = ds.observations();
        let arbitrary = PredictorSetLinear::new(vec![Mat::from_rows(&[[0.3, 1.0], [-2.0, 0.5]])]).unwrap();
        let w = LossWeightsLinear::new(Mat::identity(2), Mat::identity(1), Mat::zeros(2, 2), 1, 1.0).unwrap();
        let pil = fit_pil_fixed_g(&view, &sys, &arbitrary, &w).unwrap();
        let bc = fit_bc(&view).unwrap();
        assert!((pil.matrix() - bc.matrix()).max_abs() < 1e-12);
    }

    #[test]
    fn fixed_g_matches_h1_with_matched_weights() {
        let (sys, k) = setup();
        let ds = dataset(&sys, &k, 0.1, 0.2, 5, 40, 8);
        let view = ds.observations();
        let q = Mat::from_rows(&[[2.0, 0.3], [0.3, 1.0]]);
        let r = Mat::scaled_identity(1, 0.5);
        let g = fit_predictors_ols(&view, 1, 0.0).unwrap();
        let w = LossWeightsLinear::new(q.clone(), r.clone(), q.clone(), 1, 1.0).unwrap();
        let fixed = fit_pil_fixed_g(&view, &sys, &g, &w).unwrap();
        let h1 = fit_pil_h1(&view, &sys, &q, &r).unwrap();
        assert!((fixed.matrix() - h1.matrix()).max_abs() < 1e-9);
    }

    #[test]
    fn alternating_recovers_truth_and_descends() {
        let (sys, k) = setup();
        let ds = dataset(&sys, &k, 0.0, 0.0, 10, 50, 9);
        let fit = fit_pil_alternating(&ds.observations(), &sys, &weights(3, 0.9), 20_000, 1e-12).unwrap();
        assert!(fit.converged);
        assert!((fit.gain.matrix() - k.matrix()).max_abs() < 1e-6);
        let cl = sys.closed_loop(&k);
        for tau in 1..=3 {
            assert!((&fit.predictors.get(tau) - &cl.powi(tau as u32)).max_abs() < 1e-6);
        }
        for pair in fit.loss_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12 * pair[0].abs().max(1.0));
        }
    }

    #[test]
    fn alternating_descends_on_noisy_data() {
        let (sys, k) = setup();
        let ds = dataset(&sys, &k, 0.1, 0.1, 10, 50, 10);
        let fit = fit_pil_alternating(&ds.observations(), &sys, &weights(4, 0.9), 200, 1e-10).unwrap();
        for pair in fit.loss_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12 * pair[0].abs().max(1.0));
        }
    }

    #[test]
    fn alternating_consistency_weight_enforces_composition() {
        let (sys, k) = setup();
        let ds = dataset(&sys, &k, 0.1, 0.1, 10, 50, 11);
        let gap_for = |p: f64| {
            let w = LossWeightsLinear::new(Mat::identity(2), Mat::identity(1), Mat::scaled_identity(2, p), 3, 0.9)
                .unwrap();
            let fit = fit_pil_alternating(&ds.observations(), &sys, &w, 20_000, 1e-11).unwrap();
            let cl = sys.closed_loop(&fit.gain);
            assert!(fit.converged);
            (1..=3)
                .map(|tau| (&fit.predictors.get(tau) - &cl.matmul(&fit.predictors.get(tau - 1))).max_abs())
                .fold(0.0, f64::max)
        };
        let gaps: Vec<f64> = [1.0, 10.0, 100.0, 1e3, 1e4].iter().map(|&p| gap_for(p)).collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
        assert!(gaps[4] < 0.2 * gaps[3] && gaps[4] < 0.01 * gaps[0], "{gaps:?}");
    }

    #[test]
    fn comparison_condition_on_benchmark() {
        let (sys, k) = setup();
        let bt_i_minus_a = sys.b().t_matmul(&(&Mat::identity(2) - sys.a()));
        assert!((bt_i_minus_a[(0, 0)]).abs() < 1e-15);
        assert!((bt_i_minus_a[(0, 1)] - 0.0025).abs() < 1e-15);
        assert!((sys.b().t_matmul(sys.b())[(0, 0)] - 0.0025).abs() < 1e-15);

        // no state noise: ω_PIL vanishes and the condition holds
        let ds = dataset(&sys, &k, 0.0, 0.1, 3, 30, 12);
        let rep = compare_pil_bc(&ds, &sys, &Mat::identity(2), &Mat::zeros(2, 2), &Mat::scaled_identity(1, 0.01)).unwrap();
        assert_eq!(rep.omega_pil.max_abs(), 0.0);
        assert!(rep.condition_holds);

        // equal traces sit exactly on the boundary of the condition
        let rep = compare_pil_bc(
            &ds,
            &sys,
            &Mat::identity(2),
            &Mat::scaled_identity(2, 0.005),
            &Mat::scaled_identity(1, 0.01),
        )
        .unwrap();
        assert!((rep.lhs - rep.rhs).abs() < 1e-15);
    }

    #[test]
    fn comparison_requires_noise_records() {
        let (sys, k) = setup();
        let mut ds = dataset(&sys, &k, 0.1, 0.1, 2, 10, 13);
        ds.trajectories[1].noise = None;
        assert!(matches!(
            compare_pil_bc(&ds, &sys, &Mat::identity(2), &Mat::identity(2), &Mat::identity(1)),
            Err(Error::Missing(_))
        ));
    }
}
