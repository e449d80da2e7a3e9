//! Linear time-invariant systems, LQR experts and noisy demonstration data.
//!
//! A [`Trajectory`] keeps the true states and inputs next to their noisy
//! measurements. Learners only ever see an [`ObservationView`], which exposes
//! the measurements `(y, v)`; the true states are for evaluation and for the
//! coverage diagnostic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Dynamics, ObsEncoder, Policy};
use crate::error::{Error, Result};
use crate::numkit::{check_psd, min_eigenvalue, solve_linear, Mat, NoiseModel, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtiSystem {
    a: Mat,
    b: Mat,
}

impl LtiSystem {
    pub fn new(a: Mat, b: Mat) -> Result<Self> {
        if !a.is_square() || a.rows() != b.rows() || b.cols() == 0 {
            return Err(Error::Shape {
                op: "LtiSystem::new",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite("system matrices".into()));
        }
        Ok(Self { a, b })
    }

    /// The two-state benchmark plant used throughout the linear experiments:
    /// `A = [[0.95, 0.05], [0, 0.95]]`, `B = [0, 0.05]ᵀ`.
    pub fn benchmark() -> Self {
        Self {
            a: Mat::from_rows(&[[0.95, 0.05], [0.0, 0.95]]),
            b: Mat::from_rows(&[[0.0], [0.05]]),
        }
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn m(&self) -> usize {
        self.b.cols()
    }

    /// `A + B K`.
    pub fn closed_loop(&self, gain: &FeedbackGain) -> Mat {
        &self.a + &self.b.matmul(gain.matrix())
    }
}

impl Dynamics for LtiSystem {
    fn state_dim(&self) -> usize {
        self.n()
    }

    fn input_dim(&self) -> usize {
        self.m()
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let ax = self.a.matvec(x);
        let bu = self.b.matvec(u);
        ax.iter().zip(&bu).map(|(a, b)| a + b).collect()
    }

    fn jacobians(&self, _x: &[f64], _u: &[f64]) -> (Mat, Mat) {
        (self.a.clone(), self.b.clone())
    }

    fn descriptor(&self) -> String {
        format!("lti(n={}, m={}, A={:?}, B={:?})", self.n(), self.m(), self.a.data(), self.b.data())
    }
}

/// Linear state feedback `u = K x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackGain {
    k: Mat,
}

impl FeedbackGain {
    pub fn new(k: Mat) -> Self {
        Self { k }
    }

    pub fn matrix(&self) -> &Mat {
        &self.k
    }

    pub fn into_matrix(self) -> Mat {
        self.k
    }

    pub fn check_dims(&self, sys: &LtiSystem) -> Result<()> {
        if self.k.shape() != (sys.m(), sys.n()) {
            return Err(Error::Shape {
                op: "FeedbackGain",
                lhs: self.k.shape(),
                rhs: (sys.m(), sys.n()),
            });
        }
        Ok(())
    }
}

impl Policy for FeedbackGain {
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        self.k.matvec(obs)
    }
}

/// Infinite-horizon discrete LQR gain, with the sign convention `u = K x`.
///
/// Runs the Riccati recursion from `P = Qc` until the largest entry change is
/// below `1e-12` (relative to `max(1, |P|)`).
pub fn lqr_gain(sys: &LtiSystem, qc: &Mat, rc: &Mat) -> Result<FeedbackGain> {
    let (n, m) = (sys.n(), sys.m());
    if qc.shape() != (n, n) || rc.shape() != (m, m) {
        return Err(Error::Shape {
            op: "lqr_gain",
            lhs: qc.shape(),
            rhs: rc.shape(),
        });
    }
    check_psd(qc)?;
    check_psd(rc)?;
    if min_eigenvalue(rc) <= 0.0 {
        return Err(Error::InvalidArgument("input cost must be positive definite".into()));
    }
    let a = sys.a();
    let b = sys.b();
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = qc.clone();
    const MAX_ITERS: usize = 100_000;
    let mut change = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let pb = p.matmul(b);
        let pa = p.matmul(a);
        let s = rc + &bt.matmul(&pb);
        // (Rc + BᵀPB)⁻¹ BᵀPA
        let gain = solve_linear(&s, &bt.matmul(&pa))?;
        let next = &(qc + &at.matmul(&pa)) - &at.matmul(&pb).matmul(&gain);
        let next = next.symmetrize();
        change = (&next - &p).max_abs();
        p = next;
        if change <= 1e-12 * p.max_abs().max(1.0) {
            let s = rc + &bt.matmul(&p.matmul(b));
            let k = solve_linear(&s, &bt.matmul(&p.matmul(a)))?.scale(-1.0);
            return Ok(FeedbackGain::new(k));
        }
        if !p.is_finite() {
            break;
        }
    }
    Err(Error::NoConvergence {
        iters: MAX_ITERS,
        residual: change,
    })
}

/// Realized measurement noise, kept alongside simulated trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    /// State measurement noise, one entry per stored observation.
    pub xi: Vec<Vec<f64>>,
    /// Input measurement noise, one entry per stored input.
    pub eta: Vec<Vec<f64>>,
}

/// One rollout of length `T`: `T + 1` states/observations and `T` inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub x: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub noise: Option<NoiseRecord>,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub m: usize,
    pub obs_dim: usize,
    pub horizon: usize,
    pub n_traj: usize,
    pub encoder: ObsEncoder,
    pub x0_noise: NoiseModel,
    pub state_noise: NoiseModel,
    pub input_noise: NoiseModel,
    pub seed: u64,
    pub expert: String,
    pub dynamics: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

impl TrajectoryDataset {
    pub fn observations(&self) -> ObservationView<'_> {
        ObservationView {
            trajectories: &self.trajectories,
            obs_dim: self.meta.obs_dim,
            input_dim: self.meta.m,
            encoder: self.meta.encoder,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Checks that every trajectory matches the metadata dimensions.
    pub fn validate(&self) -> Result<()> {
        let meta = &self.meta;
        if self.trajectories.len() != meta.n_traj {
            return Err(Error::Dimension(format!(
                "metadata declares {} trajectories, found {}",
                meta.n_traj,
                self.trajectories.len()
            )));
        }
        if meta.obs_dim != meta.encoder.obs_dim(meta.n) {
            return Err(Error::Dimension(format!(
                "observation dimension {} inconsistent with state dimension {} and encoder {:?}",
                meta.obs_dim, meta.n, meta.encoder
            )));
        }
        for (i, tr) in self.trajectories.iter().enumerate() {
            let t = meta.horizon;
            let ok = tr.x.len() == t + 1
                && tr.y.len() == t + 1
                && tr.u.len() == t
                && tr.v.len() == t
                && tr.x.iter().all(|s| s.len() == meta.n)
                && tr.y.iter().all(|s| s.len() == meta.obs_dim)
                && tr.u.iter().all(|s| s.len() == meta.m)
                && tr.v.iter().all(|s| s.len() == meta.m);
            if !ok {
                return Err(Error::Dimension(format!(
                    "trajectory {i} does not match n={}, m={}, obs_dim={}, T={}",
                    meta.n, meta.m, meta.obs_dim, t
                )));
            }
        }
        Ok(())
    }
}

/// Read-only access to the measured part of a dataset.
#[derive(Clone, Copy, Debug)]
pub struct ObservationView<'a> {
    trajectories: &'a [Trajectory],
    obs_dim: usize,
    input_dim: usize,
    encoder: ObsEncoder,
}

impl<'a> ObservationView<'a> {
    pub fn n_traj(&self) -> usize {
        self.trajectories.len()
    }

    /// Trajectory length `T` (number of inputs).
    pub fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::len)
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn encoder(&self) -> ObsEncoder {
        self.encoder
    }

    pub fn y(&self, traj: usize) -> &'a [Vec<f64>] {
        &self.trajectories[traj].y
    }

    pub fn v(&self, traj: usize) -> &'a [Vec<f64>] {
        &self.trajectories[traj].v
    }
}

/// Simulates one expert rollout with measurement noise.
///
/// The expert acts on the true state; measurement noise is drawn fresh at
/// every step and added to the raw state before encoding.
#[allow(clippy::too_many_arguments)]
pub fn simulate_expert(
    dynamics: &dyn Dynamics,
    expert: &dyn Policy,
    x0: Vec<f64>,
    horizon: usize,
    state_noise: &NoiseModel,
    input_noise: &NoiseModel,
    encoder: ObsEncoder,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
    check_noise_dims(state_noise, n, input_noise, m)?;
    let mut x = vec![x0];
    let mut u = Vec::with_capacity(horizon);
    let mut y = Vec::with_capacity(horizon + 1);
    let mut v = Vec::with_capacity(horizon);
    let mut xi = Vec::with_capacity(horizon + 1);
    let mut eta = Vec::with_capacity(horizon);
    for t in 0..=horizon {
        let xt = &x[t];
        let noisy: Vec<f64> = xt.iter().zip(state_noise.sample(rng)).map(|(a, b)| a + b).collect();
        // Recorded as the realized difference so that y − x == ξ holds exactly.
        xi.push(noisy.iter().zip(xt).map(|(a, b)| a - b).collect());
        y.push(encoder.encode(&noisy));
        if t == horizon {
            break;
        }
        let ut = expert.act(xt);
        if ut.len() != m {
            return Err(Error::Dimension(format!(
                "expert returned {} inputs, system expects {m}",
                ut.len()
            )));
        }
        let vt: Vec<f64> = ut.iter().zip(input_noise.sample(rng)).map(|(a, b)| a + b).collect();
        eta.push(vt.iter().zip(&ut).map(|(a, b)| a - b).collect());
        let next = dynamics.step(xt, &ut);
        u.push(ut);
        v.push(vt);
        x.push(next);
    }
    Ok(Trajectory {
        x,
        u,
        y,
        v,
        noise: Some(NoiseRecord { xi, eta }),
    })
}

fn check_noise_dims(state_noise: &NoiseModel, n: usize, input_noise: &NoiseModel, m: usize) -> Result<()> {
    if state_noise.dim() != n {
        return Err(Error::Dimension(format!(
            "state noise has dimension {}, state has {n}",
            state_noise.dim()
        )));
    }
    if input_noise.dim() != m {
        return Err(Error::Dimension(format!(
            "input noise has dimension {}, input has {m}",
            input_noise.dim()
        )));
    }
    Ok(())
}

/// Settings shared by the dataset generators.
#[derive(Clone, Debug)]
pub struct DataSpec {
    pub n_traj: usize,
    pub horizon: usize,
    pub x0: NoiseModel,
    pub state_noise: NoiseModel,
    pub input_noise: NoiseModel,
    pub encoder: ObsEncoder,
}

/// Generates `n_traj` expert demonstrations; trajectory `i` draws from
/// substream `i` of `rng`, so the result does not depend on generation order.
pub fn generate_dataset(
    dynamics: &dyn Dynamics,
    expert: &dyn Policy,
    expert_descriptor: &str,
    spec: &DataSpec,
    rng: &RngStream,
) -> Result<TrajectoryDataset> {
    let n = dynamics.state_dim();
    if spec.x0.dim() != n {
        return Err(Error::Dimension(format!(
            "initial-state model has dimension {}, state has {n}",
            spec.x0.dim()
        )));
    }
    let trajectories = (0..spec.n_traj)
        .map(|i| {
            let mut sub = rng.substream(i as u64);
            let x0 = spec.x0.sample(&mut sub);
            simulate_expert(
                dynamics,
                expert,
                x0,
                spec.horizon,
                &spec.state_noise,
                &spec.input_noise,
                spec.encoder,
                &mut sub,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDataset {
        trajectories,
        meta: DatasetMeta {
            n,
            m: dynamics.input_dim(),
            obs_dim: spec.encoder.obs_dim(n),
            horizon: spec.horizon,
            n_traj: spec.n_traj,
            encoder: spec.encoder,
            x0_noise: spec.x0.clone(),
            state_noise: spec.state_noise.clone(),
            input_noise: spec.input_noise.clone(),
            seed: rng.seed(),
            expert: expert_descriptor.to_string(),
            dynamics: dynamics.descriptor(),
            extra: BTreeMap::new(),
        },
    })
}

/// Expert demonstrations from a linear plant under `u = K x`.
#[allow(clippy::too_many_arguments)]
pub fn generate_expert_dataset(
    sys: &LtiSystem,
    gain: &FeedbackGain,
    n_traj: usize,
    horizon: usize,
    x0: &NoiseModel,
    state_noise: &NoiseModel,
    input_noise: &NoiseModel,
    rng: &RngStream,
) -> Result<TrajectoryDataset> {
    gain.check_dims(sys)?;
    let spec = DataSpec {
        n_traj,
        horizon,
        x0: x0.clone(),
        state_noise: state_noise.clone(),
        input_noise: input_noise.clone(),
        encoder: ObsEncoder::Raw,
    };
    let descriptor = format!("linear_gain(K={:?})", gain.matrix().data());
    generate_dataset(sys, gain, &descriptor, &spec, rng)
}

/// Closed-loop rollout of a learned policy that only sees noisy measurements:
/// `x̂' = f(x̂, π(encode(x̂ + ξ)))`. Stores the true states `x̂` and the
/// measurements `ŷ`.
pub fn rollout_learned(
    dynamics: &dyn Dynamics,
    policy: &dyn Policy,
    x0: &[f64],
    horizon: usize,
    state_noise: &NoiseModel,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    rollout_learned_encoded(dynamics, policy, x0, horizon, state_noise, ObsEncoder::Raw, rng)
}

pub fn rollout_learned_encoded(
    dynamics: &dyn Dynamics,
    policy: &dyn Policy,
    x0: &[f64],
    horizon: usize,
    state_noise: &NoiseModel,
    encoder: ObsEncoder,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let (n, m) = (dynamics.state_dim(), dynamics.input_dim());
    check_noise_dims(state_noise, n, &NoiseModel::none(m), m)?;
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has {} entries, state has {n}", x0.len())));
    }
    let mut x = vec![x0.to_vec()];
    let mut u = Vec::with_capacity(horizon);
    let mut y = Vec::with_capacity(horizon + 1);
    let mut xi = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let xt = &x[t];
        let noisy: Vec<f64> = xt.iter().zip(state_noise.sample(rng)).map(|(a, b)| a + b).collect();
        xi.push(noisy.iter().zip(xt).map(|(a, b)| a - b).collect());
        let yt = encoder.encode(&noisy);
        if t < horizon {
            let ut = policy.act(&yt);
            if ut.len() != m {
                return Err(Error::Dimension(format!(
                    "policy returned {} inputs, system expects {m}",
                    ut.len()
                )));
            }
            let next = dynamics.step(xt, &ut);
            u.push(ut);
            x.push(next);
        }
        y.push(yt);
    }
    let v = u.clone();
    let eta = vec![vec![0.0; m]; horizon];
    Ok(Trajectory {
        x,
        u,
        y,
        v,
        noise: Some(NoiseRecord { xi, eta }),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageReport {
    /// Smallest eigenvalue of the normalized state Gram matrix.
    pub phi_x: f64,
    pub gram: Mat,
}

/// Data coverage constant: `λ_min(Σ_{t=0}^{T−H} x_t x_tᵀ / count)` over the
/// true states of every trajectory.
pub fn check_coverage(dataset: &TrajectoryDataset, horizon: usize) -> Result<CoverageReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("coverage of an empty dataset".into()));
    }
    let n = dataset.meta.n;
    let mut gram = Mat::zeros(n, n);
    let mut count = 0usize;
    for tr in &dataset.trajectories {
        if tr.len() < horizon {
            return Err(Error::InvalidArgument(format!(
                "trajectory length {} shorter than horizon {horizon}",
                tr.len()
            )));
        }
        for xt in &tr.x[..=tr.len() - horizon] {
            gram.add_outer(xt, xt, 1.0);
            count += 1;
        }
    }
    let gram = gram.scale(1.0 / count as f64);
    let phi_x = min_eigenvalue(&gram).max(0.0);
    Ok(CoverageReport { phi_x, gram })
}
