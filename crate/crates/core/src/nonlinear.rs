//! Nonlinear environments and experts: a torque-driven pendulum with an
//! energy-shaping swing-up controller, and a frozen random MLP expert for
//! the linear benchmark plant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Mlp, MlpSpec, ParamStore};
use crate::dynamics::{wrap_angle, Dynamics, ObsEncoder, Policy};
use crate::error::{Error, Result};
use crate::lti::{generate_dataset, lqr_gain, DataSpec, FeedbackGain, LtiSystem, TrajectoryDataset};
use crate::numkit::{Mat, NoiseModel, RngStream};

/// Rigid rod pendulum with torque at the pivot; `θ = 0` is upright.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumParams {
    pub g: f64,
    pub l: f64,
    pub mass: f64,
    pub dt: f64,
    pub torque_limit: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            g: 9.81,
            l: 1.0,
            mass: 1.0,
            dt: 0.05,
            torque_limit: 2.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.g, self.l, self.mass, self.dt, self.torque_limit];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(format!("pendulum parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Angular acceleration per unit `sin θ`.
    fn gravity_gain(&self) -> f64 {
        3.0 * self.g / (2.0 * self.l)
    }

    /// Angular acceleration per unit torque.
    fn torque_gain(&self) -> f64 {
        3.0 / (self.mass * self.l * self.l)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pendulum {
    pub params: PendulumParams,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    fn clip(&self, u: f64) -> f64 {
        u.clamp(-self.params.torque_limit, self.params.torque_limit)
    }

    /// `½(ml²/3)θ̇² + (mgl/2)cos θ`, conserved by the undriven continuous
    /// dynamics; equals `mgl/2` upright at rest.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let p = &self.params;
        0.5 * (p.mass * p.l * p.l / 3.0) * x[1] * x[1] + 0.5 * p.mass * p.g * p.l * x[0].cos()
    }

    pub fn upright_energy(&self) -> f64 {
        0.5 * self.params.mass * self.params.g * self.params.l
    }

    /// Exact linearization of [`Dynamics::step`] at the upright equilibrium.
    pub fn linearized_upright(&self) -> LtiSystem {
        let (a, b) = self.jacobians(&[0.0, 0.0], &[0.0]);
        LtiSystem::new(a, b).expect("pendulum linearization is well formed")
    }
}

impl Dynamics for Pendulum {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let torque = self.clip(u[0]);
        let omega = x[1] + p.dt * (p.gravity_gain() * x[0].sin() + p.torque_gain() * torque);
        vec![wrap_angle(x[0] + p.dt * omega), omega]
    }

    fn jacobians(&self, x: &[f64], u: &[f64]) -> (Mat, Mat) {
        let p = &self.params;
        let dw_dtheta = p.dt * p.gravity_gain() * x[0].cos();
        let dw_du = if u[0].abs() < p.torque_limit {
            p.dt * p.torque_gain()
        } else {
            0.0
        };
        let a = Mat::from_rows(&[[1.0 + p.dt * dw_dtheta, p.dt], [dw_dtheta, 1.0]]);
        let b = Mat::from_rows(&[[p.dt * dw_du], [dw_du]]);
        (a, b)
    }

    fn descriptor(&self) -> String {
        let p = &self.params;
        format!(
            "pendulum(g={}, l={}, m={}, dt={}, torque_limit={})",
            p.g, p.l, p.mass, p.dt, p.torque_limit
        )
    }

    fn angle_mask(&self) -> Vec<bool> {
        vec![true, false]
    }
}

/// Energy-shaping swing-up with LQR capture near the upright position.
#[derive(Clone, Debug)]
pub struct PendulumExpert {
    pendulum: Pendulum,
    gain: FeedbackGain,
    pub k_energy: f64,
    pub capture_angle: f64,
    pub capture_rate: f64,
}

impl PendulumExpert {
    pub fn new(pendulum: Pendulum) -> Result<Self> {
        let lin = pendulum.linearized_upright();
        let gain = lqr_gain(&lin, &Mat::identity(2), &Mat::scaled_identity(1, 0.01))?;
        Ok(Self {
            pendulum,
            gain,
            k_energy: 1.0,
            capture_angle: 0.3,
            capture_rate: 1.0,
        })
    }

    pub fn gain(&self) -> &FeedbackGain {
        &self.gain
    }

    pub fn descriptor(&self) -> String {
        format!(
            "energy_shaping_lqr(k_e={}, capture=|θ|<{} & |θ̇|<{}, K={:?})",
            self.k_energy,
            self.capture_angle,
            self.capture_rate,
            self.gain.matrix().data()
        )
    }
}

impl Policy for PendulumExpert {
    fn act(&self, x: &[f64]) -> Vec<f64> {
        let theta = wrap_angle(x[0]);
        let u = if theta.abs() < self.capture_angle && x[1].abs() < self.capture_rate {
            self.gain.matrix().row(0)[0] * theta + self.gain.matrix().row(0)[1] * x[1]
        } else {
            let excess = self.pendulum.energy(x) - self.pendulum.upright_energy();
            -self.k_energy * x[1] * excess
        };
        vec![self.pendulum.clip(u)]
    }
}

/// Frozen random network `2 → 16 → 16 → 1` with ReLU hidden layers and a
/// tanh output.
#[derive(Clone, Debug)]
pub struct MlpExpert {
    store: ParamStore,
    net: Mlp,
    seed: u64,
}

impl MlpExpert {
    pub fn new(seed: u64) -> Self {
        let spec = MlpSpec::new(vec![2, 16, 16, 1], Activation::Relu, Activation::Tanh).expect("valid expert spec");
        let mut store = ParamStore::new();
        let net = Mlp::new(&mut store, "expert", spec, &mut RngStream::new(seed)).expect("fresh store");
        Self { store, net, seed }
    }

    pub fn descriptor(&self) -> String {
        format!("random_mlp(2-16-16-1, relu, tanh, seed={})", self.seed)
    }
}

impl Policy for MlpExpert {
    fn act(&self, x: &[f64]) -> Vec<f64> {
        self.net.eval(&self.store, x)
    }
}

/// Pendulum demonstration settings with the defaults used in the noisy
/// experiments: angle noise within ±1°, rate noise within ±0.001°/s and
/// torque noise within ±0.1, all uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumNoise {
    pub angle_deg: f64,
    pub rate_deg_per_s: f64,
    pub torque: f64,
}

impl Default for PendulumNoise {
    fn default() -> Self {
        Self {
            angle_deg: 1.0,
            rate_deg_per_s: 0.001,
            torque: 0.1,
        }
    }
}

impl PendulumNoise {
    pub fn none() -> Self {
        Self {
            angle_deg: 0.0,
            rate_deg_per_s: 0.0,
            torque: 0.0,
        }
    }

    pub fn state_model(&self) -> Result<NoiseModel> {
        if self.angle_deg == 0.0 && self.rate_deg_per_s == 0.0 {
            return Ok(NoiseModel::none(2));
        }
        NoiseModel::uniform(vec![self.angle_deg.to_radians(), self.rate_deg_per_s.to_radians()])
    }

    pub fn input_model(&self) -> Result<NoiseModel> {
        if self.torque == 0.0 {
            return Ok(NoiseModel::none(1));
        }
        NoiseModel::uniform(vec![self.torque])
    }
}

/// Training initial states: `θ₀ ~ U[−π, π]`, `θ̇₀ ~ U[−1, 1]`.
pub fn pendulum_initial_states() -> NoiseModel {
    NoiseModel::uniform(vec![std::f64::consts::PI, 1.0]).expect("positive bounds")
}

/// Demonstrations on a nonlinear plant; measurement noise is added to the
/// raw state before encoding.
#[allow(clippy::too_many_arguments)]
pub fn generate_nonlinear_dataset(
    dynamics: &dyn Dynamics,
    expert: &dyn Policy,
    expert_descriptor: &str,
    n_traj: usize,
    horizon: usize,
    x0: &NoiseModel,
    state_noise: &NoiseModel,
    input_noise: &NoiseModel,
    encoder: ObsEncoder,
    rng: &RngStream,
) -> Result<TrajectoryDataset> {
    let spec = DataSpec {
        n_traj,
        horizon,
        x0: x0.clone(),
        state_noise: state_noise.clone(),
        input_noise: input_noise.clone(),
        encoder,
    };
    generate_dataset(dynamics, expert, expert_descriptor, &spec, rng)
}

/// Pendulum demonstrations with trig-encoded measurements. Noise bounds in
/// degrees are kept in the metadata next to the converted models.
pub fn generate_pendulum_dataset(
    pendulum: &Pendulum,
    expert: &PendulumExpert,
    n_traj: usize,
    horizon: usize,
    noise: &PendulumNoise,
    rng: &RngStream,
) -> Result<TrajectoryDataset> {
    let mut ds = generate_nonlinear_dataset(
        pendulum,
        expert,
        &expert.descriptor(),
        n_traj,
        horizon,
        &pendulum_initial_states(),
        &noise.state_model()?,
        &noise.input_model()?,
        ObsEncoder::TrigAngle,
        rng,
    )?;
    let extra = &mut ds.meta.extra;
    extra.insert("angle_noise_deg".into(), noise.angle_deg.to_string());
    extra.insert("rate_noise_deg_per_s".into(), noise.rate_deg_per_s.to_string());
    extra.insert("torque_noise".into(), noise.torque.to_string());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn fd_jacobians(f: &dyn Dynamics, x: &[f64], u: &[f64]) -> (Mat, Mat) {
        let h = 1e-6;
        let n = f.state_dim();
        let mut a = Mat::zeros(n, n);
        let mut b = Mat::zeros(n, f.input_dim());
        for j in 0..n {
            let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f.step(&xp, u), f.step(&xm, u));
            for i in 0..n {
                a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        for j in 0..f.input_dim() {
            let (mut up, mut um) = (u.to_vec(), u.to_vec());
            up[j] += h;
            um[j] -= h;
            let (fp, fm) = (f.step(x, &up), f.step(x, &um));
            for i in 0..n {
                b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        (a, b)
    }

    #[test]
    fn equilibria() {
        let p = Pendulum::default();
        assert_eq!(p.step(&[0.0, 0.0], &[0.0]), vec![0.0, 0.0]);
        let hang = p.step(&[PI, 0.0], &[0.0]);
        assert!((wrap_angle(hang[0] - PI)).abs() < 1e-12 && hang[1].abs() < 1e-12);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p = Pendulum::default();
        let mut rng = RngStream::new(1);
        for _ in 0..100 {
            // stay away from the wrap seam and the torque clip
            let x = [rng.uniform(-3.0, 3.0), rng.uniform(-4.0, 4.0)];
            let u = [rng.uniform(-1.9, 1.9)];
            if (x[0] + 0.05 * x[1]).abs() > 3.1 {
                continue;
            }
            let (a, b) = p.jacobians(&x, &u);
            let (fa, fb) = fd_jacobians(&p, &x, &u);
            let scale = a.max_abs().max(b.max_abs());
            assert!((&a - &fa).max_abs() < 1e-6 * scale, "{a:?} vs {fa:?}");
            assert!((&b - &fb).max_abs() < 1e-6 * scale);
        }
        let (_, b) = p.jacobians(&[0.1, 0.0], &[5.0]);
        assert_eq!(b.max_abs(), 0.0);
    }

    /// Largest deviation over 100 undriven steps, relative to `mgl`.
    fn energy_excursion(dt: f64, theta0: f64, shadow: bool) -> f64 {
        let p = Pendulum::new(PendulumParams { dt, ..Default::default() }).unwrap();
        let range = 2.0 * p.upright_energy();
        // symplectic Euler conserves E + (dt/2)(mgl/2)·θ̇·sin θ to second order
        let e = |x: &[f64]| {
            let corr = if shadow { 0.5 * dt * p.upright_energy() * x[1] * x[0].sin() } else { 0.0 };
            p.energy(x) + corr
        };
        let mut x = vec![theta0, 0.0];
        let e0 = e(&x);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            x = p.step(&x, &[0.0]);
            worst = worst.max((e(&x) - e0).abs());
        }
        worst / range
    }

    #[test]
    fn undriven_energy_is_conserved_up_to_integrator_error() {
        for &theta0 in &[0.5, 1.5, 2.5, 3.0, PI - 0.5] {
            assert!(energy_excursion(0.05, theta0, true) < 0.01, "θ₀={theta0}");
            let coarse = energy_excursion(0.05, theta0, false);
            let fine = energy_excursion(0.0125, theta0, false);
            assert!(fine < 0.5 * coarse, "θ₀={theta0}: {coarse} -> {fine}");
        }
        assert!(energy_excursion(0.05, PI - 0.5, false) < 0.01);
    }

    #[test]
    fn expert_holds_upright_and_is_symmetric_at_hanging_rest() {
        let p = Pendulum::default();
        let e = PendulumExpert::new(p).unwrap();
        assert!(e.act(&[0.0, 0.0])[0].abs() < 1e-9);
        assert_eq!(e.act(&[PI, 0.0])[0], 0.0);
        assert!(e.act(&[PI, 0.1])[0].abs() > 0.0);
    }

    #[test]
    fn expert_stabilizes_near_upright() {
        let p = Pendulum::default();
        let e = PendulumExpert::new(p).unwrap();
        let mut rng = RngStream::new(2);
        for _ in 0..50 {
            let mut x = vec![rng.uniform(-0.2, 0.2), 0.0];
            let mut entered = None;
            for t in 0..300 {
                x = p.step(&x, &e.act(&x));
                if x[0].abs() < 0.05 && entered.is_none() {
                    entered = Some(t);
                }
                if let Some(t0) = entered {
                    assert!(t0 < 200);
                    assert!(x[0].abs() < 0.05, "left the upright band at t={t}");
                }
            }
            assert!(entered.is_some());
        }
    }

    #[test]
    fn expert_swings_up_from_hanging() {
        let p = Pendulum::default();
        let e = PendulumExpert::new(p).unwrap();
        let mut x = vec![PI - 0.05, 0.0];
        for _ in 0..400 {
            x = p.step(&x, &e.act(&x));
        }
        assert!(x[0].abs() < 0.05 && x[1].abs() < 0.1, "{x:?}");
    }

    #[test]
    fn mlp_expert_is_seeded_and_bounded() {
        let a = MlpExpert::new(3);
        let b = MlpExpert::new(3);
        let c = MlpExpert::new(4);
        let mut rng = RngStream::new(5);
        let mut differs = false;
        for _ in 0..100 {
            let x = [10.0 * rng.normal(), 10.0 * rng.normal()];
            let ua = a.act(&x);
            assert_eq!(ua, b.act(&x));
            assert!(ua[0] > -1.0 && ua[0] < 1.0);
            differs |= ua != c.act(&x);
        }
        assert!(differs);
    }

    #[test]
    fn pendulum_dataset_noise_and_encoding() {
        let p = Pendulum::default();
        let e = PendulumExpert::new(p).unwrap();
        let ds = generate_pendulum_dataset(&p, &e, 5, 60, &PendulumNoise::default(), &RngStream::new(6)).unwrap();
        assert_eq!(ds.meta.obs_dim, 3);
        for tr in &ds.trajectories {
            let rec = tr.noise.as_ref().unwrap();
            for t in 0..=60 {
                assert!(rec.xi[t][0].abs() <= 1f64.to_radians() + 1e-12);
                assert!(rec.xi[t][1].abs() <= 0.001f64.to_radians() + 1e-12);
                let y = &tr.y[t];
                assert!((y[0] * y[0] + y[1] * y[1] - 1.0).abs() < 1e-15);
            }
            assert!(rec.eta.iter().all(|e| e[0].abs() <= 0.1 + 1e-12));
        }
        let clean = generate_pendulum_dataset(&p, &e, 2, 20, &PendulumNoise::none(), &RngStream::new(7)).unwrap();
        for tr in &clean.trajectories {
            for t in 0..=20 {
                assert_eq!(tr.y[t], ObsEncoder::TrigAngle.encode(&tr.x[t]));
            }
        }
    }

    #[test]
    fn mlp_expert_dataset_noise_bounds() {
        let sys = LtiSystem::benchmark();
        let e = MlpExpert::new(8);
        let ds = generate_nonlinear_dataset(
            &sys,
            &e,
            &e.descriptor(),
            4,
            50,
            &NoiseModel::isotropic_gaussian(2, 1.0).unwrap(),
            &NoiseModel::uniform(vec![0.01, 0.01]).unwrap(),
            &NoiseModel::uniform(vec![0.01]).unwrap(),
            ObsEncoder::Raw,
            &RngStream::new(9),
        )
        .unwrap();
        for tr in &ds.trajectories {
            for t in 0..50 {
                assert!(tr.y[t].iter().zip(&tr.x[t]).all(|(y, x)| (y - x).abs() <= 0.01 + 1e-15));
                assert!((tr.v[t][0] - tr.u[t][0]).abs() <= 0.01 + 1e-15);
            }
        }
    }
}
