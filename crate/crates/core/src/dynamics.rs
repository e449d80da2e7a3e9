//! Traits shared by every environment and every controller.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::numkit::Mat;

/// Known discrete-time dynamics `x' = f(x, u)` with analytic Jacobians.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    /// `(∂f/∂x, ∂f/∂u)` evaluated at `(x, u)`.
    fn jacobians(&self, x: &[f64], u: &[f64]) -> (Mat, Mat);
    fn descriptor(&self) -> String;

    /// Coordinates that are angles living on the circle.
    fn angle_mask(&self) -> Vec<bool> {
        vec![false; self.state_dim()]
    }

    /// Euclidean distance, with angular coordinates compared on the circle.
    fn state_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mask = self.angle_mask();
        a.iter()
            .zip(b)
            .zip(mask)
            .map(|((x, y), is_angle)| {
                let d = if is_angle { wrap_angle(x - y) } else { x - y };
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// A (possibly nonlinear) feedback law.
pub trait Policy {
    fn act(&self, obs: &[f64]) -> Vec<f64>;
}

impl<F> Policy for F
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        self(obs)
    }
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// How a raw state is turned into the stored observation vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsEncoder {
    #[default]
    Raw,
    /// `(θ, θ̇) ↦ (cos θ, sin θ, θ̇)`; the angle is the first coordinate.
    TrigAngle,
}

impl ObsEncoder {
    pub fn obs_dim(self, state_dim: usize) -> usize {
        match self {
            ObsEncoder::Raw => state_dim,
            ObsEncoder::TrigAngle => state_dim + 1,
        }
    }

    pub fn encode(self, raw: &[f64]) -> Vec<f64> {
        match self {
            ObsEncoder::Raw => raw.to_vec(),
            ObsEncoder::TrigAngle => {
                let mut out = Vec::with_capacity(raw.len() + 1);
                out.push(raw[0].cos());
                out.push(raw[0].sin());
                out.extend_from_slice(&raw[1..]);
                out
            }
        }
    }

    /// Inverse of [`ObsEncoder::encode`] up to angle wrapping.
    pub fn decode(self, obs: &[f64]) -> Vec<f64> {
        match self {
            ObsEncoder::Raw => obs.to_vec(),
            ObsEncoder::TrigAngle => {
                let mut out = Vec::with_capacity(obs.len() - 1);
                out.push(obs[1].atan2(obs[0]));
                out.extend_from_slice(&obs[2..]);
                out
            }
        }
    }
}
