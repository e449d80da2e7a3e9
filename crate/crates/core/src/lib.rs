//! Imitation learning from noisy measurements: behavior cloning, rollout
//! imitation and predictive imitation learning for linear and nonlinear
//! plants, with the numerics, autodiff and evaluation they need.

pub mod autodiff;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod io;
pub mod linear;
pub mod lti;
pub mod nonlinear;
pub mod numkit;
pub mod pil_nn;

pub use dynamics::{wrap_angle, Dynamics, ObsEncoder, Policy};
pub use error::{Error, Result};
pub use eval::{DiscrepancyResult, EpisodeReturn, Estimator, ResultRow, ScalingFit};
pub use linear::{AlternatingFit, ComparisonReport, LossWeightsLinear, PredictorSetLinear};
pub use lti::{DatasetMeta, FeedbackGain, LtiSystem, Trajectory, TrajectoryDataset};
pub use nonlinear::{MlpExpert, Pendulum, PendulumExpert, PendulumNoise};
pub use numkit::{Mat, NoiseModel, RngStream};
pub use pil_nn::{PilLossConfig, PilModel, PilModelSpec, TrainConfig, TrainMode};
