//! Experiment configuration, read from TOML.
//!
//! One schema serves every subcommand; each command checks that the sections
//! it reads are usable. Unknown keys are rejected everywhere. The config
//! hash is the SHA-256 of the canonical re-serialization, so formatting and
//! comments in the source file do not affect it.

use std::path::{Path, PathBuf};

use pil_core::autodiff::Activation;
use pil_core::eval::Estimator;
use pil_core::nonlinear::PendulumParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    LinNoiseSweep,
    LinPredOrder,
    Pendulum,
    TheoryScan,
    GenData,
    Train,
    Eval,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::LinNoiseSweep => "lin-noise-sweep",
            Experiment::LinPredOrder => "lin-pred-order",
            Experiment::Pendulum => "pendulum",
            Experiment::TheoryScan => "theory-scan",
            Experiment::GenData => "gen-data",
            Experiment::Train => "train",
            Experiment::Eval => "eval",
        }
    }
}

/// Seeds `base, base + 1, ..., base + count − 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub base: u64,
    pub count: usize,
}

impl SeedConfig {
    pub fn list(&self) -> Vec<u64> {
        (0..self.count as u64).map(|i| self.base + i).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    /// The two-state benchmark plant.
    Linear,
    Pendulum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertKind {
    /// LQR state feedback with weights `expert_q · I`, `expert_r · I`.
    Lqr,
    /// Randomly initialized 2→16→16→1 network, one per seed.
    RandomMlp,
    /// Energy shaping with LQR capture near upright (pendulum only).
    EnergyLqr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub kind: EnvKind,
    pub expert: ExpertKind,
    #[serde(default = "one")]
    pub expert_q: f64,
    #[serde(default = "centi")]
    pub expert_r: f64,
    #[serde(default)]
    pub pendulum: PendulumParams,
}

fn one() -> f64 {
    1.0
}

fn centi() -> f64 {
    0.01
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::Linear,
            expert: ExpertKind::Lqr,
            expert_q: 1.0,
            expert_r: 0.01,
            pendulum: PendulumParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    None,
    /// Per-coordinate standard deviations.
    Gaussian,
    /// Per-coordinate bounds of a uniform distribution.
    Uniform,
    /// Pendulum only: state bounds in degrees and degrees per second, input
    /// bound in torque units.
    UniformDegrees,
}

/// Measurement noise for one experimental condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseScenario {
    pub name: String,
    pub kind: NoiseKind,
    #[serde(default)]
    pub state: Vec<f64>,
    #[serde(default)]
    pub input: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_traj: usize,
    pub horizon: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_traj: 50,
            horizon: 100,
        }
    }
}

/// Closed-form linear fits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearFitConfig {
    pub q: f64,
    pub r: f64,
    pub p: f64,
    pub alpha: f64,
    pub ridge: f64,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        Self {
            q: 1.0,
            r: 1.0,
            p: 1.0,
            alpha: 0.9,
            ridge: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bc,
    Rollout,
    RolloutNograd,
    Pil,
    PilNograd,
    /// Closed-form behavior cloning on a linear plant.
    LinBc,
    /// Closed-form fixed-predictor fit with least-squares predictors.
    LinPil,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bc => "bc",
            Method::Rollout => "rollout",
            Method::RolloutNograd => "rollout-nograd",
            Method::Pil => "pil",
            Method::PilNograd => "pil-nograd",
            Method::LinBc => "lin-bc",
            Method::LinPil => "lin-pil",
        }
    }

    pub fn is_neural(self) -> bool {
        !matches!(self, Method::LinBc | Method::LinPil)
    }

    /// Whether the method's result depends on the prediction horizon.
    pub fn uses_horizon(self) -> bool {
        !matches!(self, Method::Bc | Method::LinBc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            encoder_hidden: vec![128, 128],
            predictor_hidden: vec![128],
            policy_hidden: vec![64, 64],
            activation: Activation::LeakyRelu,
        }
    }
}

/// Neural loss weights, all isotropic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub q: f64,
    pub r: f64,
    pub p: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            q: 0.1,
            r: 1.0,
            p: 1.0,
            alpha: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: Schedule,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            lr_start: 5e-4,
            lr_end: 5e-4,
            schedule: Schedule::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_test: usize,
    pub horizon: usize,
    /// Also report episode returns (pendulum only).
    #[serde(default)]
    pub returns: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_test: 1000,
            horizon: 100,
            returns: false,
        }
    }
}

/// Error-scaling study of the closed-form estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub t_grid: Vec<usize>,
    pub xi_levels: Vec<f64>,
    pub eta_var: f64,
    pub segment_len: usize,
    pub horizon: usize,
    pub estimators: Vec<Estimator>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            t_grid: (0..8).map(|i| 32 << i).collect(),
            xi_levels: vec![0.0, 0.0025, 0.005, 0.01, 0.02, 0.04],
            eta_var: 0.01,
            segment_len: 3,
            horizon: 2,
            estimators: vec![Estimator::PilFixedG, Estimator::Bc, Estimator::PilH1],
        }
    }
}

/// One noise setting of the noise-term Monte Carlo; covariances are
/// `xi_var · I` and `eta_var · I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseTermCase {
    pub name: String,
    pub xi_var: f64,
    pub eta_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseTermConfig {
    pub draws: usize,
    pub q: f64,
    pub cases: Vec<NoiseTermCase>,
}

impl Default for NoiseTermConfig {
    fn default() -> Self {
        Self {
            draws: 1000,
            q: 1.0,
            cases: Vec::new(),
        }
    }
}

/// Inputs of the piecewise `gen-data` / `train` / `eval` stages. Relative
/// paths resolve against the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default)]
    pub h: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub output_dir: PathBuf,
    pub seeds: SeedConfig,
    #[serde(default)]
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub scenarios: Vec<NoiseScenario>,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub h_list: Vec<usize>,
    #[serde(default)]
    pub linear_fit: LinearFitConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub noise_terms: NoiseTermConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization. The output directory is
    /// left out so that identical runs written to different places carry
    /// identical files.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let digest = Sha256::digest(canon.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Schema-level checks shared by all commands.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.count == 0 {
            return bad("seeds.count must be at least 1".into());
        }
        if self.data.n_traj == 0 || self.data.horizon == 0 {
            return bad("data.n_traj and data.horizon must be positive".into());
        }
        if self.eval.n_test == 0 || self.eval.horizon == 0 {
            return bad("eval.n_test and eval.horizon must be positive".into());
        }
        if self.h_list.iter().any(|&h| h == 0 || h > self.data.horizon) {
            return bad(format!("h_list entries must lie in 1..={}", self.data.horizon));
        }
        let mut names: Vec<&str> = self.scenarios.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("scenario names must be distinct".into());
        }
        let mut methods = self.methods.clone();
        methods.sort_unstable();
        if methods.windows(2).any(|w| w[0] == w[1]) {
            return bad("methods must be distinct".into());
        }
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 || !(t.lr_start > 0.0) || !(t.lr_end > 0.0) {
            return bad("training needs positive epochs, batch size and learning rates".into());
        }
        for (name, a) in [("linear_fit.alpha", self.linear_fit.alpha), ("loss.alpha", self.loss.alpha)] {
            if !(a > 0.0 && a <= 1.0) {
                return bad(format!("{name} = {a} outside (0, 1]"));
            }
        }
        if self.environment.kind == EnvKind::Linear && self.environment.expert == ExpertKind::EnergyLqr {
            return bad("energy-lqr expert needs the pendulum environment".into());
        }
        if self.environment.kind == EnvKind::Pendulum && self.environment.expert != ExpertKind::EnergyLqr {
            return bad("the pendulum environment supports only the energy-lqr expert".into());
        }
        for s in &self.scenarios {
            if s.kind == NoiseKind::UniformDegrees && self.environment.kind != EnvKind::Pendulum {
                return bad(format!("scenario {}: uniform-degrees noise is pendulum only", s.name));
            }
            if s.state.iter().chain(&s.input).any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return bad(format!("scenario {}: noise scales must be finite and nonnegative", s.name));
            }
        }
        Ok(())
    }

    pub fn scenario(&self, name: &str) -> Result<&NoiseScenario, CliError> {
        self.scenarios
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| CliError::Config(format!("no scenario named {name:?}")))
    }
}
