//! Experiment drivers behind the subcommands.
//!
//! Random streams: seed `s` and scenario index `j` own
//! `RngStream::new(s).substream(j)`, whose substreams 0..=3 feed data
//! generation, network initialization, minibatch sampling and test
//! rollouts. The integrated experiments and the piecewise pipeline share
//! this layout, so both produce the same numbers for the same seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pil_core::dynamics::{Dynamics, ObsEncoder, Policy};
use pil_core::eval::{
    episode_return, max_discrepancy, mean_std, noise_term_study, scaling_scan, write_plot_data, write_results,
    DiscrepancyResult, Estimator, NoiseTermStudy, PlotSeries, ResultRow, ScalingFit, ScalingScanConfig,
};
use pil_core::io::{read_dataset, read_gain, write_dataset, write_gain, write_predictors};
use pil_core::linear::{fit_bc, fit_pil_fixed_g, fit_predictors_ols, LossWeightsLinear, PredictorSetLinear};
use pil_core::lti::{lqr_gain, FeedbackGain, LtiSystem, TrajectoryDataset};
use pil_core::nonlinear::{
    generate_nonlinear_dataset, generate_pendulum_dataset, pendulum_initial_states, MlpExpert, Pendulum,
    PendulumExpert, PendulumNoise,
};
use pil_core::numkit::{Mat, NoiseModel, RngStream};
use pil_core::pil_nn::{
    deploy_policy, train, write_train_log, LrSchedule, PilLossConfig, PilModel, PilModelSpec, TrainConfig, TrainLogRow,
    TrainMode,
};

use crate::config::{EnvKind, Experiment, ExperimentConfig, ExpertKind, Method, NoiseKind, NoiseScenario, Schedule};
use crate::error::CliError;

pub type CliResult<T> = Result<T, CliError>;

const STREAM_DATA: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// Environment variable holding the number of worker threads for seed-level
/// parallelism (default 1).
pub const THREADS_ENV: &str = "PIL_LAB_THREADS";

/// A validated config together with its hash and output directory.
pub struct Context {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out_dir: PathBuf,
    threads: usize,
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> CliResult<Self> {
        cfg.validate()?;
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
            Err(_) => 1,
        };
        let out_dir = cfg.output_dir.clone();
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            out_dir,
            threads,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn header(&self) -> Vec<(&'static str, String)> {
        let seeds: Vec<String> = self.cfg.seeds.list().iter().map(u64::to_string).collect();
        vec![
            ("experiment", self.cfg.experiment.name().to_string()),
            ("config_sha256", self.hash.clone()),
            ("seeds", seeds.join(" ")),
        ]
    }

    fn seed_header(&self, seed: u64) -> Vec<(&'static str, String)> {
        let mut h = self.header();
        h.pop();
        h.push(("seed", seed.to_string()));
        h
    }

    fn provenance(&self, seed: u64) -> BTreeMap<String, String> {
        self.seed_header(seed).into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Runs `f` for every seed, spreading seeds over the worker threads;
    /// results come back in seed order.
    fn per_seed<T: Send>(&self, f: impl Fn(u64) -> CliResult<T> + Sync) -> CliResult<Vec<T>> {
        let seeds = self.cfg.seeds.list();
        if self.threads <= 1 || seeds.len() <= 1 {
            return seeds.into_iter().map(f).collect();
        }
        let workers = self.threads.min(seeds.len());
        let mut slots: Vec<Option<CliResult<T>>> = (0..seeds.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let seeds = &seeds;
                    let f = &f;
                    scope.spawn(move || {
                        (w..seeds.len())
                            .step_by(workers)
                            .map(|i| (i, f(seeds[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("worker thread panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every seed ran")).collect()
    }

    fn write_results(&self, name: &str, rows: &[ResultRow]) -> CliResult<PathBuf> {
        let path = self.path(name);
        write_results(&path, &self.header(), rows)?;
        Ok(path)
    }
}

/// The plant named by the config.
pub enum Plant {
    Linear(LtiSystem),
    Pendulum(Pendulum),
}

impl Plant {
    pub fn from_config(cfg: &ExperimentConfig) -> CliResult<Self> {
        Ok(match cfg.environment.kind {
            EnvKind::Linear => Plant::Linear(LtiSystem::benchmark()),
            EnvKind::Pendulum => Plant::Pendulum(Pendulum::new(cfg.environment.pendulum)?),
        })
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        match self {
            Plant::Linear(s) => s,
            Plant::Pendulum(p) => p,
        }
    }

    pub fn encoder(&self) -> ObsEncoder {
        match self {
            Plant::Linear(_) => ObsEncoder::Raw,
            Plant::Pendulum(_) => ObsEncoder::TrigAngle,
        }
    }

    pub fn initial_states(&self) -> NoiseModel {
        match self {
            Plant::Linear(s) => NoiseModel::isotropic_gaussian(s.n(), 1.0).expect("unit covariance"),
            Plant::Pendulum(_) => pendulum_initial_states(),
        }
    }

    fn linear(&self) -> CliResult<&LtiSystem> {
        match self {
            Plant::Linear(s) => Ok(s),
            Plant::Pendulum(_) => Err(CliError::Config("this command needs the linear environment".into())),
        }
    }
}

pub enum Expert {
    Gain(FeedbackGain, String),
    Mlp(MlpExpert),
    Pendulum(PendulumExpert),
}

impl Expert {
    /// The expert for `seed`; only the random network depends on it.
    pub fn build(cfg: &ExperimentConfig, plant: &Plant, seed: u64) -> CliResult<Self> {
        let env = &cfg.environment;
        Ok(match (env.expert, plant) {
            (ExpertKind::Lqr, Plant::Linear(sys)) => {
                let k = lqr_gain(
                    sys,
                    &Mat::scaled_identity(sys.n(), env.expert_q),
                    &Mat::scaled_identity(sys.m(), env.expert_r),
                )?;
                Expert::Gain(k, format!("lqr(q={}, r={})", env.expert_q, env.expert_r))
            }
            (ExpertKind::RandomMlp, Plant::Linear(_)) => Expert::Mlp(MlpExpert::new(seed)),
            (ExpertKind::EnergyLqr, Plant::Pendulum(p)) => Expert::Pendulum(PendulumExpert::new(*p)?),
            _ => return Err(CliError::Config("expert kind does not fit the environment".into())),
        })
    }

    pub fn descriptor(&self) -> String {
        match self {
            Expert::Gain(_, d) => d.clone(),
            Expert::Mlp(m) => m.descriptor(),
            Expert::Pendulum(p) => p.descriptor(),
        }
    }

    fn gain(&self) -> CliResult<&FeedbackGain> {
        match self {
            Expert::Gain(k, _) => Ok(k),
            _ => Err(CliError::Config("this command needs the LQR expert".into())),
        }
    }
}

impl Policy for Expert {
    fn act(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Expert::Gain(k, _) => k.act(x),
            Expert::Mlp(m) => m.act(x),
            Expert::Pendulum(p) => p.act(x),
        }
    }
}

/// Measurement noise models of one scenario.
pub struct ScenarioNoise {
    pub state: NoiseModel,
    pub input: NoiseModel,
    pub pendulum: Option<PendulumNoise>,
}

fn broadcast(name: &str, vals: &[f64], dim: usize) -> CliResult<Vec<f64>> {
    match vals.len() {
        1 => Ok(vec![vals[0]; dim]),
        n if n == dim => Ok(vals.to_vec()),
        n => Err(CliError::Config(format!("{name} noise has {n} entries, expected 1 or {dim}"))),
    }
}

impl ScenarioNoise {
    pub fn build(plant: &Plant, s: &NoiseScenario) -> CliResult<Self> {
        let (n, m) = (plant.dynamics().state_dim(), plant.dynamics().input_dim());
        Ok(match s.kind {
            NoiseKind::None => Self {
                state: NoiseModel::none(n),
                input: NoiseModel::none(m),
                pendulum: None,
            },
            NoiseKind::Gaussian => {
                let var = |v: Vec<f64>| Mat::diag(&v.iter().map(|x| x * x).collect::<Vec<_>>());
                let model = |v: Vec<f64>, d: usize| -> CliResult<NoiseModel> {
                    Ok(if v.iter().all(|&x| x == 0.0) {
                        NoiseModel::none(d)
                    } else {
                        NoiseModel::gaussian(var(v))?
                    })
                };
                Self {
                    state: model(broadcast("state", &s.state, n)?, n)?,
                    input: model(broadcast("input", &s.input, m)?, m)?,
                    pendulum: None,
                }
            }
            NoiseKind::Uniform => Self {
                state: NoiseModel::uniform(broadcast("state", &s.state, n)?)?,
                input: NoiseModel::uniform(broadcast("input", &s.input, m)?)?,
                pendulum: None,
            },
            NoiseKind::UniformDegrees => {
                let st = broadcast("state", &s.state, 2)?;
                let inp = broadcast("input", &s.input, 1)?;
                let pn = PendulumNoise {
                    angle_deg: st[0],
                    rate_deg_per_s: st[1],
                    torque: inp[0],
                };
                Self {
                    state: pn.state_model()?,
                    input: pn.input_model()?,
                    pendulum: Some(pn),
                }
            }
        })
    }
}

/// Streams of seed `seed` under scenario `j`.
pub fn scenario_stream(seed: u64, j: usize) -> RngStream {
    RngStream::new(seed).substream(j as u64)
}

pub fn make_dataset(
    cfg: &ExperimentConfig,
    plant: &Plant,
    expert: &Expert,
    noise: &ScenarioNoise,
    stream: &RngStream,
) -> CliResult<TrajectoryDataset> {
    let rng = stream.substream(STREAM_DATA);
    let (n_traj, horizon) = (cfg.data.n_traj, cfg.data.horizon);
    Ok(match (plant, expert, &noise.pendulum) {
        (Plant::Pendulum(p), Expert::Pendulum(e), Some(pn)) => generate_pendulum_dataset(p, e, n_traj, horizon, pn, &rng)?,
        _ => generate_nonlinear_dataset(
            plant.dynamics(),
            expert,
            &expert.descriptor(),
            n_traj,
            horizon,
            &plant.initial_states(),
            &noise.state,
            &noise.input,
            plant.encoder(),
            &rng,
        )?,
    })
}

fn mode_of(method: Method) -> (TrainMode, bool) {
    match method {
        Method::Bc => (TrainMode::Bc, true),
        Method::Rollout => (TrainMode::Rollout, true),
        Method::RolloutNograd => (TrainMode::Rollout, false),
        Method::Pil => (TrainMode::Pil, true),
        Method::PilNograd => (TrainMode::Pil, false),
        Method::LinBc | Method::LinPil => unreachable!("closed-form methods are not trained"),
    }
}

/// Trains one neural learner; the initial weights depend only on the
/// seed stream, so all methods start from the same policy network.
pub fn train_neural(
    cfg: &ExperimentConfig,
    plant: &Plant,
    ds: &TrajectoryDataset,
    method: Method,
    h: usize,
    stream: &RngStream,
) -> CliResult<(PilModel, Vec<TrainLogRow>)> {
    let (mode, grad) = mode_of(method);
    let f = plant.dynamics();
    let (n, m) = (f.state_dim(), f.input_dim());
    let net = &cfg.network;
    let spec = PilModelSpec {
        state_dim: n,
        input_dim: m,
        obs_encoder: plant.encoder(),
        latent_dim: net.latent_dim,
        encoder_hidden: net.encoder_hidden.clone(),
        predictor_hidden: net.predictor_hidden.clone(),
        policy_hidden: net.policy_hidden.clone(),
        activation: net.activation,
        horizon: if mode == TrainMode::Pil { h } else { 0 },
    };
    let mut model = PilModel::new(spec, &stream.substream(STREAM_INIT))?;
    let l = &cfg.loss;
    let loss = PilLossConfig::new(
        Mat::scaled_identity(n, l.q),
        Mat::scaled_identity(m, l.r),
        Mat::scaled_identity(n, l.p),
        h,
        l.alpha,
        mode,
        grad,
    )?;
    let t = &cfg.training;
    let tcfg = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr_start: t.lr_start,
        lr_end: t.lr_end,
        schedule: match t.schedule {
            Schedule::Constant => LrSchedule::Constant,
            Schedule::Cosine => LrSchedule::Cosine,
        },
        batches_per_epoch: None,
    };
    let mut rng = stream.substream(STREAM_TRAIN);
    let log = train(&mut model, f, ds, &loss, &tcfg, &mut rng)?;
    Ok((model, log))
}

fn linear_weights(cfg: &ExperimentConfig, sys: &LtiSystem, h: usize) -> CliResult<LossWeightsLinear> {
    let w = &cfg.linear_fit;
    Ok(LossWeightsLinear::new(
        Mat::scaled_identity(sys.n(), w.q),
        Mat::scaled_identity(sys.m(), w.r),
        Mat::scaled_identity(sys.n(), w.p),
        h,
        w.alpha,
    )?)
}

/// Closed-form fit of a linear method; `lin-pil` also returns its
/// least-squares predictors.
pub fn fit_linear(
    cfg: &ExperimentConfig,
    sys: &LtiSystem,
    ds: &TrajectoryDataset,
    method: Method,
    h: usize,
) -> CliResult<(FeedbackGain, Option<PredictorSetLinear>)> {
    let view = ds.observations();
    match method {
        Method::LinBc => Ok((fit_bc(&view)?, None)),
        Method::LinPil => {
            let g = fit_predictors_ols(&view, h, cfg.linear_fit.ridge)?;
            let k = fit_pil_fixed_g(&view, sys, &g, &linear_weights(cfg, sys, h)?)?;
            Ok((k, Some(g)))
        }
        other => Err(CliError::Config(format!("{} is not a closed-form method", other.name()))),
    }
}

/// Paired test rollouts against the expert with the scenario's state noise
/// in the learned loop.
pub fn evaluate(
    cfg: &ExperimentConfig,
    plant: &Plant,
    expert: &Expert,
    learned: &dyn Policy,
    noise: &ScenarioNoise,
    stream: &RngStream,
) -> CliResult<DiscrepancyResult> {
    Ok(max_discrepancy(
        plant.dynamics(),
        expert,
        learned,
        cfg.eval.n_test,
        cfg.eval.horizon,
        &plant.initial_states(),
        &noise.state,
        plant.encoder(),
        &stream.substream(STREAM_EVAL),
    )?)
}

fn row(experiment: &str, method: &str, h: usize, seed: u64, metric: &str, value: f64) -> ResultRow {
    ResultRow {
        experiment: experiment.to_string(),
        method: method.to_string(),
        h,
        seed,
        metric: metric.to_string(),
        value,
    }
}

fn require(cond: bool, msg: &str) -> CliResult<()> {
    if cond {
        Ok(())
    } else {
        Err(CliError::Config(msg.to_string()))
    }
}

fn check_experiment(ctx: &Context, expected: Experiment) -> CliResult<()> {
    require(
        ctx.cfg.experiment == expected,
        &format!(
            "config is for {}, command is {}",
            ctx.cfg.experiment.name(),
            expected.name()
        ),
    )
}

/// Mean and half-std over seeds of the PIL/BC discrepancy ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioPoint {
    pub h: usize,
    pub mean_ratio: f64,
    pub half_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSweepSummary {
    pub scenarios: Vec<(String, Vec<RatioPoint>)>,
    pub results: PathBuf,
}

/// Closed-form BC against closed-form PIL with least-squares predictors,
/// per scenario and horizon. The ratio is taken per seed (ratio of mean
/// discrepancies) and then averaged over seeds.
pub fn lin_noise_sweep(ctx: &Context) -> CliResult<NoiseSweepSummary> {
    check_experiment(ctx, Experiment::LinNoiseSweep)?;
    let cfg = &ctx.cfg;
    require(!cfg.scenarios.is_empty(), "lin-noise-sweep needs at least one scenario")?;
    require(!cfg.h_list.is_empty(), "lin-noise-sweep needs h_list")?;
    let plant = Plant::from_config(cfg)?;
    let sys = plant.linear()?;
    let expert = Expert::build(cfg, &plant, 0)?;
    expert.gain()?;
    let noises = cfg
        .scenarios
        .iter()
        .map(|s| ScenarioNoise::build(&plant, s))
        .collect::<CliResult<Vec<_>>>()?;
    let per_seed = ctx.per_seed(|seed| {
        let mut rows = Vec::new();
        let mut ratios = Vec::new();
        for (j, (sc, noise)) in cfg.scenarios.iter().zip(&noises).enumerate() {
            let exp_name = format!("lin-noise-sweep/{}", sc.name);
            let stream = scenario_stream(seed, j);
            let ds = make_dataset(cfg, &plant, &expert, noise, &stream)?;
            let (kb, _) = fit_linear(cfg, sys, &ds, Method::LinBc, 1)?;
            let db = evaluate(cfg, &plant, &expert, &kb, noise, &stream)?;
            rows.push(row(&exp_name, "lin-bc", 0, seed, "discrepancy_mean", db.mean));
            rows.push(row(&exp_name, "lin-bc", 0, seed, "discrepancy_std", db.std));
            let mut r = Vec::new();
            for &h in &cfg.h_list {
                let (kp, _) = fit_linear(cfg, sys, &ds, Method::LinPil, h)?;
                let dp = evaluate(cfg, &plant, &expert, &kp, noise, &stream)?;
                let ratio = dp.mean / db.mean;
                rows.push(row(&exp_name, "lin-pil", h, seed, "discrepancy_mean", dp.mean));
                rows.push(row(&exp_name, "lin-pil", h, seed, "discrepancy_std", dp.std));
                rows.push(row(&exp_name, "lin-pil", h, seed, "ratio_to_bc", ratio));
                r.push(ratio);
            }
            ratios.push(r);
        }
        Ok((rows, ratios))
    })?;
    let rows: Vec<ResultRow> = per_seed.iter().flat_map(|(r, _)| r.clone()).collect();
    let results = ctx.write_results("results.csv", &rows)?;
    let mut scenarios = Vec::new();
    for (j, sc) in cfg.scenarios.iter().enumerate() {
        let points: Vec<RatioPoint> = cfg
            .h_list
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let vals: Vec<f64> = per_seed.iter().map(|(_, r)| r[j][i]).collect();
                let (mean, std) = mean_std(&vals);
                RatioPoint {
                    h,
                    mean_ratio: mean,
                    half_std: 0.5 * std,
                }
            })
            .collect();
        let x: Vec<f64> = points.iter().map(|p| p.h as f64).collect();
        let series = PlotSeries {
            method: "pil_over_bc".into(),
            mean: points.iter().map(|p| p.mean_ratio).collect(),
            half_std: points.iter().map(|p| p.half_std).collect(),
        };
        write_plot_data(&ctx.path(&format!("plot_{}.csv", sc.name)), &ctx.header(), "H", &x, &[series])?;
        scenarios.push((sc.name.clone(), points));
    }
    Ok(NoiseSweepSummary { scenarios, results })
}

/// Mean and half-std of discrepancy over seeds for one method and horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodPoint {
    pub method: Method,
    pub h: usize,
    pub scenario: String,
    pub mean: f64,
    pub half_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralSummary {
    pub points: Vec<MethodPoint>,
    pub results: PathBuf,
}

impl NeuralSummary {
    pub fn mean(&self, scenario: &str, method: Method, h: usize) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.scenario == scenario && p.method == method && p.h == h)
            .map(|p| p.mean)
    }
}

/// Trains every method at every horizon of `hs` for every scenario and
/// seed; methods that ignore the horizon are trained once and reported at
/// each horizon.
fn neural_sweep(ctx: &Context, experiment: &str, hs: &[usize]) -> CliResult<(Vec<ResultRow>, Vec<MethodPoint>)> {
    let cfg = &ctx.cfg;
    require(!cfg.scenarios.is_empty(), "needs at least one scenario")?;
    require(!cfg.methods.is_empty(), "needs at least one method")?;
    require(
        cfg.methods.iter().all(|m| m.is_neural()),
        "only neural methods (bc, rollout, rollout-nograd, pil, pil-nograd) apply here",
    )?;
    let plant = Plant::from_config(cfg)?;
    let noises = cfg
        .scenarios
        .iter()
        .map(|s| ScenarioNoise::build(&plant, s))
        .collect::<CliResult<Vec<_>>>()?;
    let logs = ctx.path("logs");
    std::fs::create_dir_all(&logs)?;
    let per_seed = ctx.per_seed(|seed| {
        let expert = Expert::build(cfg, &plant, seed)?;
        let mut rows = Vec::new();
        let mut vals = Vec::new();
        for (j, (sc, noise)) in cfg.scenarios.iter().zip(&noises).enumerate() {
            let stream = scenario_stream(seed, j);
            let ds = make_dataset(cfg, &plant, &expert, noise, &stream)?;
            for &method in &cfg.methods {
                let mut cached: Option<(DiscrepancyResult, Option<f64>)> = None;
                for &h in hs {
                    let res = match (&cached, method.uses_horizon()) {
                        (Some(c), false) => c.clone(),
                        _ => {
                            let (model, log) = train_neural(cfg, &plant, &ds, method, h, &stream)?;
                            let tag = format!("{}_{}_H{h}_seed{seed}", sc.name, method.name());
                            write_train_log(&logs.join(format!("{tag}.csv")), &ctx.seed_header(seed), &log)?;
                            let policy = deploy_policy(&model);
                            let d = evaluate(cfg, &plant, &expert, &policy, noise, &stream)?;
                            let ret = match (&plant, cfg.eval.returns) {
                                (Plant::Pendulum(p), true) => Some(
                                    episode_return(
                                        p,
                                        &policy,
                                        &expert,
                                        cfg.eval.n_test,
                                        cfg.eval.horizon,
                                        &plant.initial_states(),
                                        &noise.state,
                                        plant.encoder(),
                                        &stream.substream(STREAM_EVAL),
                                    )?
                                    .ratio,
                                ),
                                _ => None,
                            };
                            (d, ret)
                        }
                    };
                    let exp_name = format!("{experiment}/{}", sc.name);
                    let hh = if method.uses_horizon() { h } else { 0 };
                    rows.push(row(&exp_name, method.name(), hh, seed, "discrepancy_mean", res.0.mean));
                    rows.push(row(&exp_name, method.name(), hh, seed, "discrepancy_std", res.0.std));
                    if let Some(r) = res.1 {
                        rows.push(row(&exp_name, method.name(), hh, seed, "return_ratio", r));
                    }
                    vals.push((j, method, h, res.0.mean));
                    cached = Some(res);
                    if !method.uses_horizon() {
                        break;
                    }
                }
            }
        }
        Ok((rows, vals))
    })?;
    let rows: Vec<ResultRow> = per_seed.iter().flat_map(|(r, _)| r.clone()).collect();
    let mut points = Vec::new();
    for (j, sc) in cfg.scenarios.iter().enumerate() {
        for &method in &cfg.methods {
            for &h in hs {
                let key_h = if method.uses_horizon() { h } else { hs[0] };
                let v: Vec<f64> = per_seed
                    .iter()
                    .flat_map(|(_, vals)| vals.iter())
                    .filter(|&&(jj, mm, hh, _)| jj == j && mm == method && hh == key_h)
                    .map(|&(_, _, _, d)| d)
                    .collect();
                let (mean, std) = mean_std(&v);
                points.push(MethodPoint {
                    method,
                    h,
                    scenario: sc.name.clone(),
                    mean,
                    half_std: 0.5 * std,
                });
            }
        }
    }
    Ok((rows, points))
}

/// Neural BC, rollout and PIL on the linear plant with the random network
/// expert, across prediction horizons.
pub fn lin_pred_order(ctx: &Context) -> CliResult<NeuralSummary> {
    check_experiment(ctx, Experiment::LinPredOrder)?;
    let cfg = &ctx.cfg;
    require(!cfg.h_list.is_empty(), "lin-pred-order needs h_list")?;
    require(cfg.environment.kind == EnvKind::Linear, "lin-pred-order needs the linear environment")?;
    let (rows, points) = neural_sweep(ctx, "lin-pred-order", &cfg.h_list)?;
    let results = ctx.write_results("results.csv", &rows)?;
    let x: Vec<f64> = cfg.h_list.iter().map(|&h| h as f64).collect();
    for sc in &cfg.scenarios {
        let series: Vec<PlotSeries> = cfg
            .methods
            .iter()
            .map(|&m| {
                let pts: Vec<&MethodPoint> = points.iter().filter(|p| p.method == m && p.scenario == sc.name).collect();
                PlotSeries {
                    method: m.name().to_string(),
                    mean: pts.iter().map(|p| p.mean).collect(),
                    half_std: pts.iter().map(|p| p.half_std).collect(),
                }
            })
            .collect();
        write_plot_data(&ctx.path(&format!("plot_{}.csv", sc.name)), &ctx.header(), "H", &x, &series)?;
    }
    Ok(NeuralSummary { points, results })
}

/// Five learners on the pendulum with and without measurement noise, at a
/// single prediction horizon (the first entry of `h_list`). Writes the
/// per-seed results and a method × scenario table of mean discrepancy.
pub fn pendulum(ctx: &Context) -> CliResult<NeuralSummary> {
    check_experiment(ctx, Experiment::Pendulum)?;
    let cfg = &ctx.cfg;
    require(cfg.environment.kind == EnvKind::Pendulum, "pendulum needs the pendulum environment")?;
    require(!cfg.h_list.is_empty(), "pendulum needs h_list (its first entry is used)")?;
    let h = cfg.h_list[0];
    let (rows, points) = neural_sweep(ctx, "pendulum", &[h])?;
    let results = ctx.write_results("results.csv", &rows)?;
    let table = ctx.path("table.csv");
    let mut text = String::new();
    for (k, v) in ctx.header() {
        text.push_str(&format!("# {k}={v}\n"));
    }
    text.push_str("method");
    for sc in &cfg.scenarios {
        text.push_str(&format!(",{0}_mean,{0}_half_std", sc.name));
    }
    text.push('\n');
    for &m in &cfg.methods {
        text.push_str(m.name());
        for sc in &cfg.scenarios {
            let p = points.iter().find(|p| p.method == m && p.scenario == sc.name).expect("point exists");
            text.push_str(&format!(",{:e},{:e}", p.mean, p.half_std));
        }
        text.push('\n');
    }
    std::fs::write(&table, text)?;
    Ok(NeuralSummary { points, results })
}

#[derive(Clone, Debug)]
pub struct TheoryScanSummary {
    pub scans: Vec<(Estimator, ScalingFit)>,
    pub noise_terms: Vec<(String, NoiseTermStudy)>,
}

fn estimator_name(e: Estimator) -> &'static str {
    match e {
        Estimator::PilFixedG => "pil_fixed_g",
        Estimator::Bc => "bc",
        Estimator::PilH1 => "pil_h1",
    }
}

/// Error-scaling scan of the closed-form estimators and the Monte Carlo
/// comparison of the two noise terms.
pub fn theory_scan(ctx: &Context) -> CliResult<TheoryScanSummary> {
    check_experiment(ctx, Experiment::TheoryScan)?;
    let cfg = &ctx.cfg;
    let plant = Plant::from_config(cfg)?;
    let sys = plant.linear()?;
    let expert = Expert::build(cfg, &plant, 0)?;
    let k = expert.gain()?;
    let scan = &cfg.scan;
    let g_star = PredictorSetLinear::from_closed_loop(&sys.closed_loop(k), scan.horizon)?;
    let base = cfg.seeds.base;
    let root = RngStream::new(base);
    let mut scans = Vec::new();
    let mut grid_text = String::new();
    let mut rows = Vec::new();
    for (k_est, &est) in scan.estimators.iter().enumerate() {
        let sc = ScalingScanConfig {
            t_grid: scan.t_grid.clone(),
            xi_levels: scan.xi_levels.clone(),
            eta_var: scan.eta_var,
            seeds: cfg.seeds.count,
            segment_len: scan.segment_len,
            horizon: scan.horizon,
            estimator: est,
            weights_q: cfg.linear_fit.q,
            weights_r: cfg.linear_fit.r,
            weights_p: cfg.linear_fit.p,
            alpha: cfg.linear_fit.alpha,
        };
        let fit = scaling_scan(sys, k, &g_star, &sc, &root.substream(k_est as u64))?;
        let name = estimator_name(est);
        for c in &fit.cells {
            grid_text.push_str(&format!(
                "{name},{},{},{:e},{:e}\n",
                c.t_eff, c.xi_level, c.mean_error, c.std_error
            ));
        }
        let h = scan.horizon;
        if let (Some(s), Some(i)) = (fit.slope, fit.intercept) {
            rows.push(row("theory-scan/scaling", name, h, base, "slope", s));
            rows.push(row("theory-scan/scaling", name, h, base, "intercept", i));
        }
        for &(lvl, p) in &fit.plateaus {
            rows.push(row("theory-scan/scaling", name, h, base, &format!("plateau_xi={lvl}"), p));
        }
        for (lvl, r) in fit.doubling_ratios() {
            rows.push(row("theory-scan/scaling", name, h, base, &format!("doubling_ratio_xi={lvl}"), r));
        }
        scans.push((est, fit));
    }
    let mut text = String::new();
    for (k, v) in ctx.header() {
        text.push_str(&format!("# {k}={v}\n"));
    }
    text.push_str("estimator,t_eff,xi_level,mean_error,std_error\n");
    text.push_str(&grid_text);
    std::fs::write(ctx.path("scaling.csv"), text)?;

    let nt = &cfg.noise_terms;
    let mut noise_terms = Vec::new();
    let mut nt_text = String::new();
    for (k, v) in ctx.header() {
        nt_text.push_str(&format!("# {k}={v}\n"));
    }
    nt_text.push_str("case,draws,xi_var,eta_var,mean_omega_pil,mean_omega_bc,lhs,rhs,condition_holds,pil_not_worse\n");
    for (c_idx, case) in nt.cases.iter().enumerate() {
        let study = noise_term_study(
            sys,
            k,
            &Mat::scaled_identity(sys.n(), nt.q),
            &Mat::scaled_identity(sys.n(), case.xi_var),
            &Mat::scaled_identity(sys.m(), case.eta_var),
            cfg.data.n_traj,
            cfg.data.horizon,
            nt.draws,
            &root.substream(1000 + c_idx as u64),
        )?;
        nt_text.push_str(&format!(
            "{},{},{},{},{:e},{:e},{:e},{:e},{},{}\n",
            case.name,
            study.draws,
            case.xi_var,
            case.eta_var,
            study.mean_omega_pil,
            study.mean_omega_bc,
            study.lhs,
            study.rhs,
            study.condition_holds,
            study.pil_not_worse()
        ));
        let exp = format!("theory-scan/noise-terms/{}", case.name);
        rows.push(row(&exp, "pil", 1, base, "mean_omega_norm", study.mean_omega_pil));
        rows.push(row(&exp, "bc", 1, base, "mean_omega_norm", study.mean_omega_bc));
        noise_terms.push((case.name.clone(), study));
    }
    std::fs::write(ctx.path("noise_terms.csv"), nt_text)?;
    ctx.write_results("results.csv", &rows)?;
    Ok(TheoryScanSummary { scans, noise_terms })
}

fn pipeline_scenario(cfg: &ExperimentConfig) -> CliResult<(usize, &NoiseScenario)> {
    let name = cfg
        .pipeline
        .scenario
        .as_deref()
        .ok_or_else(|| CliError::Config("pipeline.scenario is required".into()))?;
    let j = cfg
        .scenarios
        .iter()
        .position(|s| s.name == name)
        .ok_or_else(|| CliError::Config(format!("no scenario named {name:?}")))?;
    Ok((j, &cfg.scenarios[j]))
}

pub fn dataset_path(ctx: &Context, scenario: &str, seed: u64) -> PathBuf {
    ctx.path(&format!("data/{scenario}_seed{seed}.csv"))
}

fn model_tag(scenario: &str, method: Method, h: usize, seed: u64) -> String {
    let hh = if method.uses_horizon() { h } else { 0 };
    format!("{scenario}_{}_H{hh}_seed{seed}", method.name())
}

/// Writes one dataset per seed for the pipeline scenario.
pub fn gen_data(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    check_experiment(ctx, Experiment::GenData)?;
    let cfg = &ctx.cfg;
    let (j, sc) = pipeline_scenario(cfg)?;
    let plant = Plant::from_config(cfg)?;
    let noise = ScenarioNoise::build(&plant, sc)?;
    std::fs::create_dir_all(ctx.path("data"))?;
    ctx.per_seed(|seed| {
        let expert = Expert::build(cfg, &plant, seed)?;
        let mut ds = make_dataset(cfg, &plant, &expert, &noise, &scenario_stream(seed, j))?;
        for (k, v) in ctx.provenance(seed) {
            ds.meta.extra.insert(k, v);
        }
        let path = dataset_path(ctx, &sc.name, seed);
        write_dataset(&path, &ds)?;
        Ok(path)
    })
}

fn pipeline_method(cfg: &ExperimentConfig) -> CliResult<(Method, usize)> {
    let method = cfg
        .pipeline
        .method
        .ok_or_else(|| CliError::Config("pipeline.method is required".into()))?;
    let h = cfg.pipeline.h.unwrap_or(1);
    require(h >= 1, "pipeline.h must be at least 1")?;
    Ok((method, h))
}

/// Trains (or fits) the pipeline method on each seed's stored dataset.
pub fn train_stage(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    check_experiment(ctx, Experiment::Train)?;
    let cfg = &ctx.cfg;
    let (j, sc) = pipeline_scenario(cfg)?;
    let (method, h) = pipeline_method(cfg)?;
    let plant = Plant::from_config(cfg)?;
    std::fs::create_dir_all(ctx.path("models"))?;
    ctx.per_seed(|seed| {
        let ds = read_dataset(&dataset_path(ctx, &sc.name, seed))?;
        let tag = model_tag(&sc.name, method, h, seed);
        if method.is_neural() {
            let (model, log) = train_neural(cfg, &plant, &ds, method, h, &scenario_stream(seed, j))?;
            let path = ctx.path(&format!("models/{tag}.json"));
            model.save_with_provenance(&path, &ctx.provenance(seed))?;
            write_train_log(&ctx.path(&format!("models/{tag}_log.csv")), &ctx.seed_header(seed), &log)?;
            Ok(path)
        } else {
            let (k, g) = fit_linear(cfg, plant.linear()?, &ds, method, h)?;
            let path = ctx.path(&format!("models/{tag}_gain.csv"));
            write_gain(&path, &k)?;
            if let Some(g) = g {
                write_predictors(&ctx.path(&format!("models/{tag}_predictors.csv")), &g)?;
            }
            Ok(path)
        }
    })
}

/// Evaluates the stored models of the pipeline method.
pub fn eval_stage(ctx: &Context) -> CliResult<PathBuf> {
    check_experiment(ctx, Experiment::Eval)?;
    let cfg = &ctx.cfg;
    let (j, sc) = pipeline_scenario(cfg)?;
    let (method, h) = pipeline_method(cfg)?;
    let plant = Plant::from_config(cfg)?;
    let noise = ScenarioNoise::build(&plant, sc)?;
    let per_seed = ctx.per_seed(|seed| {
        let expert = Expert::build(cfg, &plant, seed)?;
        let tag = model_tag(&sc.name, method, h, seed);
        let stream = scenario_stream(seed, j);
        let d = if method.is_neural() {
            let model = PilModel::load(&ctx.path(&format!("models/{tag}.json")))?;
            evaluate(cfg, &plant, &expert, &deploy_policy(&model), &noise, &stream)?
        } else {
            let k = read_gain(&ctx.path(&format!("models/{tag}_gain.csv")))?;
            evaluate(cfg, &plant, &expert, &k, &noise, &stream)?
        };
        let exp = format!("eval/{}", sc.name);
        let hh = if method.uses_horizon() { h } else { 0 };
        Ok(vec![
            row(&exp, method.name(), hh, seed, "discrepancy_mean", d.mean),
            row(&exp, method.name(), hh, seed, "discrepancy_std", d.std),
        ])
    })?;
    let rows: Vec<ResultRow> = per_seed.into_iter().flatten().collect();
    ctx.write_results("results.csv", &rows)
}

/// Dispatches on the config's experiment kind.
pub fn run(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    Ok(match ctx.cfg.experiment {
        Experiment::LinNoiseSweep => vec![lin_noise_sweep(ctx)?.results],
        Experiment::LinPredOrder => vec![lin_pred_order(ctx)?.results],
        Experiment::Pendulum => vec![pendulum(ctx)?.results],
        Experiment::TheoryScan => {
            theory_scan(ctx)?;
            vec![ctx.path("results.csv"), ctx.path("scaling.csv"), ctx.path("noise_terms.csv")]
        }
        Experiment::GenData => gen_data(ctx)?,
        Experiment::Train => train_stage(ctx)?,
        Experiment::Eval => vec![eval_stage(ctx)?],
    })
}

/// Loads a config file and applies command-line overrides.
pub fn load_config(path: &Path, seeds: Option<usize>, out: Option<PathBuf>) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(n) = seeds {
        cfg.seeds.count = n;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}
