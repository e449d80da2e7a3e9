//! Evaluation of learned policies and Monte Carlo studies of the linear
//! estimators.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, Dynamics, ObsEncoder, Policy};
use crate::error::{Error, Result};
use crate::linear::{compare_pil_bc, fit_bc, fit_pil_fixed_g, fit_pil_h1, LossWeightsLinear, PredictorSetLinear};
use crate::lti::{generate_expert_dataset, rollout_learned_encoded, FeedbackGain, LtiSystem};
use crate::nonlinear::Pendulum;
use crate::numkit::{spectral_norm, Mat, NoiseModel, RngStream};

/// Per-trajectory worst-case deviations and their summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyResult {
    pub per_traj: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `per_traj`.
    pub std: f64,
    pub n_test: usize,
}

impl DiscrepancyResult {
    pub fn from_entries(per_traj: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_traj);
        Self {
            n_test: per_traj.len(),
            per_traj,
            mean,
            std,
        }
    }

    pub fn half_std(&self) -> f64 {
        0.5 * self.std
    }
}

/// Mean and population standard deviation; `(NaN, NaN)` for no samples.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Noise-free expert rollout `x' = f(x, π*(x))`.
pub fn expert_rollout(dynamics: &dyn Dynamics, expert: &dyn Policy, x0: &[f64], horizon: usize) -> Vec<Vec<f64>> {
    let mut x = Vec::with_capacity(horizon + 1);
    x.push(x0.to_vec());
    for t in 0..horizon {
        let u = expert.act(&x[t]);
        let next = dynamics.step(&x[t], &u);
        x.push(next);
    }
    x
}

/// Expected worst-case gap between expert and learned closed loops from a
/// shared start. Test trajectory `i` uses substream `i` of `rng` for its
/// initial state and the learned loop's measurement noise; the expert acts
/// on true states. Distances compare angle coordinates on the circle.
#[allow(clippy::too_many_arguments)]
pub fn max_discrepancy(
    dynamics: &dyn Dynamics,
    expert: &dyn Policy,
    learned: &dyn Policy,
    n_test: usize,
    horizon: usize,
    x0: &NoiseModel,
    state_noise: &NoiseModel,
    encoder: ObsEncoder,
    rng: &RngStream,
) -> Result<DiscrepancyResult> {
    if x0.dim() != dynamics.state_dim() {
        return Err(Error::Dimension(format!(
            "initial-state model has dimension {}, state has {}",
            x0.dim(),
            dynamics.state_dim()
        )));
    }
    let mut entries = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let mut sub = rng.substream(i as u64);
        let start = x0.sample(&mut sub);
        let exp = expert_rollout(dynamics, expert, &start, horizon);
        let lrn = rollout_learned_encoded(dynamics, learned, &start, horizon, state_noise, encoder, &mut sub)?;
        let worst = exp
            .iter()
            .zip(&lrn.x)
            .map(|(a, b)| dynamics.state_distance(a, b))
            .fold(0.0, f64::max);
        if !worst.is_finite() {
            return Err(Error::NonFinite(format!("discrepancy of test trajectory {i}")));
        }
        entries.push(worst);
    }
    Ok(DiscrepancyResult::from_entries(entries))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReturn {
    pub mean: f64,
    pub expert_mean: f64,
    /// `mean / expert_mean`; 1 for the expert itself.
    pub ratio: f64,
}

/// Pendulum stage reward `−(θ² + 0.1θ̇² + 0.001u²)` with `θ` wrapped and `u`
/// the applied (clipped) torque.
pub fn pendulum_reward(pendulum: &Pendulum, x: &[f64], u: &[f64]) -> f64 {
    let lim = pendulum.params.torque_limit;
    let tq = u[0].clamp(-lim, lim);
    let th = wrap_angle(x[0]);
    -(th * th + 0.1 * x[1] * x[1] + 0.001 * tq * tq)
}

/// Mean undiscounted return of `policy` on noisy measurements and of the
/// expert on true states, over the same initial states.
#[allow(clippy::too_many_arguments)]
pub fn episode_return(
    pendulum: &Pendulum,
    policy: &dyn Policy,
    expert: &dyn Policy,
    n_test: usize,
    horizon: usize,
    x0: &NoiseModel,
    state_noise: &NoiseModel,
    encoder: ObsEncoder,
    rng: &RngStream,
) -> Result<EpisodeReturn> {
    if n_test == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let mut learned = 0.0;
    let mut reference = 0.0;
    for i in 0..n_test {
        let mut sub = rng.substream(i as u64);
        let start = x0.sample(&mut sub);
        let mut x = start.clone();
        for _ in 0..horizon {
            let u = expert.act(&x);
            reference += pendulum_reward(pendulum, &x, &u);
            x = pendulum.step(&x, &u);
        }
        let tr = rollout_learned_encoded(pendulum, policy, &start, horizon, state_noise, encoder, &mut sub)?;
        for t in 0..horizon {
            learned += pendulum_reward(pendulum, &tr.x[t], &tr.u[t]);
        }
    }
    let n = n_test as f64;
    let (mean, expert_mean) = (learned / n, reference / n);
    Ok(EpisodeReturn {
        mean,
        expert_mean,
        ratio: mean / expert_mean,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Fixed-predictor closed form with the true closed-loop predictors.
    PilFixedG,
    Bc,
    PilH1,
}

/// Grid for the empirical error-scaling study of a linear estimator.
///
/// Each cell pools `T_eff / (L − H + 1)` independent segments of length `L`
/// started from `x₀ ~ N(0, I)`, so the sample count grows without the state
/// decaying away; `T_eff` counts usable start times `t = 0..L−H` summed over
/// segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingScanConfig {
    pub t_grid: Vec<usize>,
    /// Σ_ξ = level · I.
    pub xi_levels: Vec<f64>,
    /// Σ_η = eta_var · I.
    pub eta_var: f64,
    pub seeds: usize,
    pub segment_len: usize,
    pub horizon: usize,
    pub estimator: Estimator,
    pub weights_q: f64,
    pub weights_r: f64,
    pub weights_p: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingCell {
    pub t_eff: usize,
    pub xi_level: f64,
    pub mean_error: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub cells: Vec<ScalingCell>,
    /// Log-log slope of error against `T_eff` on the noise-free column;
    /// `None` when that column is absent or at float-noise level.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub fit_residuals: Vec<f64>,
    /// Largest-`T` mean error per `Σ_ξ` level, as `(level, plateau)`.
    pub plateaus: Vec<(f64, f64)>,
}

impl ScalingFit {
    /// `plateau(2c) / plateau(c)` for every level `c` whose double is on
    /// the grid.
    pub fn doubling_ratios(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for &(c, pc) in &self.plateaus {
            if c == 0.0 {
                continue;
            }
            if let Some(&(_, p2)) = self.plateaus.iter().find(|(l, _)| (l - 2.0 * c).abs() <= 1e-12 * c) {
                out.push((c, p2 / pc));
            }
        }
        out
    }
}

/// Least-squares line `y = a + b x`; returns `(b, a, residuals)`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("line fit needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("line fit needs distinct abscissae".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let res = x.iter().zip(y).map(|(a, b)| b - (icpt + slope * a)).collect();
    Ok((slope, icpt, res))
}

/// Mean spectral-norm gain error per `(T_eff, Σ_ξ)` cell; seed `s` of a
/// cell draws from `rng.substream(cell · 2³² + s)`. `g_star` feeds the
/// fixed-predictor estimator and must cover `cfg.horizon`.
pub fn scaling_scan(
    sys: &LtiSystem,
    expert: &FeedbackGain,
    g_star: &PredictorSetLinear,
    cfg: &ScalingScanConfig,
    rng: &RngStream,
) -> Result<ScalingFit> {
    if cfg.t_grid.len() < 2 || cfg.t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("T grid needs at least two strictly increasing entries".into()));
    }
    if cfg.xi_levels.is_empty() || cfg.xi_levels.iter().any(|&c| !(c >= 0.0)) || cfg.seeds == 0 {
        return Err(Error::InvalidArgument("need nonnegative noise levels and at least one seed".into()));
    }
    if cfg.segment_len <= cfg.horizon {
        return Err(Error::InvalidArgument("segments must be longer than the horizon".into()));
    }
    if g_star.horizon() < cfg.horizon {
        return Err(Error::InvalidArgument(format!(
            "predictors cover {} steps, horizon is {}",
            g_star.horizon(),
            cfg.horizon
        )));
    }
    let per_seg = cfg.segment_len - cfg.horizon + 1;
    if cfg.t_grid.iter().any(|&t| t < per_seg || t % per_seg != 0) {
        return Err(Error::InvalidArgument(format!(
            "every T must be a positive multiple of the {per_seg} samples per segment"
        )));
    }
    let (n, m) = (sys.n(), sys.m());
    let weights = LossWeightsLinear::new(
        Mat::scaled_identity(n, cfg.weights_q),
        Mat::scaled_identity(m, cfg.weights_r),
        Mat::scaled_identity(n, cfg.weights_p),
        cfg.horizon,
        cfg.alpha,
    )?;
    let x0 = NoiseModel::isotropic_gaussian(n, 1.0)?;
    let eta = gaussian_or_none(m, cfg.eta_var)?;
    let mut cells = Vec::new();
    let mut cell_id = 0u64;
    for &level in &cfg.xi_levels {
        let xi = gaussian_or_none(n, level)?;
        for &t in &cfg.t_grid {
            let n_seg = t / per_seg;
            let mut errs = Vec::with_capacity(cfg.seeds);
            for s in 0..cfg.seeds {
                let sub = rng.substream((cell_id << 32) + s as u64);
                let ds = generate_expert_dataset(sys, expert, n_seg, cfg.segment_len, &x0, &xi, &eta, &sub)?;
                let view = ds.observations();
                let k = match cfg.estimator {
                    Estimator::Bc => fit_bc(&view)?,
                    Estimator::PilH1 => fit_pil_h1(&view, sys, &weights.q, &weights.r)?,
                    Estimator::PilFixedG => fit_pil_fixed_g(&view, sys, g_star, &weights)?,
                };
                errs.push(spectral_norm(&(k.matrix() - expert.matrix())));
            }
            let (mean_error, std_error) = mean_std(&errs);
            cells.push(ScalingCell {
                t_eff: t,
                xi_level: level,
                mean_error,
                std_error,
            });
            cell_id += 1;
        }
    }
    let clean: Vec<&ScalingCell> = cells.iter().filter(|c| c.xi_level == 0.0).collect();
    let (slope, intercept, fit_residuals) = if clean.len() >= 2 && clean.iter().all(|c| c.mean_error > 1e-7) {
        let lx: Vec<f64> = clean.iter().map(|c| (c.t_eff as f64).ln()).collect();
        let ly: Vec<f64> = clean.iter().map(|c| c.mean_error.ln()).collect();
        let (b, a, r) = fit_line(&lx, &ly)?;
        (Some(b), Some(a), r)
    } else {
        (None, None, Vec::new())
    };
    let t_max = *cfg.t_grid.last().unwrap();
    let plateaus = cfg
        .xi_levels
        .iter()
        .map(|&l| {
            let c = cells.iter().find(|c| c.xi_level == l && c.t_eff == t_max).unwrap();
            (l, c.mean_error)
        })
        .collect();
    Ok(ScalingFit {
        cells,
        slope,
        intercept,
        fit_residuals,
        plateaus,
    })
}

fn gaussian_or_none(dim: usize, var: f64) -> Result<NoiseModel> {
    if var == 0.0 {
        Ok(NoiseModel::none(dim))
    } else {
        NoiseModel::isotropic_gaussian(dim, var.sqrt())
    }
}

/// Monte Carlo summary of the two noise terms over repeated datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseTermStudy {
    pub draws: usize,
    pub mean_omega_pil: f64,
    pub mean_omega_bc: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub condition_holds: bool,
}

impl NoiseTermStudy {
    pub fn pil_not_worse(&self) -> bool {
        self.mean_omega_pil <= self.mean_omega_bc
    }
}

/// Draws `draws` independent expert datasets with `Σ_ξ`, `Σ_η` Gaussian
/// measurement noise and averages the spectral norms of `ω_PIL`, `ω_BC`.
#[allow(clippy::too_many_arguments)]
pub fn noise_term_study(
    sys: &LtiSystem,
    expert: &FeedbackGain,
    q: &Mat,
    sigma_xi: &Mat,
    sigma_eta: &Mat,
    n_traj: usize,
    horizon: usize,
    draws: usize,
    rng: &RngStream,
) -> Result<NoiseTermStudy> {
    if draws == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let x0 = NoiseModel::isotropic_gaussian(sys.n(), 1.0)?;
    let xi = NoiseModel::gaussian(sigma_xi.clone())?;
    let eta = NoiseModel::gaussian(sigma_eta.clone())?;
    let (mut sp, mut sb) = (0.0, 0.0);
    let mut last = None;
    for d in 0..draws {
        let ds = generate_expert_dataset(sys, expert, n_traj, horizon, &x0, &xi, &eta, &rng.substream(d as u64))?;
        let rep = compare_pil_bc(&ds, sys, q, sigma_xi, sigma_eta)?;
        sp += rep.omega_pil_norm();
        sb += rep.omega_bc_norm();
        last = Some(rep);
    }
    let rep = last.unwrap();
    Ok(NoiseTermStudy {
        draws,
        mean_omega_pil: sp / draws as f64,
        mean_omega_bc: sb / draws as f64,
        lhs: rep.lhs,
        rhs: rep.rhs,
        condition_holds: rep.condition_holds,
    })
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub method: String,
    #[serde(rename = "H")]
    pub h: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Writes `experiment,method,H,seed,metric,value` preceded by `#` comment
/// lines carrying provenance (e.g. the config hash).
pub fn write_results(path: &Path, header: &[(&str, String)], rows: &[ResultRow]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in header {
        writeln!(file, "# {k}={v}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut file);
        w.write_record(["experiment", "method", "H", "seed", "metric", "value"])?;
        for r in rows {
            w.write_record([
                r.experiment.as_str(),
                r.method.as_str(),
                &r.h.to_string(),
                &r.seed.to_string(),
                r.metric.as_str(),
                &format!("{:e}", r.value),
            ])?;
        }
        w.flush()?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a file written by [`write_results`], skipping comment lines.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// A figure series: one mean and half-std column per method over a shared
/// x grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSeries {
    pub method: String,
    pub mean: Vec<f64>,
    pub half_std: Vec<f64>,
}

pub fn write_plot_data(path: &Path, header: &[(&str, String)], x_name: &str, x: &[f64], series: &[PlotSeries]) -> Result<()> {
    if series.iter().any(|s| s.mean.len() != x.len() || s.half_std.len() != x.len()) {
        return Err(Error::Dimension("plot series length differs from the x grid".into()));
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in header {
        writeln!(file, "# {k}={v}")?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut file);
        let mut head = vec![x_name.to_string()];
        for s in series {
            head.push(format!("{}_mean", s.method));
            head.push(format!("{}_half_std", s.method));
        }
        w.write_record(&head)?;
        for (i, xi) in x.iter().enumerate() {
            let mut row = vec![format!("{xi}")];
            for s in series {
                row.push(format!("{:e}", s.mean[i]));
                row.push(format!("{:e}", s.half_std[i]));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    file.flush()?;
    Ok(())
}
