//! Neural imitation learners: behavior cloning, rollout-based imitation and
//! predictive imitation with an encoder and multi-step predictor heads.
//!
//! Predicted states live in raw state space so the known dynamics can be
//! applied to them. Measurements are decoded to raw space (`atan2` for trig
//! encoded angles) wherever they are compared with predictions; angular
//! residuals are wrapped to `(−π, π]`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_lr, Activation, Adam, Checkpoint, Mlp, MlpSpec, ParamStore, Tape, Var};
use crate::dynamics::{Dynamics, ObsEncoder, Policy};
use crate::error::{Error, Result};
use crate::lti::TrajectoryDataset;
use crate::numkit::{Mat, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pil,
    Rollout,
    Bc,
}

/// Loss weights and mode for the neural learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilLossConfig {
    pub q: Mat,
    pub r: Mat,
    pub p: Mat,
    pub horizon: usize,
    pub alpha: f64,
    pub mode: TrainMode,
    pub dynamics_gradient: bool,
}

impl PilLossConfig {
    pub fn new(q: Mat, r: Mat, p: Mat, horizon: usize, alpha: f64, mode: TrainMode, dynamics_gradient: bool) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("decay {alpha} outside (0, 1]")));
        }
        if !q.is_square() || q.shape() != p.shape() || !r.is_square() {
            return Err(Error::Shape {
                op: "PilLossConfig",
                lhs: q.shape(),
                rhs: p.shape(),
            });
        }
        Ok(Self {
            q,
            r,
            p,
            horizon,
            alpha,
            mode,
            dynamics_gradient,
        })
    }

    /// Horizon actually used for chunking: behavior cloning works on
    /// single transitions whatever `horizon` says.
    pub fn effective_horizon(&self) -> usize {
        match self.mode {
            TrainMode::Bc => 1,
            _ => self.horizon,
        }
    }

    pub fn decay(&self, tau: usize) -> f64 {
        self.alpha.powi(tau as i32 - 1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub state_err: f64,
    pub input_err: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.state_err += w * other.state_err;
        self.input_err += w * other.input_err;
        self.consistency += w * other.consistency;
        self.total += w * other.total;
    }
}

/// Architecture of a [`PilModel`]. Hidden lists give the hidden widths
/// only; input and output widths follow from the dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilModelSpec {
    pub state_dim: usize,
    pub input_dim: usize,
    pub obs_encoder: ObsEncoder,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub policy_hidden: Vec<usize>,
    pub activation: Activation,
    /// Number of predictor heads; 0 builds a policy-only model.
    pub horizon: usize,
}

impl PilModelSpec {
    pub fn obs_dim(&self) -> usize {
        self.obs_encoder.obs_dim(self.state_dim)
    }

    fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend_from_slice(hidden);
        w.push(output);
        w
    }

    pub fn policy_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(
            Self::widths(self.state_dim, &self.policy_hidden, self.input_dim),
            self.activation,
            Activation::Linear,
        )
    }

    pub fn encoder_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(
            Self::widths(self.obs_dim(), &self.encoder_hidden, self.latent_dim),
            self.activation,
            Activation::Linear,
        )
    }

    pub fn predictor_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(
            Self::widths(self.latent_dim, &self.predictor_hidden, self.state_dim),
            self.activation,
            Activation::Linear,
        )
    }
}

/// Encoder `y ↦ z`, predictor heads `z ↦ x_{t+τ|t}` and policy `x ↦ u`,
/// all in one parameter store.
#[derive(Clone, Debug)]
pub struct PilModel {
    spec: PilModelSpec,
    pub store: ParamStore,
    policy: Mlp,
    encoder: Option<Mlp>,
    predictors: Vec<Mlp>,
}

impl PilModel {
    /// Each network is initialized from its own substream of `rng`, so the
    /// policy's initial weights do not depend on the number of heads.
    pub fn new(spec: PilModelSpec, rng: &RngStream) -> Result<Self> {
        let mut store = ParamStore::new();
        let policy = Mlp::new(&mut store, "policy", spec.policy_spec()?, &mut rng.substream(0))?;
        let (encoder, predictors) = if spec.horizon > 0 {
            let enc = Mlp::new(&mut store, "encoder", spec.encoder_spec()?, &mut rng.substream(1))?;
            let preds = (1..=spec.horizon)
                .map(|tau| {
                    Mlp::new(
                        &mut store,
                        &format!("predictor_{tau}"),
                        spec.predictor_spec()?,
                        &mut rng.substream(1 + tau as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(enc), preds)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            spec,
            store,
            policy,
            encoder,
            predictors,
        })
    }

    pub fn spec(&self) -> &PilModelSpec {
        &self.spec
    }

    pub fn policy(&self) -> &Mlp {
        &self.policy
    }

    pub fn encoder(&self) -> Option<&Mlp> {
        self.encoder.as_ref()
    }

    pub fn predictors(&self) -> &[Mlp] {
        &self.predictors
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_provenance(path, &BTreeMap::new())
    }

    /// Saves with free-form provenance entries (config hash, seed, ...),
    /// which [`PilModel::load`] ignores.
    pub fn save_with_provenance(&self, path: &Path, provenance: &BTreeMap<String, String>) -> Result<()> {
        let mut nets: Vec<(String, &Mlp)> = vec![("policy".into(), &self.policy)];
        if let Some(e) = &self.encoder {
            nets.push(("encoder".into(), e));
        }
        for (i, p) in self.predictors.iter().enumerate() {
            nets.push((format!("predictor_{}", i + 1), p));
        }
        let file = ModelFile {
            provenance: provenance.clone(),
            spec: self.spec.clone(),
            params: Checkpoint::capture(&self.store, nets.iter().map(|(n, m)| (n.as_str(), *m))),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let ckpt = file.params;
        if ckpt.format != crate::autodiff::CHECKPOINT_FORMAT || ckpt.version != crate::autodiff::CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint {} v{}", ckpt.format, ckpt.version)));
        }
        let store = ckpt.store()?;
        let policy = ckpt.network(&store, "policy")?;
        let (encoder, predictors) = if file.spec.horizon > 0 {
            let enc = ckpt.network(&store, "encoder")?;
            let preds = (1..=file.spec.horizon)
                .map(|tau| ckpt.network(&store, &format!("predictor_{tau}")))
                .collect::<Result<Vec<_>>>()?;
            (Some(enc), preds)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            spec: file.spec,
            store,
            policy,
            encoder,
            predictors,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(default)]
    provenance: BTreeMap<String, String>,
    spec: PilModelSpec,
    params: Checkpoint,
}

/// A length-`H` training window starting at time `t` of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    /// Encoded measurement `y_t`, the encoder's input.
    pub obs: Vec<f64>,
    /// Decoded measurements `y_t..y_{t+H}` in raw state space.
    pub y: Vec<Vec<f64>>,
    /// Measured inputs `v_t..v_{t+H−1}`.
    pub v: Vec<Vec<f64>>,
}

/// All windows with `t = 0..T−H`, i.e. `T − H + 1` per trajectory.
pub fn make_chunks(dataset: &TrajectoryDataset, horizon: usize) -> Result<Vec<Chunk>> {
    let view = dataset.observations();
    if horizon == 0 || view.horizon() < horizon {
        return Err(Error::InvalidArgument(format!(
            "trajectories of length {} cannot be cut into windows of {horizon}",
            view.horizon()
        )));
    }
    let enc = view.encoder();
    let mut out = Vec::with_capacity(view.n_traj() * (view.horizon() - horizon + 1));
    for i in 0..view.n_traj() {
        let (y, v) = (view.y(i), view.v(i));
        let decoded: Vec<Vec<f64>> = y.iter().map(|yt| enc.decode(yt)).collect();
        for t in 0..=view.horizon() - horizon {
            out.push(Chunk {
                obs: y[t].clone(),
                y: decoded[t..=t + horizon].to_vec(),
                v: v[t..t + horizon].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Chunks stacked row-wise.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Mat,
    pub y: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Batch {
    pub fn from_chunks(chunks: &[&Chunk]) -> Result<Self> {
        let first = chunks
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let h = first.v.len();
        if chunks.iter().any(|c| c.v.len() != h || c.y.len() != h + 1) {
            return Err(Error::Dimension("chunks of different lengths in one batch".into()));
        }
        let stack = |rows: Vec<&[f64]>| -> Mat {
            let cols = rows[0].len();
            Mat::from_vec(rows.len(), cols, rows.concat())
        };
        Ok(Self {
            obs: stack(chunks.iter().map(|c| c.obs.as_slice()).collect()),
            y: (0..=h).map(|k| stack(chunks.iter().map(|c| c.y[k].as_slice()).collect())).collect(),
            v: (0..h).map(|k| stack(chunks.iter().map(|c| c.v[k].as_slice()).collect())).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.rows() == 0
    }

    pub fn horizon(&self) -> usize {
        self.v.len()
    }
}

struct Terms {
    state: Option<Var>,
    input: Option<Var>,
    consistency: Option<Var>,
}

impl Terms {
    fn new() -> Self {
        Self {
            state: None,
            input: None,
            consistency: None,
        }
    }

    fn push(tape: &mut Tape, slot: &mut Option<Var>, v: Var) -> Result<()> {
        *slot = Some(match *slot {
            Some(acc) => tape.add(acc, v)?,
            None => v,
        });
        Ok(())
    }

    /// Mean over the batch; returns the root and the breakdown.
    fn finish(self, tape: &mut Tape, batch: usize) -> Result<(Var, LossBreakdown)> {
        let inv = 1.0 / batch as f64;
        let mut parts = Vec::new();
        let mut values = [0.0; 3];
        for (k, slot) in [self.state, self.input, self.consistency].into_iter().enumerate() {
            if let Some(v) = slot {
                let s = tape.scale(v, inv);
                values[k] = tape.scalar(s)?;
                parts.push(s);
            }
        }
        let mut root = match parts.first() {
            Some(&v) => v,
            None => tape.constant(Mat::zeros(1, 1)),
        };
        for &p in parts.iter().skip(1) {
            root = tape.add(root, p)?;
        }
        let breakdown = LossBreakdown {
            state_err: values[0],
            input_err: values[1],
            consistency: values[2],
            total: tape.scalar(root)?,
        };
        Ok((root, breakdown))
    }
}

fn check_batch(model: &PilModel, f: &dyn Dynamics, batch: &Batch, cfg: &PilLossConfig) -> Result<()> {
    let spec = model.spec();
    if f.state_dim() != spec.state_dim || f.input_dim() != spec.input_dim {
        return Err(Error::Dimension("model and dynamics disagree on dimensions".into()));
    }
    if batch.horizon() != cfg.effective_horizon() {
        return Err(Error::Dimension(format!(
            "batch horizon {} but loss expects {}",
            batch.horizon(),
            cfg.effective_horizon()
        )));
    }
    if cfg.q.rows() != spec.state_dim || cfg.r.rows() != spec.input_dim {
        return Err(Error::Dimension("loss weights do not match model dimensions".into()));
    }
    Ok(())
}

fn maybe_stop(tape: &mut Tape, v: Var, cfg: &PilLossConfig) -> Var {
    if cfg.dynamics_gradient {
        v
    } else {
        tape.stop_gradient(v)
    }
}

/// Predictive imitation loss over a batch:
/// `x_{t|t} = y_t`, `z = encoder(y_t)`, `x_{t+τ|t} = G_τ(z)`,
/// `u_{t+τ−1|t} = π(x_{t+τ−1|t})`, `w = x_{t+τ|t} − f(x_{t+τ−1|t}, u_{t+τ−1|t})`.
pub fn pil_chunk_loss(
    model: &PilModel,
    f: &dyn Dynamics,
    batch: &Batch,
    cfg: &PilLossConfig,
    tape: &mut Tape,
) -> Result<(Var, LossBreakdown)> {
    check_batch(model, f, batch, cfg)?;
    let encoder = model
        .encoder
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("predictive loss needs a model with predictor heads".into()))?;
    if model.predictors.len() < cfg.horizon {
        return Err(Error::Dimension(format!(
            "model has {} predictor heads, horizon is {}",
            model.predictors.len(),
            cfg.horizon
        )));
    }
    let mask = f.angle_mask();
    let store = &model.store;
    let obs = tape.constant(batch.obs.clone());
    let z = encoder.forward(tape, store, obs)?;
    let mut x_prev = tape.constant(batch.y[0].clone());
    let mut terms = Terms::new();
    for tau in 1..=cfg.horizon {
        let d = cfg.decay(tau);
        let x_tau = model.predictors[tau - 1].forward(tape, store, z)?;
        let u = model.policy.forward(tape, store, x_prev)?;
        let fx = tape.dynamics(f, x_prev, u)?;
        let fx = maybe_stop(tape, fx, cfg);
        let w = tape.sub(x_tau, fx)?;
        let w = tape.wrap_angles(w, &mask)?;
        let target = tape.constant(batch.y[tau].clone());
        let ey = tape.sub(target, x_tau)?;
        let ey = tape.wrap_angles(ey, &mask)?;
        let v = tape.constant(batch.v[tau - 1].clone());
        let ev = tape.sub(v, u)?;
        let sy = tape.square_norm_weighted(ey, &cfg.q)?;
        let sv = tape.square_norm_weighted(ev, &cfg.r)?;
        let sw = tape.square_norm_weighted(w, &cfg.p)?;
        let (sy, sv, sw) = (tape.scale(sy, d), tape.scale(sv, d), tape.scale(sw, d));
        Terms::push(tape, &mut terms.state, sy)?;
        Terms::push(tape, &mut terms.input, sv)?;
        Terms::push(tape, &mut terms.consistency, sw)?;
        x_prev = x_tau;
    }
    terms.finish(tape, batch.len())
}

/// Rollout-based imitation loss: unroll `x' = f(x, π(x))` from `y_t` for
/// `H` steps and compare against the measured states and inputs.
pub fn rollout_chunk_loss(
    model: &PilModel,
    f: &dyn Dynamics,
    batch: &Batch,
    cfg: &PilLossConfig,
    tape: &mut Tape,
) -> Result<(Var, LossBreakdown)> {
    check_batch(model, f, batch, cfg)?;
    let mask = f.angle_mask();
    let store = &model.store;
    let mut x = tape.constant(batch.y[0].clone());
    let mut terms = Terms::new();
    for tau in 1..=cfg.horizon {
        let d = cfg.decay(tau);
        let u = model.policy.forward(tape, store, x)?;
        let next = tape.dynamics(f, x, u)?;
        let next = maybe_stop(tape, next, cfg);
        let target = tape.constant(batch.y[tau].clone());
        let ey = tape.sub(target, next)?;
        let ey = tape.wrap_angles(ey, &mask)?;
        let v = tape.constant(batch.v[tau - 1].clone());
        let ev = tape.sub(v, u)?;
        let sy = tape.square_norm_weighted(ey, &cfg.q)?;
        let sv = tape.square_norm_weighted(ev, &cfg.r)?;
        let (sy, sv) = (tape.scale(sy, d), tape.scale(sv, d));
        Terms::push(tape, &mut terms.state, sy)?;
        Terms::push(tape, &mut terms.input, sv)?;
        x = next;
    }
    terms.finish(tape, batch.len())
}

/// Behavior cloning loss `‖v_t − π(y_t)‖²_R`.
pub fn bc_loss(model: &PilModel, batch: &Batch, cfg: &PilLossConfig, tape: &mut Tape) -> Result<(Var, LossBreakdown)> {
    if batch.horizon() < 1 {
        return Err(Error::Dimension("behavior cloning needs one input per sample".into()));
    }
    let x = tape.constant(batch.y[0].clone());
    let u = model.policy.forward(tape, &model.store, x)?;
    let v = tape.constant(batch.v[0].clone());
    let ev = tape.sub(v, u)?;
    let sv = tape.square_norm_weighted(ev, &cfg.r)?;
    let mut terms = Terms::new();
    terms.input = Some(sv);
    terms.finish(tape, batch.len())
}

pub fn batch_loss(
    model: &PilModel,
    f: &dyn Dynamics,
    batch: &Batch,
    cfg: &PilLossConfig,
    tape: &mut Tape,
) -> Result<(Var, LossBreakdown)> {
    match cfg.mode {
        TrainMode::Pil => pil_chunk_loss(model, f, batch, cfg, tape),
        TrainMode::Rollout => rollout_chunk_loss(model, f, batch, cfg, tape),
        TrainMode::Bc => bc_loss(model, batch, cfg, tape),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: LrSchedule,
    /// Minibatches per epoch; defaults to `⌈chunks / batch_size⌉`.
    pub batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            lr_start: 5e-4,
            lr_end: 1e-8,
            schedule: LrSchedule::Cosine,
            batches_per_epoch: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

/// Minibatch training with Adam. Chunks are drawn uniformly with
/// replacement; the logged breakdown is the mean over the epoch's batches.
pub fn train(
    model: &mut PilModel,
    f: &dyn Dynamics,
    dataset: &TrajectoryDataset,
    cfg: &PilLossConfig,
    tcfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<TrainLogRow>> {
    if tcfg.batch_size == 0 || tcfg.epochs == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
    }
    let chunks = make_chunks(dataset, cfg.effective_horizon())?;
    let per_epoch = tcfg
        .batches_per_epoch
        .unwrap_or_else(|| chunks.len().div_ceil(tcfg.batch_size))
        .max(1);
    let total_steps = tcfg.epochs * per_epoch;
    let mut adam = Adam::new(model.store.len());
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut step = 0;
    for epoch in 0..tcfg.epochs {
        let mut mean = LossBreakdown::default();
        let mut lr = tcfg.lr_start;
        for b in 0..per_epoch {
            lr = match tcfg.schedule {
                LrSchedule::Constant => tcfg.lr_start,
                LrSchedule::Cosine => cosine_lr(step, total_steps, tcfg.lr_start, tcfg.lr_end)?,
            };
            let picks: Vec<&Chunk> = (0..tcfg.batch_size).map(|_| &chunks[rng.below(chunks.len())]).collect();
            let batch = Batch::from_chunks(&picks)?;
            let mut tape = Tape::new();
            let (root, parts) = batch_loss(model, f, &batch, cfg, &mut tape)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {b}, lr {lr:.3e}"
                )));
            }
            tape.backward(root, &mut model.store)?;
            adam.step(&mut model.store, lr).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {epoch}, batch {b}, lr {lr:.3e})")),
                other => other,
            })?;
            mean.accumulate(&parts, 1.0 / per_epoch as f64);
            step += 1;
        }
        log.push(TrainLogRow { epoch, loss: mean, lr });
    }
    Ok(log)
}

/// Full-dataset loss of the current model, for monitoring.
pub fn dataset_loss(model: &PilModel, f: &dyn Dynamics, dataset: &TrajectoryDataset, cfg: &PilLossConfig) -> Result<LossBreakdown> {
    let chunks = make_chunks(dataset, cfg.effective_horizon())?;
    let refs: Vec<&Chunk> = chunks.iter().collect();
    let batch = Batch::from_chunks(&refs)?;
    let mut tape = Tape::new();
    Ok(batch_loss(model, f, &batch, cfg, &mut tape)?.1)
}

/// Writes the training log, preceded by `# key=value` provenance lines.
pub fn write_train_log(path: &Path, header: &[(&str, String)], log: &[TrainLogRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in header {
        writeln!(w, "# {k}={v}")?;
    }
    writeln!(w, "epoch,state_err,input_err,consistency,total,lr")?;
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.loss.state_err, r.loss.input_err, r.loss.consistency, r.loss.total, r.lr
        )?;
    }
    w.flush()?;
    Ok(())
}

/// The trained policy applied directly to measurements: `u = π(decode(y))`.
/// Encoder and predictors are not used.
#[derive(Clone, Debug)]
pub struct DeployedPolicy {
    store: ParamStore,
    policy: Mlp,
    encoder: ObsEncoder,
}

pub fn deploy_policy(model: &PilModel) -> DeployedPolicy {
    DeployedPolicy {
        store: model.store.clone(),
        policy: model.policy.clone(),
        encoder: model.spec.obs_encoder,
    }
}

impl Policy for DeployedPolicy {
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        self.policy.eval(&self.store, &self.encoder.decode(obs))
    }
}
