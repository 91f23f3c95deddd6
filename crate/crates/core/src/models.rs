//! Lift + lifted dynamics (+ control transform) assembled into the three
//! model kinds, with rollout and the `KOOPCK1` checkpoint format.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::netblocks::{
    AutoencoderConfig, ControlAutoencoder, Icnn, IcnnConfig, LinearDyn, LinearDynConfig, ResNet, ResNetConfig,
};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::simwell::TrajectoryDataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Traditional,
    Convex,
    Extended,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Traditional, ModelKind::Convex, ModelKind::Extended];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Traditional => "traditional",
            ModelKind::Convex => "convex",
            ModelKind::Extended => "extended",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "traditional" => Ok(ModelKind::Traditional),
            "convex" => Ok(ModelKind::Convex),
            "extended" => Ok(ModelKind::Extended),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Network sizes shared by all three model kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    /// Past steps in the lift input; the window covers `−T..0`.
    pub history: usize,
    pub lifted_dim: usize,
    pub hidden_width: usize,
    pub lift_layers: usize,
    pub icnn_hidden: usize,
    pub icnn_layers: usize,
    pub ae_hidden: usize,
    pub ae_layers_enc: usize,
    pub ae_layers_dec: usize,
    /// Adds a bias to the linear dynamics of the traditional model.
    pub linear_bias: bool,
}

impl Architecture {
    /// Laptop-sized defaults: hidden 128, lifted 64.
    pub fn desk() -> Self {
        Self {
            history: 2,
            lifted_dim: 64,
            hidden_width: 128,
            lift_layers: 10,
            icnn_hidden: 128,
            icnn_layers: 2,
            ae_hidden: 128,
            ae_layers_enc: 2,
            ae_layers_dec: 2,
            linear_bias: false,
        }
    }

    /// Sizes used for the original GPU-scale experiments.
    pub fn full() -> Self {
        Self { lifted_dim: 256, hidden_width: 512, icnn_hidden: 256, ae_hidden: 512, ..Self::desk() }
    }

    /// Minimal sizes for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            history: 2,
            lifted_dim: 4,
            hidden_width: 8,
            lift_layers: 3,
            icnn_hidden: 8,
            icnn_layers: 2,
            ae_hidden: 8,
            ae_layers_enc: 2,
            ae_layers_dec: 2,
            linear_bias: false,
        }
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self::desk()
    }
}

/// Per-channel affine standardization applied at the model boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub ctrl_mean: Vec<f64>,
    pub ctrl_std: Vec<f64>,
}

impl Normalization {
    /// Mean/std per channel over the given record range; zero spreads map to 1.
    pub fn fit(ds: &TrajectoryDataset, range: std::ops::Range<usize>) -> Self {
        fn stats(n: usize, dim: usize, get: impl Fn(usize) -> Vec<f64>) -> (Vec<f64>, Vec<f64>) {
            let mut mean = vec![0.0; dim];
            let mut sq = vec![0.0; dim];
            for t in 0..n {
                for (j, v) in get(t).into_iter().enumerate() {
                    mean[j] += v;
                    sq[j] += v * v;
                }
            }
            let n = n.max(1) as f64;
            let std = mean
                .iter_mut()
                .zip(&sq)
                .map(|(m, s)| {
                    *m /= n;
                    let var = (s / n - *m * *m).max(0.0);
                    if var > 1e-24 {
                        var.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            (mean, std)
        }
        let start = range.start;
        let n = range.len();
        let (obs_mean, obs_std) = stats(n, ds.obs_dim(), |t| ds.obs(start + t).iter().map(|&v| v as f64).collect());
        let (ctrl_mean, ctrl_std) =
            stats(n, ds.ctrl_dim(), |t| ds.control(start + t).iter().map(|&v| v as f64).collect());
        Self { obs_mean, obs_std, ctrl_mean, ctrl_std }
    }
}

/// Full description of a model: kind, sizes, data dims, and control settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub obs_dim: usize,
    pub ctrl_dim: usize,
    pub arch: Architecture,
    /// Bound `B_c` on transformed controls (extended models).
    pub control_bound: f64,
    /// Declared range of raw controls.
    pub control_range: [f64; 2],
    pub normalization: Option<Normalization>,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, obs_dim: usize, ctrl_dim: usize, arch: Architecture) -> Self {
        Self { kind, obs_dim, ctrl_dim, arch, control_bound: 1.0, control_range: [-5.0, 5.0], normalization: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.ctrl_dim == 0 {
            return Err(Error::Config("observation and control dims must be positive".into()));
        }
        if self.obs_dim > self.arch.lifted_dim {
            return Err(Error::Config(format!(
                "lifted dim {} cannot hold a head of {} observations",
                self.arch.lifted_dim, self.obs_dim
            )));
        }
        if !(self.control_range[0] < self.control_range[1]) {
            return Err(Error::Config(format!("empty control range {:?}", self.control_range)));
        }
        if let Some(n) = &self.normalization {
            if n.obs_mean.len() != self.obs_dim
                || n.obs_std.len() != self.obs_dim
                || n.ctrl_mean.len() != self.ctrl_dim
                || n.ctrl_std.len() != self.ctrl_dim
            {
                return Err(Error::Config("normalization dims do not match the model".into()));
            }
        }
        Ok(())
    }

    /// Width of the flattened history window fed to the lift.
    pub fn window_width(&self) -> usize {
        (self.arch.history + 1) * (self.obs_dim + self.ctrl_dim)
    }

    pub fn lift_config(&self) -> ResNetConfig {
        ResNetConfig {
            in_dim: self.window_width(),
            hidden_width: self.arch.hidden_width,
            out_dim: self.arch.lifted_dim,
            n_layers: self.arch.lift_layers,
        }
    }

    pub fn icnn_config(&self) -> IcnnConfig {
        IcnnConfig {
            state_dim: self.arch.lifted_dim,
            control_dim: self.ctrl_dim,
            hidden_dim: self.arch.icnn_hidden,
            n_layers: self.arch.icnn_layers,
        }
    }

    pub fn autoencoder_config(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            control_dim: self.ctrl_dim,
            lifted_dim: self.arch.lifted_dim,
            hidden_width: self.arch.ae_hidden,
            n_layers_enc: self.arch.ae_layers_enc,
            n_layers_dec: self.arch.ae_layers_dec,
            bound: self.control_bound,
        }
    }

    pub fn linear_config(&self) -> LinearDynConfig {
        LinearDynConfig { lifted_dim: self.arch.lifted_dim, control_dim: self.ctrl_dim, bias: self.arch.linear_bias }
    }

    pub fn obs_to_model(&self, channel: usize, v: f64) -> f64 {
        match &self.normalization {
            Some(n) => (v - n.obs_mean[channel]) / n.obs_std[channel],
            None => v,
        }
    }

    pub fn obs_from_model(&self, channel: usize, v: f64) -> f64 {
        match &self.normalization {
            Some(n) => v * n.obs_std[channel] + n.obs_mean[channel],
            None => v,
        }
    }

    pub fn ctrl_to_model(&self, channel: usize, v: f64) -> f64 {
        match &self.normalization {
            Some(n) => (v - n.ctrl_mean[channel]) / n.ctrl_std[channel],
            None => v,
        }
    }

    pub fn ctrl_from_model(&self, channel: usize, v: f64) -> f64 {
        match &self.normalization {
            Some(n) => v * n.ctrl_std[channel] + n.ctrl_mean[channel],
            None => v,
        }
    }
}

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub init_seed: u64,
    pub steps: u64,
    pub final_losses: Option<FinalLosses>,
    /// Training configuration as run, if the model was trained.
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalLosses {
    pub dynamics: f64,
    pub cyc: f64,
    pub bound: f64,
    pub total: f64,
    pub val_rms: Option<f64>,
}

/// Observation/control history `−T..0`, oldest first, in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow<S> {
    pub observations: Tensor<S>,
    pub controls: Tensor<S>,
}

impl<S: Scalar> HistoryWindow<S> {
    pub fn new(observations: Tensor<S>, controls: Tensor<S>) -> Result<Self> {
        if observations.rows() != controls.rows() || observations.dims().len() != 2 || controls.dims().len() != 2 {
            return Err(Error::Config(format!(
                "history window needs matching [T+1 × D] matrices, got {:?} and {:?}",
                observations.dims(),
                controls.dims()
            )));
        }
        Ok(Self { observations, controls })
    }

    /// Window ending at record `t0` (inclusive). Requires `t0 ≥ history`.
    pub fn from_dataset(ds: &TrajectoryDataset, t0: usize, history: usize) -> Result<Self> {
        if t0 < history || t0 >= ds.len() {
            return Err(Error::Config(format!(
                "window ending at {t0} with history {history} does not fit {} records",
                ds.len()
            )));
        }
        let steps = t0 - history..=t0;
        let obs: Vec<S> = steps.clone().flat_map(|t| ds.obs(t).iter().map(|&v| S::from_f64_lossy(v as f64))).collect();
        let ctrl: Vec<S> = steps.flat_map(|t| ds.control(t).iter().map(|&v| S::from_f64_lossy(v as f64))).collect();
        Self::new(
            Tensor::new(vec![history + 1, ds.obs_dim()], obs)?,
            Tensor::new(vec![history + 1, ds.ctrl_dim()], ctrl)?,
        )
    }

    pub fn history(&self) -> usize {
        self.observations.rows() - 1
    }

    pub fn current_obs(&self) -> &[S] {
        self.observations.row(self.observations.rows() - 1)
    }
}

/// Lifted state `x̄`; its first `D_obs` entries are the observation readout.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedState<S> {
    pub values: Vec<S>,
}

/// Output of [`Model::rollout`] in raw observation units.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<S> {
    /// `[H × D_obs]`, row `t − 1` is the prediction for step `t`.
    pub predicted: Tensor<S>,
    /// `[H × D_ctrl]` transformed controls for extended models.
    pub transformed: Option<Tensor<S>>,
}

#[derive(Debug, Clone)]
pub enum Dynamics {
    Linear(LinearDyn),
    Convex(Icnn),
}

/// A lifted dynamics model with its parameters.
#[derive(Debug)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    meta: TrainingMeta,
    pub params: ParamStore<S>,
    lift: ResNet,
    dynamics: Dynamics,
    control: Option<ControlAutoencoder>,
    lift_calls: AtomicU64,
}

impl<S: Scalar> Clone for Model<S> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            meta: self.meta.clone(),
            params: self.params.clone(),
            lift: self.lift.clone(),
            dynamics: self.dynamics.clone(),
            control: self.control.clone(),
            lift_calls: AtomicU64::new(self.lift_calls.load(Ordering::Relaxed)),
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut params = ParamStore::new();
        let lift = ResNet::init(config.lift_config(), "lift", &mut params, &mut rng)?;
        let dynamics = match config.kind {
            ModelKind::Traditional => {
                Dynamics::Linear(LinearDyn::init(config.linear_config(), "dyn", &mut params, &mut rng)?)
            }
            ModelKind::Convex | ModelKind::Extended => {
                Dynamics::Convex(Icnn::init(config.icnn_config(), "dyn", &mut params, &mut rng)?)
            }
        };
        let control = if config.kind == ModelKind::Extended {
            Some(ControlAutoencoder::init(config.autoencoder_config(), "ctrl", &mut params, &mut rng)?)
        } else {
            None
        };
        let meta = TrainingMeta { init_seed: seed, ..Default::default() };
        Ok(Self { config, meta, params, lift, dynamics, control, lift_calls: AtomicU64::new(0) })
    }

    /// Binds an existing parameter store to a configuration, checking every
    /// name, shape, and constraint flag.
    pub fn from_params(config: ModelConfig, meta: TrainingMeta, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let lift = ResNet::bind(config.lift_config(), "lift", &params)?;
        let dynamics = match config.kind {
            ModelKind::Traditional => Dynamics::Linear(LinearDyn::bind(config.linear_config(), "dyn", &params)?),
            ModelKind::Convex | ModelKind::Extended => {
                Dynamics::Convex(Icnn::bind(config.icnn_config(), "dyn", &params)?)
            }
        };
        let control = if config.kind == ModelKind::Extended {
            Some(ControlAutoencoder::bind(config.autoencoder_config(), "ctrl", &params)?)
        } else {
            None
        };
        Ok(Self { config, meta, params, lift, dynamics, control, lift_calls: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut TrainingMeta {
        &mut self.meta
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn control_transform(&self) -> Option<&ControlAutoencoder> {
        self.control.as_ref()
    }

    /// Number of lift evaluations since construction.
    pub fn lift_calls(&self) -> u64 {
        self.lift_calls.load(Ordering::Relaxed)
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model::from_params(self.config.clone(), self.meta.clone(), self.params.cast())
            .expect("cast preserves a valid layout")
    }

    /// Lift a `[B × window_width]` batch of flattened, normalized windows.
    pub fn lift_on(&self, tape: &mut Tape<'_, S>, windows: Var) -> Result<Var> {
        self.lift_calls.fetch_add(1, Ordering::Relaxed);
        self.lift.forward(tape, windows)
    }

    /// One lifted step. Returns the next lifted state and, for extended
    /// models, the transformed control.
    pub fn step_on(&self, tape: &mut Tape<'_, S>, state: Var, control: Var) -> Result<(Var, Option<Var>)> {
        match (&self.dynamics, &self.control) {
            (Dynamics::Linear(lin), None) => Ok((lin.forward(tape, state, control)?, None)),
            (Dynamics::Convex(g), None) => Ok((g.forward(tape, state, control)?, None)),
            (Dynamics::Convex(g), Some(h)) => {
                let transformed = h.encode(tape, control, state)?;
                Ok((g.forward(tape, state, transformed)?, Some(transformed)))
            }
            (Dynamics::Linear(_), Some(_)) => {
                Err(Error::Invariant("linear dynamics paired with a control transform".into()))
            }
        }
    }

    /// The observation readout: first `D_obs` columns.
    pub fn head_on(&self, tape: &mut Tape<'_, S>, state: Var) -> Result<Var> {
        tape.cols(state, 0, self.config.obs_dim)
    }

    /// Flattens a window: observations oldest→newest, then controls oldest→newest.
    pub fn flatten_window(&self, window: &HistoryWindow<S>) -> Result<Vec<S>> {
        let cfg = &self.config;
        if window.history() != cfg.arch.history
            || window.observations.cols() != cfg.obs_dim
            || window.controls.cols() != cfg.ctrl_dim
        {
            return Err(Error::Config(format!(
                "window of shape {:?}/{:?} does not match model (T={}, D_obs={}, D_ctrl={})",
                window.observations.dims(),
                window.controls.dims(),
                cfg.arch.history,
                cfg.obs_dim,
                cfg.ctrl_dim
            )));
        }
        let mut out = Vec::with_capacity(cfg.window_width());
        for r in 0..window.observations.rows() {
            for (j, &v) in window.observations.row(r).iter().enumerate() {
                out.push(S::from_f64_lossy(cfg.obs_to_model(j, v.to_f64_lossy())));
            }
        }
        for r in 0..window.controls.rows() {
            for (j, &v) in window.controls.row(r).iter().enumerate() {
                out.push(S::from_f64_lossy(cfg.ctrl_to_model(j, v.to_f64_lossy())));
            }
        }
        Ok(out)
    }

    fn controls_to_model(&self, controls: &[S]) -> Result<Tensor<S>> {
        let d = self.config.ctrl_dim;
        if !controls.len().is_multiple_of(d) || controls.is_empty() {
            return Err(Error::Config(format!("control vector length {} is not a multiple of {d}", controls.len())));
        }
        let data = controls
            .iter()
            .enumerate()
            .map(|(i, &v)| S::from_f64_lossy(self.config.ctrl_to_model(i % d, v.to_f64_lossy())))
            .collect();
        Tensor::new(vec![controls.len() / d, d], data)
    }

    /// `x̄₀ = φ(window)`.
    pub fn lift(&self, window: &HistoryWindow<S>) -> Result<LiftedState<S>> {
        let flat = self.flatten_window(window)?;
        let mut tape = Tape::new(&self.params);
        let input = tape.input(Tensor::new(vec![1, flat.len()], flat)?);
        let state = self.lift_on(&mut tape, input)?;
        Ok(LiftedState { values: tape.value(state).data().to_vec() })
    }

    /// Advances a lifted state by one step under raw control `c`.
    pub fn step_lifted(&self, state: &LiftedState<S>, control: &[S]) -> Result<(LiftedState<S>, Option<Vec<S>>)> {
        if state.values.len() != self.config.arch.lifted_dim || control.len() != self.config.ctrl_dim {
            return Err(Error::Config(format!(
                "step expects lifted dim {} and control dim {}, got {} and {}",
                self.config.arch.lifted_dim,
                self.config.ctrl_dim,
                state.values.len(),
                control.len()
            )));
        }
        let [lo, hi] = self.config.control_range;
        if control.iter().any(|c| {
            let c = c.to_f64_lossy();
            c < lo || c > hi
        }) {
            log_out_of_range(control, self.config.control_range);
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.input(Tensor::new(vec![1, state.values.len()], state.values.clone())?);
        let c = tape.input(self.controls_to_model(control)?);
        let (next, transformed) = self.step_on(&mut tape, x, c)?;
        Ok((
            LiftedState { values: tape.value(next).data().to_vec() },
            transformed.map(|t| tape.value(t).data().to_vec()),
        ))
    }

    /// Lifts the window once, then evolves purely in the lifted space under
    /// `controls` (`[H × D_ctrl]`, raw units), reading out the head each step.
    pub fn rollout(&self, window: &HistoryWindow<S>, controls: &Tensor<S>) -> Result<Rollout<S>> {
        let flat = self.flatten_window(window)?;
        let mut batch = self.rollout_batch(&[flat], std::slice::from_ref(controls))?;
        Ok(batch.pop().expect("one rollout requested"))
    }

    /// Batched rollout over pre-flattened windows; each control tensor is `[H × D_ctrl]`.
    pub fn rollout_batch(&self, windows: &[Vec<S>], controls: &[Tensor<S>]) -> Result<Vec<Rollout<S>>> {
        let b = windows.len();
        if b == 0 || controls.len() != b {
            return Err(Error::Config("rollout needs one control sequence per window".into()));
        }
        let h = controls[0].rows();
        let d_ctrl = self.config.ctrl_dim;
        let d_obs = self.config.obs_dim;
        if controls.iter().any(|c| c.rows() != h || c.cols() != d_ctrl) || h == 0 {
            return Err(Error::Config(format!("control sequences must all be [H × {d_ctrl}] with H ≥ 1")));
        }
        let width = self.config.window_width();
        if windows.iter().any(|w| w.len() != width) {
            return Err(Error::Config(format!("flattened windows must have width {width}")));
        }
        let mut tape = Tape::new(&self.params);
        let input = tape.input(Tensor::new(vec![b, width], windows.concat())?);
        let mut state = self.lift_on(&mut tape, input)?;
        let mut predicted = vec![Vec::with_capacity(h * d_obs); b];
        let mut transformed: Vec<Vec<S>> = vec![Vec::new(); b];
        for t in 0..h {
            let mut step_ctrl = Vec::with_capacity(b * d_ctrl);
            for c in controls {
                step_ctrl.extend_from_slice(c.row(t));
            }
            let cv = tape.input(self.controls_to_model(&step_ctrl)?);
            let (next, tc) = self.step_on(&mut tape, state, cv)?;
            let head = tape.value(next);
            for (i, out) in predicted.iter_mut().enumerate() {
                for j in 0..d_obs {
                    let v = head.at(i, j).to_f64_lossy();
                    out.push(S::from_f64_lossy(self.config.obs_from_model(j, v)));
                }
            }
            if let Some(tc) = tc {
                for (i, out) in transformed.iter_mut().enumerate() {
                    out.extend_from_slice(tape.value(tc).row(i));
                }
            }
            state = next;
        }
        let has_transform = self.control.is_some();
        predicted
            .into_iter()
            .zip(transformed)
            .map(|(p, tc)| {
                Ok(Rollout {
                    predicted: Tensor::new(vec![h, d_obs], p)?,
                    transformed: if has_transform { Some(Tensor::new(vec![h, d_ctrl], tc)?) } else { None },
                })
            })
            .collect()
    }
}

fn log_out_of_range<S: Scalar>(control: &[S], range: [f64; 2]) {
    log::warn!("control {control:?} outside declared range {range:?}");
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"KOOPCK1\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: u32,
    config: ModelConfig,
    training: TrainingMeta,
}

/// Serializes a model to the `KOOPCK1` layout. Parameters are written as `f32`
/// in store order.
pub fn checkpoint_bytes<S: Scalar>(model: &Model<S>) -> Result<Vec<u8>> {
    let header = CheckpointHeader { format: 1, config: model.config.clone(), training: model.meta.clone() };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.params.scalar_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        let name = p.name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Config(format!("parameter name {:?} too long", p.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.tensor.dims().len() as u32).to_le_bytes());
        for &d in p.tensor.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated reading {what}: need {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {:?}", &bytes[..8])));
    }
    let json_len = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(json_len, "JSON header")?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format != 1 {
        return Err(Error::Format(format!("unsupported checkpoint format {}", header.format)));
    }
    // The expected layout comes from a throwaway model of the same config.
    let layout = Model::<f32>::init(header.config.clone(), 0)?;
    let count = r.u32("tensor count")? as usize;
    if count != layout.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, configuration requires {}",
            layout.params.len()
        )));
    }
    let mut params = ParamStore::new();
    for expected in layout.params.iter() {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if name != expected.name {
            return Err(Error::Format(format!("unexpected tensor {name:?}, expected {:?}", expected.name)));
        }
        let rank = r.u32(&format!("rank of {name}"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&format!("dims of {name}"))? as usize);
        }
        if dims != expected.tensor.dims() {
            return Err(Error::Format(format!(
                "tensor {name:?} has dims {dims:?}, configuration requires {:?}",
                expected.tensor.dims()
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, &format!("data of {name}"))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        params.insert(&name, Tensor::new(dims, data)?, expected.constrained)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Model::from_params(header.config, header.training, params)
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
