//! Training: curriculum n-step rollout loss, cyclic-consistency and
//! boundedness penalties for the control transform, and the Adam loop.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::{project_constrained, AdamConfig, AdamState, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{save_checkpoint, Architecture, FinalLosses, Model, ModelConfig, ModelKind, Normalization};
use crate::rng::{self, seeded, uniform};
use crate::scalar::Scalar;
use crate::simwell::TrajectoryDataset;
use crate::tensor::Tensor;

/// Offset mixed into the seed for batch sampling so it never shares a stream
/// with parameter initialization.
const BATCH_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const VALIDATION_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub n_start: usize,
    pub n_end: usize,
    /// Fraction of `total_steps` over which n ramps from `n_start` to `n_end`.
    pub ramp_fraction: f64,
    pub lambda_cyc: f64,
    pub lambda_bound: f64,
    pub control_bound: f64,
    pub control_range: [f64; 2],
    pub adam: AdamConfig,
    pub seed: u64,
    pub eval_every: usize,
    /// Evaluations without `min_delta` relative improvement before stopping.
    pub patience: usize,
    pub min_delta: f64,
    pub val_fraction: f64,
    pub val_windows: usize,
    /// Standardize observations and controls per channel (fit on the training split).
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            total_steps: 20_000,
            n_start: 10,
            n_end: 25,
            ramp_fraction: 0.5,
            lambda_cyc: 1.0,
            lambda_bound: 1.0,
            control_bound: 1.0,
            control_range: [-5.0, 5.0],
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 500,
            patience: 10,
            min_delta: 0.01,
            val_fraction: 0.05,
            val_windows: 256,
            normalize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_start == 0 || self.n_start > self.n_end {
            return Err(Error::Config(format!(
                "curriculum needs 1 ≤ n_start ≤ n_end, got {}..{}",
                self.n_start, self.n_end
            )));
        }
        if self.lambda_cyc < 0.0 || self.lambda_bound < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if !(self.ramp_fraction >= 0.0) {
            return Err(Error::Config("ramp_fraction must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Model configuration for training `kind` on `ds` under `cfg`: control
/// settings are copied from `cfg`, and normalization is fitted on the
/// training split when requested.
pub fn model_config(kind: ModelKind, arch: Architecture, ds: &TrajectoryDataset, cfg: &TrainConfig) -> ModelConfig {
    let mut mc = ModelConfig::new(kind, ds.obs_dim(), ds.ctrl_dim(), arch);
    mc.control_bound = cfg.control_bound;
    mc.control_range = cfg.control_range;
    if cfg.normalize {
        let (train, _) = ds.split(cfg.val_fraction);
        mc.normalization = Some(Normalization::fit(ds, train));
    }
    mc
}

/// Number of chained prediction steps penalized at `step`.
pub fn curriculum_n(step: usize, cfg: &TrainConfig) -> usize {
    let ramp = cfg.ramp_fraction * cfg.total_steps as f64;
    let frac = if ramp > 0.0 { (step as f64 / ramp).min(1.0) } else { 1.0 };
    let n = cfg.n_start as f64 + (cfg.n_end - cfg.n_start) as f64 * frac;
    (n + 0.5).floor() as usize
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub n: usize,
    pub dynamics: f64,
    pub cyc: f64,
    pub bound: f64,
    pub total: f64,
    pub val_rms: Option<f64>,
}

pub const LOSS_CSV_HEADER: &str = "step,n,dynamics,cyc,bound,total,val_rms";

impl LossReport {
    pub fn csv_row(&self) -> String {
        let val = self.val_rms.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{},{}", self.step, self.n, self.dynamics, self.cyc, self.bound, self.total, val)
    }
}

/// A batch of training windows in model (normalized) units.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    /// `[B × window_width]`
    pub windows: Tensor<S>,
    /// `n` tensors `[B × D_ctrl]`: the control applied at step `t` (t = 0..n).
    pub controls: Vec<Tensor<S>>,
    /// `n` tensors `[B × D_obs]`: the observation at step `t + 1`.
    pub targets: Vec<Tensor<S>>,
}

impl<S: Scalar> Batch<S> {
    pub fn len(&self) -> usize {
        self.windows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Gathers windows ending at each `t0` with `n` future steps.
    pub fn gather<T: Scalar>(model: &Model<T>, ds: &TrajectoryDataset, starts: &[usize], n: usize) -> Result<Self> {
        let cfg = model.config();
        let hist = cfg.arch.history;
        if ds.obs_dim() != cfg.obs_dim || ds.ctrl_dim() != cfg.ctrl_dim {
            return Err(Error::Config(format!(
                "dataset dims ({}, {}) do not match model ({}, {})",
                ds.obs_dim(),
                ds.ctrl_dim(),
                cfg.obs_dim,
                cfg.ctrl_dim
            )));
        }
        let b = starts.len();
        let obs = |t: usize, j: usize| S::from_f64_lossy(cfg.obs_to_model(j, ds.obs(t)[j] as f64));
        let ctl = |t: usize, j: usize| S::from_f64_lossy(cfg.ctrl_to_model(j, ds.control(t)[j] as f64));
        let mut windows = Vec::with_capacity(b * cfg.window_width());
        for &t0 in starts {
            if t0 < hist || t0 + n >= ds.len() {
                return Err(Error::Config(format!("window at {t0} with {n} future steps exceeds the dataset")));
            }
            for t in t0 - hist..=t0 {
                windows.extend((0..cfg.obs_dim).map(|j| obs(t, j)));
            }
            for t in t0 - hist..=t0 {
                windows.extend((0..cfg.ctrl_dim).map(|j| ctl(t, j)));
            }
        }
        let mut controls = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for k in 0..n {
            let c: Vec<S> = starts.iter().flat_map(|&t0| (0..cfg.ctrl_dim).map(move |j| ctl(t0 + k, j))).collect();
            let y: Vec<S> = starts.iter().flat_map(|&t0| (0..cfg.obs_dim).map(move |j| obs(t0 + k + 1, j))).collect();
            controls.push(Tensor::new(vec![b, cfg.ctrl_dim], c)?);
            targets.push(Tensor::new(vec![b, cfg.obs_dim], y)?);
        }
        Ok(Self { windows: Tensor::new(vec![b, cfg.window_width()], windows)?, controls, targets })
    }
}

/// Valid window end indices inside `range` leaving room for `n` future steps.
fn window_bounds(range: &std::ops::Range<usize>, history: usize, n: usize) -> Result<(usize, usize)> {
    let lo = range.start + history;
    let hi = range.end.checked_sub(n + 1);
    match hi {
        Some(hi) if hi >= lo => Ok((lo, hi)),
        _ => Err(Error::Config(format!("range {range:?} is too short for history {history} plus {n} future steps"))),
    }
}

/// Output of [`dynamics_loss`].
pub struct DynamicsTerms {
    pub loss: Var,
    /// Lifted states `x̄₀..x̄ₙ`.
    pub states: Vec<Var>,
    /// Transformed controls per step for extended models.
    pub transformed: Vec<Var>,
}

/// Mean over batch and `t = 1..n` of `‖head(x̄ₜ) − obsₜ‖²`, with gradients
/// flowing through every chained step and the lift.
pub fn dynamics_loss<S: Scalar>(model: &Model<S>, tape: &mut Tape<'_, S>, batch: &Batch<S>) -> Result<DynamicsTerms> {
    let n = batch.horizon();
    if n == 0 {
        return Err(Error::Config("dynamics loss needs at least one future step".into()));
    }
    let scale = 1.0 / (batch.len() * n) as f64;
    let input = tape.input(batch.windows.clone());
    let mut state = model.lift_on(tape, input)?;
    let mut states = vec![state];
    let mut transformed = Vec::new();
    let mut terms = Vec::with_capacity(n);
    for (c, y) in batch.controls.iter().zip(&batch.targets) {
        let cv = tape.input(c.clone());
        let (next, tc) = model.step_on(tape, state, cv)?;
        transformed.extend(tc);
        let head = model.head_on(tape, next)?;
        terms.push((tape.sum_sq_err(head, y, scale)?, 1.0));
        states.push(next);
        state = next;
    }
    let loss = tape.weighted_sum(&terms)?;
    Ok(DynamicsTerms { loss, states, transformed })
}

/// Cyclic-consistency terms and the encoder outputs used for the bound penalty.
pub struct CyclicTerms {
    pub cyc: Var,
    /// `h_x̄(c)` for the sampled raw controls.
    pub encoded: Var,
    /// `h⁻¹_x̄(c̄)` for the sampled transformed controls.
    pub decoded: Var,
}

/// `mean‖c − h⁻¹(h(c))‖² + mean‖c̄ − h(h⁻¹(c̄))‖²` over the batch rows.
///
/// `pool` should be a detached leaf so this objective cannot reshape the lift.
pub fn cyclic_losses<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<'_, S>,
    controls: &Tensor<S>,
    transformed: &Tensor<S>,
    pool: Var,
) -> Result<CyclicTerms> {
    let Some(h) = model.control_transform() else {
        return Err(Error::Usage(format!("cyclic losses need an extended model, got {}", model.kind())));
    };
    let rows = tape.value(pool).rows();
    if controls.rows() != rows || transformed.rows() != rows {
        return Err(Error::Config("cyclic samples and state pool need equal row counts".into()));
    }
    let scale = 1.0 / rows as f64;
    let c = tape.input(controls.clone());
    let encoded = h.encode(tape, c, pool)?;
    let round_trip = h.decode(tape, encoded, pool)?;
    let forward = tape.sum_sq_err(round_trip, controls, scale)?;

    let cb = tape.input(transformed.clone());
    let decoded = h.decode(tape, cb, pool)?;
    let reverse_trip = h.encode(tape, decoded, pool)?;
    let reverse = tape.sum_sq_err(reverse_trip, transformed, scale)?;

    let cyc = tape.weighted_sum(&[(forward, 1.0), (reverse, 1.0)])?;
    Ok(CyclicTerms { cyc, encoded, decoded })
}

/// Mean over elements of `max(0, |c̄| − B_c)²`.
pub fn bound_penalty<S: Scalar>(tape: &mut Tape<'_, S>, transformed: Var, bound: f64) -> Var {
    let n = tape.value(transformed).len() as f64;
    tape.bound_penalty(transformed, bound, 1.0 / n)
}

/// Scalar value of [`bound_penalty`] without a tape.
pub fn bound_penalty_value<S: Scalar>(values: &[S], bound: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| (v.to_f64_lossy().abs() - bound).max(0.0).powi(2)).sum::<f64>() / values.len() as f64
}

/// Loss node plus the 64-bit values of its parts.
pub struct TotalLoss {
    pub total: Var,
    pub dynamics: f64,
    pub cyc: f64,
    pub bound: f64,
    pub total_value: f64,
}

/// Assembles the full objective for one batch.
///
/// Extended models add `λ_cyc·cyc + λ_bound·bound` using fresh samples
/// `c ~ U(control_range)`, `c̄ ~ U(±B_c)` and detached lifted states drawn
/// from this batch's rollout.
pub fn training_loss<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<'_, S>,
    batch: &Batch<S>,
    cfg: &TrainConfig,
    rng: &mut rng::Rng,
) -> Result<TotalLoss> {
    let terms = dynamics_loss(model, tape, batch)?;
    let dynamics = tape.scalar(terms.loss);
    if model.kind() != ModelKind::Extended {
        return Ok(TotalLoss { total: terms.loss, dynamics, cyc: 0.0, bound: 0.0, total_value: dynamics });
    }
    let mcfg = model.config();
    let b = batch.len();
    let d_lift = mcfg.arch.lifted_dim;
    let mut pool = Vec::with_capacity(b * d_lift);
    for i in 0..b {
        // States x̄₀..x̄ₙ₋₁ are the ones that feed the control encoder.
        let t = rng::index(rng, terms.states.len() - 1);
        pool.extend_from_slice(tape.value(terms.states[t]).row(i));
    }
    let pool = tape.input(Tensor::new(vec![b, d_lift], pool)?);
    let d = mcfg.ctrl_dim;
    let [lo, hi] = cfg.control_range;
    let controls: Vec<S> =
        (0..b * d).map(|k| S::from_f64_lossy(mcfg.ctrl_to_model(k % d, uniform(rng, lo, hi)))).collect();
    let bound = cfg.control_bound;
    let transformed: Vec<S> = (0..b * d).map(|_| S::from_f64_lossy(uniform(rng, -bound, bound))).collect();
    let cyc_terms =
        cyclic_losses(model, tape, &Tensor::new(vec![b, d], controls)?, &Tensor::new(vec![b, d], transformed)?, pool)?;
    let bound_var = bound_penalty(tape, cyc_terms.encoded, bound);
    let total =
        tape.weighted_sum(&[(terms.loss, 1.0), (cyc_terms.cyc, cfg.lambda_cyc), (bound_var, cfg.lambda_bound)])?;
    Ok(TotalLoss {
        total,
        dynamics,
        cyc: tape.scalar(cyc_terms.cyc),
        bound: tape.scalar(bound_var),
        total_value: tape.scalar(total),
    })
}

/// Fixed validation windows with their multi-step targets.
pub struct Validation<S> {
    batch: Batch<S>,
}

impl<S: Scalar> Validation<S> {
    pub fn new(model: &Model<S>, ds: &TrajectoryDataset, cfg: &TrainConfig) -> Result<Option<Self>> {
        let (_, val) = ds.split(cfg.val_fraction);
        if val.is_empty() || cfg.val_windows == 0 {
            return Ok(None);
        }
        let (lo, hi) = window_bounds(&val, model.config().arch.history, cfg.n_end)?;
        let mut rng = seeded(cfg.seed ^ VALIDATION_STREAM);
        let starts: Vec<usize> = (0..cfg.val_windows).map(|_| lo + rng::index(&mut rng, hi - lo + 1)).collect();
        Ok(Some(Self { batch: Batch::gather(model, ds, &starts, cfg.n_end)? }))
    }

    /// `(one-step position RMS in raw units, mean n_end-step dynamics loss)`.
    pub fn evaluate(&self, model: &Model<S>) -> Result<(f64, f64)> {
        let mut tape = Tape::new(&model.params);
        let terms = dynamics_loss(model, &mut tape, &self.batch)?;
        let first = tape.value(terms.states[1]);
        let target = &self.batch.targets[0];
        let b = self.batch.len();
        let cfg = model.config();
        let mut sq = 0.0;
        for i in 0..b {
            let p = cfg.obs_from_model(0, first.at(i, 0).to_f64_lossy());
            let y = cfg.obs_from_model(0, target.at(i, 0).to_f64_lossy());
            sq += (p - y).powi(2);
        }
        Ok(((sq / b as f64).sqrt(), tape.scalar(terms.loss)))
    }
}

/// Where training writes its side outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Best-so-far model, rewritten at each evaluation that improves.
    pub checkpoint: Option<PathBuf>,
    /// Loss series, one row per step.
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub steps_run: usize,
    pub stopped_early: bool,
    /// Best validation rollout loss seen; the returned model carries these parameters.
    pub best_val_loss: Option<f64>,
}

/// Runs the optimization loop. On return the model holds the parameters with
/// the best validation rollout loss (or the final ones if no validation split).
pub fn train(
    model: &mut Model<f32>,
    ds: &TrajectoryDataset,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    mut progress: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_range, _) = ds.split(cfg.val_fraction);
    let history = model.config().arch.history;
    let (lo, hi) = window_bounds(&train_range, history, cfg.n_end)?;
    let validation = Validation::new(model, ds, cfg)?;
    let mut csv = match &outputs.loss_csv {
        Some(path) => {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(path, e))?;
            Some((f, path.clone()))
        }
        None => None,
    };

    let mut rng = seeded(cfg.seed ^ BATCH_STREAM);
    let mut adam = AdamState::new(&model.params, cfg.adam);
    let mut reports = Vec::with_capacity(cfg.total_steps);
    let mut best: Option<(f64, ParamStore<f32>, usize)> = None;
    let mut evals_since_best = 0;
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 0..cfg.total_steps {
        let n = curriculum_n(step, cfg);
        let starts: Vec<usize> = (0..cfg.batch_size).map(|_| lo + rng::index(&mut rng, hi - lo + 1)).collect();
        let batch = Batch::gather(model, ds, &starts, n)?;

        let (parts, mut grads) = {
            let mut tape = Tape::new(&model.params);
            let loss = training_loss(model, &mut tape, &batch, cfg, &mut rng)?;
            if !loss.total_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at step {step} (n={n}): dynamics={}, cyc={}, bound={}",
                    loss.dynamics, loss.cyc, loss.bound
                )));
            }
            let grads = tape.backward_scalar(loss.total)?.into_dense(&model.params);
            (loss, grads)
        };
        adam.step(&mut model.params, &mut grads)?;
        project_constrained(&mut model.params);
        steps_run = step + 1;

        let mut report = LossReport {
            step,
            n,
            dynamics: parts.dynamics,
            cyc: parts.cyc,
            bound: parts.bound,
            total: parts.total_value,
            val_rms: None,
        };

        let at_eval = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps;
        if at_eval {
            if let Some(val) = &validation {
                let (rms, val_loss) = val.evaluate(model)?;
                report.val_rms = Some(rms);
                let improved = match &best {
                    None => true,
                    Some((b, _, _)) => val_loss < b * (1.0 - cfg.min_delta),
                };
                let new_best = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
                if new_best {
                    best = Some((val_loss, model.params.clone(), step + 1));
                    if let Some(path) = &outputs.checkpoint {
                        finish_meta(model, cfg, step + 1, &report);
                        save_checkpoint(model, path)?;
                    }
                }
                if improved {
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                }
            } else if let Some(path) = &outputs.checkpoint {
                finish_meta(model, cfg, step + 1, &report);
                save_checkpoint(model, path)?;
            }
        }

        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{}", report.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        progress(&report);
        reports.push(report);

        if validation.is_some() && evals_since_best >= cfg.patience && cfg.patience > 0 {
            stopped_early = true;
            break;
        }
    }

    let best_val_loss = best.as_ref().map(|b| b.0);
    if let Some((_, params, _)) = best {
        model.params = params;
    }
    if let Some(last) = reports.last().copied() {
        finish_meta(model, cfg, steps_run, &last);
    }
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(model, path)?;
    }
    Ok(TrainOutcome { reports, steps_run, stopped_early, best_val_loss })
}

fn finish_meta(model: &mut Model<f32>, cfg: &TrainConfig, steps: usize, last: &LossReport) {
    let meta = model.meta_mut();
    meta.steps = steps as u64;
    meta.final_losses = Some(FinalLosses {
        dynamics: last.dynamics,
        cyc: last.cyc,
        bound: last.bound,
        total: last.total,
        val_rms: last.val_rms,
    });
    meta.train_config = serde_json::to_value(cfg).ok();
}
