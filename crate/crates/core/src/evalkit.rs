//! Rollout comparison metrics and their CSV/SVG artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::{Dynamics, HistoryWindow, Model, ModelKind};
use crate::rng::{self, seeded};
use crate::scalar::Scalar;
use crate::simwell::TrajectoryDataset;
use crate::tensor::Tensor;

/// Default position threshold for "still accurate".
pub const DEFAULT_TAU: f64 = 0.5;

/// Predicted and true observations over one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub kind: ModelKind,
    /// `[H × D_obs]`
    pub predicted: Tensor<f64>,
    /// `[H × D_obs]`
    pub truth: Tensor<f64>,
    /// `[H × D_ctrl]`; row `t − 1` drove the transition into step `t`.
    pub controls: Tensor<f64>,
}

impl RolloutResult {
    pub fn new(kind: ModelKind, predicted: Tensor<f64>, truth: Tensor<f64>, controls: Tensor<f64>) -> Result<Self> {
        if predicted.dims() != truth.dims() || predicted.rows() != controls.rows() {
            return Err(Error::Config(format!(
                "rollout parts disagree: predicted {:?}, truth {:?}, controls {:?}",
                predicted.dims(),
                truth.dims(),
                controls.dims()
            )));
        }
        if !predicted.is_finite() || !truth.is_finite() {
            return Err(Error::NonFinite(format!("{kind} rollout produced non-finite values")));
        }
        Ok(Self { kind, predicted, truth, controls })
    }

    pub fn horizon(&self) -> usize {
        self.predicted.rows()
    }

    pub fn predicted_position(&self, t: usize) -> f64 {
        self.predicted.at(t - 1, 0)
    }

    pub fn true_position(&self, t: usize) -> f64 {
        self.truth.at(t - 1, 0)
    }

    /// Rolls `model` forward from the window ending at `t0`, comparing with the recorded trajectory.
    pub fn from_dataset<S: Scalar>(
        model: &Model<S>,
        ds: &TrajectoryDataset,
        t0: usize,
        horizon: usize,
    ) -> Result<Self> {
        let mut v = rollouts_from_dataset(model, ds, &[t0], horizon)?;
        Ok(v.pop().expect("one rollout"))
    }
}

fn f32_rows(rows: impl Iterator<Item = f64>, n: usize, d: usize) -> Result<Tensor<f64>> {
    Tensor::new(vec![n, d], rows.collect())
}

/// Batched version of [`RolloutResult::from_dataset`].
pub fn rollouts_from_dataset<S: Scalar>(
    model: &Model<S>,
    ds: &TrajectoryDataset,
    starts: &[usize],
    horizon: usize,
) -> Result<Vec<RolloutResult>> {
    if horizon == 0 {
        return Err(Error::Config("rollout horizon must be at least 1".into()));
    }
    let hist = model.config().arch.history;
    let (d_obs, d_ctrl) = (ds.obs_dim(), ds.ctrl_dim());
    let mut windows = Vec::with_capacity(starts.len());
    let mut controls = Vec::with_capacity(starts.len());
    for &t0 in starts {
        if t0 + horizon >= ds.len() {
            return Err(Error::Config(format!("rollout from {t0} over {horizon} steps exceeds {} records", ds.len())));
        }
        let w = HistoryWindow::<S>::from_dataset(ds, t0, hist)?;
        windows.push(model.flatten_window(&w)?);
        let c = (t0..t0 + horizon).flat_map(|t| ds.control(t).iter().map(|&v| S::from_f64_lossy(v as f64)));
        controls.push(Tensor::new(vec![horizon, d_ctrl], c.collect())?);
    }
    let rolled = model.rollout_batch(&windows, &controls)?;
    starts
        .iter()
        .zip(rolled)
        .map(|(&t0, r)| {
            let truth =
                f32_rows((t0 + 1..=t0 + horizon).flat_map(|t| ds.obs(t).iter().map(|&v| v as f64)), horizon, d_obs)?;
            let ctrl =
                f32_rows((t0..t0 + horizon).flat_map(|t| ds.control(t).iter().map(|&v| v as f64)), horizon, d_ctrl)?;
            RolloutResult::new(model.kind(), r.predicted.cast(), truth, ctrl)
        })
        .collect()
}

/// First step `t` at which the position error exceeds `tau`, or `H` if it never does.
pub fn divergence_horizon(r: &RolloutResult, tau: f64) -> Result<usize> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("divergence threshold must be positive, got {tau}")));
    }
    let h = r.horizon();
    Ok((1..=h).find(|&t| (r.predicted_position(t) - r.true_position(t)).abs() > tau).unwrap_or(h))
}

/// Per-step RMS of position error across rollouts of equal length.
pub fn rollout_error_curve(results: &[RolloutResult]) -> Result<Vec<f64>> {
    let Some(first) = results.first() else {
        return Err(Error::Config("error curve of an empty rollout set".into()));
    };
    let h = first.horizon();
    if results.iter().any(|r| r.horizon() != h) {
        return Err(Error::Config("rollouts in an error curve must share a horizon".into()));
    }
    Ok((1..=h)
        .map(|t| {
            let sq: f64 = results.iter().map(|r| (r.predicted_position(t) - r.true_position(t)).powi(2)).sum();
            (sq / results.len() as f64).sqrt()
        })
        .collect())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Divergence horizons of one model over a set of evaluation windows.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonReport {
    pub label: String,
    pub kind: ModelKind,
    pub tau: f64,
    pub rollout_len: usize,
    pub horizons: Vec<usize>,
}

impl HorizonReport {
    pub fn from_results(label: &str, results: &[RolloutResult], tau: f64) -> Result<Self> {
        let Some(first) = results.first() else {
            return Err(Error::Config("horizon report of an empty rollout set".into()));
        };
        let horizons = results.iter().map(|r| divergence_horizon(r, tau)).collect::<Result<_>>()?;
        Ok(Self { label: label.to_string(), kind: first.kind, tau, rollout_len: first.horizon(), horizons })
    }

    pub fn median(&self) -> f64 {
        median(&self.horizons.iter().map(|&h| h as f64).collect::<Vec<_>>())
    }
}

pub const HORIZON_CSV_HEADER: &str = "model,kind,tau,rollout_len,windows,median_horizon,horizons";

pub fn horizon_report_csv(reports: &[HorizonReport]) -> String {
    let mut out = String::from(HORIZON_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let hs: Vec<String> = r.horizons.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.label,
            r.kind,
            r.tau,
            r.rollout_len,
            r.horizons.len(),
            r.median(),
            hs.join(";")
        );
    }
    out
}

/// Evaluation window ends drawn uniformly from `range` with room for history and horizon.
pub fn sample_eval_windows(
    range: std::ops::Range<usize>,
    history: usize,
    horizon: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let lo = range.start + history;
    let hi = range.end.checked_sub(horizon + 1).filter(|&hi| hi >= lo).ok_or_else(|| {
        Error::Config(format!("range {range:?} too short for history {history} and horizon {horizon}"))
    })?;
    let mut r = seeded(seed);
    Ok((0..count).map(|_| lo + rng::index(&mut r, hi - lo + 1)).collect())
}

/// Column names of the comparison CSV.
pub const ROLLOUT_CSV_HEADER: &str = "t,true_pos,pred_pos_traditional,pred_pos_convex,pred_pos_extended,control";

/// Rollouts of up to one model per kind over the same window.
fn by_kind(results: &[RolloutResult]) -> Result<(BTreeMap<&'static str, &RolloutResult>, &RolloutResult)> {
    let Some(first) = results.first() else {
        return Err(Error::Config("nothing to emit".into()));
    };
    let mut map = BTreeMap::new();
    for r in results {
        if r.truth != first.truth || r.controls != first.controls {
            return Err(Error::Config("rollouts being compared must share truth and controls".into()));
        }
        if map.insert(r.kind.name(), r).is_some() {
            return Err(Error::Config(format!("two {} rollouts in one comparison", r.kind)));
        }
    }
    Ok((map, first))
}

pub fn rollout_csv(results: &[RolloutResult]) -> Result<String> {
    let (map, first) = by_kind(results)?;
    let mut out = String::from(ROLLOUT_CSV_HEADER);
    out.push('\n');
    for t in 1..=first.horizon() {
        let pred = |k: ModelKind| map.get(k.name()).map(|r| r.predicted_position(t).to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{t},{},{},{},{},{}",
            first.true_position(t),
            pred(ModelKind::Traditional),
            pred(ModelKind::Convex),
            pred(ModelKind::Extended),
            first.controls.at(t - 1, 0)
        );
    }
    Ok(out)
}

pub fn emit_csv(results: &[RolloutResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, rollout_csv(results)?).map_err(|e| Error::io(path, e))
}

pub fn emit_report_csv(reports: &[HorizonReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, horizon_report_csv(reports)).map_err(|e| Error::io(path, e))
}

const SVG_W: f64 = 960.0;
const SVG_H: f64 = 480.0;

fn series_color(kind: Option<ModelKind>) -> &'static str {
    match kind {
        None => "#000000",
        Some(ModelKind::Extended) => "#00a4a0",
        Some(ModelKind::Convex) => "#e07b00",
        Some(ModelKind::Traditional) => "#7b3fb5",
    }
}

/// Line plot of true and predicted positions, with the control force in a strip below.
pub fn rollout_svg(results: &[RolloutResult]) -> Result<String> {
    let (map, first) = by_kind(results)?;
    let h = first.horizon();
    let (left, right, top) = (60.0, 20.0, 20.0);
    let (plot_bottom, strip_top, strip_bottom) = (340.0, 370.0, 450.0);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in 1..=h {
        lo = lo.min(first.true_position(t));
        hi = hi.max(first.true_position(t));
        for r in map.values() {
            lo = lo.min(r.predicted_position(t));
            hi = hi.max(r.predicted_position(t));
        }
    }
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let cmax = (1..=h).map(|t| first.controls.at(t - 1, 0).abs()).fold(1e-9, f64::max);
    let x_of = |t: usize| left + (SVG_W - left - right) * (t as f64 - 1.0) / ((h.max(2) - 1) as f64);
    let y_of = |v: f64| plot_bottom - (plot_bottom - top) * (v - lo) / (hi - lo);
    let yc_of = |v: f64| 0.5 * (strip_top + strip_bottom) - 0.5 * (strip_bottom - strip_top) * v / cmax;

    let polyline = |values: &mut dyn Iterator<Item = (usize, f64)>, color: &str, y: &dyn Fn(f64) -> f64| {
        let pts: Vec<String> = values.map(|(t, v)| format!("{:.2},{:.2}", x_of(t), y(v))).collect();
        format!("  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n", pts.join(" "))
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W} {SVG_H}\" width=\"{SVG_W}\" height=\"{SVG_H}\">"
    );
    svg.push_str("  <rect x=\"0\" y=\"0\" width=\"960\" height=\"480\" fill=\"#ffffff\"/>\n");
    let _ = writeln!(
        svg,
        "  <line x1=\"{left}\" y1=\"{plot_bottom}\" x2=\"{}\" y2=\"{plot_bottom}\" stroke=\"#888888\"/>",
        SVG_W - right
    );
    let _ = writeln!(svg, "  <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{plot_bottom}\" stroke=\"#888888\"/>");
    let _ = writeln!(svg, "  <text x=\"4\" y=\"{:.2}\" font-size=\"11\">{:.2}</text>", y_of(hi) + 4.0, hi);
    let _ = writeln!(svg, "  <text x=\"4\" y=\"{:.2}\" font-size=\"11\">{:.2}</text>", y_of(lo), lo);
    let _ = writeln!(svg, "  <text x=\"4\" y=\"{:.2}\" font-size=\"11\">control</text>", yc_of(0.0) + 4.0);

    svg.push_str(&polyline(&mut (1..=h).map(|t| (t, first.true_position(t))), series_color(None), &y_of));
    for r in map.values() {
        svg.push_str(&polyline(&mut (1..=h).map(|t| (t, r.predicted_position(t))), series_color(Some(r.kind)), &y_of));
    }
    svg.push_str(&polyline(&mut (1..=h).map(|t| (t, first.controls.at(t - 1, 0))), "#555555", &yc_of));

    let mut legend: Vec<(String, &str)> = vec![("true trajectory".to_string(), series_color(None))];
    for kind in [ModelKind::Extended, ModelKind::Convex, ModelKind::Traditional] {
        if map.contains_key(kind.name()) {
            legend.push((format!("{kind} model"), series_color(Some(kind))));
        }
    }
    for (i, (label, color)) in legend.iter().enumerate() {
        let y = top + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            "  <line x1=\"{}\" y1=\"{:.1}\" x2=\"{}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            SVG_W - 220.0,
            y - 4.0,
            SVG_W - 196.0,
            y - 4.0
        );
        let _ = writeln!(svg, "  <text x=\"{}\" y=\"{y:.1}\" font-size=\"12\">{label}</text>", SVG_W - 190.0);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_svg(results: &[RolloutResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, rollout_svg(results)?).map_err(|e| Error::io(path, e))
}

/// Horizon report of one model over the given window ends.
pub fn evaluate_horizons<S: Scalar>(
    label: &str,
    model: &Model<S>,
    ds: &TrajectoryDataset,
    starts: &[usize],
    horizon: usize,
    tau: f64,
) -> Result<HorizonReport> {
    let results = rollouts_from_dataset(model, ds, starts, horizon)?;
    HorizonReport::from_results(label, &results, tau)
}

/// Largest midpoint-convexity violation `g((a+b)/2)ⱼ − (g(a)ⱼ+g(b)ⱼ)/2` of the
/// convex dynamics over random pairs with states in `±state_scale` and controls
/// in `±control_scale`. `None` for linear dynamics.
pub fn convexity_violation<S: Scalar>(
    model: &Model<S>,
    probes: usize,
    state_scale: f64,
    control_scale: f64,
    seed: u64,
) -> Result<Option<f64>> {
    let Dynamics::Convex(icnn) = model.dynamics() else {
        return Ok(None);
    };
    let d_lift = model.config().arch.lifted_dim;
    let d_ctrl = model.config().ctrl_dim;
    let mut r = seeded(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut done = 0;
    while done < probes {
        let b = (probes - done).min(1024);
        let mut draw =
            |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| rng::uniform(&mut r, -scale, scale)).collect() };
        let (xa, xb) = (draw(b * d_lift, state_scale), draw(b * d_lift, state_scale));
        let (ca, cb) = (draw(b * d_ctrl, control_scale), draw(b * d_ctrl, control_scale));
        let mid = |a: &[f64], c: &[f64]| -> Vec<f64> { a.iter().zip(c).map(|(p, q)| 0.5 * (p + q)).collect() };
        let (xm, cm) = (mid(&xa, &xb), mid(&ca, &cb));
        let mut tape = Tape::new(&model.params);
        let mut eval = |x: &[f64], c: &[f64]| -> Result<Tensor<f64>> {
            let xv = tape.input(Tensor::<S>::new(vec![b, d_lift], x.iter().map(|&v| S::from_f64_lossy(v)).collect())?);
            let cv = tape.input(Tensor::<S>::new(vec![b, d_ctrl], c.iter().map(|&v| S::from_f64_lossy(v)).collect())?);
            let out = icnn.forward(&mut tape, xv, cv)?;
            Ok(tape.value(out).cast())
        };
        let (ga, gb, gm) = (eval(&xa, &ca)?, eval(&xb, &cb)?, eval(&xm, &cm)?);
        for ((&m, &a), &bv) in gm.data().iter().zip(ga.data()).zip(gb.data()) {
            worst = worst.max(m - 0.5 * (a + bv));
        }
        done += b;
    }
    Ok(Some(worst.max(0.0)))
}

/// Round-trip accuracy and boundedness of a control transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CyclicReport {
    pub samples: usize,
    /// Median of `‖c − h⁻¹(h(c))‖ / ‖c‖` in raw control units.
    pub median_rel_err: f64,
    /// Fraction of encoded controls with every coordinate inside `slack·B_c`.
    pub frac_within: f64,
    pub slack: f64,
}

/// Encodes and decodes `per_state` uniform raw controls at the lifted state of
/// each window ending at `starts`. `None` for models without a control transform.
pub fn cyclic_report<S: Scalar>(
    model: &Model<S>,
    ds: &TrajectoryDataset,
    starts: &[usize],
    per_state: usize,
    slack: f64,
    seed: u64,
) -> Result<Option<CyclicReport>> {
    let Some(h) = model.control_transform() else {
        return Ok(None);
    };
    let cfg = model.config();
    if starts.is_empty() || per_state == 0 {
        return Err(Error::Config("cyclic report needs at least one state and one sample".into()));
    }
    let mut windows = Vec::with_capacity(starts.len());
    for &t0 in starts {
        windows.push(model.flatten_window(&HistoryWindow::<S>::from_dataset(ds, t0, cfg.arch.history)?)?);
    }
    let (d_ctrl, d_lift, width) = (cfg.ctrl_dim, cfg.arch.lifted_dim, cfg.window_width());
    let [lo, hi] = cfg.control_range;
    let n = starts.len() * per_state;
    let mut r = seeded(seed);
    let raw: Vec<f64> = (0..n * d_ctrl).map(|_| rng::uniform(&mut r, lo, hi)).collect();
    let model_units: Vec<S> =
        raw.iter().enumerate().map(|(k, &v)| S::from_f64_lossy(cfg.ctrl_to_model(k % d_ctrl, v))).collect();

    let mut tape = Tape::new(&model.params);
    let input = tape.input(Tensor::new(vec![starts.len(), width], windows.concat())?);
    let lifted = model.lift_on(&mut tape, input)?;
    let states = tape.value(lifted).clone();
    let pool: Vec<S> = (0..n).flat_map(|i| states.row(i / per_state).to_vec()).collect();
    let pool = tape.input(Tensor::new(vec![n, d_lift], pool)?);
    let c = tape.input(Tensor::new(vec![n, d_ctrl], model_units)?);
    let encoded = h.encode(&mut tape, c, pool)?;
    let decoded = h.decode(&mut tape, encoded, pool)?;
    let (enc, dec) = (tape.value(encoded), tape.value(decoded));

    let limit = slack * cfg.control_bound;
    let mut errs = Vec::with_capacity(n);
    let mut within = 0;
    for i in 0..n {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..d_ctrl {
            let truth = raw[i * d_ctrl + j];
            let back = cfg.ctrl_from_model(j, dec.at(i, j).to_f64_lossy());
            num += (truth - back).powi(2);
            den += truth * truth;
        }
        errs.push((num / den.max(f64::MIN_POSITIVE)).sqrt());
        if enc.row(i).iter().all(|v| v.to_f64_lossy().abs() <= limit) {
            within += 1;
        }
    }
    Ok(Some(CyclicReport { samples: n, median_rel_err: median(&errs), frac_within: within as f64 / n as f64, slack }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(kind: ModelKind, truth: &[f64], pred: &[f64]) -> RolloutResult {
        let h = truth.len();
        let two = |xs: &[f64]| Tensor::new(vec![h, 2], xs.iter().flat_map(|&x| [x, 0.0]).collect()).unwrap();
        let ctrl = Tensor::new(vec![h, 1], (0..h).map(|t| t as f64 * 0.1).collect()).unwrap();
        RolloutResult::new(kind, two(pred), two(truth), ctrl).unwrap()
    }

    #[test]
    fn horizon_examples() {
        let truth: Vec<f64> = (0..20).map(|t| (t as f64 * 0.3).sin()).collect();
        let exact = result(ModelKind::Extended, &truth, &truth);
        assert_eq!(divergence_horizon(&exact, 0.5).unwrap(), 20);

        let mut pred = truth.clone();
        pred[6] += 0.6; // step t = 7
        pred[12] -= 2.0;
        let r = result(ModelKind::Convex, &truth, &pred);
        assert_eq!(divergence_horizon(&r, 0.5).unwrap(), 7);
        assert_eq!(divergence_horizon(&r, 1.0).unwrap(), 13);
        assert!(divergence_horizon(&r, 0.0).is_err());
    }

    #[test]
    fn error_curve_basics() {
        let truth = [0.0, 1.0, 2.0];
        let perfect = result(ModelKind::Traditional, &truth, &truth);
        assert_eq!(rollout_error_curve(std::slice::from_ref(&perfect)).unwrap(), vec![0.0; 3]);
        let off = result(ModelKind::Traditional, &truth, &[1.0, 1.0, 0.0]);
        let a = rollout_error_curve(&[perfect.clone(), off.clone()]).unwrap();
        let b = rollout_error_curve(&[off, perfect]).unwrap();
        assert_eq!(a, b);
        assert!((a[0] - (0.5f64).sqrt()).abs() < 1e-12);
        assert!(rollout_error_curve(&[]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_has_header_plus_h_rows() {
        let truth = [0.0, 0.5, 1.0, 1.5];
        let rs = [
            result(ModelKind::Traditional, &truth, &[0.1, 0.2, 0.3, 0.4]),
            result(ModelKind::Extended, &truth, &truth),
        ];
        let csv = rollout_csv(&rs).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], ROLLOUT_CSV_HEADER);
        assert_eq!(lines[1], "1,0,0.1,,0,0");
        assert!(rollout_csv(&[rs[0].clone(), rs[0].clone()]).is_err());
    }

    #[test]
    fn report_csv_row_per_model() {
        let truth = [0.0, 0.5, 1.0];
        let r = HorizonReport::from_results("a.kck", &[result(ModelKind::Convex, &truth, &truth)], 0.5).unwrap();
        let csv = horizon_report_csv(&[r.clone(), r]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("a.kck,convex,0.5,3,1,3,3"));
    }

    fn tiny(kind: ModelKind) -> Model<f64> {
        use crate::models::{Architecture, ModelConfig};
        Model::init(ModelConfig::new(kind, 2, 1, Architecture::tiny()), 5).unwrap()
    }

    #[test]
    fn untrained_icnn_is_convex() {
        for kind in [ModelKind::Convex, ModelKind::Extended] {
            let v = convexity_violation(&tiny(kind), 2000, 3.0, 5.0, 1).unwrap().unwrap();
            assert!(v <= 1e-12, "{kind}: {v}");
        }
        assert!(convexity_violation(&tiny(ModelKind::Traditional), 10, 1.0, 1.0, 1).unwrap().is_none());
    }

    #[test]
    fn cyclic_report_counts_samples() {
        use crate::simwell::{gen_dataset, WellGenConfig};
        let ds = gen_dataset(&WellGenConfig { n_steps: 100, ..Default::default() }).unwrap();
        let r = cyclic_report(&tiny(ModelKind::Extended), &ds, &[10, 20, 30], 4, 1.02, 2).unwrap().unwrap();
        assert_eq!(r.samples, 12);
        assert!(r.median_rel_err.is_finite() && (0.0..=1.0).contains(&r.frac_within));
        assert!(cyclic_report(&tiny(ModelKind::Convex), &ds, &[10], 4, 1.02, 2).unwrap().is_none());
    }

    #[test]
    fn dataset_rollouts_align_with_records() {
        use crate::simwell::{gen_dataset, WellGenConfig};
        let ds = gen_dataset(&WellGenConfig { n_steps: 100, ..Default::default() }).unwrap();
        let r = RolloutResult::from_dataset(&tiny(ModelKind::Convex), &ds, 20, 15).unwrap();
        assert_eq!(r.horizon(), 15);
        assert_eq!(r.true_position(1), ds.obs(21)[0] as f64);
        assert_eq!(r.controls.at(0, 0), ds.control(20)[0] as f64);
        assert!(RolloutResult::from_dataset(&tiny(ModelKind::Convex), &ds, 90, 15).is_err());
    }

    #[test]
    fn svg_is_well_formed_and_deterministic() {
        let truth: Vec<f64> = (0..30).map(|t| (t as f64 * 0.2).sin()).collect();
        let pred: Vec<f64> = truth.iter().map(|v| v * 0.9).collect();
        let rs = [result(ModelKind::Extended, &truth, &pred), result(ModelKind::Convex, &truth, &truth)];
        let svg = rollout_svg(&rs).unwrap();
        assert_eq!(svg, rollout_svg(&rs).unwrap());
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let root = doc.root_element();
        assert_eq!(root.attribute("viewBox"), Some("0 0 960 480"));
        let polylines = root.descendants().filter(|n| n.has_tag_name("polyline")).count();
        assert_eq!(polylines, 4);
        let legend: Vec<&str> = root.descendants().filter_map(|n| n.text()).collect();
        assert!(legend.contains(&"extended model") && legend.contains(&"true trajectory"));
    }

    #[test]
    fn csv_values_reparse_to_source() {
        let truth: Vec<f64> = (0..12).map(|t| 1.0 / (t as f64 + 3.0)).collect();
        let pred: Vec<f64> = truth.iter().map(|v| v * 1.234567).collect();
        let r = result(ModelKind::Traditional, &truth, &pred);
        let csv = rollout_csv(std::slice::from_ref(&r)).unwrap();
        for (t, line) in csv.lines().skip(1).enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * b.abs().max(1e-12);
            assert!(close(f[1].parse().unwrap(), r.true_position(t + 1)));
            assert!(close(f[2].parse().unwrap(), r.predicted_position(t + 1)));
            assert!(close(f[5].parse().unwrap(), r.controls.at(t, 0)));
        }
    }
}
