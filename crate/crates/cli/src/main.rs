//! `koop`: generate double-well data, train lifted dynamics models, and
//! evaluate their long-horizon predictions.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use koopman::evalkit::{self, HorizonReport, RolloutResult};
use koopman::models::{load_checkpoint, save_checkpoint, Architecture, Model, ModelKind};
use koopman::simwell::{gen_dataset, read_dataset, write_dataset, WellGenConfig};
use koopman::trainer::{self, TrainConfig, TrainOutputs};
use koopman::{Error, Result};

const THREADS_VAR: &str = "KOOP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "koop", version, about = "Lifted linear, convex, and extended dynamics models")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the forced double well under uniform random controls.
    GenWell(GenWellArgs),
    /// Train one model on a dataset.
    Train(TrainArgs),
    /// Roll checkpoints forward from one dataset window and write CSV/SVG.
    Predict(PredictArgs),
    /// Divergence horizons of checkpoints over held-out windows.
    Eval(EvalArgs),
    /// Print a checkpoint's configuration and training metadata.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct GenWellArgs {
    #[arg(long, default_value_t = 100_000)]
    steps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Control range LO HI.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true, default_values_t = [-5.0, 5.0])]
    range: Vec<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Traditional,
    Convex,
    Extended,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Traditional => ModelKind::Traditional,
            KindArg::Convex => ModelKind::Convex,
            KindArg::Extended => ModelKind::Extended,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ArchArg {
    Tiny,
    Desk,
    Full,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Tiny => Architecture::tiny(),
            ArchArg::Desk => Architecture::desk(),
            ArchArg::Full => Architecture::full(),
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: KindArg,
    #[arg(long)]
    data: PathBuf,
    /// JSON file with training settings; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    arch: ArchArg,
    /// Per-step loss series.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint to roll out; repeat for up to one model of each kind.
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Record index of the current observation; the window ends here.
    #[arg(long)]
    start_index: usize,
    #[arg(long, default_value_t = 120)]
    horizon: usize,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    windows: usize,
    #[arg(long, default_value_t = evalkit::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 120)]
    horizon: usize,
    /// Seed for choosing evaluation windows.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trailing fraction of the dataset windows are drawn from.
    #[arg(long, default_value_t = 0.05)]
    val_fraction: f64,
    /// Report CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let threads = match worker_threads() {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Worker-thread cap from the environment; computation is single-threaded, so
/// any positive value is accepted and echoed.
fn worker_threads() -> std::result::Result<usize, String> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("{THREADS_VAR} must be a positive integer, got {v:?}")),
        },
    }
}

fn banner(command: &str, threads: usize, settings: Value) {
    let mut v = json!({ "command": command, "threads": threads });
    if let (Value::Object(out), Value::Object(extra)) = (&mut v, settings) {
        out.extend(extra);
    }
    eprintln!("{v}");
}

fn run(command: Command, threads: usize) -> Result<()> {
    match command {
        Command::GenWell(a) => gen_well(a, threads),
        Command::Train(a) => train(a, threads),
        Command::Predict(a) => predict(a, threads),
        Command::Eval(a) => eval(a, threads),
        Command::Inspect(a) => inspect(a, threads),
    }
}

fn gen_well(a: GenWellArgs, threads: usize) -> Result<()> {
    let cfg = WellGenConfig { n_steps: a.steps, seed: a.seed, control_range: [a.range[0], a.range[1]], init: None };
    banner("gen-well", threads, json!({ "out": a.out, "generator": cfg }));
    let ds = gen_dataset(&cfg)?;
    write_dataset(&a.out, &ds)
}

fn read_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn train(a: TrainArgs, threads: usize) -> Result<()> {
    let cfg = read_train_config(a.config.as_deref())?;
    cfg.validate()?;
    let ds = read_dataset(&a.data)?;
    let kind = ModelKind::from(a.model);
    let model_cfg = trainer::model_config(kind, a.arch.into(), &ds, &cfg);
    banner(
        "train",
        threads,
        json!({
            "model": kind.name(),
            "data": a.data,
            "out": a.out,
            "loss_csv": a.loss_csv,
            "model_config": model_cfg,
            "train_config": cfg,
        }),
    );
    let mut model = Model::<f32>::init(model_cfg, cfg.seed)?;
    let outputs = TrainOutputs { checkpoint: Some(a.out.clone()), loss_csv: a.loss_csv };
    let outcome = trainer::train(&mut model, &ds, &cfg, &outputs, |r| {
        if let Some(v) = r.val_rms {
            eprintln!("step {:>6}  n {:>2}  loss {:.6}  val one-step rms {:.5}", r.step, r.n, r.total, v);
        }
    })?;
    save_checkpoint(&model, &a.out)?;
    eprintln!(
        "trained {} steps{}; best validation loss {}",
        outcome.steps_run,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        outcome.best_val_loss.map_or("n/a".to_string(), |v| format!("{v:.6}"))
    );
    Ok(())
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Model<f32>>> {
    paths.iter().map(load_checkpoint).collect()
}

fn predict(a: PredictArgs, threads: usize) -> Result<()> {
    banner(
        "predict",
        threads,
        json!({
            "ckpt": a.ckpt, "data": a.data, "start_index": a.start_index,
            "horizon": a.horizon, "csv": a.csv, "svg": a.svg,
        }),
    );
    let ds = read_dataset(&a.data)?;
    let results = load_models(&a.ckpt)?
        .iter()
        .map(|m| RolloutResult::from_dataset(m, &ds, a.start_index, a.horizon))
        .collect::<Result<Vec<_>>>()?;
    evalkit::emit_csv(&results, &a.csv)?;
    if let Some(svg) = &a.svg {
        evalkit::emit_svg(&results, svg)?;
    }
    Ok(())
}

fn eval(a: EvalArgs, threads: usize) -> Result<()> {
    banner(
        "eval",
        threads,
        json!({
            "ckpt": a.ckpt, "data": a.data, "windows": a.windows, "tau": a.tau,
            "horizon": a.horizon, "seed": a.seed, "val_fraction": a.val_fraction, "out": a.out,
        }),
    );
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(Error::Config(format!("val_fraction {} outside [0, 1)", a.val_fraction)));
    }
    let ds = read_dataset(&a.data)?;
    let models = load_models(&a.ckpt)?;
    let history = models.iter().map(|m| m.config().arch.history).max().unwrap_or(0);
    let (_, val) = ds.split(a.val_fraction);
    let starts = evalkit::sample_eval_windows(val, history, a.horizon, a.windows, a.seed)?;
    let reports = models
        .iter()
        .zip(&a.ckpt)
        .map(|(m, path)| evalkit::evaluate_horizons(&path.display().to_string(), m, &ds, &starts, a.horizon, a.tau))
        .collect::<Result<Vec<HorizonReport>>>()?;
    match &a.out {
        Some(path) => evalkit::emit_report_csv(&reports, path),
        None => {
            print!("{}", evalkit::horizon_report_csv(&reports));
            Ok(())
        }
    }
}

fn inspect(a: InspectArgs, threads: usize) -> Result<()> {
    banner("inspect", threads, json!({ "ckpt": a.ckpt }));
    let m = load_checkpoint(&a.ckpt)?;
    let tensors: Vec<Value> = m.params.iter().map(|p| json!({ "name": p.name, "dims": p.tensor.dims() })).collect();
    let out = json!({
        "config": m.config(),
        "training": m.meta(),
        "parameter_count": m.params.scalar_count(),
        "tensors": tensors,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn range_accepts_negative_bounds() {
        let cli = Cli::try_parse_from(["koop", "gen-well", "--out", "x", "--range", "-2", "3"]).unwrap();
        let Command::GenWell(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.range, vec![-2.0, 3.0]);
        assert_eq!((a.steps, a.seed), (100_000, 42));
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["koop", "inspect", "--ckpt", "a", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["koop", "train", "--model", "quantum", "--data", "d", "--out", "o"]).is_err());
    }

    #[test]
    fn eval_takes_many_checkpoints() {
        let cli =
            Cli::try_parse_from(["koop", "eval", "--ckpt", "a", "--ckpt", "b", "--ckpt", "c", "--data", "d"]).unwrap();
        let Command::Eval(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.ckpt.len(), 3);
        assert_eq!((a.windows, a.tau, a.horizon), (20, 0.5, 120));
    }
}
