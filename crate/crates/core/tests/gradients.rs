//! Analytic gradients against a 64-bit central-difference oracle.

mod common;

use common::{random_tensor, Problem};
use koopman::autodiff::{ParamStore, Tape, Var};
use koopman::models::{Architecture, Model, ModelConfig, ModelKind};
use koopman::netblocks::*;
use koopman::rng::seeded;
use koopman::simwell::{gen_dataset, WellGenConfig};
use koopman::trainer::{bound_penalty, cyclic_losses, dynamics_loss, training_loss, Batch, TrainConfig};
use koopman::Tensor;

const PROBES: usize = 100;
const TOL: f64 = 1e-4;
const BATCH: usize = 5;
const LIFT: usize = 4;
const HIDDEN: usize = 8;

/// Squared error against a fixed random target, so every output coordinate matters.
fn sq_loss(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> koopman::Result<Var> {
    let dims = tape.value(out).dims().to_vec();
    let target = random_tensor(&mut seeded(seed), &dims, 1.0);
    tape.sum_sq_err(out, &target, 0.5)
}

fn assert_fd(name: &str, problem: &Problem<'_>, seed: u64) {
    let s = problem.check(PROBES, seed);
    assert!(s.max_rel_err < TOL, "{name}: max relative error {:.3e} over {} probes", s.max_rel_err, s.probes);
}

fn inputs(seed: u64, widths: &[usize]) -> Vec<Tensor<f64>> {
    let mut r = seeded(seed);
    widths.iter().map(|&w| random_tensor(&mut r, &[BATCH, w], 1.0)).collect()
}

#[test]
fn resnet_block() {
    let cfg = ResNetConfig { in_dim: 9, hidden_width: HIDDEN, out_dim: LIFT, n_layers: 3 };
    let mut store = ParamStore::new();
    let net = ResNet::init(cfg, "lift", &mut store, &mut seeded(1)).unwrap();
    let p = Problem {
        store,
        inputs: inputs(2, &[9]),
        build: Box::new(move |t, v| {
            let y = net.forward(t, v[0])?;
            sq_loss(t, y, 3)
        }),
    };
    assert_fd("resnet", &p, 4);
}

#[test]
fn deep_resnet_ten_layers() {
    let cfg = ResNetConfig { in_dim: 3, hidden_width: HIDDEN, out_dim: LIFT, n_layers: 10 };
    let mut store = ParamStore::new();
    let net = ResNet::init(cfg, "deep", &mut store, &mut seeded(5)).unwrap();
    let p = Problem {
        store,
        inputs: inputs(6, &[3]),
        build: Box::new(move |t, v| {
            let y = net.forward(t, v[0])?;
            sq_loss(t, y, 7)
        }),
    };
    assert_fd("deep resnet", &p, 8);
}

#[test]
fn icnn_block() {
    let cfg = IcnnConfig { state_dim: LIFT, control_dim: 1, hidden_dim: HIDDEN, n_layers: 3 };
    let mut store = ParamStore::new();
    let net = Icnn::init(cfg, "dyn", &mut store, &mut seeded(9)).unwrap();
    let p = Problem {
        store,
        inputs: inputs(10, &[LIFT, 1]),
        build: Box::new(move |t, v| {
            let y = net.forward(t, v[0], v[1])?;
            sq_loss(t, y, 11)
        }),
    };
    assert_fd("icnn", &p, 12);
}

fn autoencoder(seed: u64) -> (ParamStore<f64>, ControlAutoencoder) {
    let cfg = AutoencoderConfig {
        control_dim: 1,
        lifted_dim: LIFT,
        hidden_width: HIDDEN,
        n_layers_enc: 3,
        n_layers_dec: 3,
        bound: 1.0,
    };
    let mut store = ParamStore::new();
    let ae = ControlAutoencoder::init(cfg, "ctrl", &mut store, &mut seeded(seed)).unwrap();
    (store, ae)
}

#[test]
fn encoder_block() {
    let (store, ae) = autoencoder(13);
    let p = Problem {
        store,
        inputs: inputs(14, &[1, LIFT]),
        build: Box::new(move |t, v| {
            let y = ae.encode(t, v[0], v[1])?;
            sq_loss(t, y, 15)
        }),
    };
    assert_fd("encoder", &p, 16);
}

#[test]
fn decoder_block() {
    let (store, ae) = autoencoder(17);
    let p = Problem {
        store,
        inputs: inputs(18, &[1, LIFT]),
        build: Box::new(move |t, v| {
            let y = ae.decode(t, v[0], v[1])?;
            sq_loss(t, y, 19)
        }),
    };
    assert_fd("decoder", &p, 20);
}

#[test]
fn linear_block() {
    for bias in [false, true] {
        let cfg = LinearDynConfig { lifted_dim: LIFT, control_dim: 1, bias };
        let mut store = ParamStore::new();
        let lin = LinearDyn::init(cfg, "dyn", &mut store, &mut seeded(21)).unwrap();
        let p = Problem {
            store,
            inputs: inputs(22, &[LIFT, 1]),
            build: Box::new(move |t, v| {
                let y = lin.forward(t, v[0], v[1])?;
                sq_loss(t, y, 23)
            }),
        };
        assert_fd("linear", &p, 24);
    }
}

/// One problem per primitive op, each composed only with `weighted_sum`/`sum_sq_err`.
#[test]
fn every_op_kind() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", random_tensor(&mut seeded(30), &[3, 4], 1.0), false).unwrap();
    let wt = store.insert("wt", random_tensor(&mut seeded(31), &[4, 3], 1.0), false).unwrap();
    let b = store.insert("b", random_tensor(&mut seeded(32), &[4], 1.0), false).unwrap();

    type Op = fn(&mut Tape<'_, f64>, &[Var], [Var; 3]) -> koopman::Result<Var>;
    let ops: Vec<(&str, Op)> = vec![
        ("affine", |t, v, [w, _, b]| t.affine(v[0], w, b)),
        ("matmul", |t, v, [w, _, _]| t.matmul(v[0], w)),
        ("matmul_t", |t, v, [_, wt, _]| t.matmul_t(v[0], wt)),
        ("add", |t, v, _| t.add(v[0], v[1])),
        ("mul", |t, v, _| t.mul(v[0], v[1])),
        ("relu", |t, v, _| Ok(t.relu(v[0]))),
        ("softplus", |t, v, _| Ok(t.softplus(v[0]))),
        ("concat", |t, v, _| t.concat(&[v[0], v[1]])),
        ("cols", |t, v, _| t.cols(v[1], 1, 2)),
    ];
    for (k, (name, op)) in ops.into_iter().enumerate() {
        let p = Problem {
            store: store.clone(),
            inputs: inputs(40 + k as u64, &[3, 3]),
            build: Box::new(move |t, v| {
                let params = [t.param(w), t.param(wt), t.param(b)];
                let y = op(t, v, params)?;
                sq_loss(t, y, 50)
            }),
        };
        assert_fd(name, &p, 60 + k as u64);
    }

    let p = Problem {
        store: ParamStore::new(),
        inputs: vec![random_tensor(&mut seeded(70), &[BATCH, 3], 3.0)],
        build: Box::new(|t, v| {
            let sq = t.mse(v[0], &Tensor::zeros(&[BATCH, 3]))?;
            let bound = t.bound_penalty(v[0], 1.0, 0.5);
            t.weighted_sum(&[(sq, 0.3), (bound, 2.0)])
        }),
    };
    assert_fd("bound_penalty + weighted_sum", &p, 71);
}

/// Multi-step dynamics loss of a tiny model of each kind.
#[test]
fn dynamics_loss_matches_finite_differences() {
    let ds = gen_dataset(&WellGenConfig { n_steps: 200, seed: 3, ..Default::default() }).unwrap();
    for kind in ModelKind::ALL {
        let model = Model::<f64>::init(ModelConfig::new(kind, 2, 1, Architecture::tiny()), 80).unwrap();
        let batch: Batch<f64> = Batch::gather(&model, &ds, &[10, 40, 90, 150], 3).unwrap();
        let config = model.config().clone();
        let p = Problem {
            store: model.params.clone(),
            inputs: vec![],
            build: Box::new(move |t, _| {
                let m = Model::from_params(config.clone(), Default::default(), t.params().clone())?;
                Ok(dynamics_loss(&m, t, &batch)?.loss)
            }),
        };
        let s = p.check(PROBES, 82);
        assert!(s.max_rel_err < 1e-3, "{kind} dynamics loss: max relative error {:.3e}", s.max_rel_err);
    }
}

/// Cyclic and bound terms with the lifted-state pool as an explicit input.
#[test]
fn cyclic_and_bound_terms_match_finite_differences() {
    let model = Model::<f64>::init(ModelConfig::new(ModelKind::Extended, 2, 1, Architecture::tiny()), 83).unwrap();
    let mut r = seeded(84);
    let controls = random_tensor(&mut r, &[BATCH, 1], 5.0);
    let transformed = random_tensor(&mut r, &[BATCH, 1], 1.0);
    let config = model.config().clone();
    let p = Problem {
        store: model.params.clone(),
        inputs: vec![random_tensor(&mut r, &[BATCH, LIFT], 1.0)],
        build: Box::new(move |t, v| {
            let m = Model::from_params(config.clone(), Default::default(), t.params().clone())?;
            let terms = cyclic_losses(&m, t, &controls, &transformed, v[0])?;
            // A small bound makes the penalty active.
            let bound = bound_penalty(t, terms.encoded, 0.05);
            t.weighted_sum(&[(terms.cyc, 1.0), (bound, 1.0)])
        }),
    };
    assert_fd("cyclic + bound", &p, 85);
}

/// The assembled objective; the cyclic pool is detached, so extended models
/// are covered by the two tests above instead.
#[test]
fn training_loss_matches_finite_differences() {
    let ds = gen_dataset(&WellGenConfig { n_steps: 200, seed: 3, ..Default::default() }).unwrap();
    for kind in [ModelKind::Traditional, ModelKind::Convex] {
        let model = Model::<f64>::init(ModelConfig::new(kind, 2, 1, Architecture::tiny()), 86).unwrap();
        let batch: Batch<f64> = Batch::gather(&model, &ds, &[12, 44, 97, 160], 3).unwrap();
        let cfg = TrainConfig { n_start: 3, n_end: 3, ..Default::default() };
        let config = model.config().clone();
        let p = Problem {
            store: model.params.clone(),
            inputs: vec![],
            build: Box::new(move |t, _| {
                let m = Model::from_params(config.clone(), Default::default(), t.params().clone())?;
                Ok(training_loss(&m, t, &batch, &cfg, &mut seeded(87))?.total)
            }),
        };
        let s = p.check(PROBES, 88);
        assert!(s.max_rel_err < 1e-3, "{kind} training loss: max relative error {:.3e}", s.max_rel_err);
    }
}
