//! Network components: residual lifting network, input-convex dynamics,
//! the state-conditioned control encoder/decoder, and linear dynamics.

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub in_dim: usize,
    pub hidden_width: usize,
    pub out_dim: usize,
    pub n_layers: usize,
}

impl ResNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_width == 0 || self.out_dim == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!("resnet dims and depth must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        if self.n_layers == 1 {
            return vec![(self.in_dim, self.out_dim)];
        }
        let mut dims = vec![(self.in_dim, self.hidden_width)];
        dims.extend(std::iter::repeat_n((self.hidden_width, self.hidden_width), self.n_layers - 2));
        dims.push((self.hidden_width, self.out_dim));
        dims
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
    fan_in: usize,
    fan_out: usize,
}

fn bind_dense<S: Scalar>(store: &ParamStore<S>, name: &str, fan_in: usize, fan_out: usize) -> Result<Dense> {
    Ok(Dense {
        weight: store.expect(&format!("{name}.weight"), &[fan_in, fan_out])?,
        bias: store.expect(&format!("{name}.bias"), &[fan_out])?,
        fan_in,
        fan_out,
    })
}

fn init_dense<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl RngCore,
) -> Result<Dense> {
    Ok(Dense {
        weight: store.init_dense(&format!("{name}.weight"), fan_in, fan_out, rng)?,
        bias: store.init_bias(&format!("{name}.bias"), fan_in, fan_out, rng)?,
        fan_in,
        fan_out,
    })
}

fn check_width<S: Scalar>(tape: &Tape<'_, S>, v: Var, want: usize, what: &str) -> Result<()> {
    let got = tape.value(v).cols();
    if got != want {
        return Err(Error::Config(format!("{what}: expected input width {want}, got {got}")));
    }
    Ok(())
}

/// Densely connected residual network.
///
/// Every layer but the last is `relu(affine(h))`, plus `h` when the layer
/// preserves width. The last layer is affine, also with a skip when its input
/// and output widths agree.
#[derive(Debug, Clone)]
pub struct ResNet {
    cfg: ResNetConfig,
    layers: Vec<Dense>,
}

impl ResNet {
    pub fn init<S: Scalar>(
        cfg: ResNetConfig,
        prefix: &str,
        store: &mut ParamStore<S>,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| init_dense(store, &format!("{prefix}.{l}"), i, o, rng))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, layers })
    }

    pub fn bind<S: Scalar>(cfg: ResNetConfig, prefix: &str, store: &ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let layers = cfg
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| bind_dense(store, &format!("{prefix}.{l}"), i, o))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.cfg
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, input: Var) -> Result<Var> {
        check_width(tape, input, self.cfg.in_dim, "resnet")?;
        let last = self.layers.len() - 1;
        let mut h = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight);
            let b = tape.param(layer.bias);
            let mut z = tape.affine(h, w, b)?;
            if l != last {
                z = tape.relu(z);
            }
            if layer.fan_in == layer.fan_out {
                z = tape.add(z, h)?;
            }
            h = z;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcnnConfig {
    pub state_dim: usize,
    pub control_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
}

impl IcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.control_dim == 0 || self.hidden_dim == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!("icnn dims and depth must be positive: {self:?}")));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.state_dim + self.control_dim
    }
}

/// Input-convex network `g(x̄, c̄)`, jointly convex in both arguments.
///
/// With `u = [x̄, c̄]`:
/// `z₁ = softplus(U₁u + b₁)`, `zₖ = softplus(Zₖ⁺zₖ₋₁ + Uₖu + bₖ)`, and the
/// output `Z⁺z_L + U u + b` is linear. Only the `Z` weights are constrained
/// nonnegative; the raw input `u` feeds every layer.
#[derive(Debug, Clone)]
pub struct Icnn {
    cfg: IcnnConfig,
    passthrough: Vec<Dense>,
    hidden: Vec<ParamId>,
}

impl Icnn {
    fn widths(cfg: &IcnnConfig) -> Vec<usize> {
        let mut w = vec![cfg.hidden_dim; cfg.n_layers];
        w.push(cfg.state_dim);
        w
    }

    pub fn init<S: Scalar>(
        cfg: IcnnConfig,
        prefix: &str,
        store: &mut ParamStore<S>,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut passthrough = Vec::new();
        let mut hidden = Vec::new();
        for (l, width) in Self::widths(&cfg).into_iter().enumerate() {
            passthrough.push(init_dense(store, &format!("{prefix}.u{l}"), cfg.input_dim(), width, rng)?);
            if l > 0 {
                hidden.push(store.init_nonnegative(&format!("{prefix}.z{l}.weight"), cfg.hidden_dim, width, rng)?);
            }
        }
        Ok(Self { cfg, passthrough, hidden })
    }

    pub fn bind<S: Scalar>(cfg: IcnnConfig, prefix: &str, store: &ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let mut passthrough = Vec::new();
        let mut hidden = Vec::new();
        for (l, width) in Self::widths(&cfg).into_iter().enumerate() {
            passthrough.push(bind_dense(store, &format!("{prefix}.u{l}"), cfg.input_dim(), width)?);
            if l > 0 {
                let id = store.expect(&format!("{prefix}.z{l}.weight"), &[cfg.hidden_dim, width])?;
                if !store.param(id).constrained {
                    return Err(Error::Config(format!(
                        "parameter {:?} must be flagged as nonnegative",
                        store.param(id).name
                    )));
                }
                hidden.push(id);
            }
        }
        Ok(Self { cfg, passthrough, hidden })
    }

    pub fn config(&self) -> &IcnnConfig {
        &self.cfg
    }

    /// Ids of the nonnegative hidden-to-hidden weights.
    pub fn constrained_params(&self) -> &[ParamId] {
        &self.hidden
    }

    /// Errors if any constrained weight is negative.
    pub fn check_feasible<S: Scalar>(&self, store: &ParamStore<S>) -> Result<()> {
        for &id in &self.hidden {
            if store.get(id).data().iter().any(|&v| v < S::zero()) {
                return Err(Error::Invariant(format!("negative entry in convex weight {:?}", store.param(id).name)));
            }
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, state: Var, control: Var) -> Result<Var> {
        check_width(tape, state, self.cfg.state_dim, "icnn state")?;
        check_width(tape, control, self.cfg.control_dim, "icnn control")?;
        self.check_feasible(tape.params())?;
        let u = tape.concat(&[state, control])?;
        let last = self.passthrough.len() - 1;
        let mut z: Option<Var> = None;
        for (l, pass) in self.passthrough.iter().enumerate() {
            let w = tape.param(pass.weight);
            let b = tape.param(pass.bias);
            let mut pre = tape.affine(u, w, b)?;
            if let Some(prev) = z {
                let wz = tape.param(self.hidden[l - 1]);
                let hz = tape.matmul(prev, wz)?;
                pre = tape.add(pre, hz)?;
            }
            z = Some(if l == last { pre } else { tape.activate(pre, Activation::Softplus) });
        }
        Ok(z.expect("icnn has at least one layer"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub control_dim: usize,
    pub lifted_dim: usize,
    pub hidden_width: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    /// Intended bound on transformed controls; enforced by a training penalty.
    pub bound: f64,
}

impl AutoencoderConfig {
    fn resnet(&self, n_layers: usize) -> ResNetConfig {
        ResNetConfig {
            in_dim: self.control_dim + self.lifted_dim,
            hidden_width: self.hidden_width,
            out_dim: self.control_dim,
            n_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::Config(format!("control bound must be positive, got {}", self.bound)));
        }
        self.resnet(self.n_layers_enc).validate()?;
        self.resnet(self.n_layers_dec).validate()
    }
}

/// Approximately invertible control transform `h_x̄` and its inverse.
#[derive(Debug, Clone)]
pub struct ControlAutoencoder {
    cfg: AutoencoderConfig,
    encoder: ResNet,
    decoder: ResNet,
}

impl ControlAutoencoder {
    pub fn init<S: Scalar>(
        cfg: AutoencoderConfig,
        prefix: &str,
        store: &mut ParamStore<S>,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = ResNet::init(cfg.resnet(cfg.n_layers_enc), &format!("{prefix}.enc"), store, rng)?;
        let decoder = ResNet::init(cfg.resnet(cfg.n_layers_dec), &format!("{prefix}.dec"), store, rng)?;
        Ok(Self { cfg, encoder, decoder })
    }

    pub fn bind<S: Scalar>(cfg: AutoencoderConfig, prefix: &str, store: &ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let encoder = ResNet::bind(cfg.resnet(cfg.n_layers_enc), &format!("{prefix}.enc"), store)?;
        let decoder = ResNet::bind(cfg.resnet(cfg.n_layers_dec), &format!("{prefix}.dec"), store)?;
        Ok(Self { cfg, encoder, decoder })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    /// `c̄ = h_x̄(c)`; the encoder sees `[c, x̄]`.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<'_, S>, control: Var, state: Var) -> Result<Var> {
        check_width(tape, control, self.cfg.control_dim, "control encoder")?;
        let input = tape.concat(&[control, state])?;
        self.encoder.forward(tape, input)
    }

    /// `c = h⁻¹_x̄(c̄)`; the decoder sees `[c̄, x̄]`.
    pub fn decode<S: Scalar>(&self, tape: &mut Tape<'_, S>, transformed: Var, state: Var) -> Result<Var> {
        check_width(tape, transformed, self.cfg.control_dim, "control decoder")?;
        let input = tape.concat(&[transformed, state])?;
        self.decoder.forward(tape, input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearDynConfig {
    pub lifted_dim: usize,
    pub control_dim: usize,
    #[serde(default)]
    pub bias: bool,
}

/// Linear lifted dynamics `x̄′ = A x̄ + Bᵀ c`.
///
/// `A` is stored `[D_lift × D_lift]` in the usual column-vector convention;
/// `B` is stored `[D_ctrl × D_lift]` so that a unit control `eⱼ` contributes
/// row `j` of the stored matrix.
#[derive(Debug, Clone)]
pub struct LinearDyn {
    cfg: LinearDynConfig,
    a: ParamId,
    b: ParamId,
    bias: Option<ParamId>,
}

impl LinearDyn {
    pub fn init<S: Scalar>(
        cfg: LinearDynConfig,
        prefix: &str,
        store: &mut ParamStore<S>,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        if cfg.lifted_dim == 0 || cfg.control_dim == 0 {
            return Err(Error::Config(format!("linear dynamics dims must be positive: {cfg:?}")));
        }
        let a = store.init_dense(&format!("{prefix}.A"), cfg.lifted_dim, cfg.lifted_dim, rng)?;
        let b = store.init_dense(&format!("{prefix}.B"), cfg.control_dim, cfg.lifted_dim, rng)?;
        let bias = if cfg.bias {
            Some(store.init_bias(&format!("{prefix}.bias"), cfg.lifted_dim, cfg.lifted_dim, rng)?)
        } else {
            None
        };
        Ok(Self { cfg, a, b, bias })
    }

    pub fn bind<S: Scalar>(cfg: LinearDynConfig, prefix: &str, store: &ParamStore<S>) -> Result<Self> {
        let (n, m) = (cfg.lifted_dim, cfg.control_dim);
        Ok(Self {
            cfg,
            a: store.expect(&format!("{prefix}.A"), &[n, n])?,
            b: store.expect(&format!("{prefix}.B"), &[m, n])?,
            bias: if cfg.bias { Some(store.expect(&format!("{prefix}.bias"), &[n])?) } else { None },
        })
    }

    pub fn config(&self) -> &LinearDynConfig {
        &self.cfg
    }

    pub fn a(&self) -> ParamId {
        self.a
    }

    pub fn b(&self) -> ParamId {
        self.b
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, state: Var, control: Var) -> Result<Var> {
        check_width(tape, state, self.cfg.lifted_dim, "linear dynamics state")?;
        check_width(tape, control, self.cfg.control_dim, "linear dynamics control")?;
        let a = tape.param(self.a);
        let b = tape.param(self.b);
        let ax = tape.matmul_t(state, a)?;
        let out = match self.bias {
            Some(bias) => {
                let bias = tape.param(bias);
                tape.affine(control, b, bias)?
            }
            None => tape.matmul(control, b)?,
        };
        tape.add(ax, out)
    }
}
