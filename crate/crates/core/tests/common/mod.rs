//! Shared helpers for integration tests: a central-difference gradient oracle.
#![allow(dead_code)]

use koopman::autodiff::{ParamStore, Tape, Var};
use koopman::rng::{self, Rng};
use koopman::{Result, Tensor};

pub const FD_STEP: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub type Build<'a> = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + 'a;

/// A scalar function of parameters and inputs, evaluated in 64 bits.
pub struct Problem<'a> {
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build<'a>>,
}

#[derive(Debug, Clone, Copy)]
pub struct FdSummary {
    pub probes: usize,
    pub redraws: usize,
    pub max_rel_err: f64,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

impl<'a> Problem<'a> {
    fn eval(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Option<(f64, Vec<bool>)> {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars).ok()?;
        Some((tape.scalar(out), tape.relu_signature()))
    }

    fn analytic(&self) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
        let mut tape = Tape::new(&self.store);
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars).expect("problem builds");
        let grads = tape.backward_scalar(out).expect("backward");
        let wrt = vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.dims())))
            .collect();
        (grads.into_dense(&self.store), wrt)
    }

    /// Compares analytic and central-difference derivatives on `probes` random coordinates.
    /// Probes whose ±h evaluations cross a relu kink, or leave the feasible set
    /// of a constrained weight, are redrawn.
    pub fn check(&self, probes: usize, seed: u64) -> FdSummary {
        let (pgrad, igrad) = self.analytic();
        let (_, sig0) = self.eval(&self.store, &self.inputs).expect("problem builds");
        let n_param: usize = pgrad.iter().map(|t| t.len()).sum();
        let n_input: usize = igrad.iter().map(|t| t.len()).sum();
        let total = n_param + n_input;
        assert!(total > 0);
        let mut r: Rng = rng::seeded(seed);
        let mut summary = FdSummary { probes: 0, redraws: 0, max_rel_err: 0.0 };
        while summary.probes < probes {
            let k = rng::index(&mut r, total);
            let (analytic, plus, minus) = if k < n_param {
                let (tensor, offset) = locate(&pgrad, k);
                let perturb = |delta: f64| {
                    let mut s = self.store.clone();
                    let p = s.iter_mut().nth(tensor).unwrap();
                    p.tensor.data_mut()[offset] += delta;
                    self.eval(&s, &self.inputs)
                };
                (pgrad[tensor].data()[offset], perturb(FD_STEP), perturb(-FD_STEP))
            } else {
                let (tensor, offset) = locate(&igrad, k - n_param);
                let perturb = |delta: f64| {
                    let mut inputs = self.inputs.clone();
                    inputs[tensor].data_mut()[offset] += delta;
                    self.eval(&self.store, &inputs)
                };
                (igrad[tensor].data()[offset], perturb(FD_STEP), perturb(-FD_STEP))
            };
            let (Some(plus), Some(minus)) = (plus, minus) else {
                summary.redraws += 1;
                assert!(summary.redraws < 50 * probes, "too many infeasible probes");
                continue;
            };
            if plus.1 != sig0 || minus.1 != sig0 {
                summary.redraws += 1;
                assert!(summary.redraws < 50 * probes, "too many probes land on relu kinks");
                continue;
            }
            let numeric = (plus.0 - minus.0) / (2.0 * FD_STEP);
            summary.max_rel_err = summary.max_rel_err.max(rel_err(analytic, numeric));
            summary.probes += 1;
        }
        summary
    }
}

fn locate(tensors: &[Tensor<f64>], mut k: usize) -> (usize, usize) {
    for (i, t) in tensors.iter().enumerate() {
        if k < t.len() {
            return (i, k);
        }
        k -= t.len();
    }
    unreachable!("coordinate out of range")
}

pub fn random_tensor(r: &mut Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng::uniform(r, -scale, scale)).collect()).unwrap()
}
