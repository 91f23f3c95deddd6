//! Reverse-mode tape over batch-major matrices.
//!
//! Values are `[batch × features]` matrices (vectors are treated as a single
//! row). Every operation appends a node whose inputs are strictly earlier
//! nodes, so the node list is already in topological order and the backward
//! sweep simply walks it in reverse.

use std::collections::HashMap;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => relu(x),
            Activation::Softplus => softplus(x),
        }
    }
}

#[inline]
pub fn relu<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x
    } else {
        S::zero()
    }
}

/// `log(1 + eˣ)`, switching to `x + log(1 + e⁻ˣ)` above 20 to avoid overflow.
#[inline]
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::from_f64_lossy(20.0) {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Softplus value and its derivative (the logistic sigmoid) from one `exp`.
#[inline]
fn softplus_and_slope<S: Scalar>(x: S) -> (S, S) {
    let one = S::one();
    if x > S::from_f64_lossy(20.0) {
        let e = (-x).exp();
        (x + e.ln_1p(), one / (one + e))
    } else {
        let e = x.exp();
        (e.ln_1p(), e / (one + e))
    }
}

/// Applies an activation to every element of a tensor.
pub fn activate<S: Scalar>(input: &Tensor<S>, kind: Activation) -> Tensor<S> {
    input.map(|v| kind.apply(v))
}

#[derive(Debug)]
enum Op<S> {
    Input,
    Param(ParamId),
    /// `x·W (+ b)`; with `w_t` the stored weight is used transposed.
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
        w_t: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Softplus {
        x: Var,
        slope: Vec<S>,
    },
    Concat(Vec<Var>),
    Cols {
        x: Var,
        start: usize,
    },
    /// `scale·Σ(x − target)²`
    SqErr {
        x: Var,
        target: Vec<S>,
        scale: f64,
    },
    /// `scale·Σ max(0, |x| − bound)²`
    Bound {
        x: Var,
        bound: S,
        scale: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Affine { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(x) | Op::Softplus { x, .. } | Op::Cols { x, .. } => vec![*x],
            Op::SqErr { x, .. } | Op::Bound { x, .. } => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::WeightedSum(terms) => terms.iter().map(|t| t.0).collect(),
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    /// Exact 64-bit value for loss nodes.
    loss: Option<f64>,
}

/// Records a forward computation over the parameters of one [`ParamStore`].
pub struct Tape<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Loss value in 64-bit precision. Falls back to the stored scalar for non-loss nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.loss.unwrap_or_else(|| node.value.data()[0].to_f64_lossy())
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Var {
        self.push_loss(op, value, None)
    }

    fn push_loss(&mut self, op: Op<S>, value: Tensor<S>, loss: Option<f64>) -> Var {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, value, loss });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf. Gradients with respect to it are still reported.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Input, value)
    }

    /// Copies a value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    /// Leaf for a parameter; repeated calls return the same node so that
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(Op::Param(id), value);
        self.param_nodes.insert(id, v);
        v
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn affine_impl(&mut self, x: Var, w: Var, b: Option<Var>, w_t: bool) -> Result<Var> {
        let (batch, xin) = self.shape(x);
        let (wr, wc) = self.shape(w);
        let (win, wout) = if w_t { (wc, wr) } else { (wr, wc) };
        if xin != win {
            return Err(Error::Config(format!("affine: input width {xin} does not match weight fan-in {win}")));
        }
        let mut out = vec![S::zero(); batch * wout];
        let mut beta = S::zero();
        if let Some(b) = b {
            let bias = self.nodes[b.0].value.data();
            if bias.len() != wout {
                return Err(Error::Config(format!(
                    "affine: bias length {} does not match output width {wout}",
                    bias.len()
                )));
            }
            for row in out.chunks_exact_mut(wout) {
                row.copy_from_slice(bias);
            }
            beta = S::one();
        }
        let xm = MatRef::new(self.nodes[x.0].value.data(), batch, xin);
        let wm = MatRef::new(self.nodes[w.0].value.data(), wr, wc);
        gemm(xm, if w_t { wm.t() } else { wm }, beta, &mut out);
        Ok(self.push(Op::Affine { x, w, b, w_t }, Tensor::from_parts_unchecked(vec![batch, wout], out)))
    }

    /// `x·W + b` with `x: [B×I]`, `W: [I×O]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.affine_impl(x, w, Some(b), false)
    }

    /// `x·W` without bias.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.affine_impl(x, w, None, false)
    }

    /// `x·Wᵀ` without bias, for weights stored as `[O×I]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        self.affine_impl(x, w, None, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (da, db) = (self.nodes[a.0].value.dims(), self.nodes[b.0].value.dims());
        if self.shape(a) != self.shape(b) {
            return Err(Error::Config(format!("{what}: shapes {da:?} and {db:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts_unchecked(va.dims().to_vec(), data);
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts_unchecked(va.dims().to_vec(), data);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(relu);
        self.push(Op::Relu(x), out)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let input = &self.nodes[x.0].value;
        let mut slope = Vec::with_capacity(input.len());
        let mut data = Vec::with_capacity(input.len());
        for &v in input.data() {
            let (y, s) = softplus_and_slope(v);
            data.push(y);
            slope.push(s);
        }
        let out = Tensor::from_parts_unchecked(input.dims().to_vec(), data);
        self.push(Op::Softplus { x, slope }, out)
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Softplus => self.softplus(x),
        }
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Config("concat of zero tensors".into()));
        };
        let rows = self.shape(first).0;
        let mut width = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::Config(format!("concat: row counts {rows} and {r} differ")));
            }
            width += c;
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let out = Tensor::from_parts_unchecked(vec![rows, width], data);
        Ok(self.push(Op::Concat(parts.to_vec()), out))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if len == 0 || start + len > cols {
            return Err(Error::Config(format!("cols: range {start}..{} outside width {cols}", start + len)));
        }
        let src = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..start + len]);
        }
        let out = Tensor::from_parts_unchecked(vec![rows, len], data);
        Ok(self.push(Op::Cols { x, start }, out))
    }

    /// `scale·Σ(x − target)²`, accumulated in 64-bit.
    pub fn sum_sq_err(&mut self, x: Var, target: &Tensor<S>, scale: f64) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.len() != target.len() || self.shape(x) != (target.rows(), target.cols()) {
            return Err(Error::Config(format!(
                "squared error: prediction {:?} vs target {:?}",
                v.dims(),
                target.dims()
            )));
        }
        let total: f64 = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a.to_f64_lossy() - b.to_f64_lossy();
                d * d
            })
            .sum::<f64>()
            * scale;
        let out = Tensor::from_parts_unchecked(vec![1], vec![S::from_f64_lossy(total)]);
        Ok(self.push_loss(Op::SqErr { x, target: target.data().to_vec(), scale }, out, Some(total)))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, x: Var, target: &Tensor<S>) -> Result<Var> {
        let n = target.len() as f64;
        self.sum_sq_err(x, target, 1.0 / n)
    }

    /// `scale·Σ max(0, |x| − bound)²`, accumulated in 64-bit.
    pub fn bound_penalty(&mut self, x: Var, bound: f64, scale: f64) -> Var {
        let v = &self.nodes[x.0].value;
        let total: f64 = v
            .data()
            .iter()
            .map(|&a| {
                let e = (a.to_f64_lossy().abs() - bound).max(0.0);
                e * e
            })
            .sum::<f64>()
            * scale;
        let out = Tensor::from_parts_unchecked(vec![1], vec![S::from_f64_lossy(total)]);
        self.push_loss(Op::Bound { x, bound: S::from_f64_lossy(bound), scale }, out, Some(total))
    }

    /// `Σ wᵢ·termᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.nodes[v.0].value.len() != 1 {
                return Err(Error::Config("weighted_sum expects scalar terms".into()));
            }
            total += w * self.scalar(v);
        }
        let out = Tensor::from_parts_unchecked(vec![1], vec![S::from_f64_lossy(total)]);
        Ok(self.push_loss(Op::WeightedSum(terms.to_vec()), out, Some(total)))
    }

    /// True if every node's inputs precede it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| n.op.inputs().iter().all(|v| v.0 < i))
    }

    /// Signs of every relu pre-activation, in tape order. Two forward passes
    /// with equal signatures lie in the same linear piece of the network.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(x) = n.op {
                sig.extend(self.nodes[x.0].value.data().iter().map(|&v| v > S::zero()));
            }
        }
        sig
    }

    /// Backward pass from a scalar loss node with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<S>> {
        self.backward(output, Tensor::full(&[1], S::one()))
    }

    /// Propagates `seed = dL/d(output)` back through the tape.
    pub fn backward(&self, output: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called before the output was recorded on this tape".into()));
        }
        let out_val = &self.nodes[output.0].value;
        if seed.len() != out_val.len() {
            return Err(Error::Config(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.dims(),
                out_val.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed.into_data());

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            let leaf = matches!(node.op, Op::Input | Op::Param(_));
            if leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let mut by_param: Vec<Option<Tensor<S>>> = vec![None; self.params.len()];
        let mut leaves = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &self.nodes[i];
            let t = Tensor::from_parts_unchecked(node.value.dims().to_vec(), g);
            match node.op {
                Op::Param(id) => by_param[id.0] = Some(t),
                Op::Input => {
                    leaves.insert(i, t);
                }
                _ => {}
            }
        }
        Ok(Gradients { by_param, leaves })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Affine { x, w, b, w_t } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (batch, xin) = (xv.rows(), xv.cols());
                let (wr, wc) = (wv.rows(), wv.cols());
                let wout = if *w_t { wr } else { wc };
                let gm = MatRef::new(g, batch, wout);
                let xm = MatRef::new(xv.data(), batch, xin);
                let wm = MatRef::new(wv.data(), wr, wc);
                // dX = G·Wᵀ (or G·W when the stored weight is already transposed)
                accumulate(grads, *x, batch * xin, |buf, beta| gemm(gm, if *w_t { wm } else { wm.t() }, beta, buf));
                // dW = Xᵀ·G, or Gᵀ·X for the transposed layout
                accumulate(grads, *w, wr * wc, |buf, beta| {
                    if *w_t {
                        gemm(gm.t(), xm, beta, buf)
                    } else {
                        gemm(xm.t(), gm, beta, buf)
                    }
                });
                if let Some(b) = b {
                    accumulate(grads, *b, wout, |buf, beta| {
                        for v in buf.iter_mut() {
                            *v = *v * beta;
                        }
                        for row in g.chunks_exact(wout) {
                            for (acc, &gv) in buf.iter_mut().zip(row) {
                                *acc = *acc + gv;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g);
                add_into(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let ga: Vec<S> = g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                let gb: Vec<S> = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                add_into(grads, *a, &ga);
                add_into(grads, *b, &gb);
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                let gx: Vec<S> = g.iter().zip(xv).map(|(&gv, &v)| if v > S::zero() { gv } else { S::zero() }).collect();
                add_into(grads, *x, &gx);
            }
            Op::Softplus { x, slope } => {
                let gx: Vec<S> = g.iter().zip(slope).map(|(&gv, &s)| gv * s).collect();
                add_into(grads, *x, &gx);
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let width = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    let mut gp = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * width + offset..r * width + offset + pc]);
                    }
                    add_into(grads, p, &gp);
                    offset += pc;
                }
            }
            Op::Cols { x, start } => {
                let xv = &self.nodes[x.0].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let len = node.value.cols();
                let slot = grads[x.0].get_or_insert_with(|| vec![S::zero(); rows * cols]);
                for r in 0..rows {
                    for c in 0..len {
                        let d = &mut slot[r * cols + start + c];
                        *d = *d + g[r * len + c];
                    }
                }
            }
            Op::SqErr { x, target, scale } => {
                let xv = self.nodes[x.0].value.data();
                let k = g[0] * S::from_f64_lossy(2.0 * scale);
                let gx: Vec<S> = xv.iter().zip(target).map(|(&a, &t)| k * (a - t)).collect();
                add_into(grads, *x, &gx);
            }
            Op::Bound { x, bound, scale } => {
                let xv = self.nodes[x.0].value.data();
                let k = g[0] * S::from_f64_lossy(2.0 * scale);
                let gx: Vec<S> = xv
                    .iter()
                    .map(|&a| {
                        let excess = a.abs() - *bound;
                        if excess > S::zero() {
                            k * excess * a.signum()
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                add_into(grads, *x, &gx);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    add_into(grads, v, &[g[0] * S::from_f64_lossy(w)]);
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], target: Var, len: usize, f: impl FnOnce(&mut [S], S)) {
    match &mut grads[target.0] {
        Some(buf) => f(buf, S::one()),
        slot @ None => {
            let mut buf = vec![S::zero(); len];
            f(&mut buf, S::zero());
            *slot = Some(buf);
        }
    }
}

fn add_into<S: Scalar>(grads: &mut [Option<Vec<S>>], target: Var, g: &[S]) {
    match &mut grads[target.0] {
        Some(buf) => {
            for (acc, &v) in buf.iter_mut().zip(g) {
                *acc = *acc + v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    by_param: Vec<Option<Tensor<S>>>,
    leaves: HashMap<usize, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a parameter, `None` if it did not influence the output.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.by_param[id.0].as_ref()
    }

    /// Gradient with respect to an input leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&v.0)
    }

    /// One gradient per parameter in store order; unused parameters get zeros.
    pub fn into_dense(self, store: &ParamStore<S>) -> Vec<Tensor<S>> {
        self.by_param
            .into_iter()
            .zip(store.iter())
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.tensor.dims())))
            .collect()
    }
}
