//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every operation appends a node holding its value and whatever it needs
//! for the backward sweep. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients additively, so a value consumed by several
//! operations receives the sum of all contributions.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Standardization offset inside [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` in the loss.
pub const BCE_CLAMP: f64 = 1e-7;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    LinearSum {
        terms: Vec<Term>,
        bias: Option<Var>,
        relu: bool,
    },
    MatMul { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Concat { parts: Vec<Var> },
    Gather { x: Var, index: Arc<Vec<usize>> },
    ScatterAdd { x: Var, index: Arc<Vec<usize>> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    Reshape { x: Var },
    SoftMaximum { x: Var, tau: f64, probs: Vec<f64> },
    Bce {
        p: Var,
        labels: Arc<Tensor>,
        weights: Option<Arc<Vec<f64>>>,
    },
}

/// One summand of [`Tape::linear_sum`].
#[derive(Debug, Clone)]
pub enum Term {
    /// `x · W^T`, as in [`Tape::affine`].
    Affine(Var, Var),
    /// Rows of `x` picked by an index, as in [`Tape::gather_rows`].
    Gathered(Var, Arc<Vec<usize>>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is confined to one thread; independent tapes may run concurrently.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are only produced for inputs created with
    /// `requires_grad`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.input_shared(Arc::new(value), requires_grad)
    }

    /// Records a shared input without copying it.
    pub fn input_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index]
    }

    fn check(&self, v: Var) -> Result<(), DiffError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(DiffError::InputNotOnTape);
        }
        Ok(())
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// `y = x · W^T + b` with `W: [out x in]`, `b: [out]`, `x: [... x in]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, DiffError> {
        for v in [Some(x), Some(w), b].into_iter().flatten() {
            self.check(v)?;
        }
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[1] || xv.shape().is_empty() {
            return Err(DiffError::ShapeMismatch(format!(
                "affine: x {:?} against W {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[0]);
        let mut out = vec![0.0; m * n];
        let beta = if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return Err(DiffError::ShapeMismatch(format!(
                    "affine: bias {:?} for {} outputs",
                    bv.shape(),
                    n
                )));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv.data());
            }
            1.0
        } else {
            0.0
        };
        gemm(m, k, n, xv.data(), k, 1, wv.data(), 1, k, beta, &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Arc::new(Tensor::new(shape, out)?), Op::Affine { x, w, b }, rg))
    }

    /// Matrix product of `a: [m x k]` and `b: [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(DiffError::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), k, 1, bv.data(), n, 1, 0.0, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Arc::new(Tensor::new(vec![m, n], out)?),
            Op::MatMul { a, b },
            rg,
        ))
    }

    /// `sum(terms) + b`, optionally through a ReLU, as one recorded value.
    /// Equivalent to chaining affine, gather, add and relu, without keeping
    /// the intermediates.
    pub fn linear_sum(&mut self, terms: &[Term], bias: Option<Var>, relu: bool) -> Result<Var, DiffError> {
        let mut dims = None;
        for t in terms {
            let d = match t {
                Term::Affine(x, w) => {
                    self.check(*x)?;
                    self.check(*w)?;
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if wv.shape().len() != 2 || xv.shape().len() != 2 || xv.cols() != wv.shape()[1] {
                        return Err(DiffError::ShapeMismatch(format!(
                            "linear_sum: x {:?} against W {:?}",
                            xv.shape(),
                            wv.shape()
                        )));
                    }
                    (xv.rows(), wv.shape()[0])
                }
                Term::Gathered(x, index) => {
                    self.check(*x)?;
                    let xv = self.value(*x);
                    if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows()) {
                        return Err(DiffError::ShapeMismatch(format!(
                            "linear_sum: gather row {bad} of {}",
                            xv.rows()
                        )));
                    }
                    (index.len(), xv.cols())
                }
            };
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(DiffError::ShapeMismatch(format!(
                        "linear_sum: term {d:?} against {prev:?}"
                    )))
                }
                _ => {}
            }
        }
        let (m, n) = dims.ok_or_else(|| DiffError::ShapeMismatch("linear_sum of nothing".into()))?;
        let mut out = vec![0.0; m * n];
        if let Some(b) = bias {
            self.check(b)?;
            let bv = self.value(b);
            if bv.len() != n {
                return Err(DiffError::ShapeMismatch(format!(
                    "linear_sum: bias {:?} for {n} outputs",
                    bv.shape()
                )));
            }
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        for t in terms {
            match t {
                Term::Affine(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let k = xv.cols();
                    gemm(m, k, n, xv.data(), k, 1, wv.data(), 1, k, 1.0, &mut out);
                }
                Term::Gathered(x, index) => {
                    let xv = self.value(*x).data();
                    for (o, &i) in out.chunks_exact_mut(n).zip(index.iter()) {
                        for (a, b) in o.iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                            *a += b;
                        }
                    }
                }
            }
        }
        if relu {
            for v in &mut out {
                *v = v.max(0.0);
            }
        }
        let mut inputs: Vec<Var> = bias.into_iter().collect();
        for t in terms {
            match t {
                Term::Affine(x, w) => inputs.extend([*x, *w]),
                Term::Gathered(x, _) => inputs.push(*x),
            }
        }
        let rg = self.any_grad(&inputs);
        let op = Op::LinearSum {
            terms: terms.to_vec(),
            bias,
            relu,
        };
        Ok(self.push(Arc::new(Tensor::new(vec![m, n], out)?), op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Arc::new(out), Op::Relu { x }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Arc::new(out), Op::Sigmoid { x }, rg))
    }

    /// Per-row standardization over the last axis (population variance),
    /// followed by an elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, DiffError> {
        for v in [x, gain, bias] {
            self.check(v)?;
        }
        let xv = self.value(x);
        let f = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if f == 0 || gv.len() != f || bv.len() != f {
            return Err(DiffError::ShapeMismatch(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * f];
        let mut out = vec![0.0; rows * f];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = &mut xhat[r * f..(r + 1) * f];
            let o = &mut out[r * f..(r + 1) * f];
            for j in 0..f {
                xh[j] = (row[j] - mean) * is;
                o[j] = xh[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: Tensor::new(shape.clone(), xhat)?,
            inv_std,
        };
        Ok(self.push(Arc::new(Tensor::new(shape, out)?), op, rg))
    }

    /// Concatenates along the last axis; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::ShapeMismatch("concat of nothing".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows || v.shape().len() != 2 {
                return Err(DiffError::ShapeMismatch(format!(
                    "concat: part {:?} against {} rows",
                    v.shape(),
                    rows
                )));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Arc::new(Tensor::new(vec![rows, total], out)?),
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = x[index[i]]` row-wise.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var, DiffError> {
        self.check(x)?;
        let xv = self.value(x);
        let (rows, f) = (xv.rows(), xv.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(DiffError::ShapeMismatch(format!(
                "gather: row {bad} of {rows}"
            )));
        }
        let mut out = vec![0.0; index.len() * f];
        for (o, &i) in out.chunks_exact_mut(f.max(1)).zip(index.iter()) {
            o.copy_from_slice(&xv.data()[i * f..(i + 1) * f]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Arc::new(Tensor::new(vec![index.len(), f], out)?),
            Op::Gather { x, index },
            rg,
        ))
    }

    /// `out[index[i]] += x[i]` into `out_rows` zero-initialised rows.
    pub fn scatter_add_rows(
        &mut self,
        x: Var,
        index: Arc<Vec<usize>>,
        out_rows: usize,
    ) -> Result<Var, DiffError> {
        self.check(x)?;
        let xv = self.value(x);
        let f = xv.cols();
        if xv.rows() != index.len() || index.iter().any(|&i| i >= out_rows) {
            return Err(DiffError::ShapeMismatch(format!(
                "scatter_add: {} rows, {} indices, {} targets",
                xv.rows(),
                index.len(),
                out_rows
            )));
        }
        let mut out = vec![0.0; out_rows * f];
        for (r, &i) in index.iter().enumerate() {
            let src = &xv.data()[r * f..(r + 1) * f];
            for (o, s) in out[i * f..(i + 1) * f].iter_mut().zip(src) {
                *o += s;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Arc::new(Tensor::new(vec![out_rows, f], out)?),
            Op::ScatterAdd { x, index },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), DiffError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(DiffError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Arc::new(out), Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Arc::new(out), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, DiffError> {
        self.check(x)?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Arc::new(out), Op::Scale { x, factor }, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        Ok(self.push(Arc::new(Tensor::scalar(s)), Op::Sum { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        self.check(x)?;
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Arc::new(out), Op::Reshape { x }, rg))
    }

    /// Temperature-softmax weighted mean of all entries:
    /// `sum_i x_i e^{x_i/tau} / sum_j e^{x_j/tau}`.
    pub fn soft_maximum(&mut self, x: Var, tau: f64) -> Result<Var, DiffError> {
        self.check(x)?;
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(DiffError::NonPositiveTemperature(tau));
        }
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(DiffError::EmptyVector);
        }
        let (value, probs) = soft_maximum_with_weights(xv.data(), tau);
        let rg = self.requires_grad(x);
        Ok(self.push(
            Arc::new(Tensor::scalar(value)),
            Op::SoftMaximum { x, tau, probs },
            rg,
        ))
    }

    /// Mean binary cross-entropy between probabilities `p` and 0/1 labels.
    pub fn binary_cross_entropy(&mut self, p: Var, labels: Arc<Tensor>) -> Result<Var, DiffError> {
        self.bce(p, labels, None)
    }

    /// `sum_i weights_i * BCE_i`; with weights `1/n` this is the plain mean.
    pub fn weighted_binary_cross_entropy(
        &mut self,
        p: Var,
        labels: Arc<Tensor>,
        weights: Arc<Vec<f64>>,
    ) -> Result<Var, DiffError> {
        self.bce(p, labels, Some(weights))
    }

    fn bce(
        &mut self,
        p: Var,
        labels: Arc<Tensor>,
        weights: Option<Arc<Vec<f64>>>,
    ) -> Result<Var, DiffError> {
        self.check(p)?;
        let pv = self.value(p);
        if pv.len() != labels.len() || weights.as_ref().is_some_and(|w| w.len() != pv.len()) {
            return Err(DiffError::ShapeMismatch(format!(
                "binary_cross_entropy: predictions {:?}, labels {:?}",
                pv.shape(),
                labels.shape()
            )));
        }
        if pv.is_empty() {
            return Err(DiffError::EmptyVector);
        }
        let uniform = 1.0 / pv.len() as f64;
        let mut loss = 0.0;
        for (i, (&q, &y)) in pv.data().iter().zip(labels.data()).enumerate() {
            let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let w = weights.as_ref().map_or(uniform, |w| w[i]);
            loss -= w * (y * q.ln() + (1.0 - y) * (1.0 - q).ln());
        }
        let rg = self.requires_grad(p);
        Ok(self.push(
            Arc::new(Tensor::scalar(loss)),
            Op::Bce { p, labels, weights },
            rg,
        ))
    }

    /// Gradients of a scalar output with respect to every recorded value that
    /// requires them.
    pub fn backward(&self, output: Var) -> Result<Gradients, DiffError> {
        self.check(output)?;
        if self.value(output).len() != 1 {
            return Err(DiffError::NotScalarOutput(
                self.value(output).shape().to_vec(),
            ));
        }
        self.backward_with_seed(output, Tensor::filled(self.value(output).shape(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// backwards.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients, DiffError> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(DiffError::ShapeMismatch(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.index] = Some(seed);
        for i in (0..=output.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // Only leaf gradients are kept; intermediate ones are dropped
            // once propagated.
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.index] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn affine_back(&self, x: Var, w: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[0]);
        if self.wants(x) {
            let mut dx = vec![0.0; m * k];
            gemm(m, n, k, g.data(), n, 1, wv.data(), k, 1, 0.0, &mut dx);
            let dx = Tensor::new(xv.shape().to_vec(), dx).unwrap();
            self.accumulate(grads, x, dx);
        }
        if self.wants(w) {
            let mut dw = vec![0.0; n * k];
            gemm(n, m, k, g.data(), 1, n, xv.data(), k, 1, 0.0, &mut dw);
            let dw = Tensor::new(wv.shape().to_vec(), dw).unwrap();
            self.accumulate(grads, w, dw);
        }
    }

    fn bias_back(&self, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let n = g.cols();
        let mut db = vec![0.0; n];
        for row in g.data().chunks_exact(n) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        let db = Tensor::new(self.value(b).shape().to_vec(), db).unwrap();
        self.accumulate(grads, b, db);
    }

    fn gather_back(&self, x: Var, index: &[usize], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = self.value(x);
        let f = xv.cols();
        let mut dx = vec![0.0; xv.len()];
        for (r, &i) in index.iter().enumerate() {
            let src = &g.data()[r * f..(r + 1) * f];
            for (o, s) in dx[i * f..(i + 1) * f].iter_mut().zip(src) {
                *o += s;
            }
        }
        let dx = Tensor::new(xv.shape().to_vec(), dx).unwrap();
        self.accumulate(grads, x, dx);
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                self.affine_back(*x, *w, g, grads);
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    self.bias_back(b, g, grads);
                }
            }
            Op::LinearSum { terms, bias, relu } => {
                let masked;
                let g = if *relu {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &d)| if y > 0.0 { d } else { 0.0 })
                        .collect();
                    masked = Tensor::new(g.shape().to_vec(), data).unwrap();
                    &masked
                } else {
                    g
                };
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    self.bias_back(b, g, grads);
                }
                for t in terms {
                    match t {
                        Term::Affine(x, w) => self.affine_back(*x, *w, g, grads),
                        Term::Gathered(x, index) => {
                            if self.wants(*x) {
                                self.gather_back(*x, index, g, grads);
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), n, 1, bv.data(), 1, n, 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), 1, k, g.data(), n, 1, 0.0, &mut db);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Relu { x } => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &d)| if y > 0.0 { d } else { 0.0 })
                    .collect();
                let dx = Tensor::new(g.shape().to_vec(), data).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &d)| d * s * (1.0 - s))
                    .collect();
                let dx = Tensor::new(g.shape().to_vec(), data).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let f = xhat.cols();
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    let mut dxh = vec![0.0; f];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * f..(r + 1) * f;
                        let (gy, xh) = (&g.data()[span.clone()], &xhat.data()[span.clone()]);
                        let mut sum = 0.0;
                        let mut dot = 0.0;
                        for j in 0..f {
                            dxh[j] = gy[j] * gv[j];
                            sum += dxh[j];
                            dot += dxh[j] * xh[j];
                        }
                        let scale = is / f as f64;
                        for (j, out) in dx[span].iter_mut().enumerate() {
                            *out = scale * (f as f64 * dxh[j] - sum - xh[j] * dot);
                        }
                    }
                    let dx = Tensor::new(xhat.shape().to_vec(), dx).unwrap();
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; f];
                    let mut db = vec![0.0; f];
                    for (gy, xh) in g.data().chunks_exact(f).zip(xhat.data().chunks_exact(f)) {
                        for j in 0..f {
                            dg[j] += gy[j] * xh[j];
                            db[j] += gy[j];
                        }
                    }
                    if self.wants(*gain) {
                        let shape = self.value(*gain).shape().to_vec();
                        self.accumulate(grads, *gain, Tensor::new(shape, dg).unwrap());
                    }
                    if self.wants(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        self.accumulate(grads, *bias, Tensor::new(shape, db).unwrap());
                    }
                }
            }
            Op::Concat { parts } => {
                let total = g.cols();
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w].copy_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        let shape = self.value(p).shape().to_vec();
                        self.accumulate(grads, p, Tensor::new(shape, dp).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Gather { x, index } => self.gather_back(*x, index, g, grads),
            Op::ScatterAdd { x, index } => {
                let xv = self.value(*x);
                let f = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, &i) in index.iter().enumerate() {
                    dx[r * f..(r + 1) * f].copy_from_slice(&g.data()[i * f..(i + 1) * f]);
                }
                let dx = Tensor::new(xv.shape().to_vec(), dx).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for (v, other) in [(*a, bv), (*b, av)] {
                    if self.wants(v) {
                        let data = g.data().iter().zip(other.data()).map(|(d, o)| d * o).collect();
                        let d = Tensor::new(g.shape().to_vec(), data).unwrap();
                        self.accumulate(grads, v, d);
                    }
                }
            }
            Op::Scale { x, factor } => {
                let data = g.data().iter().map(|d| d * factor).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Sum { x } => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::filled(shape, g.item()));
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(shape).unwrap());
            }
            Op::SoftMaximum { x, tau, probs } => {
                let xv = self.value(*x);
                let f = node.value.item();
                let seed = g.item();
                let data = xv
                    .data()
                    .iter()
                    .zip(probs)
                    .map(|(&xi, &p)| seed * p * (1.0 + (xi - f) / tau))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Bce { p, labels, weights } => {
                let pv = self.value(*p);
                let uniform = 1.0 / pv.len() as f64;
                let seed = g.item();
                let data = pv
                    .data()
                    .iter()
                    .zip(labels.data())
                    .enumerate()
                    .map(|(i, (&q, &y))| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&q) {
                            return 0.0;
                        }
                        let w = weights.as_ref().map_or(uniform, |w| w[i]);
                        seed * w * (-y / q + (1.0 - y) / (1.0 - q))
                    })
                    .collect();
                self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), data).unwrap());
            }
        }
    }
}

/// Result of a backward sweep. Holds gradients for leaf values only.
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled if nothing flowed into it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Result<Tensor, DiffError> {
        tape.check(v)?;
        if v.tape != self.tape || !tape.requires_grad(v) {
            return Err(DiffError::InputNotOnTape);
        }
        Ok(self
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
    }

    /// Moves the gradient out, leaving nothing behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value of the temperature-softmax maximum and the softmax weights.
pub(crate) fn soft_maximum_with_weights(x: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = x.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let z: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= z);
    // Offsets from the max keep equal inputs exact.
    let value = m + x.iter().zip(&weights).map(|(v, w)| (v - m) * w).sum::<f64>();
    (value, weights)
}
