//! Define-by-run tape.
//!
//! Every op computes its value eagerly and records what it needs for the
//! vector-Jacobian product. [`Tape::backward`] walks the nodes in reverse
//! creation order exactly once, so the recorded graph is acyclic by
//! construction.

use crate::conv::{self, ConvCache, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::{contract_modes, DenseTensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Contract {
        x: Var,
        y: Var,
        pairs: Vec<(usize, usize)>,
    },
    SelectRow(Var, usize),
    MulBroadcast {
        x: Var,
        v: Var,
        axis: usize,
    },
    AddBroadcast {
        x: Var,
        v: Var,
        axis: usize,
    },
    KhatriRao(Var, Var),
    Conv {
        x: Var,
        w: Var,
        cache: ConvCache,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        cache: ConvCache,
    },
    LeakyRelu(Var, f64),
    NormalizeLast {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    SumAll(Var),
    SumLast(Var),
    Concat(Vec<Var>, usize),
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&DenseTensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros of the node's shape when unreachable from the loss.
    pub fn wrt(&self, var: Var) -> DenseTensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => DenseTensor::zeros(&self.shapes[var.0]).expect("recorded shape is valid"),
        }
    }

    pub fn take(&mut self, var: Var) -> Option<DenseTensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(t: &DenseTensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn softmax_along(x: &DenseTensor, axis: usize, log: bool) -> DenseTensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n).fold(f64::NEG_INFINITY, |m, c| m.max(out[base + c * inner]));
            let mut sum = 0.0;
            for c in 0..n {
                sum += (out[base + c * inner] - max).exp();
            }
            let lse = max + sum.ln();
            for c in 0..n {
                let v = &mut out[base + c * inner];
                *v = if log { *v - lse } else { (*v - lse).exp() };
            }
        }
    }
    DenseTensor::from_parts(x.shape().to_vec(), out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &DenseTensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: DenseTensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: DenseTensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: DenseTensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.derived(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.derived(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.derived(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.derived(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.derived(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.derived(v, Op::AddScalar(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.derived(v, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(perm)?;
        Ok(self.derived(v, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// See [`contract_modes`].
    pub fn contract(&mut self, x: Var, y: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let v = contract_modes(self.value(x), self.value(y), pairs)?;
        Ok(self.derived(
            v,
            Op::Contract {
                x,
                y,
                pairs: pairs.to_vec(),
            },
            &[x, y],
        ))
    }

    /// Slice `index` (0-based) along axis 0.
    pub fn select_row(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x).row(index)?;
        Ok(self.derived(v, Op::SelectRow(x, index), &[x]))
    }

    fn check_broadcast(&self, x: Var, v: Var, axis: usize) -> Result<()> {
        let (xt, vt) = (self.value(x), self.value(v));
        check_axis(xt, axis)?;
        if vt.rank() != 1 || vt.len() != xt.shape()[axis] {
            return Err(Error::Dimension(format!(
                "cannot broadcast {:?} along axis {axis} of {:?}",
                vt.shape(),
                xt.shape()
            )));
        }
        Ok(())
    }

    /// `y[..., c, ...] = x[..., c, ...] * v[c]` with `c` on `axis`.
    pub fn mul_broadcast(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.check_broadcast(x, v, axis)?;
        let (xt, vt) = (self.value(x), self.value(v));
        let (_, n, inner) = axis_split(xt.shape(), axis);
        let data = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a * vt.data()[(i / inner) % n])
            .collect();
        let out = DenseTensor::from_parts(xt.shape().to_vec(), data);
        Ok(self.derived(out, Op::MulBroadcast { x, v, axis }, &[x, v]))
    }

    /// `y[..., c, ...] = x[..., c, ...] + v[c]` with `c` on `axis`.
    pub fn add_broadcast(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.check_broadcast(x, v, axis)?;
        let (xt, vt) = (self.value(x), self.value(v));
        let (_, n, inner) = axis_split(xt.shape(), axis);
        let data = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + vt.data()[(i / inner) % n])
            .collect();
        let out = DenseTensor::from_parts(xt.shape().to_vec(), data);
        Ok(self.derived(out, Op::AddBroadcast { x, v, axis }, &[x, v]))
    }

    /// Column-wise Khatri-Rao product: `[P, R] x [Q, R] -> [P * Q, R]`.
    pub fn khatri_rao(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xt, yt) = (self.value(x), self.value(y));
        if xt.rank() != 2 || yt.rank() != 2 || xt.shape()[1] != yt.shape()[1] {
            return Err(Error::Dimension(format!(
                "Khatri-Rao needs [P, R] and [Q, R], got {:?} and {:?}",
                xt.shape(),
                yt.shape()
            )));
        }
        let (p, q, r) = (xt.shape()[0], yt.shape()[0], xt.shape()[1]);
        let mut data = Vec::with_capacity(p * q * r);
        for i in 0..p {
            let xr = &xt.data()[i * r..(i + 1) * r];
            for j in 0..q {
                let yr = &yt.data()[j * r..(j + 1) * r];
                data.extend(xr.iter().zip(yr).map(|(a, b)| a * b));
            }
        }
        let out = DenseTensor::from_parts(vec![p * q, r], data);
        Ok(self.derived(out, Op::KhatriRao(x, y), &[x, y]))
    }

    /// Convolution of `x: [B, C_in, spatial...]` with `w: [C_in, C_out, K]`.
    pub fn conv(&mut self, x: Var, w: Var, geom: &ConvGeometry) -> Result<Var> {
        let (v, cache) = conv::conv_forward(self.value(x), self.value(w), geom)?;
        Ok(self.derived(v, Op::Conv { x, w, cache }, &[x, w]))
    }

    /// Transposed convolution, the input-adjoint of [`Tape::conv`].
    pub fn conv_transpose(&mut self, x: Var, w: Var, geom: &ConvGeometry) -> Result<Var> {
        let (v, cache) = conv::conv_transpose_forward(self.value(x), self.value(w), geom)?;
        Ok(self.derived(v, Op::ConvTranspose { x, w, cache }, &[x, w]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.derived(v, Op::LeakyRelu(x, slope), &[x])
    }

    /// Sign pattern (`input > 0`) of every leaky-ReLU input, in recording
    /// order. Two evaluations with equal patterns lie on the same linear piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            if let Op::LeakyRelu(x, _) = n.op {
                sig.extend(self.value(x).data().iter().map(|&a| a > 0.0));
            }
        }
        sig
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// Standardizes every run along the last axis to zero mean and unit
    /// (biased) variance, with `eps` added to the variance.
    pub fn normalize_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let n = *xt.shape().last().unwrap();
        if n < 2 {
            return Err(Error::Dimension(format!(
                "normalization over a single element is degenerate (shape {:?})",
                xt.shape()
            )));
        }
        let mut out = xt.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for run in out.chunks_mut(n) {
            let mean = run.iter().sum::<f64>() / n as f64;
            let var = run.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in run.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = DenseTensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.derived(out, Op::NormalizeLast { x, inv_std }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.value(x), axis)?;
        let v = softmax_along(self.value(x), axis, false);
        Ok(self.derived(v, Op::Softmax(x, axis), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.value(x), axis)?;
        let v = softmax_along(self.value(x), axis, true);
        Ok(self.derived(v, Op::LogSoftmax(x, axis), &[x]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = DenseTensor::scalar(self.value(x).sum());
        self.derived(v, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let n = *xt.shape().last().unwrap();
        let data: Vec<f64> = xt.data().chunks(n).map(|c| c.iter().sum()).collect();
        let mut shape = xt.shape()[..xt.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let v = DenseTensor::from_parts(shape, data);
        self.derived(v, Op::SumLast(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        check_axis(self.value(*first), axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Dimension(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = DenseTensor::from_parts(shape, data);
        Ok(self.derived(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Reverse pass from a scalar (`[1]`-shaped) loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<DenseTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseTensor::full(self.value(loss).shape(), 1.0)?);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        // Constants never get gradients.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<DenseTensor>], var: Var, g: DenseTensor) -> Result<()> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &DenseTensor,
        g: &DenseTensor,
        grads: &mut [Option<DenseTensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |d, y| d * y)?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |d, x| d * x)?)?;
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |d, y| d / y)?)?;
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = out.zip_map(bv, |z, y| -z / y)?;
                    self.accumulate(grads, *b, g.zip_map(&q, |d, s| d * s)?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape)?)?;
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, g.permute(&inv)?)?;
            }
            Op::Contract { x, y, pairs } => self.contract_backward(*x, *y, pairs, g, grads)?,
            Op::SelectRow(x, index) => {
                let xt = self.value(*x);
                let mut full = DenseTensor::zeros(xt.shape())?;
                let w = g.len();
                full.data_mut()[index * w..(index + 1) * w].copy_from_slice(g.data());
                self.accumulate(grads, *x, full)?;
            }
            Op::MulBroadcast { x, v, axis } => {
                let (xt, vt) = (self.value(*x), self.value(*v));
                let (_, n, inner) = axis_split(xt.shape(), *axis);
                if self.wants(*x) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| d * vt.data()[(i / inner) % n])
                        .collect();
                    self.accumulate(grads, *x, DenseTensor::from_parts(xt.shape().to_vec(), data))?;
                }
                if self.wants(*v) {
                    let mut dv = vec![0.0; n];
                    for (i, (&d, &a)) in g.data().iter().zip(xt.data()).enumerate() {
                        dv[(i / inner) % n] += d * a;
                    }
                    self.accumulate(grads, *v, DenseTensor::from_parts(vec![n], dv))?;
                }
            }
            Op::AddBroadcast { x, v, axis } => {
                self.accumulate(grads, *x, g.clone())?;
                if self.wants(*v) {
                    let (_, n, inner) = axis_split(g.shape(), *axis);
                    let mut dv = vec![0.0; n];
                    for (i, &d) in g.data().iter().enumerate() {
                        dv[(i / inner) % n] += d;
                    }
                    self.accumulate(grads, *v, DenseTensor::from_parts(vec![n], dv))?;
                }
            }
            Op::KhatriRao(x, y) => {
                let (xt, yt) = (self.value(*x), self.value(*y));
                let (p, q, r) = (xt.shape()[0], yt.shape()[0], xt.shape()[1]);
                let mut dx = vec![0.0; p * r];
                let mut dy = vec![0.0; q * r];
                for i in 0..p {
                    for j in 0..q {
                        let row = &g.data()[(i * q + j) * r..(i * q + j + 1) * r];
                        for c in 0..r {
                            dx[i * r + c] += row[c] * yt.data()[j * r + c];
                            dy[j * r + c] += row[c] * xt.data()[i * r + c];
                        }
                    }
                }
                self.accumulate(grads, *x, DenseTensor::from_parts(vec![p, r], dx))?;
                self.accumulate(grads, *y, DenseTensor::from_parts(vec![q, r], dy))?;
            }
            Op::Conv { x, w, cache } => {
                let (dx, dw) = conv::conv_backward(g, self.value(*x).shape(), self.value(*w), cache);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *w, dw)?;
            }
            Op::ConvTranspose { x, w, cache } => {
                let (dx, dw) =
                    conv::conv_transpose_backward(g, self.value(*x), self.value(*w), cache);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *w, dw)?;
            }
            Op::LeakyRelu(x, slope) => {
                let dx = g.zip_map(self.value(*x), |d, a| if a > 0.0 { d } else { slope * d })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::NormalizeLast { x, inv_std } => {
                let n = *out.shape().last().unwrap();
                let mut dx = vec![0.0; out.len()];
                for (run, ((xh, dy), is)) in dx
                    .chunks_mut(n)
                    .zip(out.data().chunks(n).zip(g.data().chunks(n)).zip(inv_std))
                {
                    let mean_dy = dy.iter().sum::<f64>() / n as f64;
                    let mean_dy_xh = dy.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                    for ((o, d), h) in run.iter_mut().zip(dy).zip(xh) {
                        *o = is * (d - mean_dy - h * mean_dy_xh);
                    }
                }
                self.accumulate(grads, *x, DenseTensor::from_parts(out.shape().to_vec(), dx))?;
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n)
                            .map(|c| g.data()[base + c * inner] * out.data()[base + c * inner])
                            .sum();
                        for c in 0..n {
                            let k = base + c * inner;
                            dx[k] = out.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, DenseTensor::from_parts(out.shape().to_vec(), dx))?;
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let total: f64 = (0..n).map(|c| g.data()[base + c * inner]).sum();
                        for c in 0..n {
                            let k = base + c * inner;
                            dx[k] = g.data()[k] - out.data()[k].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, *x, DenseTensor::from_parts(out.shape().to_vec(), dx))?;
            }
            Op::SumAll(x) => {
                let d = g.data()[0];
                self.accumulate(grads, *x, DenseTensor::full(self.value(*x).shape(), d)?)?;
            }
            Op::SumLast(x) => {
                let xt = self.value(*x);
                let n = *xt.shape().last().unwrap();
                let data = (0..xt.len()).map(|i| g.data()[i / n]).collect();
                self.accumulate(grads, *x, DenseTensor::from_parts(xt.shape().to_vec(), data))?;
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let w = shape[*axis] * inner;
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let start = o * total * inner + offset;
                            data.extend_from_slice(&g.data()[start..start + w]);
                        }
                        self.accumulate(grads, *p, DenseTensor::from_parts(shape, data))?;
                    }
                    offset += w;
                }
            }
        }
        Ok(())
    }

    fn contract_backward(
        &self,
        x: Var,
        y: Var,
        pairs: &[(usize, usize)],
        g: &DenseTensor,
        grads: &mut [Option<DenseTensor>],
    ) -> Result<()> {
        let (xt, yt) = (self.value(x), self.value(y));
        let xp: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let yp: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let xf: Vec<usize> = (0..xt.rank()).filter(|a| !xp.contains(a)).collect();
        let yf: Vec<usize> = (0..yt.rank()).filter(|a| !yp.contains(a)).collect();
        let partner_in_y = |a: usize| pairs.iter().find(|p| p.0 == a).unwrap().1;
        let partner_in_x = |b: usize| pairs.iter().find(|p| p.1 == b).unwrap().0;
        let mut yp_sorted = yp.clone();
        yp_sorted.sort_unstable();
        let mut xp_sorted = xp.clone();
        xp_sorted.sort_unstable();

        if xf.is_empty() && yf.is_empty() {
            // full contraction: dz is a scalar
            let d = g.data()[0];
            if self.wants(x) {
                let perm: Vec<usize> = (0..xt.rank()).map(partner_in_y).collect();
                self.accumulate(grads, x, yt.permute(&perm)?.scale(d))?;
            }
            if self.wants(y) {
                let perm: Vec<usize> = (0..yt.rank()).map(partner_in_x).collect();
                self.accumulate(grads, y, xt.permute(&perm)?.scale(d))?;
            }
            return Ok(());
        }

        if self.wants(x) {
            // dx[xf, xp] = sum_yf dz[xf, yf] y[yp, yf]
            let dpairs: Vec<(usize, usize)> =
                yf.iter().enumerate().map(|(t, &b)| (xf.len() + t, b)).collect();
            let raw = contract_modes(g, yt, &dpairs)?;
            let raw = if xf.is_empty() && raw.rank() != xp.len() {
                raw.reshape(&yp_sorted.iter().map(|&b| yt.shape()[b]).collect::<Vec<_>>())?
            } else {
                raw
            };
            // raw axes: xf..., then yp in ascending order
            let perm: Vec<usize> = (0..xt.rank())
                .map(|a| match xf.iter().position(|&f| f == a) {
                    Some(i) => i,
                    None => xf.len() + yp_sorted.iter().position(|&b| b == partner_in_y(a)).unwrap(),
                })
                .collect();
            // perm[a] = raw axis holding x axis a; permute wants out axis i = in axis perm[i]
            self.accumulate(grads, x, raw.permute(&perm)?)?;
        }
        if self.wants(y) {
            // dy[yp, yf] = sum_xf x[xf, xp] dz[xf, yf]
            let dpairs: Vec<(usize, usize)> = xf.iter().enumerate().map(|(t, &a)| (a, t)).collect();
            let raw = contract_modes(xt, g, &dpairs)?;
            let raw = if yf.is_empty() && raw.rank() != yp.len() {
                raw.reshape(&xp_sorted.iter().map(|&a| xt.shape()[a]).collect::<Vec<_>>())?
            } else {
                raw
            };
            // raw axes: xp in ascending order, then yf...
            let perm: Vec<usize> = (0..yt.rank())
                .map(|b| match yf.iter().position(|&f| f == b) {
                    Some(i) => xp.len() + i,
                    None => xp_sorted.iter().position(|&a| a == partner_in_x(b)).unwrap(),
                })
                .collect();
            self.accumulate(grads, y, raw.permute(&perm)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> DenseTensor {
        DenseTensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_self_doubles_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let y = tape.add(x, x).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_of_wx_gives_ones_xt() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.constant(t(&[2], &[5.0, 7.0]));
        let wx = tape.contract(w, x, &[(1, 0)]).unwrap();
        let l = tape.sum(wx);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(w).data(), &[5.0, 7.0, 5.0, 7.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn constant_loss_and_unreachable_leaves() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let c = tape.constant(DenseTensor::scalar(5.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(a).data(), &[0.0, 0.0]);

        let l = tape.sum(a);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn record_time_shape_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.contract(a, b, &[(0, 0)]).is_err());
        assert!(tape.mul_broadcast(a, b, 0).is_err());
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[-1.0, 2.0]));
        let y = tape.leaky_relu(a, 0.01);
        assert_eq!(tape.value(y).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn concat_along_channel_axis() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]
        );
    }

    #[test]
    fn normalize_rejects_single_element_runs() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3, 1], &[1., 2., 3.]));
        assert!(tape.normalize_last(a, 1e-5).is_err());
    }
}
