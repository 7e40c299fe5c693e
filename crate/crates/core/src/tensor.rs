//! Dense row-major `f64` tensors and the contractions built on them.
//!
//! Reductions inside [`gemm`] run in a fixed order (single-threaded
//! `matrixmultiply` kernels), so repeated calls on the same inputs are bitwise
//! identical.

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const MAX_RANK: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::Dimension(format!(
            "tensor rank must be in 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Dimension(format!(
            "zero-sized dimension in shape {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; for internal call sites with known-good shapes.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n = check_shape(shape)?;
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(self.strides())
            .map(|(&i, s)| i * s)
            .sum()
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!(
                "invalid permutation {perm:?} for rank {r}"
            )));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; r];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[src]);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `max|a - b| / max|b|`, the error measure used throughout the tests.
    /// Falls back to the absolute difference when `b` is identically zero.
    pub fn rel_diff(&self, reference: &Self) -> f64 {
        if self.shape != reference.shape {
            return f64::INFINITY;
        }
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = reference.max_abs();
        if scale > 0.0 {
            diff / scale
        } else {
            diff
        }
    }

    /// Matrix view helpers for rank-2 tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Row `i` along axis 0 as a new tensor of the remaining shape.
    pub fn row(&self, i: usize) -> Result<Self> {
        if i >= self.shape[0] {
            return Err(Error::Index {
                index: i,
                bound: self.shape[0],
            });
        }
        let w = self.cols();
        let shape = if self.rank() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Ok(Self::from_parts(shape, self.data[i * w..(i + 1) * w].to_vec()))
    }

    /// Column `r` of a matrix.
    pub fn column(&self, r: usize) -> Vec<f64> {
        let (p, q) = (self.shape[0], self.cols());
        (0..p).map(|i| self.data[i * q + r]).collect()
    }
}

/// `c = a * b + beta * c` on row-major strided matrices: `a` is `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * c_row_stride..i * c_row_stride + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.len() >= (m - 1) * a_strides.0 + (k - 1) * a_strides.1 + 1);
    assert!(b.len() >= (k - 1) * b_strides.0 + (n - 1) * b_strides.1 + 1);
    assert!(c.len() >= (m - 1) * c_row_stride + n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

/// Which modes of `x` pair with which modes of `y` in a contraction.
pub type ModePairs = [(usize, usize)];

/// Output shape of [`contract_modes`]: free modes of `x`, then free modes of `y`.
fn free_modes(rank: usize, paired: &[usize]) -> Vec<usize> {
    (0..rank).filter(|a| !paired.contains(a)).collect()
}

/// Sums over each `(x_mode, y_mode)` pair. The result keeps the unpaired modes of
/// `x` followed by the unpaired modes of `y`, in their original order. A full
/// contraction returns shape `[1]`.
pub fn contract_modes(x: &DenseTensor, y: &DenseTensor, pairs: &ModePairs) -> Result<DenseTensor> {
    let xp: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let yp: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    for &(a, b) in pairs {
        if a >= x.rank() || b >= y.rank() {
            return Err(Error::Dimension(format!(
                "mode pair ({a}, {b}) out of range for ranks {} and {}",
                x.rank(),
                y.rank()
            )));
        }
        if x.shape[a] != y.shape[b] {
            return Err(Error::Dimension(format!(
                "paired modes differ: x[{a}] = {} vs y[{b}] = {}",
                x.shape[a], y.shape[b]
            )));
        }
    }
    let dedup = |v: &[usize]| {
        let mut s = v.to_vec();
        s.sort_unstable();
        s.dedup();
        s.len() == v.len()
    };
    if !dedup(&xp) || !dedup(&yp) {
        return Err(Error::Dimension("a mode is paired twice".into()));
    }
    let xf = free_modes(x.rank(), &xp);
    let yf = free_modes(y.rank(), &yp);

    let x_perm: Vec<usize> = xf.iter().chain(&xp).copied().collect();
    let y_perm: Vec<usize> = yp.iter().chain(&yf).copied().collect();
    let xm = x.permute(&x_perm)?;
    let ym = y.permute(&y_perm)?;

    let m: usize = xf.iter().map(|&a| x.shape[a]).product();
    let k: usize = xp.iter().map(|&a| x.shape[a]).product();
    let n: usize = yf.iter().map(|&a| y.shape[a]).product();
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &xm.data, (k, 1), &ym.data, (n, 1), 0.0, &mut out, n);

    let mut shape: Vec<usize> = xf
        .iter()
        .map(|&a| x.shape[a])
        .chain(yf.iter().map(|&a| y.shape[a]))
        .collect();
    if shape.is_empty() {
        shape.push(1);
    }
    DenseTensor::new(shape, out)
}

/// `result[i,j,k,l] = a[i] b[j] c[k] d[l]`.
pub fn outer_product_4(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Result<DenseTensor> {
    if a.is_empty() || b.is_empty() || c.is_empty() || d.is_empty() {
        return Err(Error::Dimension("outer product of an empty vector".into()));
    }
    let mut data = Vec::with_capacity(a.len() * b.len() * c.len() * d.len());
    for &ai in a {
        for &bj in b {
            let ab = ai * bj;
            for &ck in c {
                let abc = ab * ck;
                data.extend(d.iter().map(|&dl| abc * dl));
            }
        }
    }
    DenseTensor::new(vec![a.len(), b.len(), c.len(), d.len()], data)
}

/// I.i.d. draws from `Normal(0, 2 / fan_in)`.
pub fn kaiming_normal(rng: &mut RngState, shape: &[usize], fan_in: usize) -> Result<DenseTensor> {
    if fan_in == 0 {
        return Err(Error::Parameter("kaiming fan_in must be >= 1".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let n = check_shape(shape)?;
    let data = (0..n).map(|_| std * rng.normal()).collect();
    DenseTensor::new(shape.to_vec(), data)
}

/// Scales each column of a `[P, R]` matrix to unit L2 norm and returns the norms.
pub fn column_l2_normalize(mat: &DenseTensor) -> Result<(DenseTensor, Vec<f64>)> {
    if mat.rank() != 2 {
        return Err(Error::Dimension(format!(
            "expected a matrix, got shape {:?}",
            mat.shape
        )));
    }
    let (p, r) = (mat.shape[0], mat.shape[1]);
    let mut norms = vec![0.0; r];
    for i in 0..p {
        for (j, n) in norms.iter_mut().enumerate() {
            let v = mat.data[i * r + j];
            *n += v * v;
        }
    }
    for (j, n) in norms.iter_mut().enumerate() {
        *n = n.sqrt();
        if *n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateColumn { column: j });
        }
    }
    let mut out = mat.clone();
    for i in 0..p {
        for j in 0..r {
            out.data[i * r + j] /= norms[j];
        }
    }
    Ok((out, norms))
}
