//! Factorized joint weight tensors.
//!
//! One layer of all `M` subset models is a single tensor
//! `W[m, c_in, c_out, k]` (`k` is the flattened spatial kernel index). It is
//! stored either as a CP decomposition
//!
//! ```text
//! W = sum_r  A[:, r] o B[:, r] o C[:, r] o D[:, r]
//! ```
//!
//! or as a Tucker decomposition whose model and kernel modes stay full rank
//! (`A` is `M x M`, `D` is `K x K`) while both channel modes share rank `R`.
//! Model indices are 1-based everywhere in the public API: `m` is the bitmask of
//! the modality subset, so `1 <= m <= M = 2^N - 1`.
//!
//! When `k_flat == 1` (linear layers) the CP kernel has no `D` factor and `K` is
//! dropped from the rank budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{column_l2_normalize, contract_modes, gemm, kaiming_normal, DenseTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerDims {
    pub m_count: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k_flat: usize,
}

impl LayerDims {
    pub fn new(m_count: usize, c_in: usize, c_out: usize, k_flat: usize) -> Result<Self> {
        let dims = Self {
            m_count,
            c_in,
            c_out,
            k_flat,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_count == 0 || self.c_in == 0 || self.c_out == 0 || self.k_flat == 0 {
            return Err(Error::Parameter(format!("all layer dims must be >= 1: {self:?}")));
        }
        if !(self.m_count + 1).is_power_of_two() {
            return Err(Error::Parameter(format!(
                "m_count = {} is not of the form 2^N - 1",
                self.m_count
            )));
        }
        Ok(())
    }

    /// Whether the CP kernel carries a `D` factor.
    pub fn has_kernel_mode(&self) -> bool {
        self.k_flat > 1
    }

    /// Weights of one dense (single-model) layer, bias excluded.
    pub fn dense_weights(&self) -> usize {
        self.c_in * self.c_out * self.k_flat
    }
}

/// Largest CP rank whose factors fit in one dense layer's weight budget,
/// clamped to at least 1.
pub fn cp_rank_for_budget(dims: &LayerDims) -> usize {
    let k_term = if dims.has_kernel_mode() { dims.k_flat } else { 0 };
    let per_rank = dims.m_count + dims.c_in + dims.c_out + k_term;
    (dims.dense_weights() / per_rank).max(1)
}

fn tucker_weights(dims: &LayerDims, rank: usize) -> u128 {
    let (m, k, r) = (dims.m_count as u128, dims.k_flat as u128, rank as u128);
    m * k * r * r + (dims.c_in + dims.c_out) as u128 * r + m * m + k * k
}

/// Positive root of `M K R^2 + (C_in + C_out) R + M^2 + K^2 = C_in C_out K`,
/// floored and clamped to at least 1.
pub fn tucker_rank_for_budget(dims: &LayerDims) -> Result<usize> {
    let (m, k) = (dims.m_count as f64, dims.k_flat as f64);
    let s = (dims.c_in + dims.c_out) as f64;
    let prod = (dims.c_in * dims.c_out) as f64;
    let disc = s * s - 4.0 * m * k * (m * m + k * k - k * prod);
    if disc < 0.0 {
        return Err(Error::BudgetInfeasible(format!(
            "Tucker discriminant {disc} < 0 for {dims:?}"
        )));
    }
    let raw = (-s + disc.sqrt()) / (2.0 * m * k);
    if raw < 1.0 {
        return Ok(1);
    }
    // Guard the float root against rounding on either side.
    let budget = dims.dense_weights() as u128;
    let mut r = raw.floor() as usize;
    while r > 1 && tucker_weights(dims, r) > budget {
        r -= 1;
    }
    while tucker_weights(dims, r + 1) <= budget {
        r += 1;
    }
    Ok(r)
}

/// Weights plus biases of one dense model's layer times `M`: the storage of the
/// uncompressed family.
pub fn dense_equivalent_count(dims: &LayerDims) -> usize {
    dims.m_count * dims.dense_weights() + dims.m_count * dims.c_out
}

fn check_model(m: usize, bound: usize) -> Result<usize> {
    if m == 0 || m > bound {
        return Err(Error::Index { index: m, bound });
    }
    Ok(m - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpKernel {
    pub dims: LayerDims,
    pub rank: usize,
    pub a: DenseTensor,
    pub b: DenseTensor,
    pub c: DenseTensor,
    /// Absent for linear layers (`k_flat == 1`).
    pub d: Option<DenseTensor>,
    pub bias: DenseTensor,
}

impl CpKernel {
    pub fn from_factors(
        dims: LayerDims,
        a: DenseTensor,
        b: DenseTensor,
        c: DenseTensor,
        d: Option<DenseTensor>,
        bias: DenseTensor,
    ) -> Result<Self> {
        dims.validate()?;
        let rank = a.shape().get(1).copied().unwrap_or(0);
        let expect = |t: &DenseTensor, shape: &[usize], name: &str| {
            if t.shape() != shape {
                Err(Error::Dimension(format!(
                    "factor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        if rank == 0 {
            return Err(Error::Dimension("factor A must be [M, R]".into()));
        }
        expect(&a, &[dims.m_count, rank], "A")?;
        expect(&b, &[dims.c_in, rank], "B")?;
        expect(&c, &[dims.c_out, rank], "C")?;
        match (&d, dims.has_kernel_mode()) {
            (Some(d), true) => expect(d, &[dims.k_flat, rank], "D")?,
            (None, false) => {}
            _ => {
                return Err(Error::Dimension(
                    "factor D is required iff k_flat > 1".into(),
                ))
            }
        }
        expect(&bias, &[dims.m_count, dims.c_out], "bias")?;
        Ok(Self {
            dims,
            rank,
            a,
            b,
            c,
            d,
            bias,
        })
    }

    pub fn param_count(&self) -> usize {
        cp_param_count(&self.dims, self.rank)
    }

    /// `W[m, i, j, k]` for all models.
    pub fn reconstruct_full(&self) -> DenseTensor {
        let LayerDims {
            m_count,
            c_in,
            c_out,
            k_flat,
        } = self.dims;
        let r = self.rank;
        let cols = c_in * c_out * k_flat;
        // Column-wise Khatri-Rao product of B, C, D: [c_in * c_out * k, R].
        let mut kr = vec![0.0; cols * r];
        for i in 0..c_in {
            for j in 0..c_out {
                for k in 0..k_flat {
                    let row = (i * c_out + j) * k_flat + k;
                    for q in 0..r {
                        let dk = self.d.as_ref().map_or(1.0, |d| d.data()[k * r + q]);
                        kr[row * r + q] = self.b.data()[i * r + q] * self.c.data()[j * r + q] * dk;
                    }
                }
            }
        }
        let mut out = vec![0.0; m_count * cols];
        gemm(m_count, r, cols, self.a.data(), (r, 1), &kr, (1, r), 0.0, &mut out, cols);
        DenseTensor::from_parts(vec![m_count, c_in, c_out, k_flat], out)
    }

    /// `W^(m) = sum_r A[m, r] (b_r o c_r o d_r)`, computed without the other models.
    pub fn reconstruct_slice(&self, m: usize) -> Result<DenseTensor> {
        let row = check_model(m, self.dims.m_count)?;
        let LayerDims {
            c_in,
            c_out,
            k_flat,
            ..
        } = self.dims;
        let r = self.rank;
        let a = &self.a.data()[row * r..(row + 1) * r];
        let scaled_b: Vec<f64> = self
            .b
            .data()
            .chunks(r)
            .flat_map(|b_row| b_row.iter().zip(a).map(|(b, a)| b * a))
            .collect();
        let inner = c_out * k_flat;
        let mut cd = vec![0.0; inner * r];
        for j in 0..c_out {
            for k in 0..k_flat {
                for q in 0..r {
                    let dk = self.d.as_ref().map_or(1.0, |d| d.data()[k * r + q]);
                    cd[(j * k_flat + k) * r + q] = self.c.data()[j * r + q] * dk;
                }
            }
        }
        let mut out = vec![0.0; c_in * inner];
        gemm(c_in, r, inner, &scaled_b, (r, 1), &cd, (1, r), 0.0, &mut out, inner);
        Ok(DenseTensor::from_parts(vec![c_in, c_out, k_flat], out))
    }
}

pub fn cp_param_count(dims: &LayerDims, rank: usize) -> usize {
    let k_term = if dims.has_kernel_mode() { dims.k_flat } else { 0 };
    (dims.m_count + dims.c_in + dims.c_out + k_term) * rank + dims.m_count * dims.c_out
}

pub fn tucker_param_count(dims: &LayerDims, rank: usize) -> usize {
    tucker_weights(dims, rank) as usize + dims.m_count * dims.c_out
}

/// Kaiming fan-in shared by every factor of a layer: the effective conv fan-in.
pub fn factor_fan_in(dims: &LayerDims) -> usize {
    dims.c_in * dims.k_flat
}

/// `A` all ones, bias zero, `B`, `C`, `D` Kaiming-normal with fan-in `C_in K`.
pub fn cp_init(dims: LayerDims, rank: usize, rng: &mut RngState) -> Result<CpKernel> {
    dims.validate()?;
    if rank == 0 {
        return Err(Error::Parameter("rank must be >= 1".into()));
    }
    let fan_in = factor_fan_in(&dims);
    let a = DenseTensor::ones(&[dims.m_count, rank])?;
    let b = kaiming_normal(rng, &[dims.c_in, rank], fan_in)?;
    let c = kaiming_normal(rng, &[dims.c_out, rank], fan_in)?;
    let d = if dims.has_kernel_mode() {
        Some(kaiming_normal(rng, &[dims.k_flat, rank], fan_in)?)
    } else {
        None
    };
    let bias = DenseTensor::zeros(&[dims.m_count, dims.c_out])?;
    CpKernel::from_factors(dims, a, b, c, d, bias)
}

/// Moves the norms of the `B`, `C`, `D` columns into `A`; `W` is unchanged.
pub fn cp_normalize(kernel: &CpKernel) -> Result<CpKernel> {
    let (b, nb) = column_l2_normalize(&kernel.b)?;
    let (c, nc) = column_l2_normalize(&kernel.c)?;
    let (d, nd) = match &kernel.d {
        Some(d) => {
            let (d, n) = column_l2_normalize(d)?;
            (Some(d), n)
        }
        None => (None, vec![1.0; kernel.rank]),
    };
    let r = kernel.rank;
    let mut a = kernel.a.clone();
    for row in a.data_mut().chunks_mut(r) {
        for q in 0..r {
            row[q] *= nb[q] * nc[q] * nd[q];
        }
    }
    Ok(CpKernel {
        a,
        b,
        c,
        d,
        ..kernel.clone()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuckerKernel {
    pub dims: LayerDims,
    pub rank: usize,
    /// `[M, M]`
    pub a: DenseTensor,
    /// Core `[M, R, R, K]`.
    pub g: DenseTensor,
    pub b: DenseTensor,
    pub c: DenseTensor,
    /// `[K, K]`
    pub d: DenseTensor,
    pub bias: DenseTensor,
}

impl TuckerKernel {
    pub fn from_factors(
        dims: LayerDims,
        rank: usize,
        a: DenseTensor,
        g: DenseTensor,
        b: DenseTensor,
        c: DenseTensor,
        d: DenseTensor,
        bias: DenseTensor,
    ) -> Result<Self> {
        dims.validate()?;
        let (m, k) = (dims.m_count, dims.k_flat);
        let checks: [(&DenseTensor, Vec<usize>, &str); 6] = [
            (&a, vec![m, m], "A"),
            (&g, vec![m, rank, rank, k], "G"),
            (&b, vec![dims.c_in, rank], "B"),
            (&c, vec![dims.c_out, rank], "C"),
            (&d, vec![k, k], "D"),
            (&bias, vec![m, dims.c_out], "bias"),
        ];
        for (t, shape, name) in checks {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "Tucker factor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            dims,
            rank,
            a,
            g,
            b,
            c,
            d,
            bias,
        })
    }

    pub fn param_count(&self) -> usize {
        tucker_param_count(&self.dims, self.rank)
    }

    /// Element count of the stored buffers.
    pub fn buffer_len(&self) -> usize {
        [&self.a, &self.g, &self.b, &self.c, &self.d, &self.bias]
            .iter()
            .map(|t| t.len())
            .sum()
    }

    pub fn reconstruct_slice(&self, m: usize) -> Result<DenseTensor> {
        let row = check_model(m, self.dims.m_count)?;
        let a_m = self.a.row(row)?;
        let core = contract_modes(&a_m, &self.g, &[(0, 0)])?; // [R, R, K']
        let t = contract_modes(&self.b, &core, &[(1, 0)])?; // [C_in, R, K']
        let t = contract_modes(&t, &self.c, &[(1, 1)])?; // [C_in, K', C_out]
        contract_modes(&t, &self.d, &[(1, 1)]) // [C_in, C_out, K]
    }
}

/// `A` all ones, `D` identity, bias zero, `G`, `B`, `C` Kaiming-normal.
pub fn tucker_init(dims: LayerDims, rank: usize, rng: &mut RngState) -> Result<TuckerKernel> {
    dims.validate()?;
    if rank == 0 {
        return Err(Error::Parameter("rank must be >= 1".into()));
    }
    let fan_in = factor_fan_in(&dims);
    let (m, k) = (dims.m_count, dims.k_flat);
    TuckerKernel::from_factors(
        dims,
        rank,
        DenseTensor::ones(&[m, m])?,
        kaiming_normal(rng, &[m, rank, rank, k], fan_in)?,
        kaiming_normal(rng, &[dims.c_in, rank], fan_in)?,
        kaiming_normal(rng, &[dims.c_out, rank], fan_in)?,
        DenseTensor::identity(k)?,
        DenseTensor::zeros(&[m, dims.c_out])?,
    )
}
