//! Dimension-agnostic convolution via gather tables.
//!
//! Activations are `[B, C, spatial...]` with 1 to 3 spatial axes; kernels are
//! `[C_in, C_out, K]` with `K` the flattened spatial extent. The same layout is
//! used for ordinary and transposed convolution, which makes the two exact
//! adjoints of each other for a shared weight tensor.

use crate::error::{Error, Result};
use crate::tensor::{gemm, DenseTensor};

const NONE: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: Vec<usize>, stride: usize, padding: usize) -> Result<Self> {
        if kernel.is_empty() || kernel.len() > 3 || kernel.contains(&0) || stride == 0 {
            return Err(Error::Parameter(format!(
                "invalid convolution geometry: kernel {kernel:?}, stride {stride}"
            )));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    /// `k x k (x k)` kernel with "same" padding for odd `k` at stride 1.
    pub fn cube(spatial_dims: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(vec![k; spatial_dims], stride, padding)
    }

    pub fn k_flat(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn spatial_dims(&self) -> usize {
        self.kernel.len()
    }

    pub fn conv_output(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.check_rank(input)?;
        input
            .iter()
            .zip(&self.kernel)
            .map(|(&n, &k)| {
                let padded = n + 2 * self.padding;
                if padded < k {
                    Err(Error::Dimension(format!(
                        "input extent {n} (+2*{} padding) smaller than kernel {k}",
                        self.padding
                    )))
                } else {
                    Ok((padded - k) / self.stride + 1)
                }
            })
            .collect()
    }

    pub fn transposed_output(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.check_rank(input)?;
        input
            .iter()
            .zip(&self.kernel)
            .map(|(&n, &k)| {
                let full = (n - 1) * self.stride + k;
                if full <= 2 * self.padding {
                    Err(Error::Dimension(format!(
                        "transposed output of extent {n} collapses with padding {}",
                        self.padding
                    )))
                } else {
                    Ok(full - 2 * self.padding)
                }
            })
            .collect()
    }

    fn check_rank(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.kernel.len() {
            return Err(Error::Dimension(format!(
                "{}-d kernel applied to spatial shape {spatial:?}",
                self.kernel.len()
            )));
        }
        Ok(())
    }

    /// `table[k * S_out + o]` is the flat input position read by kernel tap `k`
    /// at output position `o`, or `NONE` inside the zero padding.
    fn gather_table(&self, input: &[usize], output: &[usize]) -> Vec<u32> {
        let s_out: usize = output.iter().product();
        let k_flat = self.k_flat();
        let nd = self.kernel.len();
        let mut table = vec![NONE; k_flat * s_out];
        let mut kidx = vec![0usize; nd];
        for k in 0..k_flat {
            let mut oidx = vec![0usize; nd];
            for o in 0..s_out {
                let mut flat = 0usize;
                let mut inside = true;
                for ax in 0..nd {
                    let pos = (oidx[ax] * self.stride + kidx[ax]) as isize - self.padding as isize;
                    if pos < 0 || pos as usize >= input[ax] {
                        inside = false;
                        break;
                    }
                    flat = flat * input[ax] + pos as usize;
                }
                if inside {
                    table[k * s_out + o] = flat as u32;
                }
                increment(&mut oidx, output);
            }
            increment(&mut kidx, &self.kernel);
        }
        table
    }
}

fn increment(idx: &mut [usize], bounds: &[usize]) {
    for ax in (0..idx.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < bounds[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

fn split_activation(x: &DenseTensor, geom: &ConvGeometry) -> Result<(usize, usize, Vec<usize>)> {
    if x.rank() != geom.spatial_dims() + 2 {
        return Err(Error::Dimension(format!(
            "activation {:?} does not match a {}-d kernel",
            x.shape(),
            geom.spatial_dims()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2..].to_vec()))
}

fn check_weight(w: &DenseTensor, c_in: usize, k_flat: usize) -> Result<usize> {
    if w.rank() != 3 || w.shape()[0] != c_in || w.shape()[2] != k_flat {
        return Err(Error::Dimension(format!(
            "kernel {:?} incompatible with {c_in} input channels and K = {k_flat}",
            w.shape()
        )));
    }
    Ok(w.shape()[1])
}

/// Saved state for the convolution backward pass.
#[derive(Debug)]
pub struct ConvCache {
    table: Vec<u32>,
    s_in: usize,
    s_out: usize,
    /// Per-sample im2col buffers (ordinary convolution only).
    cols: Vec<f64>,
}

/// `y[b, o, pos] = sum_{i, k} w[i, o, k] x[b, i, pos * stride + k - pad]`.
pub fn conv_forward(x: &DenseTensor, w: &DenseTensor, geom: &ConvGeometry) -> Result<(DenseTensor, ConvCache)> {
    let (batch, c_in, in_sp) = split_activation(x, geom)?;
    let k_flat = geom.k_flat();
    let c_out = check_weight(w, c_in, k_flat)?;
    let out_sp = geom.conv_output(&in_sp)?;
    let s_in: usize = in_sp.iter().product();
    let s_out: usize = out_sp.iter().product();
    let table = geom.gather_table(&in_sp, &out_sp);

    // wt[o, i*K + k] = w[i, o, k]
    let ck = c_in * k_flat;
    let mut wt = vec![0.0; c_out * ck];
    for i in 0..c_in {
        for o in 0..c_out {
            for k in 0..k_flat {
                wt[o * ck + i * k_flat + k] = w.data()[(i * c_out + o) * k_flat + k];
            }
        }
    }
    let mut cols = vec![0.0; batch * ck * s_out];
    let mut out = vec![0.0; batch * c_out * s_out];
    for b in 0..batch {
        let xb = &x.data()[b * c_in * s_in..(b + 1) * c_in * s_in];
        let cb = &mut cols[b * ck * s_out..(b + 1) * ck * s_out];
        for i in 0..c_in {
            for k in 0..k_flat {
                let row = &mut cb[(i * k_flat + k) * s_out..(i * k_flat + k + 1) * s_out];
                let tab = &table[k * s_out..(k + 1) * s_out];
                for (dst, &src) in row.iter_mut().zip(tab) {
                    if src != NONE {
                        *dst = xb[i * s_in + src as usize];
                    }
                }
            }
        }
        gemm(
            c_out,
            ck,
            s_out,
            &wt,
            (ck, 1),
            cb,
            (s_out, 1),
            0.0,
            &mut out[b * c_out * s_out..(b + 1) * c_out * s_out],
            s_out,
        );
    }
    let mut shape = vec![batch, c_out];
    shape.extend(&out_sp);
    Ok((
        DenseTensor::new(shape, out)?,
        ConvCache {
            table,
            s_in,
            s_out,
            cols,
        },
    ))
}

/// Gradients of [`conv_forward`] with respect to input and kernel.
pub fn conv_backward(
    dy: &DenseTensor,
    x_shape: &[usize],
    w: &DenseTensor,
    cache: &ConvCache,
) -> (DenseTensor, DenseTensor) {
    let (batch, c_in) = (x_shape[0], x_shape[1]);
    let (c_out, k_flat) = (w.shape()[1], w.shape()[2]);
    let (s_in, s_out) = (cache.s_in, cache.s_out);
    let ck = c_in * k_flat;

    // w as [C_in*K, C_out] view: element (i*K + k, o) lives at (i*C_out + o)*K + k,
    // which is not a single stride, so materialize wt once.
    let mut wt = vec![0.0; c_out * ck];
    for i in 0..c_in {
        for o in 0..c_out {
            for k in 0..k_flat {
                wt[o * ck + i * k_flat + k] = w.data()[(i * c_out + o) * k_flat + k];
            }
        }
    }
    let mut dwt = vec![0.0; c_out * ck];
    let mut dx = vec![0.0; batch * c_in * s_in];
    let mut dcols = vec![0.0; ck * s_out];
    for b in 0..batch {
        let dyb = &dy.data()[b * c_out * s_out..(b + 1) * c_out * s_out];
        let cb = &cache.cols[b * ck * s_out..(b + 1) * ck * s_out];
        // dwt += dy_b [C_out, S] . cols_b^T [S, CK]
        gemm(c_out, s_out, ck, dyb, (s_out, 1), cb, (1, s_out), 1.0, &mut dwt, ck);
        // dcols = wt^T [CK, C_out] . dy_b [C_out, S]
        gemm(ck, c_out, s_out, &wt, (1, ck), dyb, (s_out, 1), 0.0, &mut dcols, s_out);
        let dxb = &mut dx[b * c_in * s_in..(b + 1) * c_in * s_in];
        for i in 0..c_in {
            for k in 0..k_flat {
                let row = &dcols[(i * k_flat + k) * s_out..(i * k_flat + k + 1) * s_out];
                let tab = &cache.table[k * s_out..(k + 1) * s_out];
                for (&g, &src) in row.iter().zip(tab) {
                    if src != NONE {
                        dxb[i * s_in + src as usize] += g;
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0; w.len()];
    for i in 0..c_in {
        for o in 0..c_out {
            for k in 0..k_flat {
                dw[(i * c_out + o) * k_flat + k] = dwt[o * ck + i * k_flat + k];
            }
        }
    }
    (
        DenseTensor::from_parts(x_shape.to_vec(), dx),
        DenseTensor::from_parts(w.shape().to_vec(), dw),
    )
}

/// Adjoint of [`conv_forward`] in the input: scatters each input position
/// through the kernel into the upsampled output.
pub fn conv_transpose_forward(
    x: &DenseTensor,
    w: &DenseTensor,
    geom: &ConvGeometry,
) -> Result<(DenseTensor, ConvCache)> {
    let (batch, c_in, in_sp) = split_activation(x, geom)?;
    let k_flat = geom.k_flat();
    let c_out = check_weight(w, c_in, k_flat)?;
    let out_sp = geom.transposed_output(&in_sp)?;
    let s_in: usize = in_sp.iter().product();
    let s_out: usize = out_sp.iter().product();
    // A convolution from the output grid lands back on the input grid; its
    // table maps (k, input position) to output position.
    let table = geom.gather_table(&out_sp, &in_sp);
    let ok = c_out * k_flat;
    let mut cols = vec![0.0; ok * s_in];
    let mut out = vec![0.0; batch * c_out * s_out];
    for b in 0..batch {
        let xb = &x.data()[b * c_in * s_in..(b + 1) * c_in * s_in];
        // cols [C_out*K, S_in] = W2 . x_b, W2[(o*K + k), i] = w[i, o, k]
        gemm(ok, c_in, s_in, w.data(), (1, ok), xb, (s_in, 1), 0.0, &mut cols, s_in);
        let ob = &mut out[b * c_out * s_out..(b + 1) * c_out * s_out];
        for o in 0..c_out {
            for k in 0..k_flat {
                let row = &cols[(o * k_flat + k) * s_in..(o * k_flat + k + 1) * s_in];
                let tab = &table[k * s_in..(k + 1) * s_in];
                for (&v, &dst) in row.iter().zip(tab) {
                    if dst != NONE {
                        ob[o * s_out + dst as usize] += v;
                    }
                }
            }
        }
    }
    let mut shape = vec![batch, c_out];
    shape.extend(&out_sp);
    Ok((
        DenseTensor::new(shape, out)?,
        ConvCache {
            table,
            s_in,
            s_out,
            cols: Vec::new(),
        },
    ))
}

pub fn conv_transpose_backward(
    dy: &DenseTensor,
    x: &DenseTensor,
    w: &DenseTensor,
    cache: &ConvCache,
) -> (DenseTensor, DenseTensor) {
    let (batch, c_in) = (x.shape()[0], x.shape()[1]);
    let (c_out, k_flat) = (w.shape()[1], w.shape()[2]);
    let (s_in, s_out) = (cache.s_in, cache.s_out);
    let ok = c_out * k_flat;
    let mut dcols = vec![0.0; ok * s_in];
    let mut dx = vec![0.0; batch * c_in * s_in];
    let mut dw = vec![0.0; w.len()];
    for b in 0..batch {
        let dyb = &dy.data()[b * c_out * s_out..(b + 1) * c_out * s_out];
        for o in 0..c_out {
            for k in 0..k_flat {
                let row = &mut dcols[(o * k_flat + k) * s_in..(o * k_flat + k + 1) * s_in];
                let tab = &cache.table[k * s_in..(k + 1) * s_in];
                for (d, &src) in row.iter_mut().zip(tab) {
                    *d = if src != NONE { dyb[o * s_out + src as usize] } else { 0.0 };
                }
            }
        }
        let xb = &x.data()[b * c_in * s_in..(b + 1) * c_in * s_in];
        // dx_b [C_in, S_in] = w [C_in, C_out*K] . dcols
        gemm(
            c_in,
            ok,
            s_in,
            w.data(),
            (ok, 1),
            &dcols,
            (s_in, 1),
            0.0,
            &mut dx[b * c_in * s_in..(b + 1) * c_in * s_in],
            s_in,
        );
        // dw [C_in, C_out*K] += x_b . dcols^T
        gemm(c_in, s_in, ok, xb, (s_in, 1), &dcols, (1, s_in), 1.0, &mut dw, ok);
    }
    (
        DenseTensor::from_parts(x.shape().to_vec(), dx),
        DenseTensor::from_parts(w.shape().to_vec(), dw),
    )
}
