//! Network layers built on a [`Graph`].
//!
//! Layers are plain descriptors: they declare their parameters as
//! [`ParamInfo`]s and read them from the graph's store during forward.
//! A factorized layer takes a `slot`, the 0-based row of `A` (and of the bias
//! and per-model norm tables) that belongs to the requested subset.

use std::collections::BTreeMap;

use crate::autograd::Var;
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::kernels::{cp_rank_for_budget, tucker_rank_for_budget, CpKernel, LayerDims};
use crate::params::{Graph, Init, ParamInfo, ParamStore};
use crate::subset::ModalityMask;
use crate::tensor::DenseTensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

/// Storage format of a layer's weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    Cp { rank: usize },
    Tucker { rank: usize },
    /// One uncompressed kernel `[C_in, C_out, K]` and bias `[C_out]`.
    Dense,
}

/// Budget rank for `dims` under the given decomposition.
pub fn budget_kind(tucker: bool, dims: &LayerDims) -> Result<WeightKind> {
    Ok(if tucker {
        WeightKind::Tucker {
            rank: tucker_rank_for_budget(dims)?,
        }
    } else {
        WeightKind::Cp {
            rank: cp_rank_for_budget(dims),
        }
    })
}

/// The weight and bias of one layer in any [`WeightKind`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeight {
    pub name: String,
    pub dims: LayerDims,
    pub kind: WeightKind,
}

impl LayerWeight {
    pub fn new(name: impl Into<String>, dims: LayerDims, kind: WeightKind) -> Result<Self> {
        dims.validate()?;
        match kind {
            WeightKind::Cp { rank } | WeightKind::Tucker { rank } if rank == 0 => {
                return Err(Error::Parameter("rank must be >= 1".into()))
            }
            _ => {}
        }
        Ok(Self {
            name: name.into(),
            dims,
            kind,
        })
    }

    fn path(&self, tensor: &str) -> String {
        format!("{}/{tensor}", self.name)
    }

    pub fn rank(&self) -> Option<usize> {
        match self.kind {
            WeightKind::Cp { rank } | WeightKind::Tucker { rank } => Some(rank),
            WeightKind::Dense => None,
        }
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let LayerDims {
            m_count: m,
            c_in,
            c_out,
            k_flat: k,
        } = self.dims;
        let fan_in = Init::Kaiming { fan_in: c_in * k };
        match self.kind {
            WeightKind::Cp { rank } => {
                let mut v = vec![
                    ParamInfo::new(self.path("A"), &[m, rank], Init::Ones),
                    ParamInfo::new(self.path("B"), &[c_in, rank], fan_in),
                    ParamInfo::new(self.path("C"), &[c_out, rank], fan_in),
                ];
                if self.dims.has_kernel_mode() {
                    v.push(ParamInfo::new(self.path("D"), &[k, rank], fan_in));
                }
                v.push(ParamInfo::new(self.path("bias"), &[m, c_out], Init::Zeros));
                v
            }
            WeightKind::Tucker { rank } => vec![
                ParamInfo::new(self.path("A"), &[m, m], Init::Ones),
                ParamInfo::new(self.path("G"), &[m, rank, rank, k], fan_in),
                ParamInfo::new(self.path("B"), &[c_in, rank], fan_in),
                ParamInfo::new(self.path("C"), &[c_out, rank], fan_in),
                ParamInfo::new(self.path("D"), &[k, k], Init::Identity),
                ParamInfo::new(self.path("bias"), &[m, c_out], Init::Zeros),
            ],
            WeightKind::Dense => vec![
                ParamInfo::new(self.path("weight"), &[c_in, c_out, k], fan_in),
                ParamInfo::new(self.path("bias"), &[c_out], Init::Zeros),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_infos().iter().map(ParamInfo::numel).sum()
    }

    fn check_slot(&self, slot: usize) -> Result<()> {
        if self.kind != WeightKind::Dense && slot >= self.dims.m_count {
            return Err(Error::Index {
                index: slot + 1,
                bound: self.dims.m_count,
            });
        }
        Ok(())
    }

    /// Kernel of the model in `slot`, shape `[C_in, C_out, K]`, recorded on the tape.
    pub fn kernel(&self, g: &mut Graph, slot: usize) -> Result<Var> {
        self.check_slot(slot)?;
        let LayerDims {
            c_in, c_out, k_flat, ..
        } = self.dims;
        match self.kind {
            WeightKind::Dense => g.param(&self.path("weight")),
            WeightKind::Cp { .. } => {
                let a = g.param(&self.path("A"))?;
                let b = g.param(&self.path("B"))?;
                let c = g.param(&self.path("C"))?;
                let a_m = g.tape.select_row(a, slot)?;
                let b_scaled = g.tape.mul_broadcast(b, a_m, 1)?;
                let right = if self.dims.has_kernel_mode() {
                    let d = g.param(&self.path("D"))?;
                    g.tape.khatri_rao(c, d)?
                } else {
                    c
                };
                let w = g.tape.contract(b_scaled, right, &[(1, 1)])?;
                g.tape.reshape(w, &[c_in, c_out, k_flat])
            }
            WeightKind::Tucker { .. } => {
                let a = g.param(&self.path("A"))?;
                let core = g.param(&self.path("G"))?;
                let b = g.param(&self.path("B"))?;
                let c = g.param(&self.path("C"))?;
                let d = g.param(&self.path("D"))?;
                let a_m = g.tape.select_row(a, slot)?;
                let t = g.tape.contract(a_m, core, &[(0, 0)])?; // [R, R, K']
                let t = g.tape.contract(b, t, &[(1, 0)])?; // [C_in, R, K']
                let t = g.tape.contract(t, c, &[(1, 1)])?; // [C_in, K', C_out]
                g.tape.contract(t, d, &[(1, 1)]) // [C_in, C_out, K]
            }
        }
    }

    /// Bias of the model in `slot`, shape `[C_out]`.
    pub fn bias(&self, g: &mut Graph, slot: usize) -> Result<Var> {
        self.check_slot(slot)?;
        let bias = g.param(&self.path("bias"))?;
        match self.kind {
            WeightKind::Dense => Ok(bias),
            _ => g.tape.select_row(bias, slot),
        }
    }

    /// Reads the CP factors out of `store`.
    pub fn cp_kernel(&self, store: &ParamStore) -> Result<CpKernel> {
        if !matches!(self.kind, WeightKind::Cp { .. }) {
            return Err(Error::Parameter(format!("{} is not a CP layer", self.name)));
        }
        let d = if self.dims.has_kernel_mode() {
            Some(store.get(&self.path("D"))?.clone())
        } else {
            None
        };
        CpKernel::from_factors(
            self.dims,
            store.get(&self.path("A"))?.clone(),
            store.get(&self.path("B"))?.clone(),
            store.get(&self.path("C"))?.clone(),
            d,
            store.get(&self.path("bias"))?.clone(),
        )
    }

    /// Writes CP factors back into `store`.
    pub fn store_cp_kernel(&self, store: &mut ParamStore, kernel: &CpKernel) -> Result<()> {
        store.set(&self.path("A"), kernel.a.clone())?;
        store.set(&self.path("B"), kernel.b.clone())?;
        store.set(&self.path("C"), kernel.c.clone())?;
        if let Some(d) = &kernel.d {
            store.set(&self.path("D"), d.clone())?;
        }
        store.set(&self.path("bias"), kernel.bias.clone())
    }
}

/// A (transposed) convolution whose kernel comes from a [`LayerWeight`].
#[derive(Clone, Debug, PartialEq)]
pub struct LrConvLayer {
    pub weight: LayerWeight,
    pub geom: ConvGeometry,
    pub transposed: bool,
}

impl LrConvLayer {
    pub fn new(weight: LayerWeight, geom: ConvGeometry, transposed: bool) -> Result<Self> {
        if weight.dims.k_flat != geom.k_flat() {
            return Err(Error::Dimension(format!(
                "{}: k_flat {} does not match kernel {:?}",
                weight.name,
                weight.dims.k_flat,
                geom.kernel
            )));
        }
        Ok(Self {
            weight,
            geom,
            transposed,
        })
    }

    /// `x: [B, C_in, spatial...]` to `[B, C_out, spatial'...]`.
    pub fn forward(&self, g: &mut Graph, x: Var, slot: usize) -> Result<Var> {
        let c_in = g.value(x).shape().get(1).copied();
        if c_in != Some(self.weight.dims.c_in) {
            return Err(Error::Dimension(format!(
                "{}: expected {} input channels, input shape {:?}",
                self.weight.name,
                self.weight.dims.c_in,
                g.value(x).shape()
            )));
        }
        let w = self.weight.kernel(g, slot)?;
        let y = if self.transposed {
            g.tape.conv_transpose(x, w, &self.geom)?
        } else {
            g.tape.conv(x, w, &self.geom)?
        };
        let b = self.weight.bias(g, slot)?;
        g.tape.add_broadcast(y, b, 1)
    }
}

/// A fully connected layer; `k_flat` is 1 so a CP kernel has no `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrLinearLayer {
    pub weight: LayerWeight,
}

impl LrLinearLayer {
    pub fn new(weight: LayerWeight) -> Result<Self> {
        if weight.dims.k_flat != 1 {
            return Err(Error::Dimension(format!(
                "{}: linear layers need k_flat = 1",
                weight.name
            )));
        }
        Ok(Self { weight })
    }

    /// `x: [B, C_in]` to `[B, C_out]`.
    pub fn forward(&self, g: &mut Graph, x: Var, slot: usize) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.weight.dims.c_in {
            return Err(Error::Dimension(format!(
                "{}: expected [B, {}], got {:?}",
                self.weight.name, self.weight.dims.c_in, shape
            )));
        }
        let LayerDims { c_in, c_out, .. } = self.weight.dims;
        let w = self.weight.kernel(g, slot)?;
        let w = g.tape.reshape(w, &[c_in, c_out])?;
        let y = g.tape.contract(x, w, &[(1, 0)])?;
        let b = self.weight.bias(g, slot)?;
        g.tape.add_broadcast(y, b, 1)
    }
}

/// Affine normalization parameters, either one row per model or shared.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer {
    pub name: String,
    pub channels: usize,
    /// `Some(M)` for per-model rows.
    pub rows: Option<usize>,
}

impl NormLayer {
    pub fn new(name: impl Into<String>, channels: usize, rows: Option<usize>) -> Self {
        Self {
            name: name.into(),
            channels,
            rows,
        }
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let shape = match self.rows {
            Some(m) => vec![m, self.channels],
            None => vec![self.channels],
        };
        vec![
            ParamInfo::new(format!("{}/gamma", self.name), &shape, Init::Ones),
            ParamInfo::new(format!("{}/beta", self.name), &shape, Init::Zeros),
        ]
    }

    fn affine(&self, g: &mut Graph, x: Var, slot: usize) -> Result<Var> {
        let mut gamma = g.param(&format!("{}/gamma", self.name))?;
        let mut beta = g.param(&format!("{}/beta", self.name))?;
        if let Some(rows) = self.rows {
            if slot >= rows {
                return Err(Error::Index {
                    index: slot + 1,
                    bound: rows,
                });
            }
            gamma = g.tape.select_row(gamma, slot)?;
            beta = g.tape.select_row(beta, slot)?;
        }
        let y = g.tape.mul_broadcast(x, gamma, 1)?;
        g.tape.add_broadcast(y, beta, 1)
    }

    /// Instance normalization of `x: [B, C, spatial...]` over the spatial axes.
    pub fn instance(&self, g: &mut Graph, x: Var, slot: usize) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() < 3 || shape[1] != self.channels {
            return Err(Error::Dimension(format!(
                "{}: expected [B, {}, spatial...], got {shape:?}",
                self.name, self.channels
            )));
        }
        let spatial: usize = shape[2..].iter().product();
        if spatial < 2 {
            return Err(Error::Dimension(format!(
                "{}: instance statistics over a single voxel",
                self.name
            )));
        }
        let flat = g.tape.reshape(x, &[shape[0], shape[1], spatial])?;
        let n = g.tape.normalize_last(flat, NORM_EPS)?;
        let n = g.tape.reshape(n, &shape)?;
        self.affine(g, n, slot)
    }

    /// Layer normalization of `x: [B, C]` over the features.
    pub fn layer(&self, g: &mut Graph, x: Var, slot: usize) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.channels {
            return Err(Error::Dimension(format!(
                "{}: expected [B, {}], got {shape:?}",
                self.name, self.channels
            )));
        }
        let n = g.tape.normalize_last(x, NORM_EPS)?;
        self.affine(g, n, slot)
    }
}

/// Inputs keyed by modality id.
pub type ModalityInputs = BTreeMap<usize, Var>;

/// Concatenates the inputs of `mask` along axis 1 in ascending modality order.
pub fn concat_modalities(g: &mut Graph, inputs: &ModalityInputs, mask: ModalityMask) -> Result<Var> {
    let wanted = mask.modalities();
    let given: Vec<usize> = inputs.keys().copied().collect();
    if given != wanted {
        return Err(Error::ModalityMismatch(format!(
            "subset {} needs modalities {wanted:?}, got {given:?}",
            mask.symbols()
        )));
    }
    let parts: Vec<Var> = wanted.iter().map(|n| inputs[n]).collect();
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.tape.concat(&parts, 1)
}

/// One uncompressed stem convolution per served subset.
#[derive(Clone, Debug, PartialEq)]
pub struct StemBank {
    pub convs: BTreeMap<usize, LrConvLayer>,
    pub n_modalities: usize,
}

impl StemBank {
    /// Stems for `subsets` (model indices), each reading `popcount(m)` channels.
    pub fn new(
        prefix: &str,
        n_modalities: usize,
        subsets: &[usize],
        c_out: usize,
        geom: &ConvGeometry,
    ) -> Result<Self> {
        let mut convs = BTreeMap::new();
        for &m in subsets {
            let mask = ModalityMask::new(m, n_modalities)?;
            let dims = LayerDims::new(1, mask.count(), c_out, geom.k_flat())?;
            let w = LayerWeight::new(format!("{prefix}/m{m}"), dims, WeightKind::Dense)?;
            convs.insert(m, LrConvLayer::new(w, geom.clone(), false)?);
        }
        Ok(Self {
            convs,
            n_modalities,
        })
    }

    /// Banks whose entries all read `c_in` channels (heads).
    pub fn uniform(
        prefix: &str,
        n_modalities: usize,
        subsets: &[usize],
        c_in: usize,
        c_out: usize,
        geom: &ConvGeometry,
    ) -> Result<Self> {
        let mut convs = BTreeMap::new();
        for &m in subsets {
            ModalityMask::new(m, n_modalities)?;
            let dims = LayerDims::new(1, c_in, c_out, geom.k_flat())?;
            let w = LayerWeight::new(format!("{prefix}/m{m}"), dims, WeightKind::Dense)?;
            convs.insert(m, LrConvLayer::new(w, geom.clone(), false)?);
        }
        Ok(Self {
            convs,
            n_modalities,
        })
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        self.convs.values().flat_map(|c| c.weight.param_infos()).collect()
    }

    /// Channel-concatenates the present modalities and applies stem `m`.
    pub fn forward(&self, g: &mut Graph, inputs: &ModalityInputs, mask: ModalityMask) -> Result<Var> {
        let conv = self.convs.get(&mask.index()).ok_or_else(|| {
            Error::ModalityMismatch(format!("no stem for subset {}", mask.symbols()))
        })?;
        let x = concat_modalities(g, inputs, mask)?;
        conv.forward(g, x, 0)
    }
}

/// Non-differentiable forward of one layer on a single sample `x: [C_in, spatial...]`,
/// with `m` the 1-based model index.
pub fn lrconv_forward(layer: &LrConvLayer, store: &ParamStore, x: &DenseTensor, m: usize) -> Result<DenseTensor> {
    if m == 0 {
        return Err(Error::Index {
            index: 0,
            bound: layer.weight.dims.m_count,
        });
    }
    let mut g = Graph::new(store, false);
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xv = g.input(x.clone().reshape(&shape)?);
    let y = layer.forward(&mut g, xv, m - 1)?;
    let out = g.value(y).clone();
    let s = out.shape()[1..].to_vec();
    out.reshape(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn store_for(infos: &[ParamInfo]) -> ParamStore {
        ParamStore::from_infos(infos, &mut RngState::new(0)).unwrap()
    }

    #[test]
    fn identity_one_by_one_conv() {
        let dims = LayerDims::new(1, 1, 1, 1).unwrap();
        let w = LayerWeight::new("l", dims, WeightKind::Cp { rank: 1 }).unwrap();
        let layer = LrConvLayer::new(w, ConvGeometry::cube(2, 1, 1, 0).unwrap(), false).unwrap();
        let mut store = store_for(&layer.weight.param_infos());
        for p in ["l/B", "l/C"] {
            store.set(p, DenseTensor::ones(&[1, 1]).unwrap()).unwrap();
        }
        let x = DenseTensor::from_fn(&[1, 3, 4], |i| (i[1] * 4 + i[2]) as f64).unwrap();
        let y = lrconv_forward(&layer, &store, &x, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn cp_linear_param_count() {
        let dims = LayerDims::new(3, 64, 128, 1).unwrap();
        let w = LayerWeight::new("fc", dims, WeightKind::Cp { rank: 42 }).unwrap();
        assert_eq!(w.param_count(), (3 + 64 + 128) * 42 + 3 * 128);
    }

    #[test]
    fn stem_widths_follow_popcount() {
        let geom = ConvGeometry::cube(2, 3, 1, 1).unwrap();
        let bank = StemBank::new("stem", 3, &[1, 2, 3, 4, 5, 6, 7], 8, &geom).unwrap();
        for (m, conv) in &bank.convs {
            assert_eq!(conv.weight.dims.c_in, m.count_ones() as usize);
        }
    }

    #[test]
    fn stem_rejects_wrong_modalities() {
        let geom = ConvGeometry::cube(2, 3, 1, 1).unwrap();
        let bank = StemBank::new("stem", 2, &[1, 2, 3], 4, &geom).unwrap();
        let store = store_for(&bank.param_infos());
        let mut g = Graph::new(&store, false);
        let x = g.input(DenseTensor::zeros(&[1, 1, 4, 4]).unwrap());
        let mut inputs = ModalityInputs::new();
        inputs.insert(1, x);
        let mask = ModalityMask::new(1, 2).unwrap();
        assert!(matches!(
            bank.forward(&mut g, &inputs, mask),
            Err(Error::ModalityMismatch(_))
        ));
        inputs.insert(0, x);
        assert!(bank.forward(&mut g, &inputs, mask).is_err());
    }

    #[test]
    fn constant_channel_normalizes_to_beta() {
        let norm = NormLayer::new("n", 2, Some(3));
        let mut store = store_for(&norm.param_infos());
        store
            .set("n/beta", DenseTensor::from_fn(&[3, 2], |i| i[0] as f64 + 0.5).unwrap())
            .unwrap();
        let mut g = Graph::new(&store, false);
        let x = g.input(DenseTensor::full(&[1, 2, 3, 3], 4.0).unwrap());
        let y = norm.instance(&mut g, x, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn single_voxel_instance_norm_is_an_error() {
        let norm = NormLayer::new("n", 1, None);
        let store = store_for(&norm.param_infos());
        let mut g = Graph::new(&store, false);
        let x = g.input(DenseTensor::zeros(&[1, 1, 1, 1]).unwrap());
        assert!(norm.instance(&mut g, x, 0).is_err());
    }
}
