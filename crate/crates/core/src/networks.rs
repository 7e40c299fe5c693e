//! Architecture descriptions and models.
//!
//! A [`Model`] is a list of members. Each member serves one or more subsets
//! (model indices) and owns the parameters under its path prefix:
//!
//! * a hypernetwork has one member serving `1..=M` with factorized inner layers;
//! * a dedicated family has `M` members `family/m{m}/`, each dense and serving `[m]`;
//! * a single dense model serves only the full subset `[M]`.
//!
//! Stems and heads are always dense and stored once per served subset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::kernels::LayerDims;
use crate::layers::{
    budget_kind, concat_modalities, LayerWeight, LrConvLayer, LrLinearLayer, ModalityInputs,
    NormLayer, StemBank, WeightKind, LEAKY_SLOPE,
};
use crate::params::{Graph, ParamInfo, ParamStore};
use crate::rng::RngState;
use crate::subset::{model_count, ModalityMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Segmentation,
    Classification,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decomposition {
    #[default]
    Cp,
    Tucker,
}

impl std::str::FromStr for Decomposition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cp" => Ok(Self::Cp),
            "tucker" => Ok(Self::Tucker),
            _ => Err(Error::Parameter(format!("unknown decomposition {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormParams {
    #[default]
    PerModel,
    Shared,
}

/// How factorized layers pick their rank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RankPolicy {
    /// The per-layer budget rank.
    Budget,
    /// The same rank for every layer.
    Explicit(usize),
    /// `max(1, floor(mult * budget))` per layer.
    Multiplier(f64),
}

fn default_spatial() -> usize {
    2
}
fn default_kernel() -> usize {
    3
}
fn default_bottleneck() -> usize {
    64
}
fn default_fusion_hidden() -> usize {
    128
}
fn default_fusion_blocks() -> usize {
    3
}

/// Declarative architecture, read from the `[network]` table of a config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub task: Task,
    pub n_modalities: usize,
    pub classes: usize,
    /// Segmentation: number of spatial axes (2 or 3).
    #[serde(default = "default_spatial")]
    pub spatial_dims: usize,
    /// Segmentation: stage widths, shallowest first. The last stage is the bridge.
    #[serde(default)]
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Kernel of the strided downsampling convolutions.
    #[serde(default = "default_kernel")]
    pub down_kernel: usize,
    #[serde(default)]
    pub decomposition: Decomposition,
    /// Fixed rank for every factorized layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// Multiple of the budget rank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_multiplier: Option<f64>,
    #[serde(default)]
    pub norm_params: NormParams,
    /// Classification: feature width of each modality.
    #[serde(default)]
    pub feature_widths: Vec<usize>,
    #[serde(default = "default_bottleneck")]
    pub bottleneck: usize,
    #[serde(default = "default_fusion_hidden")]
    pub fusion_hidden: usize,
    #[serde(default = "default_fusion_blocks")]
    pub fusion_blocks: usize,
    #[serde(default = "default_bottleneck")]
    pub head_hidden: usize,
}

impl NetworkSpec {
    pub fn model_count(&self) -> usize {
        model_count(self.n_modalities)
    }

    pub fn rank_policy(&self) -> Result<RankPolicy> {
        match (self.rank, self.rank_multiplier) {
            (None, None) => Ok(RankPolicy::Budget),
            (Some(0), _) => Err(Error::Build("rank must be >= 1".into())),
            (Some(r), None) => Ok(RankPolicy::Explicit(r)),
            (None, Some(f)) if f > 0.0 && f.is_finite() => Ok(RankPolicy::Multiplier(f)),
            (None, Some(f)) => Err(Error::Build(format!("rank multiplier {f} must be > 0"))),
            (Some(_), Some(_)) => Err(Error::Build(
                "set at most one of `rank` and `rank_multiplier`".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_modalities == 0 || self.n_modalities > 8 {
            return Err(Error::Build(format!(
                "n_modalities = {} outside 1..=8",
                self.n_modalities
            )));
        }
        if self.classes < 2 {
            return Err(Error::Build("need at least 2 classes".into()));
        }
        self.rank_policy()?;
        match self.task {
            Task::Segmentation => {
                if self.channels.is_empty() || self.channels.contains(&0) {
                    return Err(Error::Build("segmentation needs positive stage channels".into()));
                }
                if !(1..=3).contains(&self.spatial_dims) {
                    return Err(Error::Build(format!(
                        "spatial_dims = {} outside 1..=3",
                        self.spatial_dims
                    )));
                }
                if self.kernel % 2 == 0 {
                    return Err(Error::Build(format!("stage kernel {} must be odd", self.kernel)));
                }
                if self.down_kernel < 2 {
                    return Err(Error::Build("down_kernel must be >= 2".into()));
                }
            }
            Task::Classification => {
                if self.feature_widths.len() != self.n_modalities {
                    return Err(Error::Build(format!(
                        "feature_widths lists {} widths for {} modalities",
                        self.feature_widths.len(),
                        self.n_modalities
                    )));
                }
                if self.feature_widths.contains(&0)
                    || self.bottleneck == 0
                    || self.fusion_hidden == 0
                    || self.head_hidden == 0
                {
                    return Err(Error::Build("classifier widths must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    /// Total downsampling factor along each axis.
    pub fn downsample_factor(&self) -> usize {
        1 << self.channels.len().saturating_sub(1)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Factorized hypernetwork serving every subset.
    Hyper,
    /// One dense network per subset.
    Dedicated,
    /// One dense network for the full subset only.
    Single,
}

/// Picks each layer's storage for a member.
struct Builder<'a> {
    spec: &'a NetworkSpec,
    kind: ModelKind,
    policy: RankPolicy,
    /// Rows of per-model tables (`A`, bias, norms).
    rows: usize,
}

impl Builder<'_> {
    fn weight(&self, name: String, c_in: usize, c_out: usize, k_flat: usize) -> Result<LayerWeight> {
        if self.kind != ModelKind::Hyper {
            let dims = LayerDims::new(1, c_in, c_out, k_flat)?;
            return LayerWeight::new(name, dims, WeightKind::Dense);
        }
        let dims = LayerDims::new(self.rows, c_in, c_out, k_flat)?;
        let tucker = self.spec.decomposition == Decomposition::Tucker;
        let budget = budget_kind(tucker, &dims).map_err(|e| match e {
            Error::BudgetInfeasible(msg) => Error::BudgetInfeasible(format!("{name}: {msg}")),
            other => other,
        })?;
        let budget_rank = match budget {
            WeightKind::Cp { rank } | WeightKind::Tucker { rank } => rank,
            WeightKind::Dense => unreachable!(),
        };
        let rank = match self.policy {
            RankPolicy::Budget => budget_rank,
            RankPolicy::Explicit(r) => r,
            RankPolicy::Multiplier(f) => ((f * budget_rank as f64).floor() as usize).max(1),
        };
        let kind = if tucker {
            WeightKind::Tucker { rank }
        } else {
            WeightKind::Cp { rank }
        };
        let w = LayerWeight::new(name, dims, kind)?;
        if self.policy != RankPolicy::Budget {
            // More weights than the uncompressed family defeats the purpose.
            let bias = dims.m_count * c_out;
            let family = dims.m_count * dims.dense_weights();
            if w.param_count() - bias > family {
                return Err(Error::BudgetInfeasible(format!(
                    "{}: rank {rank} stores {} weights, more than the {family} of {} dense models",
                    w.name,
                    w.param_count() - bias,
                    dims.m_count
                )));
            }
        }
        Ok(w)
    }

    fn norm(&self, name: String, channels: usize) -> NormLayer {
        let rows = match self.spec.norm_params {
            NormParams::PerModel => Some(self.rows),
            NormParams::Shared => None,
        };
        NormLayer::new(name, channels, rows)
    }
}

/// Convolution, then instance norm and leaky ReLU when `norm` is present.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: LrConvLayer,
    pub norm: Option<NormLayer>,
}

impl ConvBlock {
    fn param_infos(&self) -> Vec<ParamInfo> {
        let mut v = self.conv.weight.param_infos();
        if let Some(n) = &self.norm {
            v.extend(n.param_infos());
        }
        v
    }

    fn forward(&self, g: &mut Graph, x: Var, slot: usize) -> Result<Var> {
        let y = self.conv.forward(g, x, slot)?;
        match &self.norm {
            Some(n) => {
                let y = n.instance(g, y, slot)?;
                Ok(g.tape.leaky_relu(y, LEAKY_SLOPE))
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    pub up: ConvBlock,
    pub conv0: ConvBlock,
    pub conv1: ConvBlock,
}

/// Encoder-decoder segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub stem: StemBank,
    pub stem_norm: NormLayer,
    /// `encoder[0]` is the second conv of stage 0; every later stage is a
    /// strided conv followed by one conv.
    pub encoder: Vec<Vec<ConvBlock>>,
    /// Deepest first.
    pub decoder: Vec<DecoderStage>,
    pub heads: StemBank,
}

impl UNet {
    fn build(b: &Builder, prefix: &str, subsets: &[usize]) -> Result<Self> {
        let spec = b.spec;
        let d = spec.spatial_dims;
        let ch = &spec.channels;
        let k = spec.kernel;
        let same = ConvGeometry::cube(d, k, 1, k / 2)?;
        let down = ConvGeometry::cube(d, spec.down_kernel, 2, (spec.down_kernel - 1) / 2)?;
        let up = ConvGeometry::cube(d, 2, 2, 0)?;

        let stem = StemBank::new(&format!("{prefix}stem"), spec.n_modalities, subsets, ch[0], &same)?;
        let stem_norm = b.norm(format!("{prefix}enc0/conv0/norm"), ch[0]);
        let block = |name: String, c_in: usize, c_out: usize, geom: &ConvGeometry, norm: bool, transposed: bool| -> Result<ConvBlock> {
            let w = b.weight(name.clone(), c_in, c_out, geom.k_flat())?;
            Ok(ConvBlock {
                conv: LrConvLayer::new(w, geom.clone(), transposed)?,
                norm: norm.then(|| b.norm(format!("{name}/norm"), c_out)),
            })
        };

        let mut encoder = Vec::with_capacity(ch.len());
        encoder.push(vec![block(format!("{prefix}enc0/conv1"), ch[0], ch[0], &same, true, false)?]);
        for s in 1..ch.len() {
            encoder.push(vec![
                block(format!("{prefix}enc{s}/conv0"), ch[s - 1], ch[s], &down, true, false)?,
                block(format!("{prefix}enc{s}/conv1"), ch[s], ch[s], &same, true, false)?,
            ]);
        }
        let mut decoder = Vec::new();
        for s in (0..ch.len() - 1).rev() {
            decoder.push(DecoderStage {
                up: block(format!("{prefix}dec{s}/up"), ch[s + 1], ch[s], &up, false, true)?,
                conv0: block(format!("{prefix}dec{s}/conv0"), 2 * ch[s], ch[s], &same, true, false)?,
                conv1: block(format!("{prefix}dec{s}/conv1"), ch[s], ch[s], &same, true, false)?,
            });
        }
        let one = ConvGeometry::cube(d, 1, 1, 0)?;
        let heads = StemBank::uniform(&format!("{prefix}head"), spec.n_modalities, subsets, ch[0], spec.classes, &one)?;
        Ok(Self {
            stem,
            stem_norm,
            encoder,
            decoder,
            heads,
        })
    }

    fn param_infos(&self) -> Vec<ParamInfo> {
        let mut v = self.stem.param_infos();
        v.extend(self.stem_norm.param_infos());
        for stage in &self.encoder {
            for blk in stage {
                v.extend(blk.param_infos());
            }
        }
        for stage in &self.decoder {
            for blk in [&stage.up, &stage.conv0, &stage.conv1] {
                v.extend(blk.param_infos());
            }
        }
        v.extend(self.heads.param_infos());
        v
    }

    fn blocks(&self) -> Vec<&ConvBlock> {
        let mut v: Vec<&ConvBlock> = self.encoder.iter().flatten().collect();
        for stage in &self.decoder {
            v.extend([&stage.up, &stage.conv0, &stage.conv1]);
        }
        v
    }

    fn forward(&self, g: &mut Graph, inputs: &ModalityInputs, mask: ModalityMask, slot: usize) -> Result<Var> {
        let x0 = self.stem.forward(g, inputs, mask)?;
        let spatial = g.value(x0).shape()[2..].to_vec();
        let factor = 1 << (self.encoder.len() - 1);
        if spatial.iter().any(|&n| n % factor != 0) {
            return Err(Error::Dimension(format!(
                "spatial extent {spatial:?} not divisible by the downsampling factor {factor}"
            )));
        }
        let x = self.stem_norm.instance(g, x0, slot)?;
        let mut x = g.tape.leaky_relu(x, LEAKY_SLOPE);
        let mut skips = Vec::new();
        for (s, stage) in self.encoder.iter().enumerate() {
            for blk in stage {
                x = blk.forward(g, x, slot)?;
            }
            if s + 1 < self.encoder.len() {
                skips.push(x);
            }
        }
        for stage in &self.decoder {
            let u = stage.up.forward(g, x, slot)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = g.tape.concat(&[u, skip], 1)?;
            x = stage.conv0.forward(g, cat, slot)?;
            x = stage.conv1.forward(g, x, slot)?;
        }
        let head = self.heads.convs.get(&mask.index()).ok_or_else(|| {
            Error::ModalityMismatch(format!("no head for subset {}", mask.symbols()))
        })?;
        head.forward(g, x, 0)
    }
}

/// One residual block: `x + fc1(relu(norm(fc0(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlock {
    pub fc0: LrLinearLayer,
    pub norm: NormLayer,
    pub fc1: LrLinearLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseHead {
    pub fc0: LrLinearLayer,
    pub fc1: LrLinearLayer,
}

/// Late-fusion classifier over per-modality feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionClassifier {
    pub n_modalities: usize,
    /// Per-subset projection of the concatenated features to the bottleneck.
    pub projections: BTreeMap<usize, LrLinearLayer>,
    pub proj_norm: NormLayer,
    pub blocks: Vec<FusionBlock>,
    pub final_norm: NormLayer,
    pub heads: BTreeMap<usize, DenseHead>,
}

impl FusionClassifier {
    fn build(b: &Builder, prefix: &str, subsets: &[usize]) -> Result<Self> {
        let spec = b.spec;
        let dense = |name: String, c_in: usize, c_out: usize| -> Result<LrLinearLayer> {
            let dims = LayerDims::new(1, c_in, c_out, 1)?;
            LrLinearLayer::new(LayerWeight::new(name, dims, WeightKind::Dense)?)
        };
        let mut projections = BTreeMap::new();
        let mut heads = BTreeMap::new();
        for &m in subsets {
            let mask = ModalityMask::new(m, spec.n_modalities)?;
            let width: usize = mask.modalities().iter().map(|&n| spec.feature_widths[n]).sum();
            projections.insert(m, dense(format!("{prefix}proj/m{m}"), width, spec.bottleneck)?);
            heads.insert(
                m,
                DenseHead {
                    fc0: dense(format!("{prefix}head/m{m}/fc0"), spec.bottleneck, spec.head_hidden)?,
                    fc1: dense(format!("{prefix}head/m{m}/fc1"), spec.head_hidden, spec.classes)?,
                },
            );
        }
        let mut blocks = Vec::new();
        for i in 0..spec.fusion_blocks {
            let lin = |name: String, c_in, c_out| -> Result<LrLinearLayer> {
                LrLinearLayer::new(b.weight(name, c_in, c_out, 1)?)
            };
            blocks.push(FusionBlock {
                fc0: lin(format!("{prefix}fuse{i}/fc0"), spec.bottleneck, spec.fusion_hidden)?,
                norm: b.norm(format!("{prefix}fuse{i}/fc0/norm"), spec.fusion_hidden),
                fc1: lin(format!("{prefix}fuse{i}/fc1"), spec.fusion_hidden, spec.bottleneck)?,
            });
        }
        Ok(Self {
            n_modalities: spec.n_modalities,
            projections,
            proj_norm: b.norm(format!("{prefix}proj/norm"), spec.bottleneck),
            blocks,
            final_norm: b.norm(format!("{prefix}final/norm"), spec.bottleneck),
            heads,
        })
    }

    fn param_infos(&self) -> Vec<ParamInfo> {
        let mut v: Vec<ParamInfo> = self
            .projections
            .values()
            .flat_map(|p| p.weight.param_infos())
            .collect();
        v.extend(self.proj_norm.param_infos());
        for blk in &self.blocks {
            v.extend(blk.fc0.weight.param_infos());
            v.extend(blk.norm.param_infos());
            v.extend(blk.fc1.weight.param_infos());
        }
        v.extend(self.final_norm.param_infos());
        for h in self.heads.values() {
            v.extend(h.fc0.weight.param_infos());
            v.extend(h.fc1.weight.param_infos());
        }
        v
    }

    fn forward(&self, g: &mut Graph, inputs: &ModalityInputs, mask: ModalityMask, slot: usize) -> Result<Var> {
        let m = mask.index();
        let missing = || Error::ModalityMismatch(format!("no projection for subset {}", mask.symbols()));
        let proj = self.projections.get(&m).ok_or_else(missing)?;
        let head = self.heads.get(&m).ok_or_else(missing)?;
        let x = concat_modalities(g, inputs, mask)?;
        let x = proj.forward(g, x, 0)?;
        let x = self.proj_norm.layer(g, x, slot)?;
        let mut x = g.tape.relu(x);
        for blk in &self.blocks {
            let h = blk.fc0.forward(g, x, slot)?;
            let h = blk.norm.layer(g, h, slot)?;
            let h = g.tape.relu(h);
            let h = blk.fc1.forward(g, h, slot)?;
            x = g.tape.add(x, h)?;
        }
        let x = self.final_norm.layer(g, x, slot)?;
        let h = head.fc0.forward(g, x, 0)?;
        let h = g.tape.relu(h);
        head.fc1.forward(g, h, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Unet(UNet),
    Fusion(FusionClassifier),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub prefix: String,
    /// Served model indices; a subset's slot is its position here.
    pub subsets: Vec<usize>,
    pub body: Body,
}

impl Member {
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        match &self.body {
            Body::Unet(u) => u.param_infos(),
            Body::Fusion(f) => f.param_infos(),
        }
    }

    /// Inner (non-stem, non-head) layer weights.
    pub fn inner_weights(&self) -> Vec<&LayerWeight> {
        match &self.body {
            Body::Unet(u) => u.blocks().into_iter().map(|b| &b.conv.weight).collect(),
            Body::Fusion(f) => f
                .blocks
                .iter()
                .flat_map(|b| [&b.fc0.weight, &b.fc1.weight])
                .collect(),
        }
    }
}

/// A buildable model: its architecture plus the member layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub kind: ModelKind,
    pub members: Vec<Member>,
}

impl Model {
    pub fn new(spec: &NetworkSpec, kind: ModelKind) -> Result<Self> {
        spec.validate()?;
        let big_m = spec.model_count();
        let policy = spec.rank_policy()?;
        let layouts: Vec<(String, Vec<usize>)> = match kind {
            ModelKind::Hyper => vec![(String::new(), (1..=big_m).collect())],
            ModelKind::Single => vec![(String::new(), vec![big_m])],
            ModelKind::Dedicated => (1..=big_m).map(|m| (format!("family/m{m}/"), vec![m])).collect(),
        };
        let mut members = Vec::with_capacity(layouts.len());
        for (prefix, subsets) in layouts {
            let b = Builder {
                spec,
                kind,
                policy,
                rows: subsets.len(),
            };
            let body = match spec.task {
                Task::Segmentation => Body::Unet(UNet::build(&b, &prefix, &subsets)?),
                Task::Classification => Body::Fusion(FusionClassifier::build(&b, &prefix, &subsets)?),
            };
            members.push(Member {
                prefix,
                subsets,
                body,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            kind,
            members,
        })
    }

    /// Every parameter the model declares, in build order.
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        self.members.iter().flat_map(Member::param_infos).collect()
    }

    /// Fresh parameters.
    pub fn init(&self, rng: &mut RngState) -> Result<ParamStore> {
        ParamStore::from_infos(&self.param_infos(), rng)
    }

    /// Model indices this model can evaluate.
    pub fn served_subsets(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.members.iter().flat_map(|m| m.subsets.clone()).collect();
        v.sort_unstable();
        v
    }

    fn route(&self, m: usize) -> Result<(&Member, usize)> {
        for member in &self.members {
            if let Some(slot) = member.subsets.iter().position(|&s| s == m) {
                return Ok((member, slot));
            }
        }
        Err(Error::ModalityMismatch(format!("model does not serve subset {m}")))
    }

    /// Logits `[B, classes, spatial...]` (segmentation) or `[B, classes]`.
    pub fn forward(&self, g: &mut Graph, inputs: &ModalityInputs, mask: ModalityMask) -> Result<Var> {
        if mask.n_modalities() != self.spec.n_modalities {
            return Err(Error::ModalityMismatch(format!(
                "mask over {} modalities for a {}-modality model",
                mask.n_modalities(),
                self.spec.n_modalities
            )));
        }
        let (member, slot) = self.route(mask.index())?;
        match &member.body {
            Body::Unet(u) => u.forward(g, inputs, mask, slot),
            Body::Fusion(f) => f.forward(g, inputs, mask, slot),
        }
    }

    /// Inner layer weights of every member.
    pub fn inner_weights(&self) -> Vec<&LayerWeight> {
        self.members.iter().flat_map(Member::inner_weights).collect()
    }

    /// Moves the B/C/D column norms of every CP layer into `A`.
    pub fn normalize(&self, store: &mut ParamStore) -> Result<()> {
        for w in self.inner_weights() {
            if matches!(w.kind, WeightKind::Cp { .. }) {
                let k = crate::kernels::cp_normalize(&w.cp_kernel(store)?)?;
                w.store_cp_kernel(store, &k)?;
            }
        }
        Ok(())
    }

    /// Hash identifying the parameter layout: spec plus model kind.
    pub fn hash(&self) -> String {
        let kind = serde_json::to_string(&self.kind).expect("kind serializes");
        let json = format!("{{\"kind\":{kind},\"spec\":{}}}", serde_json::to_string(&self.spec).expect("spec serializes"));
        hex(&Sha256::digest(json.as_bytes()))
    }
}

/// Parameter group of a path, used by the accounting report.
pub fn param_group(path: &str) -> &'static str {
    let local = path.strip_prefix("family/").map_or(path, |p| p.split_once('/').map_or(p, |(_, rest)| rest));
    if local.contains("/norm/") {
        "norm"
    } else if local.starts_with("stem/") || local.starts_with("proj/") {
        "stem"
    } else if local.starts_with("head/") {
        "head"
    } else {
        "inner"
    }
}

/// Parameter totals by group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub stem: usize,
    pub head: usize,
    pub norm: usize,
    pub inner: usize,
    /// Per tensor path.
    pub per_path: BTreeMap<String, usize>,
}

impl ParamCounts {
    pub fn from_infos(infos: &[ParamInfo]) -> Self {
        Self::from_pairs(infos.iter().map(|i| (i.path.as_str(), i.numel())))
    }

    pub fn from_store(store: &ParamStore) -> Self {
        Self::from_pairs(store.iter().map(|(p, t)| (p, t.len())))
    }

    fn from_pairs<'a>(pairs: impl Iterator<Item = (&'a str, usize)>) -> Self {
        let mut c = Self {
            total: 0,
            stem: 0,
            head: 0,
            norm: 0,
            inner: 0,
            per_path: BTreeMap::new(),
        };
        for (p, n) in pairs {
            c.total += n;
            match param_group(p) {
                "stem" => c.stem += n,
                "head" => c.head += n,
                "norm" => c.norm += n,
                _ => c.inner += n,
            }
            c.per_path.insert(p.to_string(), n);
        }
        c
    }

    /// Share of stem and head parameters in the total.
    pub fn stem_head_fraction(&self) -> f64 {
        (self.stem + self.head) as f64 / self.total as f64
    }
}

/// Counts of a model without materializing it.
pub fn count_parameters(model: &Model) -> ParamCounts {
    ParamCounts::from_infos(&model.param_infos())
}

/// One row of the rank table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRankRow {
    pub layer: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k_flat: usize,
    pub rank: usize,
    pub params: usize,
    /// Weights plus bias of the dense single-model layer.
    pub dense_params: usize,
}

pub fn rank_table(model: &Model) -> Vec<LayerRankRow> {
    model
        .inner_weights()
        .into_iter()
        .filter_map(|w| {
            w.rank().map(|rank| LayerRankRow {
                layer: w.name.clone(),
                c_in: w.dims.c_in,
                c_out: w.dims.c_out,
                k_flat: w.dims.k_flat,
                rank,
                params: w.param_count(),
                dense_params: w.dims.dense_weights() + w.dims.c_out,
            })
        })
        .collect()
}

pub fn build_unet_hyper(spec: &NetworkSpec, rng: &mut RngState) -> Result<(Model, ParamStore)> {
    if spec.task != Task::Segmentation {
        return Err(Error::Build("build_unet_hyper needs a segmentation spec".into()));
    }
    let model = Model::new(spec, ModelKind::Hyper)?;
    let store = model.init(rng)?;
    Ok((model, store))
}

pub fn build_fusion_classifier(spec: &NetworkSpec, rng: &mut RngState) -> Result<(Model, ParamStore)> {
    if spec.task != Task::Classification {
        return Err(Error::Build("build_fusion_classifier needs a classification spec".into()));
    }
    let model = Model::new(spec, ModelKind::Hyper)?;
    let store = model.init(rng)?;
    Ok((model, store))
}

pub fn build_dedicated_family(spec: &NetworkSpec, rng: &mut RngState) -> Result<(Model, ParamStore)> {
    let model = Model::new(spec, ModelKind::Dedicated)?;
    let store = model.init(rng)?;
    Ok((model, store))
}
