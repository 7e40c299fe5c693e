//! Synthetic multimodal datasets.
//!
//! Segmentation samples place one elliptical region per foreground class on a
//! square grid. A modality shows a class region only if the informativeness
//! matrix says so; otherwise that modality carries no trace of the class beyond
//! occlusion of the regions it does show. Classification samples are noisy
//! copies of per-class prototype vectors, one prototype set per modality.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Task;
use crate::rng::RngState;
use crate::subset::ModalityMask;
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Independent regions, later classes drawn over earlier ones.
    #[default]
    Separate,
    /// Class `c + 1` lies inside class `c`; a modality showing class `c` lights
    /// up every pixel with label `>= c`.
    Nested,
}

fn default_image_size() -> usize {
    32
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_radius() -> (f64, f64) {
    (4.0, 8.0)
}
fn default_amplitude() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub task: Task,
    pub n_modalities: usize,
    /// Number of samples, training and validation together.
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub layout: Layout,
    /// `visibility[n][c]`: modality `n` shows class `c`. Column 0 (background)
    /// is ignored. Empty means class `c` shows in modality `(c - 1) % N`.
    #[serde(default)]
    pub visibility: Vec<Vec<bool>>,
    /// Per-modality noise standard deviation.
    pub noise: Vec<f64>,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Range of the ellipse semi-axes in pixels.
    #[serde(default = "default_radius")]
    pub radius: (f64, f64),
    /// Classification: feature width per modality.
    #[serde(default)]
    pub feature_widths: Vec<usize>,
    /// Share of samples held out for validation (the highest ids).
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl DatasetSpec {
    pub fn visibility_matrix(&self) -> Vec<Vec<bool>> {
        if !self.visibility.is_empty() {
            return self.visibility.clone();
        }
        (0..self.n_modalities)
            .map(|n| {
                (0..self.classes)
                    .map(|c| c > 0 && (c - 1) % self.n_modalities == n)
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.n_modalities == 0 || self.classes < 2 || self.size == 0 {
            return bad("dataset needs >= 1 modality, >= 2 classes and >= 1 sample".into());
        }
        if self.noise.len() != self.n_modalities || self.noise.iter().any(|s| !(*s >= 0.0)) {
            return bad(format!("need {} non-negative noise levels", self.n_modalities));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        match self.task {
            Task::Segmentation => {
                let vis = self.visibility_matrix();
                if vis.len() != self.n_modalities || vis.iter().any(|r| r.len() != self.classes) {
                    return bad(format!(
                        "visibility must be {} rows of {} flags",
                        self.n_modalities, self.classes
                    ));
                }
                for c in 1..self.classes {
                    if !vis.iter().any(|r| r[c]) {
                        return bad(format!("class {c} is invisible in every modality"));
                    }
                }
                let (lo, hi) = self.radius;
                if !(lo >= 1.0 && hi >= lo && 2.0 * hi < self.image_size as f64) {
                    return bad(format!(
                        "radius range {:?} does not fit a {}-pixel image",
                        self.radius, self.image_size
                    ));
                }
            }
            Task::Classification => {
                if self.feature_widths.len() != self.n_modalities || self.feature_widths.contains(&0) {
                    return bad(format!("need {} positive feature widths", self.n_modalities));
                }
            }
        }
        Ok(())
    }

    pub fn val_count(&self) -> usize {
        (self.size as f64 * self.val_fraction).round() as usize
    }
}

/// Targets of a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Per modality: `[S, 1, H, W]` images or `[S, width]` features.
    pub modalities: Vec<DenseTensor>,
    /// Class ids: `S * H * W` labels (row-major per sample) or `S` labels.
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// `[H, W]` row-major class ids.
    Mask(Vec<usize>),
    Label(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: usize,
    /// Keyed by modality id; `[1, H, W]` or `[width]` each.
    pub modalities: BTreeMap<usize, DenseTensor>,
    pub target: Target,
}

/// Keeps only the modalities of `mask`.
pub fn apply_subset(sample: &MultimodalSample, mask: ModalityMask) -> Result<MultimodalSample> {
    let mut modalities = BTreeMap::new();
    for n in mask.modalities() {
        let t = sample.modalities.get(&n).ok_or_else(|| {
            Error::ModalityMismatch(format!("sample {} lacks modality {n}", sample.id))
        })?;
        modalities.insert(n, t.clone());
    }
    Ok(MultimodalSample {
        id: sample.id,
        modalities,
        target: sample.target.clone(),
    })
}

/// Stacked inputs and targets of several samples under one subset.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 1, H, W]` or `[B, width]` per present modality.
    pub inputs: BTreeMap<usize, DenseTensor>,
    pub targets: Vec<usize>,
    pub size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.spec.size
    }

    pub fn is_empty(&self) -> bool {
        self.spec.size == 0
    }

    /// Elements per target: `H * W` or 1.
    pub fn target_len(&self) -> usize {
        self.targets.len() / self.spec.size
    }

    fn per_sample(&self, n: usize) -> usize {
        self.modalities[n].len() / self.spec.size
    }

    fn sample_shape(&self, n: usize) -> Vec<usize> {
        self.modalities[n].shape()[1..].to_vec()
    }

    pub fn sample(&self, id: usize) -> Result<MultimodalSample> {
        if id >= self.len() {
            return Err(Error::Index {
                index: id,
                bound: self.len(),
            });
        }
        let mut modalities = BTreeMap::new();
        for n in 0..self.spec.n_modalities {
            let w = self.per_sample(n);
            let data = self.modalities[n].data()[id * w..(id + 1) * w].to_vec();
            modalities.insert(n, DenseTensor::new(self.sample_shape(n), data)?);
        }
        let t = self.target_len();
        let target = match self.spec.task {
            Task::Segmentation => Target::Mask(self.targets[id * t..(id + 1) * t].to_vec()),
            Task::Classification => Target::Label(self.targets[id]),
        };
        Ok(MultimodalSample {
            id,
            modalities,
            target,
        })
    }

    pub fn batch(&self, ids: &[usize], mask: ModalityMask) -> Result<Batch> {
        if mask.n_modalities() != self.spec.n_modalities {
            return Err(Error::ModalityMismatch(format!(
                "mask over {} modalities for a {}-modality dataset",
                mask.n_modalities(),
                self.spec.n_modalities
            )));
        }
        let mut inputs = BTreeMap::new();
        for n in mask.modalities() {
            let w = self.per_sample(n);
            let mut data = Vec::with_capacity(ids.len() * w);
            for &id in ids {
                if id >= self.len() {
                    return Err(Error::Index {
                        index: id,
                        bound: self.len(),
                    });
                }
                data.extend_from_slice(&self.modalities[n].data()[id * w..(id + 1) * w]);
            }
            let mut shape = vec![ids.len()];
            shape.extend(self.sample_shape(n));
            inputs.insert(n, DenseTensor::new(shape, data)?);
        }
        let t = self.target_len();
        let targets = ids
            .iter()
            .flat_map(|&id| self.targets[id * t..(id + 1) * t].iter().copied())
            .collect();
        Ok(Batch {
            inputs,
            targets,
            size: ids.len(),
        })
    }

    /// `(train ids, validation ids)`; validation takes the highest ids.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let n_val = self.spec.val_count().min(self.len());
        let cut = self.len() - n_val;
        ((0..cut).collect(), (cut..self.len()).collect())
    }

    /// Every stored value, for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for m in &self.modalities {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &t in &self.targets {
            out.extend_from_slice(&(t as u64).to_le_bytes());
        }
        out
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

fn random_ellipse(rng: &mut RngState, size: usize, lo: f64, hi: f64) -> Ellipse {
    let ry = lo + (hi - lo) * rng.uniform();
    let rx = lo + (hi - lo) * rng.uniform();
    let s = size as f64;
    Ellipse {
        cy: ry + (s - 2.0 * ry) * rng.uniform(),
        cx: rx + (s - 2.0 * rx) * rng.uniform(),
        ry,
        rx,
    }
}

/// Label map for one sample; redrawn until every class has at least 4 pixels.
fn draw_labels(spec: &DatasetSpec, rng: &mut RngState) -> Vec<usize> {
    let s = spec.image_size;
    let (lo, hi) = spec.radius;
    loop {
        let mut labels = vec![0; s * s];
        match spec.layout {
            Layout::Separate => {
                for c in 1..spec.classes {
                    let e = random_ellipse(rng, s, lo, hi);
                    for y in 0..s {
                        for x in 0..s {
                            if e.contains(y, x) {
                                labels[y * s + x] = c;
                            }
                        }
                    }
                }
            }
            Layout::Nested => {
                let outer = random_ellipse(rng, s, hi.min(lo * 2.0).max(lo), hi);
                let mut cur = outer;
                for c in 1..spec.classes {
                    for y in 0..s {
                        for x in 0..s {
                            if cur.contains(y, x) {
                                labels[y * s + x] = c;
                            }
                        }
                    }
                    // Next region: a shrunken ellipse inside the current one.
                    let f = 0.4 + 0.2 * rng.uniform();
                    let (ry, rx) = (cur.ry * f, cur.rx * f);
                    let oy = (cur.ry - ry) * 0.5 * (2.0 * rng.uniform() - 1.0);
                    let ox = (cur.rx - rx) * 0.5 * (2.0 * rng.uniform() - 1.0);
                    cur = Ellipse {
                        cy: cur.cy + oy,
                        cx: cur.cx + ox,
                        ry,
                        rx,
                    };
                }
            }
        }
        let mut counts = vec![0; spec.classes];
        for &l in &labels {
            counts[l] += 1;
        }
        if counts[1..].iter().all(|&c| c >= 4) {
            return labels;
        }
    }
}

/// Whether pixel label `l` lies in the region of class `c`.
fn in_region(layout: Layout, l: usize, c: usize) -> bool {
    match layout {
        Layout::Separate => l == c,
        Layout::Nested => l >= c,
    }
}

pub fn gen_segmentation(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.task != Task::Segmentation {
        return Err(Error::Parameter("gen_segmentation needs a segmentation spec".into()));
    }
    spec.validate()?;
    let vis = spec.visibility_matrix();
    let s = spec.image_size;
    let pixels = s * s;
    let mut label_rng = RngState::new(spec.seed).fork(0);
    let mut noise_rngs: Vec<RngState> = (0..spec.n_modalities)
        .map(|n| RngState::new(spec.seed).fork(1 + n as u64))
        .collect();
    let mut images: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.size * pixels); spec.n_modalities];
    let mut targets = Vec::with_capacity(spec.size * pixels);
    for _ in 0..spec.size {
        let labels = draw_labels(spec, &mut label_rng);
        for (n, img) in images.iter_mut().enumerate() {
            let sigma = spec.noise[n];
            for &l in &labels {
                let signal: f64 = (1..spec.classes)
                    .filter(|&c| vis[n][c] && in_region(spec.layout, l, c))
                    .map(|_| spec.amplitude)
                    .sum();
                img.push(signal + sigma * noise_rngs[n].normal());
            }
        }
        targets.extend(labels);
    }
    let modalities = images
        .into_iter()
        .map(|d| DenseTensor::new(vec![spec.size, 1, s, s], d))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        modalities,
        targets,
    })
}

pub fn gen_classification(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.task != Task::Classification {
        return Err(Error::Parameter("gen_classification needs a classification spec".into()));
    }
    spec.validate()?;
    let base = RngState::new(spec.seed);
    // Unit-norm prototypes per modality and class.
    let prototypes: Vec<Vec<Vec<f64>>> = spec
        .feature_widths
        .iter()
        .enumerate()
        .map(|(n, &w)| {
            let mut rng = base.fork(100 + n as u64);
            (0..spec.classes)
                .map(|_| {
                    let v: Vec<f64> = (0..w).map(|_| rng.normal()).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| spec.amplitude * x / norm).collect()
                })
                .collect()
        })
        .collect();
    let mut label_rng = base.fork(0);
    let targets: Vec<usize> = (0..spec.size)
        .map(|_| label_rng.int_inclusive(0, spec.classes - 1))
        .collect();
    let mut modalities = Vec::with_capacity(spec.n_modalities);
    for (n, &w) in spec.feature_widths.iter().enumerate() {
        let mut rng = base.fork(1 + n as u64);
        let mut data = Vec::with_capacity(spec.size * w);
        for &y in &targets {
            data.extend(prototypes[n][y].iter().map(|&p| p + spec.noise[n] * rng.normal()));
        }
        modalities.push(DenseTensor::new(vec![spec.size, w], data)?);
    }
    Ok(Dataset {
        spec: spec.clone(),
        modalities,
        targets,
    })
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.task {
        Task::Segmentation => gen_segmentation(spec),
        Task::Classification => gen_classification(spec),
    }
}

/// Dice (%) of the best input-independent prediction for class `c`.
///
/// Candidates are the empty mask and every superlevel set of the per-pixel
/// class frequency over `reference`; each is scored by mean per-sample Dice
/// over `eval`.
pub fn chance_dice(data: &Dataset, reference: &[usize], eval: &[usize], c: usize) -> f64 {
    let t = data.target_len();
    let mut freq = vec![0.0; t];
    for &id in reference {
        for (f, &l) in freq.iter_mut().zip(&data.targets[id * t..(id + 1) * t]) {
            if l == c {
                *f += 1.0;
            }
        }
    }
    let mut levels: Vec<f64> = freq.clone();
    levels.sort_by(|a, b| b.partial_cmp(a).unwrap());
    levels.dedup();
    let mut best = crate::eval::mean(eval.iter().map(|&id| {
        let g = &data.targets[id * t..(id + 1) * t];
        if g.contains(&c) {
            0.0
        } else {
            100.0
        }
    }));
    for &lev in levels.iter().filter(|&&l| l > 0.0) {
        let pred: Vec<bool> = freq.iter().map(|&f| f >= lev).collect();
        let score = crate::eval::mean(eval.iter().map(|&id| {
            let g = &data.targets[id * t..(id + 1) * t];
            let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
            for (&p, &l) in pred.iter().zip(g) {
                let gl = l == c;
                inter += (p && gl) as usize;
                np += p as usize;
                ng += gl as usize;
            }
            if np + ng == 0 {
                100.0
            } else {
                200.0 * inter as f64 / (np + ng) as f64
            }
        }));
        best = best.max(score);
    }
    best
}
