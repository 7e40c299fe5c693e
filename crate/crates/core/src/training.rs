//! Losses, subset sampling, optimizer and the training loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::datagen::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::layers::ModalityInputs;
use crate::networks::{param_group, Model};
use crate::params::{Graph, ParamStore};
use crate::rng::RngState;
use crate::subset::ModalityMask;
use crate::tensor::DenseTensor;

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Soft Dice plus cross-entropy.
    #[default]
    DiceCe,
    Ce,
}

/// When CP factors are renormalized during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormSchedule {
    PerStep,
    #[default]
    PerEpoch,
    InitOnly,
}

fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    5e-4
}
fn default_momentum() -> f64 {
    0.99
}
fn default_decay() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub normalize: NormSchedule,
    #[serde(default)]
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

fn one_hot(targets: &[usize], batch: usize, classes: usize) -> Result<DenseTensor> {
    let per = targets.len() / batch;
    let mut data = vec![0.0; batch * classes * per];
    for b in 0..batch {
        for (s, &t) in targets[b * per..(b + 1) * per].iter().enumerate() {
            if t >= classes {
                return Err(Error::Parameter(format!("class id {t} >= {classes} classes")));
            }
            data[(b * classes + t) * per + s] = 1.0;
        }
    }
    DenseTensor::new(vec![batch, classes, per], data)
}

/// Reshapes logits `[B, C, ...]` to `[B, C, S]` and builds the matching one-hot target.
fn flat_logits(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<(Var, Var)> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::Dimension(format!("logits of shape {shape:?}")));
    }
    let (b, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    if targets.len() != b * s {
        return Err(Error::Dimension(format!(
            "{} targets for logits {shape:?}",
            targets.len()
        )));
    }
    let flat = g.tape.reshape(logits, &[b, c, s])?;
    let t = g.input(one_hot(targets, b, c)?);
    Ok((flat, t))
}

/// Mean negative log-likelihood over samples and positions.
pub fn ce_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let (flat, t) = flat_logits(g, logits, targets)?;
    let logp = g.tape.log_softmax(flat, 1)?;
    let picked = g.tape.mul(logp, t)?;
    let total = g.tape.sum(picked);
    Ok(g.tape.scale(total, -1.0 / targets.len() as f64))
}

/// `1 - mean_{b,c} (2 |P_bc G_bc| + eps) / (|P_bc| + |G_bc| + eps)` on softmax
/// probabilities, every class including background.
pub fn dice_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let (flat, t) = flat_logits(g, logits, targets)?;
    let p = g.tape.softmax(flat, 1)?;
    let pt = g.tape.mul(p, t)?;
    let inter = g.tape.sum_last(pt);
    let num = g.tape.scale(inter, 2.0);
    let num = g.tape.add_scalar(num, DICE_EPS);
    let ps = g.tape.sum_last(p);
    let ts = g.tape.sum_last(t);
    let den = g.tape.add(ps, ts)?;
    let den = g.tape.add_scalar(den, DICE_EPS);
    let dice = g.tape.div(num, den)?;
    let mean = g.tape.mean(dice);
    let neg = g.tape.scale(mean, -1.0);
    Ok(g.tape.add_scalar(neg, 1.0))
}

pub fn task_loss(g: &mut Graph, logits: Var, targets: &[usize], kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::Ce => ce_loss(g, logits, targets),
        LossKind::DiceCe => {
            let d = dice_loss(g, logits, targets)?;
            let c = ce_loss(g, logits, targets)?;
            g.tape.add(d, c)
        }
    }
}

/// Uniform model index in `1..=M`.
pub fn sample_subset(rng: &mut RngState, m_count: usize) -> usize {
    rng.int_inclusive(1, m_count.max(1))
}

/// Records every modality of `batch` as a graph input.
pub fn batch_inputs(g: &mut Graph, batch: &Batch) -> ModalityInputs {
    batch
        .inputs
        .iter()
        .map(|(&n, t)| (n, g.input(t.clone())))
        .collect()
}

fn restrict(inputs: &ModalityInputs, mask: ModalityMask) -> ModalityInputs {
    inputs
        .iter()
        .filter(|(&n, _)| mask.contains(n))
        .map(|(&n, &v)| (n, v))
        .collect()
}

/// Loss of the model for subset `mask` on a batch that carries every modality.
pub fn subset_loss(
    model: &Model,
    g: &mut Graph,
    inputs: &ModalityInputs,
    targets: &[usize],
    mask: ModalityMask,
    kind: LossKind,
) -> Result<Var> {
    let logits = model.forward(g, &restrict(inputs, mask), mask)?;
    task_loss(g, logits, targets, kind)
}

/// `(L(subset m) + L(full)) / 2`; a single term when `m` is the full subset.
pub fn total_loss(
    model: &Model,
    g: &mut Graph,
    inputs: &ModalityInputs,
    targets: &[usize],
    m: usize,
    kind: LossKind,
) -> Result<Var> {
    let n = model.spec.n_modalities;
    let mask = ModalityMask::new(m, n)?;
    let full = ModalityMask::full(n)?;
    let lf = subset_loss(model, g, inputs, targets, full, kind)?;
    if mask == full {
        return Ok(lf);
    }
    let lm = subset_loss(model, g, inputs, targets, mask, kind)?;
    let sum = g.tape.add(lm, lf)?;
    Ok(g.tape.scale(sum, 0.5))
}

/// Whether weight decay applies: factor matrices and dense weights, not biases
/// or normalization parameters.
pub fn decays(path: &str) -> bool {
    !path.ends_with("/bias") && param_group(path) != "norm"
}

/// SGD with Nesterov momentum.
///
/// For every parameter `p` with gradient `g`:
///
/// ```text
/// g <- g + wd * p          (decayed parameters only)
/// v <- mu * v + g
/// p <- p - lr * (g + mu * v)
/// ```
///
/// Parameters without a gradient in this step are left untouched, momentum included.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, DenseTensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.lr, c.momentum, c.weight_decay)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, DenseTensor>) -> Result<()> {
        for (path, grad) in grads {
            let p = store.get_mut(path)?;
            p.expect_same_shape(grad)?;
            let mut g = grad.clone();
            if self.weight_decay > 0.0 && decays(path) {
                g.axpy(self.weight_decay, p)?;
            }
            let mu = self.momentum;
            let v = self
                .velocity
                .entry(path.clone())
                .or_insert_with(|| DenseTensor::zeros(g.shape()).expect("valid shape"));
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = mu * *vi + gi;
                *pi -= self.lr * (gi + mu * *vi);
            }
        }
        Ok(())
    }
}

/// One Nesterov step with fresh optimizer state.
pub fn sgd_nesterov_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, DenseTensor>,
    config: &TrainConfig,
) -> Result<()> {
    Sgd::from_config(config).step(store, grads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's steps.
    pub loss: f64,
    pub steps: usize,
}

/// Loss and gradients of the objective on one batch.
pub fn loss_and_grads(
    model: &Model,
    store: &ParamStore,
    batch: &Batch,
    m: usize,
    kind: LossKind,
) -> Result<(f64, BTreeMap<String, DenseTensor>)> {
    let mut g = Graph::new(store, true);
    let inputs = batch_inputs(&mut g, batch);
    let loss = total_loss(model, &mut g, &inputs, &batch.targets, m, kind)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    Ok((value, g.gradients(loss)?))
}

/// Loss and gradients of subset `m`'s loss alone.
pub fn fixed_loss_and_grads(
    model: &Model,
    store: &ParamStore,
    batch: &Batch,
    m: usize,
    kind: LossKind,
) -> Result<(f64, BTreeMap<String, DenseTensor>)> {
    let mut g = Graph::new(store, true);
    let inputs = batch_inputs(&mut g, batch);
    let mask = ModalityMask::new(m, model.spec.n_modalities)?;
    let loss = subset_loss(model, &mut g, &inputs, &batch.targets, mask, kind)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    Ok((value, g.gradients(loss)?))
}

/// Which subset each training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubsetSchedule {
    /// Draw `m` uniformly per step; objective `(L(m) + L(full)) / 2`.
    Random,
    /// Always subset `m`, objective `L(m)`. Used to train one dedicated model.
    Fixed(usize),
}

/// Trains `store` in place on `train_ids` and returns the per-epoch log.
///
/// Each step draws `m` uniformly from `1..=M` and minimizes the mean of the
/// subset-`m` and full-subset losses. The shuffling and subset streams are
/// forks of `config.seed`, so the run is a pure function of its inputs.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    data: &Dataset,
    train_ids: &[usize],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    train_schedule(model, store, data, train_ids, config, SubsetSchedule::Random, on_epoch)
}

/// [`train`] with an explicit subset schedule.
pub fn train_schedule(
    model: &Model,
    store: &mut ParamStore,
    data: &Dataset,
    train_ids: &[usize],
    config: &TrainConfig,
    schedule: SubsetSchedule,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if data.spec.n_modalities != model.spec.n_modalities {
        return Err(Error::ModalityMismatch(format!(
            "dataset has {} modalities, model expects {}",
            data.spec.n_modalities, model.spec.n_modalities
        )));
    }
    if train_ids.is_empty() {
        return Err(Error::Parameter("no training samples".into()));
    }
    let full = ModalityMask::full(model.spec.n_modalities)?;
    let m_count = model.spec.model_count();
    let base = RngState::new(config.seed);
    let mut order_rng = base.fork(1);
    let mut subset_rng = base.fork(2);
    let mut opt = Sgd::from_config(config);
    if config.normalize == NormSchedule::InitOnly {
        model.normalize(store)?;
    }
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order = train_ids.to_vec();
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut steps = 0;
        for ids in order.chunks(config.batch_size) {
            let batch = data.batch(ids, full)?;
            let (loss, grads) = match schedule {
                SubsetSchedule::Random => {
                    let m = sample_subset(&mut subset_rng, m_count);
                    loss_and_grads(model, store, &batch, m, config.loss)?
                }
                SubsetSchedule::Fixed(m) => fixed_loss_and_grads(model, store, &batch, m, config.loss)?,
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            opt.step(store, &grads)?;
            if config.normalize == NormSchedule::PerStep {
                model.normalize(store)?;
            }
            total += loss;
            steps += 1;
            step += 1;
        }
        if config.normalize == NormSchedule::PerEpoch {
            model.normalize(store)?;
        }
        let rec = EpochRecord {
            epoch,
            loss: total / steps as f64,
            steps,
        };
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(log)
}
