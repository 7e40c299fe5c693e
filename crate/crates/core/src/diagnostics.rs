//! Finite-difference check of a whole network's training gradient, reported
//! per parameter group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::rel_error;
use crate::datagen::{generate, Batch, DatasetSpec, Layout};
use crate::error::{Error, Result};
use crate::networks::{param_group, Model, ModelKind, NetworkSpec, Task};
use crate::params::{Graph, ParamStore};
use crate::rng::RngState;
use crate::subset::ModalityMask;
use crate::training::{batch_inputs, loss_and_grads, total_loss, LossKind};

/// Group of a parameter path for gradient reporting: the factor letter for
/// factorized weights, then `bias`, `stem`, `head`, `norm` or `dense`.
pub fn grad_group(path: &str) -> &'static str {
    match param_group(path) {
        "stem" => return "stem",
        "head" => return "head",
        "norm" => return "norm",
        _ => {}
    }
    match path.rsplit('/').next() {
        Some("A") => "A",
        Some("B") => "B",
        Some("C") => "C",
        Some("D") => "D",
        Some("G") => "G",
        Some("bias") => "bias",
        _ => "dense",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkGradCheck {
    /// Model index of the sampled subset term.
    pub subset: usize,
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
    /// Largest analytic or numeric derivative over biases that feed an
    /// instance norm. The norm removes any per-channel shift, so these are
    /// exactly zero and a relative error would only measure roundoff.
    pub invariant_max_abs: f64,
    /// Sampled coordinates rejected because the difference stencil crossed a
    /// leaky-ReLU kink.
    pub skipped_at_kinks: usize,
}

const INVARIANT: &str = "bias (before norm)";

fn feeds_norm(store: &ParamStore, path: &str) -> bool {
    let Some(layer) = path.strip_suffix("/bias") else {
        return false;
    };
    // U-Net stems are summed and normalized by the first encoder norm.
    if let Some((prefix, _)) = layer.split_once("stem/") {
        return store.contains(&format!("{prefix}enc0/conv0/norm/gamma"));
    }
    store.contains(&format!("{layer}/norm/gamma"))
}

/// Loss and the activation sign pattern it was computed on.
fn objective(model: &Model, store: &ParamStore, batch: &Batch, m: usize, kind: LossKind) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new(store, false);
    let inputs = batch_inputs(&mut g, batch);
    let l = total_loss(model, &mut g, &inputs, &batch.targets, m, kind)?;
    Ok((g.value(l).data()[0], g.tape.kink_signature()))
}

/// Central differences with step `h` on up to `coords_per_group` coordinates of
/// every group that receives a gradient for subset `m`.
pub fn network_gradcheck(
    model: &Model,
    store: &ParamStore,
    batch: &Batch,
    m: usize,
    kind: LossKind,
    h: f64,
    coords_per_group: usize,
    rng: &mut RngState,
) -> Result<NetworkGradCheck> {
    let (f0, grads) = loss_and_grads(model, store, batch, m, kind)?;
    if !f0.is_finite() {
        return Err(Error::Evaluation(format!("loss is {f0}")));
    }
    let mut coords: BTreeMap<&'static str, Vec<(&str, usize)>> = BTreeMap::new();
    for (path, g) in &grads {
        let mut group = grad_group(path);
        if feeds_norm(store, path) {
            group = INVARIANT;
        }
        let list = coords.entry(group).or_default();
        list.extend((0..g.len()).map(|i| (path.as_str(), i)));
    }
    let mut work = store.clone();
    let mut groups = Vec::new();
    let mut invariant_abs: f64 = 0.0;
    let mut skipped = 0;
    let (_, base_sig) = objective(model, store, batch, m, kind)?;
    for (group, list) in coords {
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        // Random order over the group; coordinates whose +-h segment crosses
        // an activation kink are skipped, since the loss is not differentiable
        // along them and central differences are no oracle there.
        let order = rng.sample_indices(list.len(), list.len());
        for &k in &order {
            if checked == coords_per_group {
                break;
            }
            let (path, i) = list[k];
            let orig = work.get(path)?.data()[i];
            work.get_mut(path)?.data_mut()[i] = orig + h;
            let (fp, sp) = objective(model, &work, batch, m, kind)?;
            work.get_mut(path)?.data_mut()[i] = orig - h;
            let (fm, sm) = objective(model, &work, batch, m, kind)?;
            work.get_mut(path)?.data_mut()[i] = orig;
            if sp != sm || sp != base_sig {
                skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[path].data()[i];
            if group == INVARIANT {
                invariant_abs = invariant_abs.max(analytic.abs()).max(numeric.abs());
            } else {
                worst = worst.max(rel_error(analytic, numeric));
            }
        }
        if group != INVARIANT {
            groups.push(GroupCheck {
                group: group.to_string(),
                coords: checked,
                max_rel_err: worst,
            });
        }
    }
    Ok(NetworkGradCheck {
        subset: m,
        max_rel_err: groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max),
        groups,
        invariant_max_abs: invariant_abs,
        skipped_at_kinks: skipped,
    })
}

/// Step used by [`gradcheck_spec`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Checks the hypernetwork of `spec` at a seeded initialization on a two-sample
/// synthetic batch, for subset `m = 1` (so both loss terms are present).
pub fn gradcheck_spec(spec: &NetworkSpec, seed: u64, coords_per_group: usize) -> Result<NetworkGradCheck> {
    let model = Model::new(spec, ModelKind::Hyper)?;
    let base = RngState::new(seed);
    let store = model.init(&mut base.fork(0))?;
    let n = spec.n_modalities;
    let seg = spec.task == Task::Segmentation;
    let data = generate(&DatasetSpec {
        task: spec.task,
        n_modalities: n,
        size: 2,
        classes: spec.classes,
        seed,
        image_size: if seg { 4 * spec.downsample_factor().max(4) } else { 0 },
        layout: Layout::Separate,
        visibility: vec![],
        noise: vec![0.5; n],
        amplitude: 1.0,
        radius: (2.0, 4.0),
        feature_widths: spec.feature_widths.clone(),
        val_fraction: 0.0,
    })?;
    let batch = data.batch(&[0, 1], ModalityMask::full(n)?)?;
    let kind = if seg { LossKind::DiceCe } else { LossKind::Ce };
    network_gradcheck(&model, &store, &batch, 1, kind, GRADCHECK_STEP, coords_per_group, &mut base.fork(1))
}
