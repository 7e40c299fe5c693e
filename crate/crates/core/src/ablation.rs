//! Training drivers shared by the CLI and the ablation studies.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::Result;
use crate::eval::{evaluate_all_subsets, EvalReport};
use crate::networks::{count_parameters, Decomposition, Model, ModelKind, NetworkSpec};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::training::{train, train_schedule, EpochRecord, SubsetSchedule, TrainConfig};

/// Batch size used for evaluation passes.
pub const EVAL_BATCH: usize = 16;

pub struct RunResult {
    pub model: Model,
    pub store: ParamStore,
    pub log: Vec<EpochRecord>,
    /// Evaluation on the validation split.
    pub report: EvalReport,
}

/// Initializes `model` from `config.seed`, trains on the training split and
/// evaluates on the validation split.
pub fn run(model: Model, data: &Dataset, config: &TrainConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<RunResult> {
    let mut store = model.init(&mut RngState::new(config.seed).fork(0))?;
    let (train_ids, val_ids) = data.split();
    let log = train(&model, &mut store, data, &train_ids, config, on_epoch)?;
    let eval_ids = if val_ids.is_empty() { &train_ids } else { &val_ids };
    let report = evaluate_all_subsets(&model, &store, data, eval_ids, EVAL_BATCH)?;
    Ok(RunResult {
        model,
        store,
        log,
        report,
    })
}

/// Trains every member of a dedicated family on its own subset for the full
/// schedule, one after the other, then evaluates the family. The log holds the
/// per-epoch mean of the members' losses.
pub fn run_dedicated(model: Model, data: &Dataset, config: &TrainConfig) -> Result<RunResult> {
    if model.kind != ModelKind::Dedicated {
        return Err(crate::error::Error::Build("run_dedicated needs a dedicated family".into()));
    }
    let mut store = model.init(&mut RngState::new(config.seed).fork(0))?;
    let (train_ids, val_ids) = data.split();
    let members = model.served_subsets();
    let mut log: Vec<EpochRecord> = Vec::new();
    for &m in &members {
        let member_log = train_schedule(&model, &mut store, data, &train_ids, config, SubsetSchedule::Fixed(m), |_| {})?;
        if log.is_empty() {
            log = member_log.iter().map(|e| EpochRecord { loss: 0.0, steps: 0, ..e.clone() }).collect();
        }
        for (acc, e) in log.iter_mut().zip(&member_log) {
            acc.loss += e.loss / members.len() as f64;
            acc.steps += e.steps;
        }
    }
    let eval_ids = if val_ids.is_empty() { &train_ids } else { &val_ids };
    let report = evaluate_all_subsets(&model, &store, data, eval_ids, EVAL_BATCH)?;
    Ok(RunResult {
        model,
        store,
        log,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub params: usize,
    /// Average over subsets of the per-subset mean metric.
    pub metric: f64,
    /// Per-subset mean metric in model-index order.
    pub per_subset: Vec<f64>,
    pub final_loss: f64,
}

fn row(label: String, r: &RunResult) -> AblationRow {
    AblationRow {
        label,
        params: count_parameters(&r.model).total,
        metric: r.report.average.mean,
        per_subset: r.report.rows.iter().map(|x| x.mean).collect(),
        final_loss: r.log.last().map_or(f64::NAN, |e| e.loss),
    }
}

/// Trains one hypernetwork per rank multiplier, plus the dedicated family when
/// `dedicated` is set, all with the same data, config and seed. The dedicated
/// family goes through [`run`] too, so it gets the same number of optimizer
/// steps as each hypernetwork, spread over its members by the subset draw.
pub fn ablation_rank_sweep(
    base: &NetworkSpec,
    multipliers: &[f64],
    data: &Dataset,
    config: &TrainConfig,
    dedicated: bool,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &f in multipliers {
        let mut spec = base.clone();
        spec.rank = None;
        spec.rank_multiplier = if f == 1.0 { None } else { Some(f) };
        let model = Model::new(&spec, ModelKind::Hyper)?;
        let r = run(model, data, config, |_| {})?;
        let row = row(format!("{f}R"), &r);
        progress(&row);
        rows.push(row);
    }
    if dedicated {
        let model = Model::new(base, ModelKind::Dedicated)?;
        let r = run(model, data, config, |_| {})?;
        let row = row("Ded.".into(), &r);
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// CP and Tucker hypernetworks at their budget ranks, identical otherwise.
pub fn ablation_decomp(
    base: &NetworkSpec,
    data: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, d) in [("CP", Decomposition::Cp), ("Tucker", Decomposition::Tucker)] {
        let mut spec = base.clone();
        spec.decomposition = d;
        spec.rank = None;
        spec.rank_multiplier = None;
        let r = run(Model::new(&spec, ModelKind::Hyper)?, data, config, |_| {})?;
        let row = row(label.into(), &r);
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}
