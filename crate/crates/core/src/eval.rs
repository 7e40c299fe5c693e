//! Metrics, per-subset evaluation and parameter accounting reports.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::networks::{count_parameters, rank_table, LayerRankRow, Model, ModelKind, NetworkSpec, Task};
use crate::params::{Graph, ParamStore};
use crate::subset::ModalityMask;
use crate::training::batch_inputs;

/// Arithmetic mean; 0 for an empty iterator.
pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `100 * 2|P & G| / (|P| + |G|)` for one class; 100 when both are empty.
pub fn dice_score(pred: &[usize], gt: &[usize], class: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p == class, g == class);
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    }
    Ok(if np + ng == 0 {
        100.0
    } else {
        200.0 * inter as f64 / (np + ng) as f64
    })
}

/// Voxels of the mask that touch a non-mask voxel or the border along an axis.
fn boundary(mask: &[bool], shape: &[usize]) -> Vec<Vec<usize>> {
    let strides = crate::tensor::strides_of(shape);
    let mut out = Vec::new();
    let mut idx = vec![0usize; shape.len()];
    for (flat, &inside) in mask.iter().enumerate() {
        let mut rem = flat;
        for (i, s) in strides.iter().enumerate() {
            idx[i] = rem / s;
            rem %= s;
        }
        if !inside {
            continue;
        }
        let edge = idx.iter().enumerate().any(|(ax, &i)| {
            i == 0
                || i + 1 == shape[ax]
                || !mask[flat - strides[ax]]
                || !mask[flat + strides[ax]]
        });
        if edge {
            out.push(idx.clone());
        }
    }
    out
}

fn directed(from: &[Vec<usize>], to: &[Vec<usize>]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    a.iter()
                        .zip(b)
                        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Linear-interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// 95th percentile of the pooled boundary-to-boundary distances in both
/// directions, for one class, in voxels. Both masks empty gives 0; exactly one
/// empty gives the image diagonal.
pub fn hd95(pred: &[usize], gt: &[usize], shape: &[usize], class: usize) -> Result<f64> {
    let n: usize = shape.iter().product();
    if pred.len() != n || gt.len() != n {
        return Err(Error::Dimension(format!(
            "masks of {} and {} voxels for shape {shape:?}",
            pred.len(),
            gt.len()
        )));
    }
    let p: Vec<bool> = pred.iter().map(|&v| v == class).collect();
    let g: Vec<bool> = gt.iter().map(|&v| v == class).collect();
    let (pe, ge) = (!p.contains(&true), !g.contains(&true));
    if pe && ge {
        return Ok(0.0);
    }
    if pe || ge {
        return Ok(shape.iter().map(|&d| (d * d) as f64).sum::<f64>().sqrt());
    }
    let bp = boundary(&p, shape);
    let bg = boundary(&g, shape);
    let mut d = directed(&bp, &bg);
    d.extend(directed(&bg, &bp));
    Ok(percentile(&mut d, 95.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    /// Model index; 0 for the average row.
    pub subset: usize,
    /// `•`/`∘` per modality.
    pub present: String,
    /// Dice (%) per foreground class, or `[accuracy %]`.
    pub scores: Vec<f64>,
    pub mean: f64,
    /// HD95 per foreground class (segmentation only).
    #[serde(default)]
    pub hd95: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub columns: Vec<String>,
    pub rows: Vec<SubsetRow>,
    pub average: SubsetRow,
    pub params: usize,
    /// Samples per second over all subsets. Machine-dependent.
    pub throughput: f64,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    /// The deterministic part of the report.
    pub fn metrics_eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.average == other.average
    }

    /// JSON of the report without the throughput field, so that reruns of
    /// the same state produce identical bytes.
    pub fn metrics_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("throughput");
        }
        v
    }

    pub fn row(&self, subset: usize) -> Option<&SubsetRow> {
        self.rows.iter().find(|r| r.subset == subset)
    }

    /// Human-readable table, one row per subset plus the average.
    pub fn table(&self) -> String {
        let n = self.rows.first().map_or(0, |r| r.present.chars().count());
        let w = (3 * n).saturating_sub(1).max("Average".len());
        let mut s = String::new();
        let mods: Vec<String> = (0..n).map(|i| format!("M{i}")).collect();
        let _ = write!(s, "{:<w$} |", mods.join(" "));
        for c in &self.columns {
            let _ = write!(s, " {c:>9}");
        }
        let _ = writeln!(s, " | {:>9}", "mean");
        let line = |s: &mut String, label: String, r: &SubsetRow| {
            let _ = write!(s, "{label} |");
            for v in &r.scores {
                let _ = write!(s, " {v:>9.2}");
            }
            let _ = writeln!(s, " | {:>9.2}", r.mean);
        };
        for r in &self.rows {
            let label = r.present.chars().map(|c| format!("{c:<2}")).collect::<Vec<_>>().join(" ");
            line(&mut s, format!("{label:<w$}"), r);
        }
        line(&mut s, format!("{:<w$}", "Average"), &self.average);
        if self.task == Task::Segmentation {
            let _ = writeln!(s, "HD95 (voxels), average over subsets: {:?}", self.average.hd95.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
        }
        let _ = writeln!(s, "parameters: {}   throughput: {:.1} samples/s (machine-dependent)", self.params, self.throughput);
        s
    }
}

fn argmax_rows(values: &[f64], classes: usize, per: usize) -> Vec<usize> {
    // values: [B, classes, per] -> [B, per]
    let batch = values.len() / (classes * per);
    let mut out = Vec::with_capacity(batch * per);
    for b in 0..batch {
        for s in 0..per {
            let mut best = 0;
            for c in 1..classes {
                if values[(b * classes + c) * per + s] > values[(b * classes + best) * per + s] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Class predictions of subset `mask` for `ids`, flattened per sample.
pub fn predict(model: &Model, store: &ParamStore, data: &Dataset, ids: &[usize], mask: ModalityMask, batch_size: usize) -> Result<Vec<usize>> {
    let classes = model.spec.classes;
    let mut out = Vec::new();
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk, mask)?;
        let mut g = Graph::new(store, false);
        let inputs = batch_inputs(&mut g, &batch);
        let logits = model.forward(&mut g, &inputs, mask)?;
        let v = g.value(logits);
        let per = v.len() / (v.shape()[0] * classes);
        out.extend(argmax_rows(v.data(), classes, per));
    }
    Ok(out)
}

/// Metrics of subset `m` on `ids`: Dice and HD95 per foreground class, or accuracy.
pub fn evaluate_subset(model: &Model, store: &ParamStore, data: &Dataset, ids: &[usize], m: usize, batch_size: usize) -> Result<SubsetRow> {
    let mask = ModalityMask::new(m, model.spec.n_modalities)?;
    if ids.is_empty() {
        return Err(Error::Evaluation("no samples to evaluate".into()));
    }
    let pred = predict(model, store, data, ids, mask, batch_size)?;
    let t = data.target_len();
    let (scores, hd) = if model.spec.task == Task::Segmentation {
        let image_shape = vec![data.spec.image_size; 2];
        let mut scores = Vec::new();
        let mut hds = Vec::new();
        for c in 1..model.spec.classes {
            let mut dice = Vec::with_capacity(ids.len());
            let mut hd = Vec::with_capacity(ids.len());
            for (i, &id) in ids.iter().enumerate() {
                let p = &pred[i * t..(i + 1) * t];
                let g = &data.targets[id * t..(id + 1) * t];
                dice.push(dice_score(p, g, c)?);
                hd.push(hd95(p, g, &image_shape, c)?);
            }
            scores.push(mean(dice));
            hds.push(mean(hd));
        }
        (scores, hds)
    } else {
        let correct = ids.iter().zip(&pred).filter(|(&id, &p)| data.targets[id] == p).count();
        (vec![100.0 * correct as f64 / ids.len() as f64], vec![])
    };
    Ok(SubsetRow {
        subset: m,
        present: mask.symbols(),
        mean: mean(scores.iter().copied()),
        scores,
        hd95: hd,
    })
}

/// Evaluates every subset the model serves on `ids`.
pub fn evaluate_all_subsets(model: &Model, store: &ParamStore, data: &Dataset, ids: &[usize], batch_size: usize) -> Result<EvalReport> {
    if data.spec.n_modalities != model.spec.n_modalities || data.spec.classes != model.spec.classes {
        return Err(Error::Evaluation(format!(
            "dataset ({} modalities, {} classes) does not fit the model ({}, {})",
            data.spec.n_modalities, data.spec.classes, model.spec.n_modalities, model.spec.classes
        )));
    }
    if ids.is_empty() {
        return Err(Error::Evaluation("no samples to evaluate".into()));
    }
    let seg = model.spec.task == Task::Segmentation;
    let columns: Vec<String> = if seg {
        (1..model.spec.classes).map(|c| format!("class{c}")).collect()
    } else {
        vec!["accuracy".into()]
    };
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut evaluated = 0usize;
    for m in model.served_subsets() {
        rows.push(evaluate_subset(model, store, data, ids, m, batch_size)?);
        evaluated += ids.len();
    }
    let secs = start.elapsed().as_secs_f64();
    let cols = columns.len();
    let col_mean = |f: &dyn Fn(&SubsetRow) -> &Vec<f64>, k: usize| mean(rows.iter().map(|r| f(r)[k]));
    let avg_scores: Vec<f64> = (0..cols).map(|k| col_mean(&|r| &r.scores, k)).collect();
    let avg_hd: Vec<f64> = if seg {
        (0..cols).map(|k| col_mean(&|r| &r.hd95, k)).collect()
    } else {
        vec![]
    };
    let average = SubsetRow {
        subset: 0,
        present: String::new(),
        mean: mean(rows.iter().map(|r| r.mean)),
        scores: avg_scores,
        hd95: avg_hd,
    };
    Ok(EvalReport {
        task: model.spec.task,
        columns,
        rows,
        average,
        params: count_parameters(model).total,
        throughput: if secs > 0.0 { evaluated as f64 / secs } else { 0.0 },
        config: serde_json::json!({ "kind": model.kind, "network": model.spec }),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub total: usize,
    pub stem: usize,
    pub head: usize,
    pub norm: usize,
    pub inner: usize,
}

impl GroupCounts {
    fn of(model: &Model) -> Self {
        let c = count_parameters(model);
        Self {
            total: c.total,
            stem: c.stem,
            head: c.head,
            norm: c.norm,
            inner: c.inner,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub hyper: GroupCounts,
    /// One dense network for the full subset.
    pub single: GroupCounts,
    /// `(hyper - single) / single` in percent.
    pub delta_percent: f64,
    /// Stem and head share of the hypernetwork, in percent.
    pub stem_head_percent: f64,
    pub ranks: Vec<LayerRankRow>,
}

impl ComplexityReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>14} {:>14}", "", "hypernetwork", "single dense");
        for (name, a, b) in [
            ("total", self.hyper.total, self.single.total),
            ("stem", self.hyper.stem, self.single.stem),
            ("head", self.hyper.head, self.single.head),
            ("norm", self.hyper.norm, self.single.norm),
            ("inner layers", self.hyper.inner, self.single.inner),
        ] {
            let _ = writeln!(s, "{name:<22} {a:>14} {b:>14}");
        }
        let _ = writeln!(s, "delta vs single: {:+.3}%", self.delta_percent);
        let _ = writeln!(s, "stem + head share: {:.3}% ({} parameters)", self.stem_head_percent, self.hyper.stem + self.hyper.head);
        let _ = writeln!(s, "\n{:<16} {:>6} {:>6} {:>4} {:>6} {:>10} {:>10}", "layer", "c_in", "c_out", "K", "rank", "params", "dense");
        for r in &self.ranks {
            let _ = writeln!(s, "{:<16} {:>6} {:>6} {:>4} {:>6} {:>10} {:>10}", r.layer, r.c_in, r.c_out, r.k_flat, r.rank, r.params, r.dense_params);
        }
        s
    }
}

/// Parameter totals of the hypernetwork against one dense model, without
/// allocating either.
pub fn complexity_report(spec: &NetworkSpec) -> Result<ComplexityReport> {
    let hyper = Model::new(spec, ModelKind::Hyper)?;
    let single = Model::new(spec, ModelKind::Single)?;
    let h = GroupCounts::of(&hyper);
    let s = GroupCounts::of(&single);
    Ok(ComplexityReport {
        delta_percent: 100.0 * (h.total as f64 - s.total as f64) / s.total as f64,
        stem_head_percent: 100.0 * (h.stem + h.head) as f64 / h.total as f64,
        ranks: rank_table(&hyper),
        hyper: h,
        single: s,
    })
}
