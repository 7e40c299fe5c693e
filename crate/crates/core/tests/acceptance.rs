//! Acceptance checks. Each check prints one `PASS`/`FAIL` line straight to
//! stderr (bypassing the test harness capture), in order, then the test
//! asserts that all of them passed.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use largo_core::ablation::{ablation_decomp, ablation_rank_sweep, run, EVAL_BATCH};
use largo_core::checkpoint::{load_checkpoint, save_checkpoint};
use largo_core::config::Config;
use largo_core::datagen::{chance_dice, generate};
use largo_core::diagnostics::gradcheck_spec;
use largo_core::eval::{complexity_report, evaluate_all_subsets, mean};
use largo_core::kernels::{
    cp_normalize, cp_param_count, cp_rank_for_budget, tucker_param_count, tucker_rank_for_budget, CpKernel, LayerDims,
};
use largo_core::conv::ConvGeometry;
use largo_core::layers::{lrconv_forward, LayerWeight, LrConvLayer, WeightKind};
use largo_core::networks::{Model, ModelKind, NetworkSpec};
use largo_core::params::ParamStore;
use largo_core::{DenseTensor, Error, RngState};

const BRATS: &str = include_str!("../../../configs/brats.toml");
const TOY_SEG: &str = include_str!("../../../configs/toy_seg.toml");
const TOY_CLS: &str = include_str!("../../../configs/toy_cls.toml");
const ABLATION: &str = include_str!("../../../configs/ablation_seg.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome, Error> {
    Ok(Outcome { pass, detail })
}

fn report(results: &mut Vec<bool>, name: &str, f: impl FnOnce() -> Result<Outcome, Error>) {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let line = format!("{} {name}: {detail} [{secs:.1}s]\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    results.push(pass);
}

fn within_time(start: Instant, limit: Duration) -> bool {
    start.elapsed() < limit
}

fn random(rng: &mut RngState, shape: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.normal()).unwrap()
}

fn random_cp(rng: &mut RngState, dims: LayerDims, rank: usize) -> CpKernel {
    let d = dims.has_kernel_mode().then(|| random(rng, &[dims.k_flat, rank]));
    CpKernel::from_factors(
        dims,
        random(rng, &[dims.m_count, rank]),
        random(rng, &[dims.c_in, rank]),
        random(rng, &[dims.c_out, rank]),
        d,
        random(rng, &[dims.m_count, dims.c_out]),
    )
    .unwrap()
}

fn below(rng: &mut RngState, n: usize) -> usize {
    rng.int_inclusive(0, n - 1)
}

fn random_dims(rng: &mut RngState, max_c: usize, max_k: usize) -> LayerDims {
    let n = 1 + below(rng, 4);
    LayerDims::new((1 << n) - 1, 1 + below(rng, max_c), 1 + below(rng, max_c), 1 + below(rng, max_k)).unwrap()
}

fn parameter_accounting() -> Result<Outcome, Error> {
    let spec = Config::parse_network(BRATS)?;
    let r = complexity_report(&spec)?;
    let hyper_err = (r.hyper.total as f64 / 22_596_253.0 - 1.0) * 100.0;
    let single_err = (r.single.total as f64 / 22_574_563.0 - 1.0) * 100.0;
    let share = r.stem_head_percent;
    outcome(
        hyper_err.abs() <= 2.0 && single_err.abs() <= 2.0 && (0.10..=0.17).contains(&share),
        format!(
            "hyper {} ({hyper_err:+.2}%), single {} ({single_err:+.2}%), stem+head {share:.3}%",
            r.hyper.total, r.single.total
        ),
    )
}

fn rank_tightness() -> Result<Outcome, Error> {
    let mut rng = RngState::new(101);
    let (mut cp_ok, mut tucker_ok, mut tucker_checked, mut infeasible) = (0, 0, 0, 0);
    let cases = 300;
    for _ in 0..cases {
        let dims = random_dims(&mut rng, 128, 27);
        let budget = dims.dense_weights() + dims.m_count * dims.c_out;
        let r = cp_rank_for_budget(&dims);
        let floor_ok = cp_param_count(&dims, 1) <= budget;
        if (!floor_ok && r == 1) || (cp_param_count(&dims, r) <= budget && cp_param_count(&dims, r + 1) > budget) {
            cp_ok += 1;
        }
        match tucker_rank_for_budget(&dims) {
            Ok(r) => {
                tucker_checked += 1;
                // Brute-force scan for the largest rank within budget.
                let mut best = 0;
                for k in 1..=dims.c_in.max(dims.c_out) * 4 {
                    if tucker_param_count(&dims, k) <= budget {
                        best = k;
                    }
                }
                if r == best.max(1) {
                    tucker_ok += 1;
                }
            }
            Err(Error::BudgetInfeasible(_)) => infeasible += 1,
            Err(e) => return Err(e),
        }
    }
    outcome(
        cp_ok == cases && tucker_ok == tucker_checked,
        format!("CP {cp_ok}/{cases} tight, Tucker {tucker_ok}/{tucker_checked} tight ({infeasible} infeasible)"),
    )
}

/// `sum_r a_r o b_r o c_r o d_r`, by loops.
fn cp_oracle(k: &CpKernel) -> DenseTensor {
    let LayerDims {
        m_count,
        c_in,
        c_out,
        k_flat,
    } = k.dims;
    DenseTensor::from_fn(&[m_count, c_in, c_out, k_flat], |ix| {
        (0..k.rank)
            .map(|r| {
                let d = k.d.as_ref().map_or(1.0, |d| d.get(&[ix[3], r]));
                k.a.get(&[ix[0], r]) * k.b.get(&[ix[1], r]) * k.c.get(&[ix[2], r]) * d
            })
            .sum()
    })
    .unwrap()
}

fn naive_conv2d(x: &DenseTensor, w: &DenseTensor, bias: &[f64], k: usize, stride: usize, pad: usize) -> DenseTensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[1];
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    DenseTensor::from_fn(&[c_out, oh, ow], |ix| {
        let (o, p, q) = (ix[0], ix[1], ix[2]);
        let mut s = bias[o];
        for i in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (p * stride + ky) as isize - pad as isize;
                    let c = (q * stride + kx) as isize - pad as isize;
                    if r >= 0 && c >= 0 && r < h as isize && c < wd as isize {
                        s += w.get(&[i, o, ky * k + kx]) * x.get(&[i, r as usize, c as usize]);
                    }
                }
            }
        }
        s
    })
    .unwrap()
}

fn reconstruction() -> Result<Outcome, Error> {
    let mut rng = RngState::new(202);
    let kernels = 120;
    let mut worst_slice: f64 = 0.0;
    for _ in 0..kernels {
        let dims = random_dims(&mut rng, 6, 9);
        let rank = 1 + below(&mut rng, 5);
        let kernel = random_cp(&mut rng, dims, rank);
        let full = kernel.reconstruct_full();
        worst_slice = worst_slice.max(full.rel_diff(&cp_oracle(&kernel)));
        for m in 1..=dims.m_count {
            worst_slice = worst_slice.max(kernel.reconstruct_slice(m)?.rel_diff(&full.row(m - 1)?));
        }
    }
    let convs = 60;
    let mut worst_conv: f64 = 0.0;
    for _ in 0..convs {
        let (c_in, c_out) = (1 + below(&mut rng, 4), 1 + below(&mut rng, 4));
        let k = [1, 3, 5][below(&mut rng, 3)];
        let stride = 1 + below(&mut rng, 2);
        let (h, w) = (k.max(3) + below(&mut rng, 5), k.max(3) + below(&mut rng, 5));
        let rank = 1 + below(&mut rng, 4);
        let dims = LayerDims::new(3, c_in, c_out, k * k)?;
        let weight = LayerWeight::new("l", dims, WeightKind::Cp { rank })?;
        let layer = LrConvLayer::new(weight, ConvGeometry::cube(2, k, stride, k / 2)?, false)?;
        let mut store = ParamStore::from_infos(&layer.weight.param_infos(), &mut RngState::new(0))?;
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v = rng.normal();
            }
        }
        let x = random(&mut rng, &[c_in, h, w]);
        let m = 1 + below(&mut rng, 3);
        let y = lrconv_forward(&layer, &store, &x, m)?;
        let kernel = layer.weight.cp_kernel(&store)?;
        let oracle = naive_conv2d(&x, &kernel.reconstruct_slice(m)?, kernel.bias.row(m - 1)?.data(), k, stride, k / 2);
        worst_conv = worst_conv.max(y.rel_diff(&oracle));
    }
    outcome(
        worst_slice <= 1e-10 && worst_conv <= 1e-10,
        format!("{kernels} kernels slice/full max rel {worst_slice:.1e}, {convs} convolutions max rel {worst_conv:.1e}"),
    )
}

fn normalization() -> Result<Outcome, Error> {
    let mut rng = RngState::new(303);
    let cases = 100;
    let (mut worst_w, mut worst_col): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let dims = random_dims(&mut rng, 8, 9);
        let rank = 1 + below(&mut rng, 6);
        let kernel = random_cp(&mut rng, dims, rank);
        let n = cp_normalize(&kernel)?;
        worst_w = worst_w.max(n.reconstruct_full().rel_diff(&kernel.reconstruct_full()));
        for f in [Some(&n.b), Some(&n.c), n.d.as_ref()].into_iter().flatten() {
            for r in 0..rank {
                let norm = f.column(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                worst_col = worst_col.max((norm - 1.0).abs());
            }
        }
    }
    outcome(
        worst_w <= 1e-10 && worst_col <= 1e-10,
        format!("{cases} kernels: W max rel change {worst_w:.1e}, column norm max dev {worst_col:.1e}"),
    )
}

fn gradient_check() -> Result<Outcome, Error> {
    let start = Instant::now();
    let spec = Config::parse_network(TOY_SEG)?;
    let small = NetworkSpec {
        channels: spec.channels.iter().map(|&c| c.min(32)).collect(),
        ..spec
    };
    let g = gradcheck_spec(&small, 7, 50)?;
    let required = ["A", "B", "C", "D", "bias", "stem", "head", "norm"];
    let counts: BTreeMap<&str, usize> = g.groups.iter().map(|x| (x.group.as_str(), x.coords)).collect();
    let covered = required.iter().all(|r| counts.get(r).is_some_and(|&c| c >= 50));
    let groups: Vec<String> = g.groups.iter().map(|x| format!("{} {:.1e}", x.group, x.max_rel_err)).collect();
    outcome(
        covered && g.max_rel_err <= 1e-4 && within_time(start, Duration::from_secs(120)),
        format!("max rel err {:.2e} over [{}], pre-norm biases |d| <= {:.1e}", g.max_rel_err, groups.join(", "), g.invariant_max_abs),
    )
}

struct EndToEnd {
    outcome: Outcome,
    run: Option<largo_core::ablation::RunResult>,
}

fn end_to_end() -> Result<EndToEnd, Error> {
    let start = Instant::now();
    let cfg = Config::parse(TOY_SEG)?;
    let data = generate(&cfg.data)?;
    let model = Model::new(&cfg.network, ModelKind::Hyper)?;
    let r = run(model, &data, &cfg.train, |_| {})?;
    let (train_ids, val_ids) = data.split();
    let classes = cfg.data.classes;
    let floor = mean((1..classes).map(|c| chance_dice(&data, &train_ids, &val_ids, c)));
    let n = cfg.network.n_modalities;
    let full = r.report.rows.last().map_or(f64::NAN, |x| x.mean);
    let singles: Vec<f64> = (0..n).map(|i| r.report.rows[(1 << i) - 1].mean).collect();
    let above_floor = singles.iter().all(|&s| s > floor);

    // Determinism: a shortened rerun of seed 1 reproduces the log prefix, and
    // two short runs of seed 2 agree exactly.
    let short = largo_core::training::TrainConfig { epochs: 3, ..cfg.train.clone() };
    let again = run(Model::new(&cfg.network, ModelKind::Hyper)?, &data, &short, |_| {})?;
    let same1 = again.log[..] == r.log[..3];
    let seed2 = largo_core::training::TrainConfig { seed: 2, ..short };
    let a = run(Model::new(&cfg.network, ModelKind::Hyper)?, &data, &seed2, |_| {})?;
    let b = run(Model::new(&cfg.network, ModelKind::Hyper)?, &data, &seed2, |_| {})?;
    let same2 = a.log == b.log && a.store == b.store;
    let differs = a.log != again.log;

    let first = r.log.first().map_or(f64::NAN, |e| e.loss);
    let last = r.log.last().map_or(f64::NAN, |e| e.loss);
    let shape_ok = data.len() >= 200 && cfg.data.image_size >= 32 && (30..=100).contains(&cfg.train.epochs);
    let pass = shape_ok
        && full >= 90.0
        && above_floor
        && same1
        && same2
        && differs
        && last < 0.5 * first
        && within_time(start, Duration::from_secs(600));
    let detail = format!(
        "full Dice {full:.2}, singles {:?} vs chance {floor:.2}, loss {first:.3} -> {last:.3}, \
         seed 1 log reproduced {same1}, seed 2 runs identical {same2}",
        singles.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    Ok(EndToEnd {
        outcome: Outcome { pass, detail },
        run: Some(r),
    })
}

fn rank_trend() -> Result<Outcome, Error> {
    let start = Instant::now();
    let cfg = Config::parse(ABLATION)?;
    let data = generate(&cfg.data)?;
    let rows = ablation_rank_sweep(&cfg.network, &[0.25, 0.5, 1.0, 2.0, 7.0], &data, &cfg.train, true, |_| {})?;
    let metrics: Vec<f64> = rows[..5].iter().map(|r| r.metric).collect();
    let drops: Vec<f64> = metrics.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
    let trend = drops.is_empty() || (drops.len() == 1 && drops[0] <= 0.5);
    let ded = rows[5].metric;
    let gap = (metrics[4] - ded).abs();
    let table: Vec<String> = rows.iter().map(|r| format!("{} {:.2}", r.label, r.metric)).collect();
    outcome(
        trend && gap <= 5.0 && within_time(start, Duration::from_secs(45 * 60)),
        format!("{}; 7R vs Ded. gap {gap:.2}", table.join(", ")),
    )
}

fn cp_vs_tucker() -> Result<Outcome, Error> {
    let start = Instant::now();
    let cfg = Config::parse(ABLATION)?;
    let data = generate(&cfg.data)?;
    let rows = ablation_decomp(&cfg.network, &data, &cfg.train, |_| {})?;
    let gap = (rows[0].metric - rows[1].metric).abs();
    outcome(
        gap <= 5.0 && within_time(start, Duration::from_secs(20 * 60)),
        format!(
            "CP {:.2} ({} params), Tucker {:.2} ({} params), gap {gap:.2}",
            rows[0].metric, rows[0].params, rows[1].metric, rows[1].params
        ),
    )
}

fn classification() -> Result<Outcome, Error> {
    let start = Instant::now();
    let cfg = Config::parse(TOY_CLS)?;
    let data = generate(&cfg.data)?;
    let r = run(Model::new(&cfg.network, ModelKind::Hyper)?, &data, &cfg.train, |_| {})?;
    let full = r.report.rows.last().map_or(f64::NAN, |x| x.mean);
    let n = cfg.network.n_modalities;
    let singles: Vec<f64> = (0..n).map(|i| r.report.rows[(1 << i) - 1].mean).collect();
    outcome(
        full >= 95.0 && singles.iter().all(|&s| full >= s) && within_time(start, Duration::from_secs(300)),
        format!("full accuracy {full:.2}, singles {:?}", singles.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>()),
    )
}

fn checkpoint_fidelity(r: &largo_core::ablation::RunResult) -> Result<Outcome, Error> {
    let cfg = Config::parse(TOY_SEG)?;
    let data = generate(&cfg.data)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &r.model, &r.store, Some(cfg.train.epochs), BTreeMap::new())?;
    let model = Model::new(&cfg.network, ModelKind::Hyper)?;
    let (store, _) = load_checkpoint(&path, &model)?;
    let (train_ids, val_ids) = data.split();
    let ids = if val_ids.is_empty() { train_ids } else { val_ids };
    let again = evaluate_all_subsets(&model, &store, &data, &ids, EVAL_BATCH)?;
    let bitwise = r.report.metrics_json() == again.metrics_json() && store == r.store;
    outcome(bitwise, format!("reloaded metrics bitwise equal: {bitwise}"))
}

#[test]
fn primary_criteria() {
    let mut results = Vec::new();
    report(&mut results, "1 parameter accounting", parameter_accounting);
    report(&mut results, "2 rank tightness", rank_tightness);
    report(&mut results, "3 reconstruction", reconstruction);
    report(&mut results, "4 normalization", normalization);
    report(&mut results, "5 gradient check", gradient_check);
    let mut e2e_run = None;
    report(&mut results, "6 end-to-end segmentation", || {
        let e = end_to_end()?;
        e2e_run = e.run;
        Ok(e.outcome)
    });
    report(&mut results, "7 rank trend", rank_trend);
    report(&mut results, "8 CP vs Tucker", cp_vs_tucker);
    report(&mut results, "9 classification", classification);
    report(&mut results, "10 checkpoint fidelity", || match &e2e_run {
        Some(r) => checkpoint_fidelity(r),
        None => outcome(false, "no trained model".into()),
    });
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
