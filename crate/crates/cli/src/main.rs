use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use largo_core::ablation::{ablation_decomp, ablation_rank_sweep, run, run_dedicated, AblationRow, EVAL_BATCH};
use largo_core::checkpoint::{append_jsonl, load_checkpoint, load_dataset, save_checkpoint, save_dataset};
use largo_core::config::Config;
use largo_core::datagen::{generate, Dataset};
use largo_core::diagnostics::gradcheck_spec;
use largo_core::eval::{complexity_report, evaluate_all_subsets, evaluate_subset, EvalReport};
use largo_core::networks::{Decomposition, Model, ModelKind, NetworkSpec};
use largo_core::{Error, Result};

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_COORDS: usize = 50;

const PRESETS: &[(&str, &str)] = &[
    ("toy", include_str!("../../../configs/toy_seg.toml")),
    ("toy_seg", include_str!("../../../configs/toy_seg.toml")),
    ("toy_cls", include_str!("../../../configs/toy_cls.toml")),
    ("ablation", include_str!("../../../configs/ablation_seg.toml")),
    ("brats", include_str!("../../../configs/brats.toml")),
];

#[derive(Parser)]
#[command(name = "largo", version, about = "Low-rank hypernetworks for missing-modality learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, evaluation and a checkpoint to --out.
    Train(RunArgs),
    /// Evaluate a checkpoint on every subset (or one with --subset).
    Eval(RunArgs),
    /// Print parameter totals, group fractions and the rank table.
    Params(RunArgs),
    /// Finite-difference check of the training gradient; exits 1 above 1e-4.
    Gradcheck(RunArgs),
    /// Generate the synthetic dataset of a config and save it to --out.
    GenData(RunArgs),
    /// Train the hypernetwork at several rank multiples and the dedicated family.
    AblateRank(RunArgs),
    /// Train CP and Tucker hypernetworks at their budget ranks.
    AblateDecomp(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Decomp {
    Cp,
    Tucker,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Hyper,
    Dedicated,
    Single,
}

#[derive(Args)]
struct RunArgs {
    /// Config file (TOML) or a preset: toy, toy_seg, toy_cls, ablation, brats.
    #[arg(long)]
    spec: String,
    /// Dataset written by gen-data. Defaults to generating from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "LARGO_OUT_DIR", default_value = "largo-out")]
    out: PathBuf,
    /// Overrides the training seed (the data seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to evaluate. Defaults to <out>/model.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    decomp: Option<Decomp>,
    /// Multiple of the budget rank.
    #[arg(long, value_parser = ["0.25", "0.5", "1", "2", "7"])]
    rank_mult: Option<String>,
    /// Model index (modality bitmask, decimal or 0b...) to evaluate alone.
    #[arg(long, value_parser = parse_bitmask)]
    subset: Option<usize>,
    /// Model family for train and eval.
    #[arg(long, value_enum, default_value = "hyper")]
    family: Family,
}

fn parse_bitmask(s: &str) -> std::result::Result<usize, String> {
    let parsed = match s.strip_prefix("0b") {
        Some(bits) => usize::from_str_radix(bits, 2),
        None => s.parse(),
    };
    parsed.map_err(|e| format!("{s:?} is not a bitmask: {e}"))
}

impl RunArgs {
    fn text(&self) -> Result<String> {
        let p = Path::new(&self.spec);
        if p.exists() {
            return Ok(fs::read_to_string(p)?);
        }
        PRESETS
            .iter()
            .find(|(name, _)| *name == self.spec)
            .map(|(_, text)| text.to_string())
            .ok_or_else(|| Error::Format(format!("{} is neither a file nor a preset", self.spec)))
    }

    fn apply(&self, spec: &mut NetworkSpec) -> Result<()> {
        if let Some(d) = self.decomp {
            spec.decomposition = match d {
                Decomp::Cp => Decomposition::Cp,
                Decomp::Tucker => Decomposition::Tucker,
            };
        }
        if let Some(f) = &self.rank_mult {
            let f: f64 = f.parse().map_err(|_| Error::Parameter(format!("rank multiple {f}")))?;
            spec.rank = None;
            spec.rank_multiplier = if f == 1.0 { None } else { Some(f) };
        }
        spec.validate()
    }

    fn network(&self) -> Result<NetworkSpec> {
        let mut spec = Config::parse_network(&self.text()?)?;
        self.apply(&mut spec)?;
        Ok(spec)
    }

    fn config(&self) -> Result<Config> {
        let mut cfg = Config::parse(&self.text()?)?;
        self.apply(&mut cfg.network)?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn dataset(&self, cfg: &Config) -> Result<Dataset> {
        match &self.data {
            Some(p) => load_dataset(p),
            None => generate(&cfg.data),
        }
    }

    fn kind(&self) -> ModelKind {
        match self.family {
            Family::Hyper => ModelKind::Hyper,
            Family::Dedicated => ModelKind::Dedicated,
            Family::Single => ModelKind::Single,
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join("eval.json"), &report.metrics_json())?;
    write_json(
        &dir.join("throughput.json"),
        &serde_json::json!({ "eval_samples_per_sec": report.throughput, "machine_dependent": true }),
    )
}

fn train_cmd(a: &RunArgs) -> Result<()> {
    let cfg = a.config()?;
    let data = a.dataset(&cfg)?;
    let out = a.out_dir()?;
    let metrics = out.join("metrics.jsonl");
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    let model = Model::new(&cfg.network, a.kind())?;
    let start = Instant::now();
    let mut io_err = None;
    let mut log_epoch = |e: &largo_core::training::EpochRecord| {
        println!("epoch {:>3}  loss {:.5}", e.epoch, e.loss);
        if let Err(err) = append_jsonl(&metrics, e) {
            io_err.get_or_insert(err);
        }
    };
    let r = if model.kind == ModelKind::Dedicated {
        let r = run_dedicated(model, &data, &cfg.train)?;
        r.log.iter().for_each(&mut log_epoch);
        r
    } else {
        run(model, &data, &cfg.train, &mut log_epoch)?
    };
    if let Some(e) = io_err {
        return Err(e);
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = BTreeMap::from([("average".to_string(), r.report.average.mean)]);
    save_checkpoint(&out.join("model.ckpt"), &r.model, &r.store, Some(cfg.train.epochs), summary)?;
    write_report(out, &r.report)?;
    write_json(
        &out.join("train_time.json"),
        &serde_json::json!({ "seconds": secs, "machine_dependent": true }),
    )?;
    print!("{}", r.report.table());
    println!("wrote {}", out.display());
    Ok(())
}

fn eval_cmd(a: &RunArgs) -> Result<()> {
    let cfg = a.config()?;
    let data = a.dataset(&cfg)?;
    let model = Model::new(&cfg.network, a.kind())?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.out.join("model.ckpt"));
    let (store, _) = load_checkpoint(&ckpt, &model)?;
    let (train_ids, val_ids) = data.split();
    let ids = if val_ids.is_empty() { train_ids } else { val_ids };
    if let Some(m) = a.subset {
        let row = evaluate_subset(&model, &store, &data, &ids, m, EVAL_BATCH)?;
        println!("subset {m} [{}]: scores {:?} mean {:.4}", row.present, row.scores, row.mean);
        let out = a.out_dir()?;
        return write_json(&out.join(format!("eval_subset{m}.json")), &serde_json::to_value(&row)?);
    }
    let report = evaluate_all_subsets(&model, &store, &data, &ids, EVAL_BATCH)?;
    let out = a.out_dir()?;
    write_report(out, &report)?;
    print!("{}", report.table());
    Ok(())
}

fn params_cmd(a: &RunArgs) -> Result<()> {
    let spec = a.network()?;
    let r = complexity_report(&spec)?;
    print!("{}", r.table());
    Ok(())
}

fn gradcheck_cmd(a: &RunArgs) -> Result<bool> {
    let spec = a.network()?;
    let r = gradcheck_spec(&spec, a.seed.unwrap_or(7), GRADCHECK_COORDS)?;
    for g in &r.groups {
        println!("{:<6} {:>4} coords  max rel err {:.3e}", g.group, g.coords, g.max_rel_err);
    }
    println!("biases before a norm (exactly zero gradient): max |d| {:.1e}", r.invariant_max_abs);
    println!("skipped at activation kinks: {}", r.skipped_at_kinks);
    println!("max rel err {:.3e} (tolerance {GRADCHECK_TOL:.0e})", r.max_rel_err);
    Ok(r.max_rel_err <= GRADCHECK_TOL)
}

fn gen_data_cmd(a: &RunArgs) -> Result<()> {
    let mut cfg = Config::parse(&a.text()?)?;
    if let Some(s) = a.seed {
        cfg.data.seed = s;
    }
    let data = generate(&cfg.data)?;
    let path = a.out_dir()?.join("data.bin");
    save_dataset(&path, &data)?;
    println!("wrote {} samples to {}", data.len(), path.display());
    Ok(())
}

fn print_rows(rows: &[AblationRow]) {
    println!("{:<8} {:>10} {:>10} {:>10}", "variant", "params", "average", "loss");
    for r in rows {
        println!("{:<8} {:>10} {:>10.2} {:>10.4}", r.label, r.params, r.metric, r.final_loss);
    }
}

fn ablate_rank_cmd(a: &RunArgs) -> Result<()> {
    let cfg = a.config()?;
    let data = a.dataset(&cfg)?;
    let mults: Vec<f64> = match &a.rank_mult {
        Some(f) => vec![f.parse().map_err(|_| Error::Parameter(f.clone()))?],
        None => vec![0.25, 0.5, 1.0, 2.0, 7.0],
    };
    let mut base = cfg.network.clone();
    base.rank_multiplier = None;
    let rows = ablation_rank_sweep(&base, &mults, &data, &cfg.train, true, |r| {
        println!("{:<8} average {:.2}", r.label, r.metric);
    })?;
    print_rows(&rows);
    write_json(&a.out_dir()?.join("ablate_rank.json"), &serde_json::to_value(&rows)?)
}

fn ablate_decomp_cmd(a: &RunArgs) -> Result<()> {
    let cfg = a.config()?;
    let data = a.dataset(&cfg)?;
    let rows = ablation_decomp(&cfg.network, &data, &cfg.train, |r| {
        println!("{:<8} average {:.2}", r.label, r.metric);
    })?;
    print_rows(&rows);
    write_json(&a.out_dir()?.join("ablate_decomp.json"), &serde_json::to_value(&rows)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Params(a) => params_cmd(a),
        Command::Gradcheck(a) => match gradcheck_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
        Command::GenData(a) => gen_data_cmd(a),
        Command::AblateRank(a) => ablate_rank_cmd(a),
        Command::AblateDecomp(a) => ablate_decomp_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
