use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use tcnl_core::data::{encode_ppm, generate_dataset, load_dataset, save_dataset, ConceptSample, Dataset};
use tcnl_core::metrics::{evaluate, hconcat, positional_montage, MetricsReport};
use tcnl_core::net::{batch_images, image_batch, load_checkpoint, save_checkpoint, TcnlNetwork};
use tcnl_core::train::{check_compatible, train, EpochRecord, TrainOutcome};
use tcnl_core::util::atomic_write;
use tcnl_core::verify::{run_suite, VerifyReport};

use crate::config::{RunConfig, Split};

/// Bad arguments or a refused operation; maps to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// The verification suite found a failing check.
#[derive(Debug)]
pub struct VerificationFailed(pub Vec<String>);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for VerificationFailed {}

pub const LOCK_FILE: &str = ".tcnl.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).with_context(|| format!("writing {}", path.display()))?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(e).with_context(|| {
                format!("{} is locked by another run (remove {} if that run is gone)", dir.display(), path.display())
            }),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, |w| w.write_all(bytes)).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serialises");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn entries_except_lock(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let e = e.with_context(|| format!("listing {}", dir.display()))?;
        if e.file_name() != LOCK_FILE {
            out.push(e.path());
        }
    }
    Ok(out)
}

pub fn gen_data(config: &RunConfig, out: &Path, seed: u64, force: bool) -> Result<()> {
    let _lock = DirLock::acquire(out)?;
    let existing = entries_except_lock(out)?;
    if !existing.is_empty() {
        if !force {
            bail!(UsageError(format!(
                "{} is not empty; pass --force to replace an existing dataset",
                out.display()
            )));
        }
        if !out.join("manifest.json").is_file() {
            bail!(UsageError(format!(
                "{} is not empty and holds no dataset manifest; refusing to delete it",
                out.display()
            )));
        }
        for p in existing {
            let r = if p.is_dir() { fs::remove_dir_all(&p) } else { fs::remove_file(&p) };
            r.with_context(|| format!("removing {}", p.display()))?;
        }
    }
    let ds = generate_dataset(seed, &config.dataset)?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {} train and {} test samples, {} classes, concepts {:?}, to {}",
        ds.train.len(),
        ds.test.len(),
        ds.manifest.config.classes.len(),
        ds.manifest.concept_names(),
        out.display()
    );
    Ok(())
}

fn checkpoint_meta(config: &RunConfig, ds: &Dataset, kind: &str, epoch: usize, accuracy: f64) -> serde_json::Value {
    json!({
        "kind": kind,
        "epoch": epoch,
        "test_accuracy": accuracy,
        "disable_concept_constraint": config.train.disable_concept_constraint,
        "deterministic": config.train.deterministic,
        "dataset_seed": ds.manifest.seed,
        "config_hash": config.hash_without_constraint_flag(),
        "config": config,
    })
}

/// Train one model into `out`: `best.ckpt`, `final.ckpt` and `history.jsonl`.
pub fn train_into(config: &RunConfig, ds: &Dataset, out: &Path) -> Result<TrainOutcome> {
    let _lock = DirLock::acquire(out)?;
    let spec = config.network.to_spec(&ds.manifest);
    let net = TcnlNetwork::build(&spec, config.train.seed)?;
    let history_path = out.join("history.jsonl");
    let mut lines = String::new();
    let mut write_err = None;
    let label = if config.train.disable_concept_constraint { "ablated" } else { "constrained" };
    let outcome = train(net, ds, &config.train, |r: &EpochRecord| {
        eprintln!(
            "[{label}] epoch {:>3}: d {:.4} g {:.4} sim {:.5} ce {:.4} acc {:.3}",
            r.epoch, r.d_loss, r.g_loss, r.similarity, r.classification, r.test_accuracy
        );
        lines.push_str(&serde_json::to_string(r).expect("record serialises"));
        lines.push('\n');
        if write_err.is_none() {
            write_err = write_atomic(&history_path, lines.as_bytes()).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    if outcome.history.is_empty() {
        write_atomic(&history_path, b"")?;
    }
    let last = outcome.history.last().map_or(0.0, |r| r.test_accuracy);
    save_checkpoint(
        &out.join("best.ckpt"),
        &outcome.best_net,
        &checkpoint_meta(config, ds, "best", outcome.best_epoch, outcome.best_accuracy),
    )?;
    save_checkpoint(
        &out.join("final.ckpt"),
        &outcome.final_net,
        &checkpoint_meta(config, ds, "final", outcome.history.len(), last),
    )?;
    Ok(outcome)
}

pub fn train_cmd(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let outcome = train_into(config, &ds, out)?;
    println!(
        "best epoch {} accuracy {:.4}; wrote best.ckpt, final.ckpt, history.jsonl to {}",
        outcome.best_epoch,
        outcome.best_accuracy,
        out.display()
    );
    Ok(())
}

fn split<'a>(ds: &'a Dataset, config: &RunConfig) -> Result<&'a [ConceptSample]> {
    let all = match config.metrics.split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    };
    let n = config.metrics.limit.unwrap_or(all.len()).min(all.len());
    if n == 0 {
        bail!(UsageError("the evaluation split is empty".into()));
    }
    Ok(&all[..n])
}

fn evaluate_checkpoint(net: &TcnlNetwork<f32>, ds: &Dataset, config: &RunConfig) -> Result<MetricsReport> {
    check_compatible(net, ds)?;
    Ok(evaluate(net, split(ds, config)?)?)
}

pub fn eval_cmd(config: &RunConfig, checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    let report = evaluate_checkpoint(&ckpt.network, &ds, config)?;
    let path = out.map_or_else(|| checkpoint.with_extension("report.json"), Path::to_path_buf);
    write_json(&path, &report)?;
    print!("{}", report.to_table());
    println!("report written to {}", path.display());
    Ok(())
}

pub fn visualize_cmd(checkpoint: &Path, data: &Path, index: usize, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    check_compatible(&ckpt.network, &ds)?;
    let Some(sample) = ds.test.get(index) else {
        bail!(UsageError(format!("index {index} is out of range for {} test samples", ds.test.len())));
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let trace = ckpt.network.forward(&image_batch(&[&sample.image])?)?;
    let mut mapped = Vec::new();
    for (c, name) in ds.manifest.concept_names().iter().enumerate() {
        let vis = batch_images(&trace.visualized[c]).remove(0);
        let pair = hconcat(&[&sample.instances[c], &vis]);
        let path = out.join(format!("{index:05}_{name}_pair.ppm"));
        write_atomic(&path, &encode_ppm(&pair))?;
        println!("{}", path.display());
        mapped.push(vis);
    }
    let (composite, _) = positional_montage(&mapped)?;
    let path = out.join(format!("{index:05}_montage.ppm"));
    write_atomic(&path, &encode_ppm(&composite))?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: &'static str,
    disable_concept_constraint: bool,
    config_hash: String,
    checkpoint: PathBuf,
    accuracy: f64,
    mse_255: Vec<f64>,
    ssim: Vec<f64>,
    crnp: Vec<f64>,
}

#[derive(Serialize)]
struct Direction {
    concept: String,
    constrained_mse_lower: bool,
    constrained_ssim_higher: bool,
}

#[derive(Serialize)]
struct AblationReport {
    concepts: Vec<String>,
    rows: Vec<AblationRow>,
    direction: Vec<Direction>,
}

pub fn ablate_cmd(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    for (variant, ablate) in [("constrained", false), ("ablated", true)] {
        let mut c = config.clone();
        c.train.disable_concept_constraint = ablate;
        let dir = out.join(variant);
        let outcome = train_into(&c, &ds, &dir)?;
        let report = evaluate_checkpoint(&outcome.final_net, &ds, &c)?;
        rows.push(AblationRow {
            variant,
            disable_concept_constraint: ablate,
            config_hash: c.hash_without_constraint_flag(),
            checkpoint: dir.join("final.ckpt"),
            accuracy: report.accuracy,
            mse_255: report.mse_255,
            ssim: report.ssim,
            crnp: report.crnp,
        });
    }
    let concepts = ds.manifest.concept_names();
    let direction = concepts
        .iter()
        .enumerate()
        .map(|(i, name)| Direction {
            concept: name.clone(),
            constrained_mse_lower: rows[0].mse_255[i] < rows[1].mse_255[i],
            constrained_ssim_higher: rows[0].ssim[i] > rows[1].ssim[i],
        })
        .collect();
    let report = AblationReport { concepts, rows, direction };
    write_json(&out.join("ablation.json"), &report)?;
    print!("{}", ablation_table(&report));
    Ok(())
}

fn ablation_table(r: &AblationReport) -> String {
    let mut s = format!("{:<12}", "variant");
    for c in &r.concepts {
        s.push_str(&format!("  {:>9}  {:>6}", format!("{c} MSE"), "SSIM"));
    }
    s.push_str(&format!("  {:>8}\n", "accuracy"));
    for row in &r.rows {
        s.push_str(&format!("{:<12}", row.variant));
        for (m, q) in row.mse_255.iter().zip(&row.ssim) {
            s.push_str(&format!("  {m:>9.2}  {q:>6.3}"));
        }
        s.push_str(&format!("  {:>8.4}\n", row.accuracy));
    }
    s
}

pub struct GradcheckArgs<'a> {
    pub seeds: usize,
    pub composed_seeds: usize,
    pub adjoint_configs: usize,
    pub json: Option<&'a Path>,
    pub corrupt_op: Option<&'a str>,
}

pub fn gradcheck_cmd(args: &GradcheckArgs) -> Result<()> {
    use tcnl_core::tensor::fault::{corrupt_backward, DIFFERENTIABLE_OPS};
    if let Some(op) = args.corrupt_op {
        if !DIFFERENTIABLE_OPS.contains(&op) {
            bail!(UsageError(format!("unknown op `{op}`; expected one of {DIFFERENTIABLE_OPS:?}")));
        }
    }
    corrupt_backward(args.corrupt_op);
    let report = run_suite(args.seeds, args.composed_seeds, args.adjoint_configs);
    corrupt_backward(None);
    let report: VerifyReport = report?;
    for c in report.primitives.iter().chain(&report.composed) {
        println!(
            "{:<36} max_rel_error {:.3e}  cases {:>4}  {}",
            c.op,
            c.max_rel_error,
            c.cases,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{:<36} max_rel_error {:.3e}  cases {:>4}  {}",
        "conv_adjoint",
        report.adjoint_max_error,
        report.adjoint_configs,
        if report.adjoint_passed() { "ok" } else { "FAIL" }
    );
    for c in &report.routing {
        println!("{}: {} ({})", c.name, if c.passed { "ok" } else { "FAIL" }, c.detail);
    }
    if let Some(path) = args.json {
        write_json(path, &report)?;
    }
    if !report.passed() {
        let mut failed: Vec<String> = report.failing_ops().into_iter().map(String::from).collect();
        if !report.adjoint_passed() {
            failed.push("conv_adjoint".into());
        }
        failed.extend(report.routing.iter().filter(|c| !c.passed).map(|c| c.name.clone()));
        bail!(VerificationFailed(failed));
    }
    println!("all checks passed");
    Ok(())
}
