//! One function per verb. Each resolves and validates its configuration
//! before touching disk, then writes its artifacts into a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::info;
use proxytta_core::checkpoint::Checkpoint;
use proxytta_core::config::{self, preset_file, preset_names};
use proxytta_core::datasets::write_sample_dir;
use proxytta_core::eval::{centroid_analysis, emit_summary, evaluate_dataset, realized_density, MetricsRow};
use proxytta_core::experiment::{self, RunDir};
use proxytta_core::pipeline::prepare_loss;
use proxytta_core::{Error, ExperimentConfig, InputMode, Method, ModelParams, ProxyHeads, RunLog, Sample};

use crate::jobs::{fan_out, sensitivity_rows, Job, Split};
use crate::{Common, Upstream};

/// Root of the run directories: `$PROXYTTA_RUNS_DIR`, else `runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os("PROXYTTA_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Defaults, preset, file, then `--set` and `--seed`, in that order. A
/// `.json` file is read as a run's `config.json` snapshot.
pub fn resolve(common: &Common, extra: &[String]) -> anyhow::Result<ExperimentConfig> {
    let text = match &common.config {
        Some(p) => {
            let raw = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            if p.extension().is_some_and(|e| e == "json") {
                Some(ExperimentConfig::from_json(&raw)?.to_toml())
            } else {
                Some(raw)
            }
        }
        None => None,
    };
    let origin = common.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let mut overrides = common.overrides.clone();
    overrides.extend(extra.iter().cloned());
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = config::resolve(text.as_deref().map(|t| (t, origin.as_str())), &overrides)?;
    Ok(cfg)
}

/// Prints the resolved configuration and reports whether to stop there.
fn dry_run(common: &Common, cfg: &ExperimentConfig) -> bool {
    if common.dry_run {
        print!("{}", cfg.to_toml());
    }
    common.dry_run
}

fn open_run(common: &Common, cfg: &ExperimentConfig, default_name: String) -> anyhow::Result<RunDir> {
    let name = common.run_name.clone().unwrap_or(default_name);
    let run = RunDir::create(&runs_root(), &name)?;
    run.write_config(cfg)?;
    run.append_event(&format!("run {name}: seed {}, method {}", cfg.seed, cfg.method.as_str()))?;
    info!("run directory {}", run.path.display());
    Ok(run)
}

fn finish(run: &RunDir, log: &RunLog) -> anyhow::Result<()> {
    run.write_log(log)?;
    Ok(())
}

fn save(run: &RunDir, model: &ModelParams, heads: Option<&ProxyHeads>, stage: &str, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let ck = Checkpoint {
        model: model.clone(),
        heads: heads.cloned(),
        meta: serde_json::json!({ "stage": stage, "seed": cfg.seed, "data": cfg.data.name }),
    };
    run.save_checkpoint(&ck)?;
    Ok(())
}

/// Loads `--from` (a checkpoint or a run directory holding one) and makes
/// the configuration's model section agree with it.
fn load_upstream(upstream: &Upstream, cfg: &mut ExperimentConfig) -> anyhow::Result<Option<Checkpoint>> {
    let Some(from) = &upstream.from else {
        return Ok(None);
    };
    let path = if from.is_dir() { from.join("checkpoint.bin") } else { from.clone() };
    let ck = Checkpoint::load(&path)?;
    if ck.model.config != cfg.model {
        info!("taking the model configuration from {}", path.display());
        cfg.model = ck.model.config.clone();
        cfg.validate()?;
    }
    Ok(Some(ck))
}

fn held_row(cfg: &ExperimentConfig, params: &ModelParams, held: &[Sample], label: &str) -> anyhow::Result<MetricsRow> {
    let m = evaluate_dataset(params, held, InputMode::Both, cfg.eval.range(), cfg.eval.batch_size)?;
    Ok(MetricsRow {
        dataset: format!("{}-source", cfg.data.name),
        method: label.into(),
        seed: cfg.seed,
        mode: InputMode::Both.as_str().into(),
        density: realized_density(held),
        mae_mm: m.mae_mm,
        rmse_mm: m.rmse_mm,
        n_pixels: m.n_pixels,
    })
}

fn require_layer(model: &ModelParams, verb: &str) -> anyhow::Result<()> {
    if !model.has_adaptation_layer() {
        return Err(Error::Lifecycle(format!("{verb} needs a checkpoint with an adaptation layer; run init-adapt-layer first")).into());
    }
    Ok(())
}

fn require_heads(ck: &Checkpoint, what: &str) -> anyhow::Result<ProxyHeads> {
    match &ck.heads {
        Some(h) if h.is_prepared() => Ok(h.clone()),
        _ => Err(Error::Lifecycle(format!("{what} needs prepared proxy heads; run prepare first")).into()),
    }
}

pub fn gen_data(common: &Common, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = resolve(common, &[])?;
    if dry_run(common, &cfg) {
        return Ok(());
    }
    let run = open_run(common, &cfg, format!("data-{}-s{}", cfg.data.name, cfg.seed))?;
    let root = out.unwrap_or_else(|| run.path.join("data"));
    let splits = experiment::load_splits(&cfg)?;
    let generator = serde_json::to_value(&cfg.data).context("serializing the data section")?;
    for (name, samples) in [("source", &splits.source), ("held", &splits.held), ("target", &splits.target)] {
        let dir = root.join(name);
        write_sample_dir(samples, &dir, generator.clone(), cfg.seed)?;
        println!("{name}: {} samples in {}", samples.len(), dir.display());
    }
    run.append_event(&format!("wrote splits under {}", root.display()))?;
    Ok(())
}

pub fn pretrain(common: &Common) -> anyhow::Result<()> {
    let cfg = resolve(common, &[])?;
    if dry_run(common, &cfg) {
        return Ok(());
    }
    let run = open_run(common, &cfg, format!("pretrain-{}-s{}", cfg.data.name, cfg.seed))?;
    let mut log = RunLog::default();
    let source = experiment::source_split(&cfg)?;
    let held = experiment::held_split(&cfg)?;
    let model = experiment::pretrain(&cfg, &source, &mut log)?;
    save(&run, &model, None, "pretrain", &cfg)?;
    run.write_metrics(&[held_row(&cfg, &model, &held, "pretrained")?])?;
    finish(&run, &log)
}

/// The pretrained backbone: from `--from`, or trained in-process.
fn pretrained(cfg: &ExperimentConfig, ck: Option<Checkpoint>, source: &[Sample], log: &mut RunLog) -> anyhow::Result<ModelParams> {
    match ck {
        Some(ck) => Ok(ck.model),
        None => Ok(experiment::pretrain(cfg, source, log)?),
    }
}

pub fn init_adapt_layer(common: &Common, upstream: &Upstream) -> anyhow::Result<()> {
    let mut cfg = resolve(common, &[])?;
    let ck = load_upstream(upstream, &mut cfg)?;
    if dry_run(common, &cfg) {
        return Ok(());
    }
    let run = open_run(common, &cfg, format!("init-{}-s{}", cfg.data.name, cfg.seed))?;
    let mut log = RunLog::default();
    let source = experiment::source_split(&cfg)?;
    let held = experiment::held_split(&cfg)?;
    let base = pretrained(&cfg, ck, &source, &mut log)?;
    let model = experiment::initialize(&cfg, &base, &source, &mut log)?;
    save(&run, &model, None, "init", &cfg)?;
    run.write_metrics(&[held_row(&cfg, &model, &held, "initialized")?])?;
    finish(&run, &log)
}

/// The initialized model: from `--from` (which must carry the adaptation
/// layer), or pretrained and initialized in-process.
fn initialized(cfg: &ExperimentConfig, ck: Option<Checkpoint>, source: &[Sample], verb: &str, log: &mut RunLog) -> anyhow::Result<ModelParams> {
    match ck {
        Some(ck) => {
            require_layer(&ck.model, verb)?;
            Ok(ck.model)
        }
        None => {
            let base = experiment::pretrain(cfg, source, log)?;
            Ok(experiment::initialize(cfg, &base, source, log)?)
        }
    }
}

pub fn prepare(common: &Common, upstream: &Upstream) -> anyhow::Result<()> {
    let mut cfg = resolve(common, &[])?;
    let ck = load_upstream(upstream, &mut cfg)?;
    if let Some(ck) = &ck {
        require_layer(&ck.model, "prepare")?;
    }
    if dry_run(common, &cfg) {
        return Ok(());
    }
    let run = open_run(common, &cfg, format!("prepare-{}-s{}", cfg.data.name, cfg.seed))?;
    let mut log = RunLog::default();
    let source = experiment::source_split(&cfg)?;
    let model = initialized(&cfg, ck, &source, "prepare", &mut log)?;
    let heads = experiment::prepare(&cfg, &model, &source, &mut log)?;
    let loss = prepare_loss(&model, &heads, &source, cfg.stage.prepare.batch_size)?;
    run.append_event(&format!("prepare: final source proxy loss {loss:.6}"))?;
    save(&run, &model, Some(&heads), "prepare", &cfg)?;
    finish(&run, &log)
}

/// Model and heads every target method starts from.
fn prepared(cfg: &ExperimentConfig, ck: Option<Checkpoint>, method: Method, log: &mut RunLog) -> anyhow::Result<(ModelParams, Option<ProxyHeads>)> {
    match ck {
        Some(ck) => {
            let heads = if method.needs_heads() {
                require_layer(&ck.model, method.as_str())?;
                Some(require_heads(&ck, method.as_str())?)
            } else {
                ck.heads.clone()
            };
            Ok((ck.model, heads))
        }
        None => {
            let source = experiment::source_split(cfg)?;
            if method.needs_heads() {
                let p = experiment::prepare_all(cfg, &source, log)?;
                Ok((p.initialized, Some(p.heads)))
            } else {
                let base = experiment::pretrain(cfg, &source, log)?;
                Ok((experiment::initialize(cfg, &base, &source, log)?, None))
            }
        }
    }
}

fn run_target_method(common: &Common, upstream: &Upstream, method: Method) -> anyhow::Result<()> {
    let mut cfg = resolve(common, &[format!("method=\"{}\"", method.as_str())])?;
    let ck = load_upstream(upstream, &mut cfg)?;
    if let Some(ck) = &ck {
        if method.needs_heads() {
            require_layer(&ck.model, method.as_str())?;
            require_heads(ck, method.as_str())?;
        }
    }
    if dry_run(common, &cfg) {
        return Ok(());
    }
    let run = open_run(common, &cfg, format!("{}-{}-s{}", method.as_str(), cfg.data.name, cfg.seed))?;
    let mut log = RunLog::default();
    let (model, heads) = prepared(&cfg, ck, method, &mut log)?;
    let target = experiment::target_split(&cfg)?;
    let out = experiment::run_method(&cfg, method, &model, heads.as_ref(), target.clone(), &mut log)?;
    let row = experiment::online_row(&cfg, method, &target, &out.metrics);
    println!("{} on {}: MAE {:.2} mm, RMSE {:.2} mm", method.as_str(), row.dataset, row.mae_mm, row.rmse_mm);
    run.write_metrics(&[row])?;
    save(&run, &out.params, heads.as_ref(), method.as_str(), &cfg)?;
    finish(&run, &log)
}

fn parse_method(name: &str) -> anyhow::Result<Method> {
    Ok(Method::parse(name)?)
}

pub fn adapt(common: &Common, upstream: &Upstream, method: Option<&str>) -> anyhow::Result<()> {
    let method = match method {
        Some(m) => parse_method(m)?,
        None => resolve(common, &[])?.method,
    };
    if method.is_baseline() {
        return Err(Error::Config(format!("{} is a comparison method; use the baseline verb", method.as_str())).into());
    }
    run_target_method(common, upstream, method)
}

pub fn baseline(common: &Common, upstream: &Upstream, method: &str) -> anyhow::Result<()> {
    let method = parse_method(method)?;
    if !method.is_baseline() {
        return Err(Error::Config(format!("{} is not a comparison method; use the adapt verb", method.as_str())).into());
    }
    run_target_method(common, upstream, method)
}

pub fn sensitivity(common: &Common, upstream: &Upstream, workers: usize) -> anyhow::Result<()> {
    let mut cfg = resolve(common, &[])?;
    let ck = load_upstream(upstream, &mut cfg)?;
    if dry_run(common, &cfg) {
        return Ok(());
    }
    let run = open_run(common, &cfg, format!("sensitivity-{}-s{}", cfg.data.name, cfg.seed))?;
    let mut log = RunLog::default();
    let model = match ck {
        Some(ck) => ck.model,
        None => experiment::pretrain(&cfg, &experiment::source_split(&cfg)?, &mut log)?,
    };
    // Workers read the model back from the run directory.
    save(&run, &model, None, "sensitivity", &cfg)?;
    let mut jobs = Vec::new();
    for split in [Split::Source, Split::Target] {
        for &density in &cfg.eval.densities {
            jobs.push(Job::Sensitivity {
                run: run.path.clone(),
                split,
                density,
            });
        }
    }
    let results = sensitivity_rows(fan_out(&jobs, workers)?)?;
    let mut rows = Vec::new();
    for (job, result) in jobs.iter().zip(results) {
        let Job::Sensitivity { split, .. } = job else { unreachable!("only sensitivity jobs") };
        for r in result {
            println!(
                "{:<7} density {:.3} {:<11} MAE {:>9.2} mm  RMSE {:>9.2} mm",
                split.as_str(),
                r.density,
                r.mode.as_str(),
                r.mae_mm,
                r.rmse_mm
            );
            rows.push(MetricsRow {
                dataset: format!("{}-{}", cfg.data.name, split.as_str()),
                method: "pretrained".into(),
                seed: cfg.seed,
                mode: r.mode.as_str().into(),
                density: r.density,
                mae_mm: r.mae_mm,
                rmse_mm: r.rmse_mm,
                n_pixels: r.n_pixels,
            });
        }
    }
    run.write_metrics(&rows)?;
    finish(&run, &log)
}

pub fn centroid(common: &Common, upstream: &Upstream) -> anyhow::Result<()> {
    let mut cfg = resolve(common, &[])?;
    let ck = load_upstream(upstream, &mut cfg)?;
    if let Some(ck) = &ck {
        require_heads(ck, "centroid analysis")?;
    }
    if dry_run(common, &cfg) {
        return Ok(());
    }
    let run = open_run(common, &cfg, format!("centroid-{}-s{}", cfg.data.name, cfg.seed))?;
    let mut log = RunLog::default();
    let source = experiment::source_split(&cfg)?;
    let (model, heads) = match ck {
        Some(ck) => {
            let heads = require_heads(&ck, "centroid analysis")?;
            (ck.model, heads)
        }
        None => {
            let p = experiment::prepare_all(&cfg, &source, &mut log)?;
            (p.initialized, p.heads)
        }
    };
    let target = experiment::target_split(&cfg)?;
    let n = cfg.eval.centroid_samples.min(source.len());
    let t = cfg.eval.centroid_samples.min(target.len());
    let report = centroid_analysis(&model, &heads, &source[..n], &target[..t], cfg.eval.batch_size)?;
    println!(
        "dist(target proxy, source both) = {:.4}\ndist(target both, source both) = {:.4}\nproxy closer: {}",
        report.target_proxy_to_source, report.target_both_to_source, report.proxy_closer
    );
    let path = run.path.join("centroid.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    finish(&run, &log)
}

pub fn report(runs: &[PathBuf], out: &Path, workers: usize) -> anyhow::Result<()> {
    let files = emit_summary(runs, out)?;
    let jobs: Vec<Job> = runs
        .iter()
        .map(|r| Job::Plot {
            run: r.clone(),
            out: out.to_path_buf(),
        })
        .collect();
    let plots = fan_out(&jobs, workers)?.into_iter().filter(|v| !v.is_null()).count();
    println!("{}", fs::read_to_string(&files.summary_md).context("reading the summary")?);
    println!(
        "wrote {}, {} and {plots} plot(s)",
        files.summary_csv.display(),
        files.summary_md.display()
    );
    Ok(())
}

/// File name of a shipped preset: transfer analogs carry an `-analog` suffix.
pub fn preset_file_name(name: &str) -> String {
    if ["-msgchn", "-nlspn", "-costdcnet"].iter().any(|b| name.ends_with(b)) {
        format!("{name}-analog.toml")
    } else {
        format!("{name}.toml")
    }
}

pub fn presets(write: Option<PathBuf>) -> anyhow::Result<()> {
    let Some(dir) = write else {
        for name in preset_names() {
            println!("{name}");
        }
        return Ok(());
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for name in preset_names() {
        let path = dir.join(preset_file_name(&name));
        fs::write(&path, preset_file(&name)?).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}
