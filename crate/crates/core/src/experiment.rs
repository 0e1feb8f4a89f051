//! End-to-end driver: split construction, the stage sequence, method
//! dispatch, and run-directory artifacts.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Method};
use crate::datasets::{generate_dataset, read_sample_dir, shift_dataset, stream_batches, Sample};
use crate::error::{Error, Result};
use crate::eval::{realized_density, write_losses_csv, write_metrics_csv, MetricsRecord, MetricsRow};
use crate::model::{init_model, insert_adaptation_layer, ModelParams};
use crate::pipeline::{
    baseline_bn_adapt, baseline_cotta, no_adapt, pretrain_backbone, stage_adapt, stage_initialize, stage_prepare,
    AdaptMethod, AdaptOutcome, BnVariant, RunLog, StageObserver,
};
use crate::proxy::{init_heads, ProxyHeads};

/// Offsets applied to the experiment seed for each generated split.
pub const HELD_SEED_OFFSET: u64 = 2000;
pub const TARGET_SEED_OFFSET: u64 = 1000;

#[derive(Clone, Debug)]
pub struct Splits {
    pub source: Vec<Sample>,
    pub held: Vec<Sample>,
    /// Shifted target stream, in stream order.
    pub target: Vec<Sample>,
}

pub fn source_split(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    match &cfg.data.source_dir {
        Some(dir) => read_sample_dir(dir),
        None => generate_dataset(cfg.seed, cfg.data.source_count, &cfg.data.scene),
    }
}

pub fn held_split(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    match &cfg.data.held_dir {
        Some(dir) => read_sample_dir(dir),
        None => generate_dataset(cfg.seed + HELD_SEED_OFFSET, cfg.data.held_count, &cfg.data.scene),
    }
}

/// The unshifted target scenes.
pub fn target_clean_split(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    generate_dataset(cfg.seed + TARGET_SEED_OFFSET, cfg.data.target_count, &cfg.data.scene)
}

pub fn target_split(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    match &cfg.data.target_dir {
        Some(dir) => read_sample_dir(dir),
        None => shift_dataset(&target_clean_split(cfg)?, &cfg.shift()?, cfg.seed),
    }
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    Ok(Splits {
        source: source_split(cfg)?,
        held: held_split(cfg)?,
        target: target_split(cfg)?,
    })
}

/// Fresh backbone trained on the source split.
pub fn pretrain(cfg: &ExperimentConfig, source: &[Sample], obs: &mut dyn StageObserver) -> Result<ModelParams> {
    let p0 = init_model(&cfg.model, cfg.seed)?;
    pretrain_backbone(&p0, source, &cfg.seeded(&cfg.stage.pretrain), obs)
}

/// Inserts the adaptation layer when absent and fits it on the source split.
pub fn initialize(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    source: &[Sample],
    obs: &mut dyn StageObserver,
) -> Result<ModelParams> {
    let with_layer = if params.has_adaptation_layer() {
        params.clone()
    } else {
        insert_adaptation_layer(params)?
    };
    stage_initialize(&with_layer, source, &cfg.seeded(&cfg.stage.init), obs)
}

/// Fresh proxy heads prepared on the source split.
pub fn prepare(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    source: &[Sample],
    obs: &mut dyn StageObserver,
) -> Result<ProxyHeads> {
    let heads = init_heads(params.config.fusion_width, &cfg.proxy, cfg.seed)?;
    stage_prepare(params, &heads, source, &cfg.seeded(&cfg.stage.prepare), obs)
}

/// Runs `method` over the target stream in one pass.
pub fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    params: &ModelParams,
    heads: Option<&ProxyHeads>,
    target: Vec<Sample>,
    obs: &mut dyn StageObserver,
) -> Result<AdaptOutcome> {
    let stage = cfg.seeded(&cfg.stage.adapt);
    let range = cfg.eval.range();
    let mut stream = stream_batches(target, stage.batch_size)?;
    let needs = |m: AdaptMethod| {
        heads.ok_or_else(|| Error::Lifecycle(format!("{} needs prepared proxy heads", m.as_str())))
    };
    match method {
        Method::NoAdapt => no_adapt(params, &mut stream, range, obs),
        Method::BnAdapt => baseline_bn_adapt(params, &mut stream, BnVariant::StatsOnly, &stage, range, obs),
        Method::BnAdaptLzLsm => {
            baseline_bn_adapt(params, &mut stream, BnVariant::AffineWithLosses, &stage, range, obs)
        }
        Method::Cotta => baseline_cotta(params, &mut stream, &stage, range, obs),
        Method::Proxytta => {
            let h = needs(AdaptMethod::Proxytta)?;
            stage_adapt(params, h, &mut stream, &stage, AdaptMethod::Proxytta, range, obs)
        }
        Method::ProxyttaFast => {
            let h = needs(AdaptMethod::ProxyttaFast)?;
            stage_adapt(params, h, &mut stream, &stage, AdaptMethod::ProxyttaFast, range, obs)
        }
    }
}

/// Source-side artifacts every target method starts from.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub pretrained: ModelParams,
    /// Pretrained backbone with a fitted adaptation layer.
    pub initialized: ModelParams,
    pub heads: ProxyHeads,
}

pub fn prepare_all(cfg: &ExperimentConfig, source: &[Sample], obs: &mut dyn StageObserver) -> Result<Prepared> {
    let pretrained = pretrain(cfg, source, obs)?;
    let initialized = initialize(cfg, &pretrained, source, obs)?;
    let heads = prepare(cfg, &initialized, source, obs)?;
    Ok(Prepared {
        pretrained,
        initialized,
        heads,
    })
}

/// The `metrics.csv` line for an online run over `target`.
pub fn online_row(cfg: &ExperimentConfig, method: Method, target: &[Sample], m: &MetricsRecord) -> MetricsRow {
    MetricsRow {
        dataset: cfg.data.name.clone(),
        method: method.as_str().to_string(),
        seed: cfg.seed,
        mode: "both".into(),
        density: realized_density(target),
        mae_mm: m.mae_mm,
        rmse_mm: m.rmse_mm,
        n_pixels: m.n_pixels,
    }
}

// ---------------------------------------------------------------------------
// Run directories

/// `<root>/<name>/` holding `config.json`, `checkpoint.bin`, `losses.csv`,
/// `metrics.csv` and `events.log`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, name: &str) -> Result<Self> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::Config(format!("invalid run name `{name}`")));
        }
        let path = root.join(name);
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunDir { path })
    }

    pub fn config_path(&self) -> PathBuf {
        self.path.join("config.json")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path.join("checkpoint.bin")
    }

    pub fn losses_path(&self) -> PathBuf {
        self.path.join("losses.csv")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.csv")
    }

    pub fn events_path(&self) -> PathBuf {
        self.path.join("events.log")
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        let p = self.config_path();
        fs::write(&p, cfg.to_json() + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn read_config(&self) -> Result<ExperimentConfig> {
        let p = self.config_path();
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn save_checkpoint(&self, ck: &Checkpoint) -> Result<()> {
        ck.save(&self.checkpoint_path())
    }

    pub fn write_metrics(&self, rows: &[MetricsRow]) -> Result<()> {
        write_metrics_csv(&self.metrics_path(), rows)
    }

    pub fn append_event(&self, message: &str) -> Result<()> {
        let p = self.events_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        writeln!(f, "{message}").map_err(|e| Error::io(&p, e))
    }

    /// Writes the loss series and appends the log's events.
    pub fn write_log(&self, log: &RunLog) -> Result<()> {
        write_losses_csv(&self.losses_path(), &log.losses)?;
        for e in &log.events {
            self.append_event(e)?;
        }
        Ok(())
    }
}
