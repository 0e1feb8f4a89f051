//! Experiment configuration: TOML sections `[data]`, `[model]`, `[proxy]`,
//! `[stage.*]` and `[eval]`, layered as defaults < preset < file < overrides.
//!
//! The defaults describe the reference synthetic setup (32x32 scenes, a
//! slim decoder, the strong photometric shift). Named presets carry the
//! per-transfer hyperparameters of the original method (learning rate,
//! loss weights, inner iterations) mapped onto analogous synthetic shifts.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datasets::{SceneConfig, ShiftConfig};
use crate::error::{Error, Result};
use crate::eval::DepthRange;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::pipeline::StageConfig;
use crate::proxy::ProxyConfig;

/// Every method the experiment driver can run on a target stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoAdapt,
    BnAdapt,
    BnAdaptLzLsm,
    Cotta,
    Proxytta,
    ProxyttaFast,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::NoAdapt,
        Method::BnAdapt,
        Method::BnAdaptLzLsm,
        Method::Cotta,
        Method::Proxytta,
        Method::ProxyttaFast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NoAdapt => "no_adapt",
            Method::BnAdapt => "bn_adapt",
            Method::BnAdaptLzLsm => "bn_adapt_lz_lsm",
            Method::Cotta => "cotta",
            Method::Proxytta => "proxytta",
            Method::ProxyttaFast => "proxytta_fast",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown method `{s}` (known: {})", known.join(", ")))
            })
    }

    /// Whether the method consumes prepared proxy heads.
    pub fn needs_heads(self) -> bool {
        matches!(self, Method::Proxytta | Method::ProxyttaFast)
    }

    pub fn is_baseline(self) -> bool {
        !self.needs_heads()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Label written to the `dataset` column of metrics files.
    pub name: String,
    pub source_count: usize,
    /// Held-out source samples (sensitivity study, centroid analysis).
    pub held_count: usize,
    pub target_count: usize,
    /// Shift preset applied to the target split.
    pub shift: String,
    /// Read splits from disk instead of generating them.
    pub source_dir: Option<PathBuf>,
    pub held_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            name: "reference".into(),
            source_count: 200,
            held_count: 96,
            target_count: 384,
            shift: "strong".into(),
            source_dir: None,
            held_dir: None,
            target_dir: None,
            scene: SceneConfig {
                height: 32,
                width: 32,
                ..SceneConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub pretrain: StageConfig,
    pub init: StageConfig,
    pub prepare: StageConfig,
    pub adapt: StageConfig,
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig {
            pretrain: StageConfig {
                image_dropout: 0.5,
                ..StageConfig::pretrain()
            },
            init: StageConfig {
                epochs: 3,
                ..StageConfig::init()
            },
            prepare: StageConfig {
                epochs: 30,
                ..StageConfig::prepare()
            },
            adapt: StageConfig {
                learning_rate: 2e-3,
                weights: LossWeights::new(1.0, 0.3, 0.3),
                ..StageConfig::adapt()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    pub batch_size: usize,
    /// Sparse densities swept by the sensitivity study.
    pub densities: Vec<f64>,
    /// Samples per split used by the centroid analysis.
    pub centroid_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            min_depth: 0.0,
            max_depth: 80.0,
            batch_size: 16,
            densities: vec![0.01, 0.05, 0.10],
            centroid_samples: 96,
        }
    }
}

impl EvalConfig {
    pub fn range(&self) -> DepthRange {
        DepthRange::new(self.min_depth, self.max_depth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    /// Seeds data generation, initialization and every stage.
    pub seed: u64,
    pub method: Method,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub proxy: ProxyConfig,
    pub stage: StagesConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: None,
            seed: 0,
            method: Method::ProxyttaFast,
            data: DataConfig::default(),
            model: ModelConfig {
                height: 32,
                width: 32,
                fusion_width: 64,
                decoder_widths: [64, 32, 16],
                ..ModelConfig::default()
            },
            proxy: ProxyConfig::default(),
            stage: StagesConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.proxy.validate()?;
        self.data.scene.validate()?;
        ShiftConfig::preset(&self.data.shift, self.seed)?.validate()?;
        if (self.data.scene.height, self.data.scene.width) != (self.model.height, self.model.width) {
            return Err(Error::Config(format!(
                "data.scene is {}x{} but the model expects {}x{}",
                self.data.scene.height, self.data.scene.width, self.model.height, self.model.width
            )));
        }
        if self.data.source_count == 0 || self.data.target_count == 0 || self.data.held_count == 0 {
            return Err(Error::Config("data split sizes must be positive".into()));
        }
        for (name, s) in [
            ("pretrain", &self.stage.pretrain),
            ("init", &self.stage.init),
            ("prepare", &self.stage.prepare),
            ("adapt", &self.stage.adapt),
        ] {
            s.validate()
                .map_err(|e| Error::Config(format!("[stage.{name}] {}", strip_prefix(&e))))?;
        }
        self.eval.range().validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be >= 1".into()));
        }
        if let Some(d) = self.eval.densities.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
            return Err(Error::Config(format!("eval density {d} outside (0, 1]")));
        }
        Ok(())
    }

    /// A stage's settings with its seed filled from the experiment seed.
    pub fn seeded(&self, stage: &StageConfig) -> StageConfig {
        StageConfig {
            seed: self.seed,
            ..stage.clone()
        }
    }

    pub fn shift(&self) -> Result<ShiftConfig> {
        ShiftConfig::preset(&self.data.shift, self.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config snapshot: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Layering

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `a.b.c=value` into a nested table. The value is read as a TOML
/// literal when possible and as a bare string otherwise.
pub fn parse_override(spec: &str) -> Result<toml::Table> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().expect("non-empty path");
    let mut table = toml::Table::new();
    table.insert(last.to_string(), value);
    for k in keys.into_iter().rev() {
        let mut outer = toml::Table::new();
        outer.insert(k.to_string(), toml::Value::Table(table));
        table = outer;
    }
    Ok(table)
}

fn parse_file(text: &str, origin: &str) -> Result<toml::Table> {
    toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {}", e.message())))
}

fn preset_name(table: &toml::Table) -> Result<Option<String>> {
    match table.get("preset") {
        None => Ok(None),
        Some(toml::Value::String(s)) => Ok(Some(s.clone())),
        Some(other) => Err(Error::Config(format!("preset must be a string, got {other}"))),
    }
}

/// Resolves a configuration from an optional file body and `key=value`
/// overrides. The preset named by the overrides or the file is applied
/// under the file.
pub fn resolve(file: Option<(&str, &str)>, overrides: &[String]) -> Result<ExperimentConfig> {
    let file_table = match file {
        Some((text, origin)) => parse_file(text, origin)?,
        None => toml::Table::new(),
    };
    let override_tables = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    let mut preset = preset_name(&file_table)?;
    for t in &override_tables {
        if let Some(p) = preset_name(t)? {
            preset = Some(p);
        }
    }

    let mut merged = match toml::Value::try_from(ExperimentConfig::default()) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("the defaults serialize to a table"),
    };
    if let Some(name) = &preset {
        merge(&mut merged, preset_overlay(name)?);
    }
    merge(&mut merged, file_table);
    for t in override_tables {
        merge(&mut merged, t);
    }
    let cfg: ExperimentConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Presets

/// Per-transfer adaptation hyperparameters of the original method:
/// (target dataset, learning rate, w_sm, w_z, w_proxy, inner iterations).
type Row = (&'static str, f64, f64, f64, f64, usize);

const MSGCHN_ROWS: [Row; 6] = [
    ("vkitti", 2e-3, 1.0, 1.0, 0.2, 1),
    ("vkitti-fog", 5e-3, 3.0, 1.0, 0.1, 1),
    ("nuscenes", 3e-3, 9.0, 1.0, 0.2, 1),
    ("scenenet", 2e-3, 8.0, 1.0, 0.1, 3),
    ("nyuv2", 2e-4, 0.8, 1.0, 0.4, 3),
    ("scannet", 5e-3, 8.0, 1.0, 0.3, 3),
];

const NLSPN_ROWS: [Row; 6] = [
    ("vkitti", 2e-3, 0.8, 1.0, 0.4, 1),
    ("vkitti-fog", 1e-3, 1.0, 1.0, 0.2, 1),
    ("nuscenes", 1e-3, 1.0, 1.0, 0.1, 1),
    ("scenenet", 2e-3, 0.7, 1.0, 2.0, 3),
    ("nyuv2", 4e-3, 5.0, 1.0, 1.0, 3),
    ("scannet", 1e-4, 2.0, 1.0, 0.3, 3),
];

const COSTDCNET_ROWS: [Row; 6] = [
    ("vkitti", 4e-3, 4.5, 1.0, 0.1, 1),
    ("vkitti-fog", 5e-3, 3.0, 1.0, 0.04, 1),
    ("nuscenes", 5e-3, 3.0, 1.0, 0.1, 1),
    ("scenenet", 7e-3, 2.0, 1.0, 0.2, 3),
    ("nyuv2", 6e-3, 4.0, 1.0, 0.1, 3),
    ("scannet", 3e-3, 1.0, 1.0, 0.2, 3),
];

const BACKBONES: [(&str, &[Row; 6]); 3] = [
    ("msgchn", &MSGCHN_ROWS),
    ("nlspn", &NLSPN_ROWS),
    ("costdcnet", &COSTDCNET_ROWS),
];

/// Loss ablation presets on the reference setup: (name, w_sm, w_proxy).
const ABLATION: [(&str, f64, f64); 3] = [
    ("ablation-lz", 0.0, 0.0),
    ("ablation-lz-lsm", 0.3, 0.0),
    ("ablation-full", 0.3, 0.3),
];

/// Names of every built-in preset.
pub fn preset_names() -> Vec<String> {
    let mut out = vec!["reference".to_string()];
    for (backbone, rows) in BACKBONES {
        for row in rows.iter() {
            out.push(format!("{}-{backbone}", row.0));
        }
    }
    out.extend(ABLATION.iter().map(|a| a.0.to_string()));
    out
}

fn is_indoor(dataset: &str) -> bool {
    matches!(dataset, "scenenet" | "nyuv2" | "scannet")
}

/// Synthetic shift standing in for each target dataset.
fn shift_for(dataset: &str) -> &'static str {
    match dataset {
        "vkitti" => "hue",
        "vkitti-fog" => "fog",
        "nuscenes" => "night",
        "scenenet" => "noisy",
        _ => "strong",
    }
}

fn table(text: &str) -> toml::Table {
    toml::from_str(text).expect("preset tables are valid TOML")
}

/// The overlay a preset applies on top of the defaults.
pub fn preset_overlay(name: &str) -> Result<toml::Table> {
    if name == "reference" {
        return Ok(table("preset = \"reference\""));
    }
    if let Some(&(n, w_sm, w_proxy)) = ABLATION.iter().find(|a| a.0 == name) {
        return Ok(table(&format!(
            "preset = \"{n}\"\n\
             method = \"proxytta_fast\"\n\
             [data]\nname = \"reference\"\n\
             [stage.adapt.weights]\nw_z = 1.0\nw_sm = {w_sm:?}\nw_proxy = {w_proxy:?}\n"
        )));
    }
    for (backbone, rows) in BACKBONES {
        let Some(row) = rows.iter().find(|r| format!("{}-{backbone}", r.0) == name) else {
            continue;
        };
        let (dataset, lr, w_sm, w_z, w_proxy, inner) = *row;
        let (bn, method, embed) = if backbone == "msgchn" {
            (false, "proxytta_fast", 64)
        } else {
            (true, "proxytta", 128)
        };
        let batch = if dataset == "scannet" { 36 } else { 16 };
        let (d_min, d_max, e_min, e_max) = if is_indoor(dataset) {
            (0.5, 5.0, 0.2, 5.0)
        } else {
            (1.0, 10.0, 0.0, 80.0)
        };
        return Ok(table(&format!(
            "preset = \"{name}\"\n\
             method = \"{method}\"\n\
             [data]\nname = \"{name}\"\nshift = \"{shift}\"\n\
             [data.scene]\nd_min = {d_min:?}\nd_max = {d_max:?}\n\
             [model]\nuse_batch_norm = {bn}\n\
             [proxy]\nembed_dim = {embed}\nhidden_dim = {embed}\n\
             [stage.init]\nbatch_size = {batch}\n\
             [stage.adapt]\nlearning_rate = {lr:?}\ninner_iter = {inner}\nbatch_size = {batch}\n\
             [stage.adapt.weights]\nw_z = {w_z:?}\nw_sm = {w_sm:?}\nw_proxy = {w_proxy:?}\n\
             [eval]\nmin_depth = {e_min:?}\nmax_depth = {e_max:?}\n",
            shift = shift_for(dataset),
        )));
    }
    Err(Error::Config(format!(
        "unknown preset `{name}` (known: {})",
        preset_names().join(", ")
    )))
}

/// Text of the shipped `presets/<name>-analog.toml` file for a preset.
pub fn preset_file(name: &str) -> Result<String> {
    let overlay = preset_overlay(name)?;
    let body = toml::to_string_pretty(&overlay).expect("overlay serializes");
    Ok(format!(
        "# Preset `{name}`. Values not listed fall back to the reference defaults.\n\
         # Regenerate with `proxytta presets --write <dir>`.\n\n{body}"
    ))
}
