//! Metrics, the input-modality sensitivity study, embedding-centroid
//! analysis and report emission.
//!
//! Depths are meters everywhere inside the crate; [`to_mm`] is the one place
//! errors are converted for reporting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::datasets::{derive_seed, make_null_inputs, sample_sparse_depth, DepthMap, Image, Sample, SparseStrategy};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::{forward_batch, ModelParams, Mode};
use crate::proxy::{Head, ProxyHeads};
use crate::tensor::Tensor;

/// Meters to millimeters.
pub fn to_mm(meters: f64) -> f64 {
    meters * 1000.0
}

/// Inclusive ground-truth range used for evaluation, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        DepthRange { min: 0.0, max: 80.0 }
    }
}

impl DepthRange {
    pub fn new(min: f64, max: f64) -> Self {
        DepthRange { min, max }
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d <= self.max
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min >= 0.0 && self.max > self.min) {
            return Err(Error::Config(format!(
                "evaluation range [{}, {}] is empty or negative",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mae_mm: f64,
    pub rmse_mm: f64,
    pub n_pixels: usize,
    pub depth_range: [f64; 2],
    pub dataset: String,
    pub method: String,
}

impl MetricsRecord {
    pub fn tagged(mut self, dataset: &str, method: &str) -> Self {
        self.dataset = dataset.to_string();
        self.method = method.to_string();
        self
    }
}

/// MAE and RMSE over pixels whose ground truth is valid and inside `range`.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, range: DepthRange) -> Result<MetricsRecord> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Contract("prediction and ground truth differ in size".into()));
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g > 0.0 && range.contains(g) {
            let e = p - g;
            abs += e.abs();
            sq += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySupport("no ground-truth pixel inside the evaluation range".into()));
    }
    Ok(MetricsRecord {
        mae_mm: to_mm(abs / n as f64),
        rmse_mm: to_mm((sq / n as f64).sqrt()),
        n_pixels: n,
        depth_range: [range.min, range.max],
        dataset: String::new(),
        method: String::new(),
    })
}

/// Dataset-level metrics: the mean of per-sample MAE and RMSE, with pixel
/// counts summed.
pub fn aggregate(records: &[MetricsRecord]) -> Result<MetricsRecord> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptySupport("no per-sample metrics to aggregate".into()))?;
    let n = records.len() as f64;
    Ok(MetricsRecord {
        mae_mm: records.iter().map(|r| r.mae_mm).sum::<f64>() / n,
        rmse_mm: records.iter().map(|r| r.rmse_mm).sum::<f64>() / n,
        n_pixels: records.iter().map(|r| r.n_pixels).sum(),
        depth_range: first.depth_range,
        dataset: first.dataset.clone(),
        method: first.method.clone(),
    })
}

/// Which modalities reach the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `(I, z)`
    Both,
    /// `(I_0, z)`
    DepthOnly,
    /// `(I, z_0)`
    ImageOnly,
}

impl InputMode {
    pub const ALL: [InputMode; 3] = [InputMode::Both, InputMode::DepthOnly, InputMode::ImageOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Both => "both",
            InputMode::DepthOnly => "depth_only",
            InputMode::ImageOnly => "image_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        InputMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown input mode {s:?}")))
    }

    /// Network inputs for `sample` under this mode.
    pub fn inputs(self, sample: &Sample) -> (Image, DepthMap) {
        let (i0, z0) = make_null_inputs(sample.height(), sample.width());
        match self {
            InputMode::Both => (sample.image.clone(), sample.sparse.clone()),
            InputMode::DepthOnly => (i0, sample.sparse.clone()),
            InputMode::ImageOnly => (sample.image.clone(), z0),
        }
    }
}

/// Eval-mode per-sample metrics over `samples`.
pub fn per_sample_metrics(
    params: &ModelParams,
    samples: &[Sample],
    mode: InputMode,
    range: DepthRange,
    batch_size: usize,
) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs: Vec<(Image, DepthMap)> = chunk.iter().map(|s| mode.inputs(s)).collect();
        let images: Vec<&Image> = inputs.iter().map(|(i, _)| i).collect();
        let sparse: Vec<&DepthMap> = inputs.iter().map(|(_, z)| z).collect();
        let (preds, _) = forward_batch(params, &images, &sparse, Mode::Eval)?;
        for (p, s) in preds.iter().zip(chunk) {
            out.push(compute_metrics(p, &s.gt, range)?);
        }
    }
    Ok(out)
}

/// Eval-mode dataset metrics under one input mode.
pub fn evaluate_dataset(
    params: &ModelParams,
    samples: &[Sample],
    mode: InputMode,
    range: DepthRange,
    batch_size: usize,
) -> Result<MetricsRecord> {
    aggregate(&per_sample_metrics(params, samples, mode, range, batch_size)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub mode: InputMode,
    pub density: f64,
    pub mae_mm: f64,
    pub rmse_mm: f64,
    pub n_pixels: usize,
}

/// Mean fraction of valid ground-truth pixels that carry a sparse point.
pub fn realized_density(samples: &[Sample]) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| s.sparse.valid_count() as f64 / s.gt.valid_count().max(1) as f64)
        .sum();
    total / samples.len().max(1) as f64
}

/// All three input modes on the samples' own sparse maps.
pub fn sensitivity_rows(
    params: &ModelParams,
    samples: &[Sample],
    range: DepthRange,
    batch_size: usize,
) -> Result<Vec<SensitivityRow>> {
    let density = realized_density(samples);
    InputMode::ALL
        .into_iter()
        .map(|mode| {
            let m = evaluate_dataset(params, samples, mode, range, batch_size)?;
            Ok(SensitivityRow {
                mode,
                density,
                mae_mm: m.mae_mm,
                rmse_mm: m.rmse_mm,
                n_pixels: m.n_pixels,
            })
        })
        .collect()
}

/// Re-draws every sample's sparse map from its ground truth at `density`.
pub fn resample_density(samples: &[Sample], density: f64, seed: u64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            let mut out = s.clone();
            out.sparse = sample_sparse_depth(&s.gt, density, SparseStrategy::Uniform, derive_seed(s.seed ^ seed, 7))?;
            Ok(out)
        })
        .collect()
}

/// For each density, re-draws the sparse maps and evaluates all three
/// input modes. Rows are ordered by density, then mode.
pub fn sensitivity_study(
    params: &ModelParams,
    samples: &[Sample],
    densities: &[f64],
    range: DepthRange,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<SensitivityRow>> {
    let mut rows = Vec::new();
    for &d in densities {
        let resampled = resample_density(samples, d, seed)?;
        for mut row in sensitivity_rows(params, &resampled, range, batch_size)? {
            row.density = d;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Proxy `p = h(g(pool(e(I0, z))))` and both-input `q = g'(pool(e(I, z)))`
/// embeddings, one row per sample.
pub fn embed_samples(
    params: &ModelParams,
    heads: &ProxyHeads,
    samples: &[Sample],
    batch_size: usize,
) -> Result<(Tensor, Tensor)> {
    let mut ps = Vec::new();
    let mut qs = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut pooled = Vec::new();
        for mode in [InputMode::DepthOnly, InputMode::Both] {
            let inputs: Vec<(Image, DepthMap)> = chunk.iter().map(|s| mode.inputs(s)).collect();
            let images: Vec<&Image> = inputs.iter().map(|(i, _)| i).collect();
            let sparse: Vec<&DepthMap> = inputs.iter().map(|(_, z)| z).collect();
            let (_, taps) = forward_batch(params, &images, &sparse, Mode::Eval)?;
            pooled.push(crate::proxy::pool_features(&taps.fused_feat));
        }
        let mut tape = Tape::new();
        let bound = heads.bind(&mut tape, false);
        let x0 = tape.constant(pooled[0].clone());
        let x1 = tape.constant(pooled[1].clone());
        let g = bound.apply(&mut tape, Head::Online, x0);
        let p = bound.apply(&mut tape, Head::Predictor, g);
        let q = bound.apply(&mut tape, Head::Target, x1);
        ps.push(tape.value(p).clone());
        qs.push(tape.value(q).clone());
    }
    Ok((Tensor::stack_rows(&ps), Tensor::stack_rows(&qs)))
}

fn centroid(rows: &Tensor) -> Vec<f64> {
    let (n, d) = rows.dims2();
    let mut c = vec![0.0; d];
    for r in rows.data().chunks(d) {
        for (ci, v) in c.iter_mut().zip(r) {
            *ci += v;
        }
    }
    c.iter().map(|v| v / n as f64).collect()
}

/// `1 - cos(a, b)`; exactly zero for identical vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    crate::proxy::cosine_loss(a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidReport {
    /// Cloud names, in the order of `distances`.
    pub clouds: Vec<String>,
    /// Symmetric matrix of centroid cosine distances.
    pub distances: Vec<Vec<f64>>,
    /// dist(target proxy, source both)
    pub target_proxy_to_source: f64,
    /// dist(target both, source both)
    pub target_both_to_source: f64,
    /// Whether the target proxy centroid is the closer of the two.
    pub proxy_closer: bool,
}

pub const CLOUD_NAMES: [&str; 4] = ["source_both", "source_proxy", "target_both", "target_proxy"];

pub fn centroid_analysis(
    params: &ModelParams,
    heads: &ProxyHeads,
    source: &[Sample],
    target: &[Sample],
    batch_size: usize,
) -> Result<CentroidReport> {
    if !heads.is_prepared() {
        return Err(Error::Lifecycle("centroid analysis needs prepared proxy heads".into()));
    }
    let (sp, sq) = embed_samples(params, heads, source, batch_size)?;
    let (tp, tq) = embed_samples(params, heads, target, batch_size)?;
    let cents = [centroid(&sq), centroid(&sp), centroid(&tq), centroid(&tp)];
    let mut distances = vec![vec![0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            distances[i][j] = cosine_distance(&cents[i], &cents[j])?;
        }
    }
    let target_proxy_to_source = distances[3][0];
    let target_both_to_source = distances[2][0];
    Ok(CentroidReport {
        clouds: CLOUD_NAMES.iter().map(|s| s.to_string()).collect(),
        distances,
        target_proxy_to_source,
        target_both_to_source,
        proxy_closer: target_proxy_to_source < target_both_to_source,
    })
}

// ---------------------------------------------------------------------------
// CSV artifacts

/// One line of a run's `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub mode: String,
    pub density: f64,
    pub mae_mm: f64,
    pub rmse_mm: f64,
    pub n_pixels: usize,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// One line of a run's `losses.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub l_z: f64,
    pub l_sm: f64,
    pub l_proxy: f64,
    pub total: f64,
    pub valid_points: usize,
}

impl LossRow {
    pub fn from_report(step: usize, r: &LossReport) -> Self {
        LossRow {
            step,
            l_z: r.l_z,
            l_sm: r.l_sm,
            l_proxy: r.l_proxy,
            total: r.total,
            valid_points: r.valid_point_count,
        }
    }
}

pub fn write_losses_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if rows.is_empty() {
        w.write_record(["step", "l_z", "l_sm", "l_proxy", "total", "valid_points"])
            .map_err(|e| csv_err(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_losses_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

// ---------------------------------------------------------------------------
// Report

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: String,
    pub n_seeds: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

/// Relative MAE improvement of one method over a baseline on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Improvement {
    pub dataset: String,
    pub method: String,
    pub baseline: String,
    pub percent: f64,
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub summary_csv: PathBuf,
    pub summary_md: PathBuf,
    pub plots: Vec<PathBuf>,
    pub rows: Vec<SummaryRow>,
    pub improvements: Vec<Improvement>,
}

/// Methods whose improvement over every other method is tabulated.
pub const OURS: [&str; 2] = ["proxytta", "proxytta_fast"];

fn method_label(row: &MetricsRow) -> String {
    if row.mode == "both" {
        row.method.clone()
    } else {
        format!("{} [{}]", row.method, row.mode)
    }
}

/// Aggregates the given run directories into `out_dir/summary.{csv,md}` and
/// `out_dir/plots/<run>.png`. Fails listing every run without a metrics file.
pub fn emit_report(runs: &[PathBuf], out_dir: &Path) -> Result<ReportFiles> {
    let mut files = emit_summary(runs, out_dir)?;
    for run in runs {
        if let Some(p) = plot_run(run, out_dir)? {
            files.plots.push(p);
        }
    }
    Ok(files)
}

/// The summary tables of [`emit_report`], without plots.
pub fn emit_summary(runs: &[PathBuf], out_dir: &Path) -> Result<ReportFiles> {
    let missing: Vec<String> = runs
        .iter()
        .filter(|r| !r.join("metrics.csv").is_file())
        .map(|r| r.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingRuns(missing));
    }
    let mut cells: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for run in runs {
        for row in read_metrics_csv(&run.join("metrics.csv"))? {
            cells
                .entry((row.dataset.clone(), method_label(&row)))
                .or_default()
                .push((row.mae_mm, row.rmse_mm));
        }
    }
    let rows: Vec<SummaryRow> = cells
        .iter()
        .map(|((dataset, method), v)| {
            let (mae_mean, mae_std) = mean_std(&v.iter().map(|x| x.0).collect::<Vec<_>>());
            let (rmse_mean, rmse_std) = mean_std(&v.iter().map(|x| x.1).collect::<Vec<_>>());
            SummaryRow {
                dataset: dataset.clone(),
                method: method.clone(),
                n_seeds: v.len(),
                mae_mean,
                mae_std,
                rmse_mean,
                rmse_std,
            }
        })
        .collect();
    let improvements = improvements(&rows);

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summary_csv = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_csv).map_err(|e| csv_err(&summary_csv, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_err(&summary_csv, e))?;
    }
    w.flush().map_err(|e| Error::io(&summary_csv, e))?;

    let summary_md = out_dir.join("summary.md");
    fs::write(&summary_md, render_markdown(&rows, &improvements)).map_err(|e| Error::io(&summary_md, e))?;
    Ok(ReportFiles {
        summary_csv,
        summary_md,
        plots: Vec::new(),
        rows,
        improvements,
    })
}

/// Renders `out_dir/plots/<run>.png` from a run's loss series; `None` when
/// the run has no losses.
pub fn plot_run(run: &Path, out_dir: &Path) -> Result<Option<PathBuf>> {
    let losses = run.join("losses.csv");
    if !losses.is_file() {
        return Ok(None);
    }
    let series: Vec<f64> = read_losses_csv(&losses)?.iter().map(|r| r.total).collect();
    if series.is_empty() {
        return Ok(None);
    }
    let dir = out_dir.join("plots");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = run.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let path = dir.join(format!("{name}.png"));
    plot_series(&series, 480, 240)
        .save(&path)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(Some(path))
}

fn improvements(rows: &[SummaryRow]) -> Vec<Improvement> {
    let mut out = Vec::new();
    for ours in rows.iter().filter(|r| OURS.contains(&r.method.as_str())) {
        for base in rows
            .iter()
            .filter(|r| r.dataset == ours.dataset && !OURS.contains(&r.method.as_str()) && !r.method.contains('['))
        {
            out.push(Improvement {
                dataset: ours.dataset.clone(),
                method: ours.method.clone(),
                baseline: base.method.clone(),
                percent: 100.0 * (base.mae_mean - ours.mae_mean) / base.mae_mean,
            });
        }
    }
    out
}

fn render_markdown(rows: &[SummaryRow], imps: &[Improvement]) -> String {
    let datasets: Vec<&String> = {
        let mut d: Vec<&String> = rows.iter().map(|r| &r.dataset).collect();
        d.dedup();
        d
    };
    let mut methods: Vec<&String> = rows.iter().map(|r| &r.method).collect();
    methods.sort();
    methods.dedup();
    let lookup: BTreeMap<(&String, &String), &SummaryRow> =
        rows.iter().map(|r| ((&r.dataset, &r.method), r)).collect();

    let mut s = String::from("# Results\n\nMAE / RMSE in millimeters, mean ± sample std over seeds. Bold marks the best mean per column.\n\n");
    s.push_str("| Method |");
    for d in &datasets {
        s.push_str(&format!(" {d} MAE | {d} RMSE |"));
    }
    s.push_str("\n|---|");
    for _ in &datasets {
        s.push_str("---|---|");
    }
    s.push('\n');
    let best = |d: &String, f: fn(&SummaryRow) -> f64| {
        rows.iter()
            .filter(|r| &r.dataset == d)
            .map(f)
            .fold(f64::INFINITY, f64::min)
    };
    for m in &methods {
        s.push_str(&format!("| {m} |"));
        for d in &datasets {
            match lookup.get(&(*d, *m)) {
                Some(r) => {
                    for (mean, std, b) in [
                        (r.mae_mean, r.mae_std, best(d, |r| r.mae_mean)),
                        (r.rmse_mean, r.rmse_std, best(d, |r| r.rmse_mean)),
                    ] {
                        let cell = format!("{mean:.2} ± {std:.2}");
                        if mean == b {
                            s.push_str(&format!(" **{cell}** |"));
                        } else {
                            s.push_str(&format!(" {cell} |"));
                        }
                    }
                }
                None => s.push_str(" - | - |"),
            }
        }
        s.push('\n');
    }
    if !imps.is_empty() {
        s.push_str("\n## Relative MAE improvement\n\nPer (dataset, method, baseline) pair, then the plain mean over all listed pairs.\n\n| Dataset | Method | Baseline | Improvement (%) |\n|---|---|---|---|\n");
        for i in imps {
            s.push_str(&format!("| {} | {} | {} | {:.2} |\n", i.dataset, i.method, i.baseline, i.percent));
        }
        let mean = imps.iter().map(|i| i.percent).sum::<f64>() / imps.len() as f64;
        s.push_str(&format!("\nPlain mean over {} pairs: {mean:.2}%\n", imps.len()));
    }
    s
}

/// Line plot of a series on a white canvas with simple axes.
pub fn plot_series(values: &[f64], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 20u32;
    let axis = Rgb([0, 0, 0]);
    for x in margin..width - margin {
        img.put_pixel(x, height - margin, axis);
    }
    for y in margin..=height - margin {
        img.put_pixel(margin, y, axis);
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return img;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pw = (width - 2 * margin - 1) as f64;
    let ph = (height - 2 * margin - 1) as f64;
    let to_px = |i: usize, v: f64| {
        let x = margin as f64 + 1.0 + if values.len() > 1 { pw * i as f64 / (values.len() - 1) as f64 } else { 0.0 };
        let y = (height - margin) as f64 - 1.0 - ph * (v - lo) / span;
        (x.round() as i64, y.round() as i64)
    };
    let line = Rgb([31, 119, 180]);
    let mut prev: Option<(i64, i64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            prev = None;
            continue;
        }
        let cur = to_px(i, v);
        let (x0, y0) = prev.unwrap_or(cur);
        draw_line(&mut img, x0, y0, cur.0, cur.1, line);
        prev = Some(cur);
    }
    img
}

fn draw_line(img: &mut RgbImage, mut x0: i64, mut y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, c);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}
