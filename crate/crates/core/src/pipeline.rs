//! Training stages and online adapters.
//!
//! Source side: supervised pretraining, adaptation-layer initialization and
//! proxy-head preparation. Target side: single-pass adapters over a
//! [`SampleStream`] that score every batch with the current parameters
//! before using it for any update.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::datasets::{derive_seed, Batch, DepthMap, Image, Sample, SampleStream};
use crate::error::{Error, Result};
use crate::eval::{aggregate, per_sample_metrics, DepthRange, InputMode, LossRow, MetricsRecord};
use crate::losses::{adapt_loss_graph, supervised_graph, LossReport, LossWeights};
use crate::model::{encode_inputs, forward_batch, forward_graph, ModelParams, Mode, ParamSelector};
use crate::optim::Adam;
use crate::proxy::{make_source_pair, make_target_pair, pair_loss, pool_features, ProxyHeads};
use crate::tensor::Tensor;

/// Hyperparameters shared by every stage. Fields a stage does not use are
/// ignored by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub learning_rate: f64,
    /// Passes over the source set (source stages only).
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimization steps per target batch.
    pub inner_iter: usize,
    pub weights: LossWeights,
    /// Parameter subset; `None` means the stage's own default.
    pub selector: Option<ParamSelector>,
    /// Set by the caller; experiment configs derive it from their own seed.
    #[serde(skip)]
    pub seed: u64,
    /// Refresh BN running statistics during train-mode adaptation forwards.
    pub update_bn_stats: bool,
    /// Probability of blanking a pretraining image to `I_0`.
    pub image_dropout: f64,
    /// Weight of the teacher-consistency term (CoTTA variant).
    pub consistency_weight: f64,
    /// Teacher EMA rate (CoTTA variant).
    pub teacher_tau: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            learning_rate: 1e-3,
            epochs: 6,
            batch_size: 16,
            inner_iter: 1,
            weights: LossWeights::default(),
            selector: None,
            seed: 0,
            update_bn_stats: true,
            image_dropout: 0.0,
            consistency_weight: 1.0,
            teacher_tau: 0.999,
        }
    }
}

impl StageConfig {
    pub fn pretrain() -> Self {
        StageConfig {
            learning_rate: 2e-3,
            epochs: 20,
            selector: Some(ParamSelector::All),
            ..Self::default()
        }
    }

    pub fn init() -> Self {
        StageConfig {
            selector: Some(ParamSelector::AdaptationOnly),
            ..Self::default()
        }
    }

    pub fn prepare() -> Self {
        StageConfig {
            batch_size: 48,
            ..Self::default()
        }
    }

    pub fn adapt() -> Self {
        StageConfig {
            learning_rate: 4e-3,
            epochs: 1,
            inner_iter: 3,
            weights: LossWeights::new(1.0, 5.0, 1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.inner_iter == 0 {
            return bad("inner_iter must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.image_dropout) {
            return bad(format!("image_dropout must lie in [0, 1], got {}", self.image_dropout));
        }
        if !(0.0..=1.0).contains(&self.teacher_tau) {
            return bad(format!("teacher_tau must lie in [0, 1], got {}", self.teacher_tau));
        }
        if !(self.consistency_weight >= 0.0) {
            return bad("consistency_weight must be >= 0".into());
        }
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Init,
    Prepare,
    Adapt,
}

/// Hooks into a running stage. Every method has a no-op default.
pub trait StageObserver {
    fn on_step(&mut self, _stage: Stage, _step: usize, _report: &LossReport) {}
    /// Called after a target batch was scored and before any update on it.
    fn on_scored(&mut self, _batch: &Batch, _params: &ModelParams, _metrics: &MetricsRecord) {}
    /// Called once all updates for a target batch are done.
    fn on_updated(&mut self, _batch: &Batch, _params: &ModelParams) {}
    fn on_event(&mut self, _message: &str) {}
}

pub struct NullObserver;

impl StageObserver for NullObserver {}

/// Online metrics for one target batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub index: usize,
    pub ids: Vec<String>,
    pub metrics: MetricsRecord,
}

/// Observer that keeps everything in memory for run artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub losses: Vec<LossRow>,
    pub batches: Vec<BatchMetrics>,
    pub events: Vec<String>,
}

impl StageObserver for RunLog {
    fn on_step(&mut self, _stage: Stage, step: usize, report: &LossReport) {
        self.losses.push(LossRow::from_report(step, report));
    }

    fn on_scored(&mut self, batch: &Batch, _params: &ModelParams, metrics: &MetricsRecord) {
        self.batches.push(BatchMetrics {
            index: batch.index,
            ids: batch.ids(),
            metrics: metrics.clone(),
        });
    }

    fn on_event(&mut self, message: &str) {
        self.events.push(message.to_string());
    }
}

fn gather_grads(grads: &Gradients, tape: &Tape, vars: &[(String, Var)]) -> BTreeMap<String, Tensor> {
    vars.iter()
        .map(|(n, v)| (n.clone(), grads.get_or_zeros(*v, tape.value(*v).shape())))
        .collect()
}

fn trainable_vars<'a>(
    bound: impl Iterator<Item = (&'a String, &'a Var)>,
    trainable: &BTreeSet<String>,
) -> Vec<(String, Var)> {
    bound
        .filter(|(n, _)| trainable.contains(*n))
        .map(|(n, v)| (n.clone(), *v))
        .collect()
}

fn check_finite(step: usize, value: f64, grads: &BTreeMap<String, Tensor>) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Diverged {
            step,
            msg: format!("loss is {value}"),
        });
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Diverged {
            step,
            msg: format!("non-finite gradient for {name}"),
        });
    }
    Ok(())
}

fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize, min_len: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= min_len)
        .map(|c| c.to_vec())
        .collect()
}

/// Supervised training over `source` updating the `selector` subset.
/// Train mode normalizes with batch statistics and refreshes running
/// statistics; eval mode leaves them untouched.
fn supervised_fit(
    params: &ModelParams,
    source: &[Sample],
    cfg: &StageConfig,
    selector: ParamSelector,
    mode: Mode,
    stage: Stage,
    obs: &mut dyn StageObserver,
) -> Result<ModelParams> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptySupport("source dataset is empty".into()));
    }
    let mut params = params.clone();
    let trainable = params.partition(selector)?.trainable;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5eed));
    let min_len = if mode == Mode::Train && params.config.use_batch_norm { 2 } else { 1 };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for idx in shuffled_batches(source.len(), cfg.batch_size, cfg.seed, epoch, min_len) {
            let blank = Image::zeros(params.config.height, params.config.width);
            let images: Vec<&Image> = idx
                .iter()
                .map(|&i| {
                    if cfg.image_dropout > 0.0 && rng.gen::<f64>() < cfg.image_dropout {
                        &blank
                    } else {
                        &source[i].image
                    }
                })
                .collect();
            let sparse: Vec<&DepthMap> = idx.iter().map(|&i| &source[i].sparse).collect();
            let gt: Vec<&DepthMap> = idx.iter().map(|&i| &source[i].gt).collect();
            let (img, dep) = encode_inputs(&params.config, &images, &sparse)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, &trainable);
            let iv = tape.constant(img);
            let dv = tape.constant(dep);
            let g = forward_graph(&params, &bound, &mut tape, iv, dv, mode)?;
            let loss = supervised_graph(&mut tape, g.depth, &gt)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss);
            let grads = gather_grads(&grads, &tape, &trainable_vars(bound.iter(), &trainable));
            check_finite(step, value, &grads)?;
            opt.step(params.tensors_mut(), &grads);
            if mode == Mode::Train {
                params.apply_bn_updates(&g.bn_updates);
            }
            let report = LossReport {
                total: value,
                l_z: 0.0,
                l_sm: 0.0,
                l_proxy: 0.0,
                valid_point_count: gt.iter().map(|m| m.valid_count()).sum(),
            };
            obs.on_step(stage, step, &report);
            step += 1;
        }
    }
    Ok(params)
}

/// Supervised L1 pretraining of every backbone parameter.
pub fn pretrain_backbone(
    params: &ModelParams,
    source: &[Sample],
    cfg: &StageConfig,
    obs: &mut dyn StageObserver,
) -> Result<ModelParams> {
    let selector = cfg.selector.unwrap_or(ParamSelector::All);
    supervised_fit(params, source, cfg, selector, Mode::Train, Stage::Pretrain, obs)
}

/// Fits the inserted adaptation layer on the source set with everything
/// else frozen, batch norm included.
pub fn stage_initialize(
    params: &ModelParams,
    source: &[Sample],
    cfg: &StageConfig,
    obs: &mut dyn StageObserver,
) -> Result<ModelParams> {
    match cfg.selector {
        None | Some(ParamSelector::AdaptationOnly) => {}
        Some(other) => {
            return Err(Error::Config(format!(
                "adaptation-layer initialization requires selector adaptation_only, got {other:?}"
            )))
        }
    }
    if !params.has_adaptation_layer() {
        return Err(Error::Lifecycle("insert the adaptation layer before initializing it".into()));
    }
    supervised_fit(params, source, cfg, ParamSelector::AdaptationOnly, Mode::Eval, Stage::Init, obs)
}

/// Pooled fused features under `mode` for every sample, eval mode.
pub fn pooled_features(
    params: &ModelParams,
    samples: &[Sample],
    mode: InputMode,
    batch_size: usize,
) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs: Vec<(Image, DepthMap)> = chunk.iter().map(|s| mode.inputs(s)).collect();
        let images: Vec<&Image> = inputs.iter().map(|(i, _)| i).collect();
        let sparse: Vec<&DepthMap> = inputs.iter().map(|(_, z)| z).collect();
        let (_, taps) = forward_batch(params, &images, &sparse, Mode::Eval)?;
        parts.push(pool_features(&taps.fused_feat));
    }
    Ok(Tensor::stack_rows(&parts))
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let (_, d) = t.dims2();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::from_vec(&[idx.len(), d], data)
}

/// Mean preparation loss of `heads` on `samples`, without updating anything.
pub fn prepare_loss(params: &ModelParams, heads: &ProxyHeads, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let x0 = pooled_features(params, samples, InputMode::DepthOnly, batch_size)?;
    let x1 = pooled_features(params, samples, InputMode::Both, batch_size)?;
    let mut tape = Tape::new();
    let bound = heads.bind(&mut tape, false);
    let a = tape.constant(x0);
    let b = tape.constant(x1);
    let pair = make_source_pair(heads, &bound, &mut tape, a, b)?;
    let loss = pair_loss(&mut tape, &pair)?;
    Ok(tape.value(loss).item())
}

/// Learns the proxy mapping on source features from the frozen encoder:
/// gradient steps on `g` and `h`, then an EMA step on `g'`. Returns the
/// heads marked as prepared.
pub fn stage_prepare(
    params: &ModelParams,
    heads: &ProxyHeads,
    source: &[Sample],
    cfg: &StageConfig,
    obs: &mut dyn StageObserver,
) -> Result<ProxyHeads> {
    cfg.validate()?;
    if heads.is_prepared() {
        return Err(Error::Lifecycle("proxy heads are already prepared and frozen".into()));
    }
    if source.is_empty() {
        return Err(Error::EmptySupport("source dataset is empty".into()));
    }
    // The encoder is frozen, so its pooled outputs are computed once.
    let x0 = pooled_features(params, source, InputMode::DepthOnly, cfg.batch_size)?;
    let x1 = pooled_features(params, source, InputMode::Both, cfg.batch_size)?;
    let mut heads = heads.clone();
    let trainable: BTreeSet<String> = heads.trainable_names().into_iter().collect();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for idx in shuffled_batches(source.len(), cfg.batch_size, cfg.seed, epoch, 1) {
            let mut tape = Tape::new();
            let bound = heads.bind(&mut tape, true);
            let a = tape.constant(rows(&x0, &idx));
            let b = tape.constant(rows(&x1, &idx));
            let pair = make_source_pair(&heads, &bound, &mut tape, a, b)?;
            let loss = pair_loss(&mut tape, &pair)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss);
            let grads = gather_grads(&grads, &tape, &trainable_vars(bound.iter(), &trainable));
            check_finite(step, value, &grads)?;
            opt.step(heads.tensors_mut(), &grads);
            heads.ema_update();
            let report = LossReport {
                total: value,
                l_z: 0.0,
                l_sm: 0.0,
                l_proxy: value,
                valid_point_count: 0,
            };
            obs.on_step(Stage::Prepare, step, &report);
            step += 1;
        }
    }
    heads.mark_prepared();
    Ok(heads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMethod {
    Proxytta,
    ProxyttaFast,
}

impl AdaptMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMethod::Proxytta => "proxytta",
            AdaptMethod::ProxyttaFast => "proxytta_fast",
        }
    }

    pub fn selector(self) -> ParamSelector {
        match self {
            AdaptMethod::Proxytta => ParamSelector::AdaptationPlusBn,
            AdaptMethod::ProxyttaFast => ParamSelector::AdaptationOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnVariant {
    StatsOnly,
    AffineWithLosses,
}

/// Result of one pass over a target stream.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub params: ModelParams,
    /// Mean of per-sample online metrics over the stream.
    pub metrics: MetricsRecord,
    pub batches: usize,
    /// Indices of batches whose update was skipped.
    pub skipped: Vec<usize>,
    /// Full parameter sets the adapter kept alive.
    pub param_sets: usize,
    pub steps: usize,
}

/// Per-batch driver shared by all adapters: score, then update.
fn run_stream(
    params: ModelParams,
    stream: &mut dyn SampleStream,
    range: DepthRange,
    method: &str,
    obs: &mut dyn StageObserver,
    mut update: impl FnMut(&mut ModelParams, &Batch, &mut dyn StageObserver) -> Result<bool>,
) -> Result<(ModelParams, MetricsRecord, usize, Vec<usize>)> {
    let mut params = params;
    let mut records = Vec::new();
    let mut batches = 0;
    let mut skipped = Vec::new();
    while let Some(batch) = stream.next_batch()? {
        let scored = per_sample_metrics(&params, &batch.samples, InputMode::Both, range, batch.len())?;
        let summary = aggregate(&scored)?.tagged("", method);
        obs.on_scored(&batch, &params, &summary);
        records.extend(scored);
        if !update(&mut params, &batch, obs)? {
            skipped.push(batch.index);
        }
        obs.on_updated(&batch, &params);
        batches += 1;
    }
    let metrics = aggregate(&records)?.tagged("", method);
    Ok((params, metrics, batches, skipped))
}

fn batch_refs(batch: &Batch) -> (Vec<&Image>, Vec<&DepthMap>) {
    (
        batch.samples.iter().map(|s| &s.image).collect(),
        batch.samples.iter().map(|s| &s.sparse).collect(),
    )
}

fn train_mode_for(params: &ModelParams, wants_train: bool, n: usize) -> Mode {
    if wants_train && params.config.use_batch_norm && n >= 2 {
        Mode::Train
    } else {
        Mode::Eval
    }
}

/// One step of a target-side objective. Returns `false` when the batch had
/// no sparse support and the update was skipped.
#[allow(clippy::too_many_arguments)]
fn target_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    trainable: &BTreeSet<String>,
    batch: &Batch,
    mode: Mode,
    cfg: &StageConfig,
    heads: Option<&ProxyHeads>,
    teacher: Option<&[Tensor]>,
    step: usize,
    obs: &mut dyn StageObserver,
) -> Result<bool> {
    let (images, sparse) = batch_refs(batch);
    if sparse.iter().all(|z| z.valid_count() == 0) {
        let msg = format!("batch {}: no valid sparse points, update skipped", batch.index);
        log::warn!("{msg}");
        obs.on_event(&msg);
        return Ok(false);
    }
    // Depth-only features for the proxy branch; detached, so a plain forward.
    let pooled_null = match heads {
        Some(_) if cfg.weights.w_proxy > 0.0 => {
            let blank = Image::zeros(params.config.height, params.config.width);
            let blanks = vec![&blank; images.len()];
            let (_, taps) = forward_batch(params, &blanks, &sparse, Mode::Eval)?;
            Some(pool_features(&taps.fused_feat))
        }
        _ => None,
    };
    let (img, dep) = encode_inputs(&params.config, &images, &sparse)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, trainable);
    let iv = tape.constant(img);
    let dv = tape.constant(dep);
    let g = forward_graph(params, &bound, &mut tape, iv, dv, mode)?;
    let proxy = match (heads, pooled_null) {
        (Some(h), Some(x0)) => {
            let hb = h.bind(&mut tape, false);
            let a = tape.constant(x0);
            let b = tape.global_avg_pool(g.taps.fused_feat);
            let pair = make_target_pair(h, &hb, &mut tape, a, b)?;
            Some(pair_loss(&mut tape, &pair)?)
        }
        _ => None,
    };
    let (mut loss, mut report) = adapt_loss_graph(&mut tape, g.depth, &sparse, &images, proxy, &cfg.weights)?;
    if let Some(t) = teacher {
        let target: Vec<f64> = t.iter().flat_map(|x| x.data().iter().copied()).collect();
        let n = target.len() as f64;
        let c = tape.weighted_l1(g.depth, target, vec![1.0 / n; n as usize]);
        let cv = tape.value(c).item();
        loss = tape.weighted_sum(&[(loss, 1.0), (c, cfg.consistency_weight)]);
        report.total += cfg.consistency_weight * cv;
    }
    let grads = tape.backward(loss);
    let grads = gather_grads(&grads, &tape, &trainable_vars(bound.iter(), trainable));
    check_finite(step, report.total, &grads)?;
    opt.step(params.tensors_mut(), &grads);
    if mode == Mode::Train && cfg.update_bn_stats {
        params.apply_bn_updates(&g.bn_updates);
    }
    obs.on_step(Stage::Adapt, step, &report);
    Ok(true)
}

/// Online adaptation with frozen proxy heads. `proxytta` updates the
/// adaptation layer and BN affine parameters with train-mode forwards;
/// `proxytta_fast` updates the adaptation layer only, BN frozen.
pub fn stage_adapt(
    params: &ModelParams,
    heads: &ProxyHeads,
    stream: &mut dyn SampleStream,
    cfg: &StageConfig,
    method: AdaptMethod,
    range: DepthRange,
    obs: &mut dyn StageObserver,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if let Some(s) = cfg.selector {
        if s != method.selector() {
            return Err(Error::Config(format!(
                "{} updates {:?}, but the config selects {s:?}",
                method.as_str(),
                method.selector()
            )));
        }
    }
    if !heads.is_prepared() {
        return Err(Error::Lifecycle(format!(
            "{} needs prepared proxy heads",
            method.as_str()
        )));
    }
    let trainable = params.partition(method.selector())?.trainable;
    let wants_train = method == AdaptMethod::Proxytta;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut step = 0;
    let (params, metrics, batches, skipped) = run_stream(
        params.clone(),
        stream,
        range,
        method.as_str(),
        obs,
        |p, batch, obs| {
            let mode = train_mode_for(p, wants_train, batch.len());
            for _ in 0..cfg.inner_iter {
                if !target_step(p, &mut opt, &trainable, batch, mode, cfg, Some(heads), None, step, obs)? {
                    return Ok(false);
                }
                step += 1;
            }
            Ok(true)
        },
    )?;
    Ok(AdaptOutcome {
        params,
        metrics,
        batches,
        skipped,
        param_sets: 1,
        steps: step,
    })
}

/// Scores the stream with fixed parameters.
pub fn no_adapt(
    params: &ModelParams,
    stream: &mut dyn SampleStream,
    range: DepthRange,
    obs: &mut dyn StageObserver,
) -> Result<AdaptOutcome> {
    let (params, metrics, batches, skipped) =
        run_stream(params.clone(), stream, range, "no_adapt", obs, |_, _, _| Ok(true))?;
    Ok(AdaptOutcome {
        params,
        metrics,
        batches,
        skipped,
        param_sets: 1,
        steps: 0,
    })
}

/// BN Adapt. `stats_only` refreshes running statistics with a train-mode
/// forward per batch; `affine_with_losses` also takes gradient steps on
/// `w_z l_z + w_sm l_sm` over the BN affine parameters.
pub fn baseline_bn_adapt(
    params: &ModelParams,
    stream: &mut dyn SampleStream,
    variant: BnVariant,
    cfg: &StageConfig,
    range: DepthRange,
    obs: &mut dyn StageObserver,
) -> Result<AdaptOutcome> {
    if !params.config.use_batch_norm {
        return Err(Error::Config("BN Adapt needs a model with batch norm".into()));
    }
    let mut cfg = cfg.clone();
    cfg.weights.w_proxy = 0.0;
    if variant == BnVariant::AffineWithLosses {
        cfg.validate()?;
    }
    let trainable = params.partition(ParamSelector::BnAffineOnly)?.trainable;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut step = 0;
    let name = match variant {
        BnVariant::StatsOnly => "bn_adapt",
        BnVariant::AffineWithLosses => "bn_adapt_lz_lsm",
    };
    let (params, metrics, batches, skipped) = run_stream(params.clone(), stream, range, name, obs, |p, batch, obs| {
        match variant {
            BnVariant::StatsOnly => {
                if batch.len() >= 2 {
                    let (images, sparse) = batch_refs(batch);
                    crate::model::forward_batch_train(p, &images, &sparse)?;
                }
                Ok(true)
            }
            BnVariant::AffineWithLosses => {
                let mode = train_mode_for(p, true, batch.len());
                for _ in 0..cfg.inner_iter {
                    if !target_step(p, &mut opt, &trainable, batch, mode, &cfg, None, None, step, obs)? {
                        return Ok(false);
                    }
                    step += 1;
                }
                Ok(true)
            }
        }
    })?;
    Ok(AdaptOutcome {
        params,
        metrics,
        batches,
        skipped,
        param_sets: 1,
        steps: step,
    })
}

/// CoTTA-style mean teacher without augmentation: the student updates every
/// parameter on `w_z l_z + w_sm l_sm + w_c mean|student - teacher|` and the
/// teacher tracks the student by EMA. The student is scored.
pub fn baseline_cotta(
    params: &ModelParams,
    stream: &mut dyn SampleStream,
    cfg: &StageConfig,
    range: DepthRange,
    obs: &mut dyn StageObserver,
) -> Result<AdaptOutcome> {
    let mut cfg = cfg.clone();
    cfg.weights.w_proxy = 0.0;
    cfg.validate()?;
    let trainable = params.partition(ParamSelector::All)?.trainable;
    let mut teacher = params.clone();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut step = 0;
    let tau = cfg.teacher_tau;
    let (params, metrics, batches, skipped) = run_stream(params.clone(), stream, range, "cotta", obs, |p, batch, obs| {
        let mode = train_mode_for(p, true, batch.len());
        let (images, sparse) = batch_refs(batch);
        for _ in 0..cfg.inner_iter {
            let (tpred, _) = forward_batch(&teacher, &images, &sparse, Mode::Eval)?;
            let tpred: Vec<Tensor> = tpred
                .iter()
                .map(|m| Tensor::from_vec(&[m.height(), m.width()], m.data().to_vec()))
                .collect();
            if !target_step(p, &mut opt, &trainable, batch, mode, &cfg, None, Some(&tpred), step, obs)? {
                return Ok(false);
            }
            step += 1;
            if tau < 1.0 {
                for (name, t) in teacher.tensors_mut().iter_mut() {
                    let s = p.get(name);
                    for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                        *tv = tau * *tv + (1.0 - tau) * sv;
                    }
                    t.round_to_f32();
                }
            }
        }
        Ok(true)
    })?;
    Ok(AdaptOutcome {
        params,
        metrics,
        batches,
        skipped,
        param_sets: 2,
        steps: step,
    })
}
