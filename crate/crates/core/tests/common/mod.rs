//! Oracles and experiment drivers shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use proxytta_core::autograd::{Tape, Var};
use proxytta_core::config::{ExperimentConfig, Method};
use proxytta_core::datasets::{generate_dataset, shift_dataset, Batch, BatchStream, RetentionProbe};
use proxytta_core::eval::{aggregate, centroid_analysis, per_sample_metrics, sensitivity_rows, InputMode};
use proxytta_core::experiment::{self, Splits};
use proxytta_core::losses::{adapt_loss_graph, smoothness_graph, sparse_consistency_graph, supervised_graph};
use proxytta_core::model::{encode_inputs, forward_batch, forward_graph, Mode};
use proxytta_core::pipeline::{stage_adapt, stage_prepare, AdaptMethod, StageObserver};
use proxytta_core::proxy::{make_source_pair, make_target_pair, pair_loss, Head, ProxyConfig};
use proxytta_core::{
    init_heads, init_model, insert_adaptation_layer, DepthMap, Image, LossWeights, MetricsRecord, ModelConfig,
    ModelParams, ParamGroup, ParamSelector, ProxyHeads, Sample, SceneConfig, StageConfig, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Fixtures

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        image_channels: [4, 6, 8],
        depth_channels: [4, 6, 8],
        fusion_width: 8,
        decoder_widths: [8, 6, 4],
        adaptation_channels: 8,
        ..ModelConfig::default()
    }
}

pub fn tiny_scene() -> SceneConfig {
    SceneConfig {
        height: 16,
        width: 16,
        density: 0.1,
        ..SceneConfig::default()
    }
}

pub fn tiny_proxy() -> ProxyConfig {
    ProxyConfig {
        embed_dim: 6,
        hidden_dim: 5,
        tau: 0.9,
    }
}

pub fn tiny_samples(seed: u64, n: usize) -> Vec<Sample> {
    generate_dataset(seed, n, &tiny_scene()).expect("tiny scenes")
}

/// A tiny model with an adaptation layer whose residual branch is made
/// non-zero so that every path carries signal.
pub fn tiny_adapted_model(seed: u64) -> ModelParams {
    let mut p = insert_adaptation_layer(&init_model(&tiny_model(), seed).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada);
    for name in p.group_names(ParamGroup::AdaptationLayer) {
        let t = p.get_mut(&name).unwrap();
        for v in t.data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
    p
}

pub fn prepared_heads(seed: u64) -> ProxyHeads {
    let mut h = init_heads(tiny_model().fusion_width, &tiny_proxy(), seed).unwrap();
    h.mark_prepared();
    h
}

fn refs(samples: &[Sample]) -> (Vec<&Image>, Vec<&DepthMap>, Vec<&DepthMap>) {
    (
        samples.iter().map(|s| &s.image).collect(),
        samples.iter().map(|s| &s.sparse).collect(),
        samples.iter().map(|s| &s.gt).collect(),
    )
}

// ---------------------------------------------------------------------------
// Gradient oracle

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error, so that gradients near zero are
/// judged on absolute error.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const GRAD_PICKS: usize = 20;
pub const GRAD_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_at: String,
}

type Inputs = BTreeMap<String, Tensor>;

/// Compares analytic gradients with central differences on `picks` random
/// entries of the `candidates` tensors.
pub fn check_gradients(
    inputs: &Inputs,
    candidates: &[String],
    picks: usize,
    seed: u64,
    value: &dyn Fn(&Inputs) -> f64,
    analytic: &dyn Fn(&Inputs) -> Inputs,
) -> GradReport {
    let grads = analytic(inputs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut report = GradReport {
        checked: 0,
        worst_rel: 0.0,
        worst_at: String::new(),
    };
    for _ in 0..picks {
        let name = &candidates[rng.gen_range(0..candidates.len())];
        let i = rng.gen_range(0..inputs[name].len());
        let at = |delta: f64| {
            let mut x = inputs.clone();
            x.get_mut(name).unwrap().data_mut()[i] += delta;
            value(&x)
        };
        let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        let a = grads.get(name).map(|g| g.data()[i]).unwrap_or(0.0);
        let rel = rel_error(a, numeric);
        report.checked += 1;
        if rel > report.worst_rel || report.worst_at.is_empty() {
            report.worst_rel = rel;
            report.worst_at = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
        }
    }
    report
}

/// Value and gradients of a tape expression over named inputs.
fn tape_eval(x: &Inputs, grad: bool, f: &dyn Fn(&mut Tape, &BTreeMap<String, Var>) -> Var) -> (f64, Inputs) {
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = x
        .iter()
        .map(|(n, t)| (n.clone(), if grad { tape.param(t.clone()) } else { tape.constant(t.clone()) }))
        .collect();
    let root = f(&mut tape, &vars);
    let value = tape.value(root).item();
    if !grad {
        return (value, Inputs::new());
    }
    let g = tape.backward(root);
    let grads = vars
        .iter()
        .map(|(n, v)| (n.clone(), g.get_or_zeros(*v, tape.value(*v).shape())))
        .collect();
    (value, grads)
}

fn check_tape_expr(x: Inputs, seed: u64, f: &dyn Fn(&mut Tape, &BTreeMap<String, Var>) -> Var) -> GradReport {
    let names: Vec<String> = x.keys().cloned().collect();
    check_gradients(
        &x,
        &names,
        GRAD_PICKS,
        seed,
        &|x| tape_eval(x, false, f).0,
        &|x| tape_eval(x, true, f).1,
    )
}

fn random_pred(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3);
    Tensor::from_vec(&[n, 1, 16, 16], (0..n * 256).map(|_| rng.gen_range(1.0..10.0)).collect())
}

pub fn grad_sparse_consistency(seed: u64) -> GradReport {
    let samples = tiny_samples(seed, 2);
    let (_, sparse, _) = refs(&samples);
    let x = Inputs::from([("pred".to_string(), random_pred(seed, 2))]);
    check_tape_expr(x, seed, &|tape, v| sparse_consistency_graph(tape, v["pred"], &sparse).unwrap().0)
}

pub fn grad_smoothness(seed: u64) -> GradReport {
    let samples = tiny_samples(seed, 2);
    let (images, _, _) = refs(&samples);
    let x = Inputs::from([("pred".to_string(), random_pred(seed, 2))]);
    check_tape_expr(x, seed, &|tape, v| smoothness_graph(tape, v["pred"], &images).unwrap())
}

pub fn grad_proxy(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let mut t = || Tensor::from_vec(&[4, 8], (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let x = Inputs::from([("p".to_string(), t()), ("q".to_string(), t())]);
    check_tape_expr(x, seed, &|tape, v| tape.cosine_loss(v["p"], v["q"]))
}

fn rebuild(base: &ModelParams, x: &Inputs) -> ModelParams {
    let mut p = base.clone();
    for (n, t) in x {
        *p.get_mut(n).unwrap() = t.clone();
    }
    p
}

/// Builds a loss on the tape and returns it with the trainable leaves.
type Objective<'a> = &'a dyn Fn(&ModelParams, &mut Tape, &BTreeSet<String>) -> (Var, Vec<(String, Var)>);

/// Gradient of a network objective with respect to the tensors in `x`.
fn network_case(
    base: &ModelParams,
    x: Inputs,
    seed: u64,
    objective: Objective,
) -> GradReport {
    let names: Vec<String> = x.keys().cloned().collect();
    let trainable: BTreeSet<String> = names.iter().cloned().collect();
    let value = |x: &Inputs| {
        let p = rebuild(base, x);
        let mut tape = Tape::new();
        let (root, _) = objective(&p, &mut tape, &BTreeSet::new());
        tape.value(root).item()
    };
    let analytic = |x: &Inputs| {
        let p = rebuild(base, x);
        let mut tape = Tape::new();
        let (root, vars) = objective(&p, &mut tape, &trainable);
        let g = tape.backward(root);
        vars.into_iter()
            .map(|(n, v)| {
                let shape = tape.value(v).shape().to_vec();
                (n, g.get_or_zeros(v, &shape))
            })
            .collect()
    };
    check_gradients(&x, &names, GRAD_PICKS, seed, &value, &analytic)
}

/// Full adaptation objective through the network: train-mode forward,
/// frozen prepared heads, null-input features held fixed.
pub fn grad_adapt_objective(seed: u64) -> GradReport {
    let base = tiny_adapted_model(seed);
    let heads = prepared_heads(seed);
    let samples = tiny_samples(seed + 100, 2);
    let (images, sparse, _) = refs(&samples);
    let blank = Image::zeros(16, 16);
    let (_, taps) = forward_batch(&base, &[&blank, &blank], &sparse, Mode::Eval).unwrap();
    let x0 = proxytta_core::proxy::pool_features(&taps.fused_feat);
    let weights = LossWeights::new(1.0, 0.5, 0.7);
    let trainable = base.partition(ParamSelector::AdaptationPlusBn).unwrap().trainable;
    let x: Inputs = trainable.iter().map(|n| (n.clone(), base.get(n).clone())).collect();
    network_case(&base, x, seed, &|p, tape, train| {
        let bound = p.bind(tape, train);
        let (img, dep) = encode_inputs(&p.config, &images, &sparse).unwrap();
        let iv = tape.constant(img);
        let dv = tape.constant(dep);
        let g = forward_graph(p, &bound, tape, iv, dv, Mode::Train).unwrap();
        let hb = heads.bind(tape, false);
        let a = tape.constant(x0.clone());
        let b = tape.global_avg_pool(g.taps.fused_feat);
        let pair = make_target_pair(&heads, &hb, tape, a, b).unwrap();
        let lp = pair_loss(tape, &pair).unwrap();
        let (loss, _) = adapt_loss_graph(tape, g.depth, &sparse, &images, Some(lp), &weights).unwrap();
        let vars = bound.iter().filter(|(n, _)| train.contains(*n)).map(|(n, v)| (n.clone(), *v)).collect();
        (loss, vars)
    })
}

/// Supervised L1 through the whole network, every learnable tensor live.
pub fn grad_network_loss(seed: u64) -> GradReport {
    let base = tiny_adapted_model(seed);
    let samples = tiny_samples(seed + 200, 2);
    let (images, sparse, _) = refs(&samples);
    // Targets sit at least 0.5 away from the unperturbed prediction, so no
    // finite-difference step crosses a kink of the absolute value.
    let pred = {
        let mut tape = Tape::new();
        let bound = base.bind(&mut tape, &BTreeSet::new());
        let (img, dep) = encode_inputs(&base.config, &images, &sparse).unwrap();
        let iv = tape.constant(img);
        let dv = tape.constant(dep);
        let g = forward_graph(&base, &bound, &mut tape, iv, dv, Mode::Train).unwrap();
        tape.value(g.depth).clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let targets: Vec<DepthMap> = pred
        .data()
        .chunks(256)
        .map(|c| {
            let v = c.iter().map(|p| if rng.gen_bool(0.5) { p + rng.gen_range(0.5..2.0) } else { (p - rng.gen_range(0.5..2.0)).max(0.0) }).collect();
            DepthMap::from_values(16, 16, v).unwrap()
        })
        .collect();
    let gt: Vec<&DepthMap> = targets.iter().collect();
    let trainable = base.partition(ParamSelector::All).unwrap().trainable;
    let x: Inputs = trainable.iter().map(|n| (n.clone(), base.get(n).clone())).collect();
    network_case(&base, x, seed, &|p, tape, train| {
        let bound = p.bind(tape, train);
        let (img, dep) = encode_inputs(&p.config, &images, &sparse).unwrap();
        let iv = tape.constant(img);
        let dv = tape.constant(dep);
        let g = forward_graph(p, &bound, tape, iv, dv, Mode::Train).unwrap();
        let loss = supervised_graph(tape, g.depth, &gt).unwrap();
        let vars = bound.iter().filter(|(n, _)| train.contains(*n)).map(|(n, v)| (n.clone(), *v)).collect();
        (loss, vars)
    })
}

pub type GradCase = (&'static str, fn(u64) -> GradReport);

pub const GRAD_CASES: [GradCase; 5] = [
    ("sparse consistency", grad_sparse_consistency),
    ("local smoothness", grad_smoothness),
    ("proxy consistency", grad_proxy),
    ("adaptation objective", grad_adapt_objective),
    ("network loss", grad_network_loss),
];

// ---------------------------------------------------------------------------
// Stop-gradient ledger

#[derive(Clone, Debug)]
pub struct LedgerRow {
    pub claim: &'static str,
    /// Largest absolute gradient on the entries claimed to be zero.
    pub max_abs: f64,
    /// Positive control: a gradient that must be non-zero.
    pub control: f64,
}

impl LedgerRow {
    pub fn holds(&self) -> bool {
        self.max_abs == 0.0 && self.control > 0.0
    }
}

/// Largest absolute gradient over `vars`; an absent entry is an exact zero.
fn max_abs(g: &proxytta_core::autograd::Gradients, _tape: &Tape, vars: &[Var]) -> f64 {
    vars.iter()
        .filter_map(|v| g.get(*v))
        .flat_map(|t| t.data().iter().map(|x| x.abs()))
        .fold(0.0, f64::max)
}

fn head_vars(hb: &proxytta_core::proxy::BoundHeads, head: Head) -> Vec<Var> {
    head.names().iter().map(|n| hb.var(n)).collect()
}

/// Pooled fused features of a null-image forward and a both-input forward,
/// both live on `tape`.
fn live_pools(params: &ModelParams, bound: &proxytta_core::model::Bound, tape: &mut Tape, samples: &[Sample]) -> (Var, Var) {
    let (images, sparse, _) = refs(samples);
    let blank = Image::zeros(16, 16);
    let blanks = vec![&blank; samples.len()];
    let mut pool = |imgs: &[&Image]| {
        let (img, dep) = encode_inputs(&params.config, imgs, &sparse).unwrap();
        let iv = tape.constant(img);
        let dv = tape.constant(dep);
        let g = forward_graph(params, bound, tape, iv, dv, Mode::Eval).unwrap();
        tape.global_avg_pool(g.taps.fused_feat)
    };
    let x0 = pool(&blanks);
    let x1 = pool(&images);
    (x0, x1)
}

/// The four gradient-path claims of the two pair constructions, each as
/// an exact-zero check with a positive control.
pub fn stop_gradient_ledger(seed: u64) -> Vec<LedgerRow> {
    let params = tiny_adapted_model(seed);
    let samples = tiny_samples(seed + 300, 2);
    let all = params.partition(ParamSelector::All).unwrap().trainable;
    let mut rows = Vec::new();

    // Source pair, everything that could leak is live.
    {
        let heads = init_heads(8, &tiny_proxy(), seed).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &all);
        let (x0, x1) = live_pools(&params, &bound, &mut tape, &samples);
        let hb = heads.bind(&mut tape, true);
        let pair = make_source_pair(&heads, &hb, &mut tape, x0, x1).unwrap();
        let loss = pair_loss(&mut tape, &pair).unwrap();
        let g = tape.backward(loss);
        let model_vars: Vec<Var> = bound.iter().map(|(_, v)| *v).collect();
        let control = max_abs(&g, &tape, &head_vars(&hb, Head::Online));
        let mut zero = vec![x0];
        zero.extend(&model_vars);
        rows.push(LedgerRow {
            claim: "source p: no gradient into the depth-only encoder pass",
            max_abs: max_abs(&g, &tape, &zero),
            control,
        });
        let mut zero = vec![x1];
        zero.extend(head_vars(&hb, Head::Target));
        zero.extend(&model_vars);
        rows.push(LedgerRow {
            claim: "source q: no gradient anywhere on the q side",
            max_abs: max_abs(&g, &tape, &zero),
            control,
        });
    }

    // Target pair with online heads deliberately bound as trainable.
    {
        let heads = prepared_heads(seed);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &all);
        let (x0, x1) = live_pools(&params, &bound, &mut tape, &samples);
        let hb = heads.bind(&mut tape, true);
        let pair = make_target_pair(&heads, &hb, &mut tape, x0, x1).unwrap();
        let loss = pair_loss(&mut tape, &pair).unwrap();
        let g = tape.backward(loss);
        let mut zero = vec![x0];
        zero.extend(head_vars(&hb, Head::Online));
        zero.extend(head_vars(&hb, Head::Predictor));
        rows.push(LedgerRow {
            claim: "target p: no gradient at all",
            max_abs: max_abs(&g, &tape, &zero),
            control: max_abs(&g, &tape, &[x1]),
        });
    }

    // Target pair as adaptation binds it: heads frozen, adaptation layer live.
    {
        let heads = prepared_heads(seed);
        let trainable = params.partition(ParamSelector::AdaptationOnly).unwrap().trainable;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &trainable);
        let (x0, x1) = live_pools(&params, &bound, &mut tape, &samples);
        let hb = heads.bind(&mut tape, false);
        let pair = make_target_pair(&heads, &hb, &mut tape, x0, x1).unwrap();
        let loss = pair_loss(&mut tape, &pair).unwrap();
        let g = tape.backward(loss);
        let mut zero: Vec<Var> = bound.iter().filter(|(n, _)| !trainable.contains(*n)).map(|(_, v)| *v).collect();
        for head in Head::ALL {
            zero.extend(head_vars(&hb, head));
        }
        let live: Vec<Var> = bound.iter().filter(|(n, _)| trainable.contains(*n)).map(|(_, v)| *v).collect();
        rows.push(LedgerRow {
            claim: "target q: heads frozen, only the adaptation layer receives gradient",
            max_abs: max_abs(&g, &tape, &zero),
            control: max_abs(&g, &tape, &live),
        });
    }
    rows
}

fn bits(p: &BTreeMap<String, Tensor>) -> BTreeMap<String, Vec<u64>> {
    p.iter().map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

/// Names whose bytes differ between two parameter maps.
pub fn changed_names(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> Vec<String> {
    let (a, b) = (bits(a), bits(b));
    a.keys().chain(b.keys()).filter(|n| a.get(*n) != b.get(*n)).cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

pub fn tiny_adapt_stage() -> StageConfig {
    StageConfig {
        learning_rate: 5e-3,
        batch_size: 4,
        inner_iter: 2,
        weights: LossWeights::new(1.0, 0.3, 0.3),
        ..StageConfig::adapt()
    }
}

/// Names changed by a full `proxytta_fast` pass, and by `stage_prepare`.
pub fn partition_audit(seed: u64) -> (Vec<String>, Vec<String>) {
    let params = tiny_adapted_model(seed);
    let target = tiny_samples(seed + 400, 10);
    let heads = prepared_heads(seed);
    let mut stream = BatchStream::new(target, 4).unwrap();
    let out = stage_adapt(
        &params,
        &heads,
        &mut stream,
        &tiny_adapt_stage(),
        AdaptMethod::ProxyttaFast,
        Default::default(),
        &mut proxytta_core::pipeline::NullObserver,
    )
    .unwrap();
    let adapt_changed = changed_names(params.tensors(), out.params.tensors());

    let before = params.clone();
    let fresh = init_heads(8, &tiny_proxy(), seed).unwrap();
    let cfg = StageConfig {
        epochs: 2,
        batch_size: 4,
        ..StageConfig::prepare()
    };
    let prepared = stage_prepare(&params, &fresh, &tiny_samples(seed + 500, 8), &cfg, &mut proxytta_core::pipeline::NullObserver)
        .unwrap();
    assert!(prepared.is_prepared());
    (adapt_changed, changed_names(before.tensors(), params.tensors()))
}

// ---------------------------------------------------------------------------
// Stream protocol audit

#[derive(Default)]
struct Auditor {
    initial: u64,
    scored: Vec<(usize, u64, bool)>,
    updated: Vec<(usize, u64)>,
    probe: Option<RetentionProbe>,
    max_live_at_score: usize,
}

impl StageObserver for Auditor {
    fn on_scored(&mut self, batch: &Batch, params: &ModelParams, metrics: &MetricsRecord) {
        let again = aggregate(&per_sample_metrics(params, &batch.samples, InputMode::Both, Default::default(), 16).unwrap())
            .unwrap();
        let same = again.mae_mm == metrics.mae_mm && again.rmse_mm == metrics.rmse_mm;
        self.scored.push((batch.index, params.fingerprint(), same));
        if let Some(p) = &self.probe {
            self.max_live_at_score = self.max_live_at_score.max(p.current());
        }
    }

    fn on_updated(&mut self, batch: &Batch, params: &ModelParams) {
        self.updated.push((batch.index, params.fingerprint()));
    }
}

#[derive(Clone, Debug)]
pub struct StreamAudit {
    pub batch_size: usize,
    pub expected_ids: Vec<String>,
    pub served_ids: Vec<String>,
    /// Every batch scored with the parameters left by the previous update.
    pub scored_before_update: bool,
    /// Online metrics equal a re-evaluation with the scoring parameters.
    pub metrics_match: bool,
    /// Every batch changed the parameters after it was scored.
    pub update_after_score: bool,
    pub peak_retained: usize,
    pub rerequest_error: Option<String>,
    pub after_end_error: Option<String>,
}

impl StreamAudit {
    pub fn visited_once_in_order(&self) -> bool {
        let unique: BTreeSet<&String> = self.served_ids.iter().collect();
        self.served_ids == self.expected_ids && unique.len() == self.served_ids.len()
    }

    pub fn holds(&self) -> bool {
        self.visited_once_in_order()
            && self.scored_before_update
            && self.metrics_match
            && self.update_after_score
            && self.peak_retained <= self.batch_size
            && self.rerequest_error.is_some()
            && self.after_end_error.is_some()
    }
}

pub fn audit_stream(seed: u64, method: AdaptMethod) -> StreamAudit {
    let params = tiny_adapted_model(seed);
    let heads = prepared_heads(seed);
    let target = tiny_samples(seed + 600, 19);
    let expected_ids: Vec<String> = target.iter().map(|s| s.id.clone()).collect();
    let batch_size = 4;
    let probe = RetentionProbe::new();
    let mut stream = BatchStream::new(target, batch_size).unwrap().with_probe(probe.clone());
    let mut aud = Auditor {
        initial: params.fingerprint(),
        probe: Some(probe.clone()),
        ..Auditor::default()
    };
    stage_adapt(&params, &heads, &mut stream, &tiny_adapt_stage(), method, Default::default(), &mut aud).unwrap();

    let mut prev = aud.initial;
    let mut scored_before_update = aud.scored.len() == aud.updated.len();
    let mut update_after_score = scored_before_update;
    for ((si, sfp, _), (ui, ufp)) in aud.scored.iter().zip(&aud.updated) {
        scored_before_update &= si == ui && *sfp == prev;
        update_after_score &= ufp != sfp;
        prev = *ufp;
    }
    use proxytta_core::SampleStream;
    StreamAudit {
        batch_size,
        expected_ids,
        served_ids: stream.access_log().to_vec(),
        scored_before_update,
        metrics_match: aud.scored.iter().all(|s| s.2),
        update_after_score,
        peak_retained: probe.peak(),
        rerequest_error: stream.request(0).err().map(|e| e.to_string()),
        after_end_error: stream.next_batch().err().map(|e| e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Reference experiment

/// Loss-weight rows of the ablation: l_z only, + l_sm, + l_proxy.
pub const ABLATION: [(f64, f64, f64); 3] = [(1.0, 0.0, 0.0), (1.0, 0.3, 0.0), (1.0, 0.3, 0.3)];

/// Shift presets over which the spread with and without l_proxy is compared.
pub const SPREAD_SHIFTS: [&str; 5] = ["strong", "fog", "night", "hue", "noisy"];

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub held_both: f64,
    pub held_depth_only: f64,
    pub target_both: f64,
    pub target_depth_only: f64,
    pub centroid_proxy: f64,
    pub centroid_both: f64,
    pub no_adapt: f64,
    /// Online MAE of proxytta_fast for each ablation row.
    pub ablation: [f64; 3],
    /// Per spread shift: online MAE without and with l_proxy.
    pub spread: Vec<(String, f64, f64)>,
    pub sensitivity_time: Duration,
    pub adapt_time: Duration,
    pub spread_time: Duration,
}

fn fast_run(cfg: &ExperimentConfig, params: &ModelParams, heads: &ProxyHeads, target: &[Sample], w: (f64, f64, f64)) -> f64 {
    let mut c = cfg.clone();
    c.stage.adapt.weights = LossWeights::new(w.0, w.1, w.2);
    let out = experiment::run_method(
        &c,
        Method::ProxyttaFast,
        params,
        Some(heads),
        target.to_vec(),
        &mut proxytta_core::pipeline::NullObserver,
    )
    .unwrap();
    out.metrics.mae_mm
}

fn mode_mae(rows: &[proxytta_core::eval::SensitivityRow], mode: InputMode) -> f64 {
    rows.iter().find(|r| r.mode == mode).unwrap().mae_mm
}

/// One seed of the reference synthetic setup. `spread` selects whether the
/// extra shift presets are run.
pub fn reference_seed(seed: u64, spread: bool) -> SeedResult {
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    let null = &mut proxytta_core::pipeline::NullObserver;
    let t = Instant::now();
    let Splits { source, held, target } = experiment::load_splits(&cfg).unwrap();
    let pretrained = experiment::pretrain(&cfg, &source, null).unwrap();
    let range = cfg.eval.range();
    let held_rows = sensitivity_rows(&pretrained, &held, range, cfg.eval.batch_size).unwrap();
    let target_rows = sensitivity_rows(&pretrained, &target, range, cfg.eval.batch_size).unwrap();
    let sensitivity_time = t.elapsed();

    let t = Instant::now();
    let params = experiment::initialize(&cfg, &pretrained, &source, null).unwrap();
    let heads = experiment::prepare(&cfg, &params, &source, null).unwrap();
    let n = cfg.eval.centroid_samples.min(source.len());
    let cent = centroid_analysis(&params, &heads, &source[..n], &target, 32).unwrap();
    let no_adapt = experiment::run_method(&cfg, Method::NoAdapt, &params, None, target.clone(), null)
        .unwrap()
        .metrics
        .mae_mm;
    let ablation = ABLATION.map(|w| fast_run(&cfg, &params, &heads, &target, w));
    let adapt_time = t.elapsed();

    let t = Instant::now();
    let mut rows = vec![("strong".to_string(), ablation[1], ablation[2])];
    if spread {
        let clean = experiment::target_clean_split(&cfg).unwrap();
        for name in &SPREAD_SHIFTS[1..] {
            let shift = proxytta_core::ShiftConfig::preset(name, seed).unwrap();
            let shifted = shift_dataset(&clean, &shift, seed).unwrap();
            let without = fast_run(&cfg, &params, &heads, &shifted, ABLATION[1]);
            let with = fast_run(&cfg, &params, &heads, &shifted, ABLATION[2]);
            rows.push((name.to_string(), without, with));
        }
    }
    SeedResult {
        seed,
        held_both: mode_mae(&held_rows, InputMode::Both),
        held_depth_only: mode_mae(&held_rows, InputMode::DepthOnly),
        target_both: mode_mae(&target_rows, InputMode::Both),
        target_depth_only: mode_mae(&target_rows, InputMode::DepthOnly),
        centroid_proxy: cent.target_proxy_to_source,
        centroid_both: cent.target_both_to_source,
        no_adapt,
        ablation,
        spread: rows,
        sensitivity_time,
        adapt_time,
        spread_time: t.elapsed(),
    }
}

// ---------------------------------------------------------------------------
// Determinism

/// A small but complete configuration: every stage runs, in seconds.
pub fn quick_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    c.data.source_count = 24;
    c.data.held_count = 8;
    c.data.target_count = 32;
    c.data.scene.height = 16;
    c.data.scene.width = 16;
    c.model.height = 16;
    c.model.width = 16;
    c.stage.pretrain.epochs = 2;
    c.stage.init.epochs = 1;
    c.stage.prepare.epochs = 2;
    c.stage.prepare.batch_size = 12;
    c.stage.adapt.batch_size = 8;
    c.stage.adapt.inner_iter = 1;
    c.proxy.embed_dim = 16;
    c.proxy.hidden_dim = 16;
    c
}

/// Runs the full recipe into `root/<name>` and returns the metrics bytes.
pub fn end_to_end_metrics(cfg: &ExperimentConfig, root: &std::path::Path, name: &str) -> Vec<u8> {
    let run = experiment::RunDir::create(root, name).unwrap();
    run.write_config(cfg).unwrap();
    let splits = experiment::load_splits(cfg).unwrap();
    let mut log = proxytta_core::RunLog::default();
    let prep = experiment::prepare_all(cfg, &splits.source, &mut log).unwrap();
    let mut rows = Vec::new();
    for method in [Method::NoAdapt, Method::ProxyttaFast, Method::Proxytta] {
        let out = experiment::run_method(cfg, method, &prep.initialized, Some(&prep.heads), splits.target.clone(), &mut log)
            .unwrap();
        rows.push(experiment::online_row(cfg, method, &splits.target, &out.metrics));
    }
    run.write_metrics(&rows).unwrap();
    run.write_log(&log).unwrap();
    std::fs::read(run.metrics_path()).unwrap()
}
