//! Reference dual-branch depth-completion network.
//!
//! Image and depth encoders (three stride-2 stages each), concatenation
//! fusion at 1/8 resolution, and a three-stage decoder with nearest-neighbour
//! upsampling and encoder skips. The adaptation layer is a zero-initialized
//! residual 3x3 convolution on the last image-encoder stage; its output feeds
//! both the fusion block and the first decoder stage.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::datasets::{DepthMap, Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub image_channels: [usize; 3],
    pub depth_channels: [usize; 3],
    pub fusion_width: usize,
    pub decoder_widths: [usize; 3],
    pub use_batch_norm: bool,
    /// Must equal the last image-encoder width (the layer is residual).
    pub adaptation_channels: usize,
    /// Upper bound of the output activation, in meters.
    pub max_depth: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            image_channels: [16, 32, 64],
            depth_channels: [16, 32, 64],
            fusion_width: 256,
            decoder_widths: [128, 32, 16],
            use_batch_norm: true,
            adaptation_channels: 64,
            max_depth: 12.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "input size {}x{} must be positive multiples of 8",
                self.height, self.width
            )));
        }
        let widths = self
            .image_channels
            .iter()
            .chain(&self.depth_channels)
            .chain(&self.decoder_widths)
            .chain([&self.fusion_width, &self.adaptation_channels]);
        if widths.into_iter().any(|&c| c == 0) {
            return Err(Error::Config("all layer widths must be >= 1".into()));
        }
        if self.adaptation_channels != self.image_channels[2] {
            return Err(Error::Config(format!(
                "adaptation_channels ({}) must equal the last image-encoder width ({})",
                self.adaptation_channels, self.image_channels[2]
            )));
        }
        if !(self.max_depth > 0.0) {
            return Err(Error::Config("max_depth must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    ImageEncoder,
    DepthEncoder,
    Fusion,
    Decoder,
    AdaptationLayer,
    BnAffine,
    BnStats,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::ImageEncoder,
        ParamGroup::DepthEncoder,
        ParamGroup::Fusion,
        ParamGroup::Decoder,
        ParamGroup::AdaptationLayer,
        ParamGroup::BnAffine,
        ParamGroup::BnStats,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::ImageEncoder => "image_encoder",
            ParamGroup::DepthEncoder => "depth_encoder",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Decoder => "decoder",
            ParamGroup::AdaptationLayer => "adaptation_layer",
            ParamGroup::BnAffine => "bn_affine",
            ParamGroup::BnStats => "bn_stats",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let prefix = name.split('/').next()?;
        ParamGroup::ALL.into_iter().find(|g| g.prefix() == prefix)
    }

    pub fn learnable(self) -> bool {
        self != ParamGroup::BnStats
    }
}

/// Which parameters a stage may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSelector {
    AdaptationOnly,
    AdaptationPlusBn,
    BnAffineOnly,
    All,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

/// Train mode normalizes with batch statistics and refreshes the running
/// ones; eval mode uses the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let reference = init_model(&config, 0)?;
        let mut expected: BTreeSet<&String> = reference.tensors.keys().collect();
        let has_adaptation = tensors.keys().any(|k| ParamGroup::of(k) == Some(ParamGroup::AdaptationLayer));
        for (name, t) in &tensors {
            match reference.tensors.get(name) {
                Some(r) if r.shape() == t.shape() => {
                    expected.remove(name);
                }
                Some(r) => {
                    return Err(Error::Contract(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        r.shape()
                    )))
                }
                None if ParamGroup::of(name) == Some(ParamGroup::AdaptationLayer) => {}
                None => return Err(Error::Contract(format!("unexpected parameter {name}"))),
            }
        }
        if let Some(missing) = expected.into_iter().next() {
            return Err(Error::Contract(format!("missing parameter {missing}")));
        }
        let params = ModelParams { config, tensors };
        if has_adaptation {
            let c = params.config.image_channels[2];
            for (name, shape) in [
                (ADAPT_W, vec![c, c, 3, 3]),
                (ADAPT_B, vec![c]),
            ] {
                match params.tensors.get(name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    _ => return Err(Error::Contract(format!("malformed adaptation parameter {name}"))),
                }
            }
        }
        Ok(params)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn has_adaptation_layer(&self) -> bool {
        self.tensors.contains_key(ADAPT_W)
    }

    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| ParamGroup::of(n) == Some(group))
            .cloned()
            .collect()
    }

    /// Scalar count per group; groups sum to [`ModelParams::param_count`].
    pub fn param_count_by_group(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out: BTreeMap<ParamGroup, usize> = ParamGroup::ALL.iter().map(|&g| (g, 0)).collect();
        for (name, t) in &self.tensors {
            *out.get_mut(&ParamGroup::of(name).expect("group-prefixed name")).unwrap() += t.len();
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Splits every parameter name into trainable and frozen sets.
    pub fn partition(&self, selector: ParamSelector) -> Result<Partition> {
        let needs_bn = matches!(selector, ParamSelector::AdaptationPlusBn | ParamSelector::BnAffineOnly);
        if needs_bn && !self.config.use_batch_norm {
            return Err(Error::Config(format!(
                "selector {selector:?} needs batch norm, but this model has none"
            )));
        }
        let needs_adapt = matches!(selector, ParamSelector::AdaptationOnly | ParamSelector::AdaptationPlusBn);
        if needs_adapt && !self.has_adaptation_layer() {
            return Err(Error::Contract(format!(
                "selector {selector:?} needs an inserted adaptation layer"
            )));
        }
        let selected = |g: ParamGroup| match selector {
            ParamSelector::AdaptationOnly => g == ParamGroup::AdaptationLayer,
            ParamSelector::AdaptationPlusBn => {
                g == ParamGroup::AdaptationLayer || g == ParamGroup::BnAffine
            }
            ParamSelector::BnAffineOnly => g == ParamGroup::BnAffine,
            ParamSelector::All => g.learnable(),
        };
        let (trainable, frozen) = self
            .tensors
            .keys()
            .cloned()
            .partition(|n| selected(ParamGroup::of(n).expect("group-prefixed name")));
        Ok(Partition { trainable, frozen })
    }

    /// Binds every tensor onto `tape`; names in `trainable` become gradient
    /// leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &BTreeSet<String>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) != Some(ParamGroup::BnStats))
            .map(|(n, t)| {
                let v = if trainable.contains(n) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, &BTreeSet::new())
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = self.config.bn_momentum;
        for u in updates {
            for (suffix, fresh) in [("mean", &u.mean), ("var", &u.var)] {
                let name = format!("bn_stats/{}.{suffix}", u.layer);
                let t = self.tensors.get_mut(&name).expect("bn stats exist for every bn layer");
                for (old, new) in t.data_mut().iter_mut().zip(fresh.iter()) {
                    *old = (1.0 - m) * *old + m * new;
                }
                t.round_to_f32();
            }
        }
    }

    /// Order-sensitive digest of all parameter bytes, for cheap equality
    /// checks in logs and tests.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(self.tensors.iter())
    }
}

pub(crate) fn fingerprint<'a>(tensors: impl Iterator<Item = (&'a String, &'a Tensor)>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (name, t) in tensors {
        eat(name.as_bytes());
        for v in t.data() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

/// Tape handles for one binding of the parameters.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Batch statistics observed by one train-mode BN layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Feature activations exposed to the proxy machinery.
#[derive(Clone, Copy, Debug)]
pub struct TapVars {
    pub image_feat: Var,
    pub depth_feat: Var,
    pub fused_feat: Var,
    pub decoder_skips: [Var; 2],
}

#[derive(Clone, Debug)]
pub struct FeatureTaps {
    pub image_feat: Tensor,
    pub depth_feat: Tensor,
    pub fused_feat: Tensor,
    pub decoder_skips: Vec<Tensor>,
}

impl FeatureTaps {
    fn read(tape: &Tape, taps: &TapVars) -> Self {
        FeatureTaps {
            image_feat: tape.value(taps.image_feat).clone(),
            depth_feat: tape.value(taps.depth_feat).clone(),
            fused_feat: tape.value(taps.fused_feat).clone(),
            decoder_skips: taps.decoder_skips.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

pub struct ForwardGraph {
    /// `[N, 1, H, W]` dense depth in meters.
    pub depth: Var,
    pub taps: TapVars,
    pub bn_updates: Vec<BnUpdate>,
}

const ADAPT_W: &str = "adaptation_layer/conv.w";
const ADAPT_B: &str = "adaptation_layer/conv.b";

/// (name, in, out, kernel) for every convolution in the backbone.
fn conv_layout(c: &ModelConfig) -> Vec<(String, usize, usize, usize)> {
    let [i1, i2, i3] = c.image_channels;
    let [d1, d2, d3] = c.depth_channels;
    let [k1, k2, k3] = c.decoder_widths;
    vec![
        ("image_encoder/conv1".into(), 3, i1, 3),
        ("image_encoder/conv2".into(), i1, i2, 3),
        ("image_encoder/conv3".into(), i2, i3, 3),
        ("depth_encoder/conv1".into(), 2, d1, 3),
        ("depth_encoder/conv2".into(), d1, d2, 3),
        ("depth_encoder/conv3".into(), d2, d3, 3),
        ("fusion/conv".into(), i3 + d3, c.fusion_width, 3),
        ("decoder/conv1".into(), c.fusion_width + i3, k1, 3),
        ("decoder/conv2".into(), k1 + i2 + d2, k2, 3),
        ("decoder/conv3".into(), k2 + i1 + d1, k3, 3),
        ("decoder/head".into(), k3 + 2, 1, 3),
    ]
}

/// Deterministic He-style initialization. No adaptation layer yet.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, cin, cout, k) in conv_layout(config) {
        let fan_in = (cin * k * k) as f64;
        let std = if name == "decoder/head" { 0.01 } else { (2.0 / fan_in).sqrt() };
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut w = Tensor::from_vec(
            &[cout, cin, k, k],
            (0..cout * cin * k * k).map(|_| normal.sample(&mut rng)).collect(),
        );
        w.round_to_f32();
        tensors.insert(format!("{name}.w"), w);
        tensors.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        let is_head = name == "decoder/head";
        if config.use_batch_norm && !is_head {
            let layer = name.replacen('/', ".", 1);
            tensors.insert(format!("bn_affine/{layer}.gamma"), Tensor::full(&[cout], 1.0));
            tensors.insert(format!("bn_affine/{layer}.beta"), Tensor::zeros(&[cout]));
            tensors.insert(format!("bn_stats/{layer}.mean"), Tensor::zeros(&[cout]));
            tensors.insert(format!("bn_stats/{layer}.var"), Tensor::full(&[cout], 1.0));
        }
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

/// Adds the zero-initialized residual adaptation convolution. Existing
/// parameters are untouched, so predictions are unchanged.
pub fn insert_adaptation_layer(params: &ModelParams) -> Result<ModelParams> {
    if params.has_adaptation_layer() {
        return Err(Error::Contract("adaptation layer is already inserted".into()));
    }
    let c = params.config.adaptation_channels;
    let mut out = params.clone();
    out.tensors.insert(ADAPT_W.into(), Tensor::zeros(&[c, c, 3, 3]));
    out.tensors.insert(ADAPT_B.into(), Tensor::zeros(&[c]));
    Ok(out)
}

/// Packs images and sparse maps into `[N, 3, H, W]` and `[N, 2, H, W]`
/// network inputs. The depth branch sees `z / max_depth` and the validity
/// mask.
pub fn encode_inputs(
    config: &ModelConfig,
    images: &[&Image],
    sparse: &[&DepthMap],
) -> Result<(Tensor, Tensor)> {
    if images.len() != sparse.len() || images.is_empty() {
        return Err(Error::Contract(format!(
            "{} images vs {} sparse maps",
            images.len(),
            sparse.len()
        )));
    }
    let (h, w) = (config.height, config.width);
    let mut img = Vec::with_capacity(images.len() * 3 * h * w);
    let mut dep = Vec::with_capacity(images.len() * 2 * h * w);
    for (i, z) in images.iter().zip(sparse) {
        if (i.height(), i.width()) != (h, w) || (z.height(), z.width()) != (h, w) {
            return Err(Error::Contract(format!(
                "input is {}x{} / {}x{}, model expects {h}x{w}",
                i.height(),
                i.width(),
                z.height(),
                z.width()
            )));
        }
        img.extend_from_slice(i.data());
        dep.extend(z.data().iter().map(|v| v / config.max_depth));
        dep.extend(z.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }));
    }
    let n = images.len();
    Ok((
        Tensor::from_vec(&[n, 3, h, w], img),
        Tensor::from_vec(&[n, 2, h, w], dep),
    ))
}

struct Builder<'a> {
    params: &'a ModelParams,
    bound: &'a Bound,
    mode: Mode,
    updates: Vec<BnUpdate>,
}

impl Builder<'_> {
    /// conv (+ BN) + ELU.
    fn block(&mut self, tape: &mut Tape, x: Var, name: &str, stride: usize) -> Var {
        let y = tape.conv2d(
            x,
            self.bound.var(&format!("{name}.w")),
            self.bound.var(&format!("{name}.b")),
            stride,
            1,
        );
        let y = if self.params.config.use_batch_norm {
            self.bn(tape, y, &name.replacen('/', ".", 1))
        } else {
            y
        };
        tape.elu(y)
    }

    fn bn(&mut self, tape: &mut Tape, x: Var, layer: &str) -> Var {
        let gamma = self.bound.var(&format!("bn_affine/{layer}.gamma"));
        let beta = self.bound.var(&format!("bn_affine/{layer}.beta"));
        let eps = self.params.config.bn_eps;
        match self.mode {
            Mode::Eval => {
                let mean = self.params.get(&format!("bn_stats/{layer}.mean")).data();
                let var = self.params.get(&format!("bn_stats/{layer}.var")).data();
                tape.batch_norm(x, gamma, beta, Some((mean, var)), eps)
            }
            Mode::Train => {
                let (n, c, h, w) = tape.value(x).dims4();
                let m = (n * h * w) as f64;
                let xv = tape.value(x).data();
                let hw = h * w;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = (0..n).flat_map(|s| xv[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter());
                    let mu = vals.clone().sum::<f64>() / m;
                    let ss: f64 = vals.map(|v| (v - mu) * (v - mu)).sum();
                    mean[ch] = mu;
                    var[ch] = ss / (m - 1.0).max(1.0);
                }
                self.updates.push(BnUpdate {
                    layer: layer.to_string(),
                    mean,
                    var,
                });
                tape.batch_norm(x, gamma, beta, None, eps)
            }
        }
    }
}

/// Records the network on `tape`. `image` is `[N, 3, H, W]`, `depth_in` is
/// `[N, 2, H, W]` as produced by [`encode_inputs`].
pub fn forward_graph(
    params: &ModelParams,
    bound: &Bound,
    tape: &mut Tape,
    image: Var,
    depth_in: Var,
    mode: Mode,
) -> Result<ForwardGraph> {
    let cfg = &params.config;
    let (n, _, h, w) = tape.value(image).dims4();
    if (h, w) != (cfg.height, cfg.width) || tape.value(depth_in).dims4() != (n, 2, h, w) {
        return Err(Error::Contract(format!(
            "inputs {:?} / {:?} do not match model size {}x{}",
            tape.value(image).shape(),
            tape.value(depth_in).shape(),
            cfg.height,
            cfg.width
        )));
    }
    if mode == Mode::Train && cfg.use_batch_norm && n < 2 {
        return Err(Error::Contract(
            "train-mode forward with batch norm needs a batch of at least 2".into(),
        ));
    }
    let mut b = Builder {
        params,
        bound,
        mode,
        updates: Vec::new(),
    };

    let i1 = b.block(tape, image, "image_encoder/conv1", 2);
    let i2 = b.block(tape, i1, "image_encoder/conv2", 2);
    let i3 = b.block(tape, i2, "image_encoder/conv3", 2);
    let image_feat = if params.has_adaptation_layer() {
        let r = tape.conv2d(i3, bound.var(ADAPT_W), bound.var(ADAPT_B), 1, 1);
        tape.add(i3, r)
    } else {
        i3
    };

    let d1 = b.block(tape, depth_in, "depth_encoder/conv1", 2);
    let d2 = b.block(tape, d1, "depth_encoder/conv2", 2);
    let d3 = b.block(tape, d2, "depth_encoder/conv3", 2);

    let cat = tape.concat(&[image_feat, d3]);
    let fused = b.block(tape, cat, "fusion/conv", 1);

    let cat = tape.concat(&[fused, image_feat]);
    let k1 = b.block(tape, cat, "decoder/conv1", 1);
    let up = tape.upsample2(k1);
    let cat = tape.concat(&[up, i2, d2]);
    let k2 = b.block(tape, cat, "decoder/conv2", 1);
    let up = tape.upsample2(k2);
    let cat = tape.concat(&[up, i1, d1]);
    let k3 = b.block(tape, cat, "decoder/conv3", 1);
    let up = tape.upsample2(k3);
    let cat = tape.concat(&[up, depth_in]);
    let logits = tape.conv2d(cat, bound.var("decoder/head.w"), bound.var("decoder/head.b"), 1, 1);
    let depth = tape.scaled_sigmoid(logits, cfg.max_depth);

    Ok(ForwardGraph {
        depth,
        taps: TapVars {
            image_feat,
            depth_feat: d3,
            fused_feat: fused,
            decoder_skips: [k1, k2],
        },
        bn_updates: b.updates,
    })
}

/// Splits an `[N, 1, H, W]` prediction into depth maps.
pub fn split_depth(t: &Tensor) -> Result<Vec<DepthMap>> {
    let (n, _, h, w) = t.dims4();
    (0..n)
        .map(|s| DepthMap::from_values(h, w, t.data()[s * h * w..(s + 1) * h * w].to_vec()))
        .collect()
}

/// Single-sample forward with no gradient recording.
///
/// Train mode needs a batch for batch norm; use [`forward_batch_train`].
pub fn forward(
    params: &ModelParams,
    image: &Image,
    sparse: &DepthMap,
    mode: Mode,
) -> Result<(DepthMap, FeatureTaps)> {
    let (maps, taps) = forward_batch(params, &[image], &[sparse], mode)?;
    Ok((maps.into_iter().next().expect("one sample"), taps))
}

/// Batched forward with no gradient recording. Eval mode leaves
/// `params` untouched; train-mode statistics are discarded here.
pub fn forward_batch(
    params: &ModelParams,
    images: &[&Image],
    sparse: &[&DepthMap],
    mode: Mode,
) -> Result<(Vec<DepthMap>, FeatureTaps)> {
    let (img, dep) = encode_inputs(&params.config, images, sparse)?;
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let iv = tape.constant(img);
    let dv = tape.constant(dep);
    let g = forward_graph(params, &bound, &mut tape, iv, dv, mode)?;
    let maps = split_depth(tape.value(g.depth))?;
    Ok((maps, FeatureTaps::read(&tape, &g.taps)))
}

/// Train-mode batched forward that also refreshes the running statistics.
pub fn forward_batch_train(
    params: &mut ModelParams,
    images: &[&Image],
    sparse: &[&DepthMap],
) -> Result<Vec<DepthMap>> {
    let (img, dep) = encode_inputs(&params.config, images, sparse)?;
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let iv = tape.constant(img);
    let dv = tape.constant(dep);
    let g = forward_graph(params, &bound, &mut tape, iv, dv, Mode::Train)?;
    let maps = split_depth(tape.value(g.depth))?;
    let updates = g.bn_updates;
    params.apply_bn_updates(&updates);
    Ok(maps)
}
