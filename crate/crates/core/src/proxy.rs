//! Proxy-mapping heads: online projector `g`, EMA target projector `g'`
//! and predictor `h`, with the two embedding-pair constructions.
//!
//! Source pairs (preparation): `p = h(g(sg(pool(e(I0, z)))))`,
//! `q = sg(g'(pool(e(I, z))))`. Target pairs (adaptation, heads frozen):
//! `p = sg(h(g(pool(e(I0, z)))))`, `q = g'(pool(e(I, z)))`, so the only
//! gradient path runs from `q` back through the encoder.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{norm, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norms at or below this are rejected as degenerate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// EMA rate of the target projector.
    pub tau: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            embed_dim: 128,
            hidden_dim: 128,
            tau: 0.996,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("proxy embed_dim and hidden_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("proxy tau must lie in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// The three two-layer MLPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Online,
    Target,
    Predictor,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Online, Head::Target, Head::Predictor];

    fn prefix(self) -> &'static str {
        match self {
            Head::Online => "proxy/online",
            Head::Target => "proxy/target",
            Head::Predictor => "proxy/predictor",
        }
    }

    /// Names of this head's tensors, in binding order.
    pub fn names(self) -> [String; 4] {
        let p = self.prefix();
        [
            format!("{p}.fc1.w"),
            format!("{p}.fc1.b"),
            format!("{p}.fc2.w"),
            format!("{p}.fc2.b"),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyHeads {
    pub config: ProxyConfig,
    /// Channel count of the pooled encoder feature.
    pub in_dim: usize,
    tensors: BTreeMap<String, Tensor>,
    prepared: bool,
}

fn head_shapes(head: Head, in_dim: usize, c: &ProxyConfig) -> [Vec<usize>; 4] {
    let first = if head == Head::Predictor { c.embed_dim } else { in_dim };
    [
        vec![first, c.hidden_dim],
        vec![c.hidden_dim],
        vec![c.hidden_dim, c.embed_dim],
        vec![c.embed_dim],
    ]
}

/// He-initialized heads with the target projector copied from the online one.
pub fn init_heads(in_dim: usize, config: &ProxyConfig, seed: u64) -> Result<ProxyHeads> {
    config.validate()?;
    if in_dim == 0 {
        return Err(Error::Config("proxy input dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for head in [Head::Online, Head::Predictor] {
        for (name, shape) in head.names().into_iter().zip(head_shapes(head, in_dim, config)) {
            let mut t = if shape.len() == 2 {
                let normal = Normal::new(0.0, (2.0 / shape[0] as f64).sqrt()).expect("finite std");
                Tensor::from_vec(&shape, (0..shape[0] * shape[1]).map(|_| normal.sample(&mut rng)).collect())
            } else {
                Tensor::zeros(&shape)
            };
            t.round_to_f32();
            tensors.insert(name, t);
        }
    }
    for (src, dst) in Head::Online.names().into_iter().zip(Head::Target.names()) {
        let t = tensors[&src].clone();
        tensors.insert(dst, t);
    }
    Ok(ProxyHeads {
        config: config.clone(),
        in_dim,
        tensors,
        prepared: false,
    })
}

impl ProxyHeads {
    /// Rebuilds heads from stored tensors, checking every shape.
    pub fn from_tensors(
        config: ProxyConfig,
        in_dim: usize,
        tensors: BTreeMap<String, Tensor>,
        prepared: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut expected = 0;
        for head in Head::ALL {
            for (name, shape) in head.names().into_iter().zip(head_shapes(head, in_dim, &config)) {
                match tensors.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => expected += 1,
                    Some(t) => {
                        return Err(Error::Contract(format!(
                            "{name} has shape {:?}, expected {shape:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Contract(format!("missing proxy tensor {name}"))),
                }
            }
        }
        if tensors.len() != expected {
            return Err(Error::Contract("unexpected tensors under proxy/".into()));
        }
        Ok(ProxyHeads {
            config,
            in_dim,
            tensors,
            prepared,
        })
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn is_prepared(&self) -> bool {
        self.prepared
    }

    /// Marks preparation as complete; the heads are frozen from here on.
    pub fn mark_prepared(&mut self) {
        self.prepared = true;
    }

    /// Names updated by gradient steps during preparation (`g` and `h`).
    pub fn trainable_names(&self) -> Vec<String> {
        Head::Online.names().into_iter().chain(Head::Predictor.names()).collect()
    }

    pub fn head_tensors(&self, head: Head) -> Vec<&Tensor> {
        head.names().iter().map(|n| &self.tensors[n]).collect()
    }

    /// `g' <- tau * g' + (1 - tau) * g`.
    pub fn ema_update(&mut self) {
        let tau = self.config.tau;
        for (src, dst) in Head::Online.names().iter().zip(Head::Target.names().iter()) {
            let online = self.tensors[src].clone();
            let target = self.tensors.get_mut(dst).expect("target head exists");
            for (t, o) in target.data_mut().iter_mut().zip(online.data()) {
                *t = ema_value(*t, *o, tau);
            }
            target.round_to_f32();
        }
    }

    /// Binds all heads; `g` and `h` become gradient leaves when
    /// `train_online` is set, everything else is constant.
    pub fn bind(&self, tape: &mut Tape, train_online: bool) -> BoundHeads {
        let mut vars = BTreeMap::new();
        for head in Head::ALL {
            let trainable = train_online && head != Head::Target;
            for name in head.names() {
                let t = self.tensors[&name].clone();
                let v = if trainable { tape.param(t) } else { tape.constant(t) };
                vars.insert(name, v);
            }
        }
        BoundHeads { vars }
    }

    pub fn fingerprint(&self) -> u64 {
        crate::model::fingerprint(self.tensors.iter())
    }
}

pub struct BoundHeads {
    vars: BTreeMap<String, Var>,
}

impl BoundHeads {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// `fc2(elu(fc1(x)))`.
    pub fn apply(&self, tape: &mut Tape, head: Head, x: Var) -> Var {
        let [w1, b1, w2, b2] = head.names().map(|n| self.vars[&n]);
        let h = tape.linear(x, w1, b1);
        let h = tape.elu(h);
        tape.linear(h, w2, b2)
    }
}

/// One moving-average step `tau * target + (1 - tau) * online`, before the
/// stored value is rounded onto the `f32` grid.
pub fn ema_value(target: f64, online: f64, tau: f64) -> f64 {
    tau * target + (1.0 - tau) * online
}

/// Spatial mean of an `[N, C, H, W]` feature map, giving `[N, C]`.
pub fn pool_features(feat: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(feat.clone());
    let p = tape.global_avg_pool(v);
    tape.value(p).clone()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRole {
    /// Gradient stops at the encoder input of `p` and on all of `q`.
    SourcePrepare,
    /// Gradient stops on all of `p`; `q` is live back to the encoder.
    TargetAdapt,
}

/// Embedding values for `[N, embed_dim]` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub p: Tensor,
    pub q: Tensor,
    pub role: PairRole,
}

/// Tape handles for an embedding pair.
#[derive(Clone, Copy, Debug)]
pub struct PairVars {
    pub p: Var,
    pub q: Var,
    pub role: PairRole,
}

impl PairVars {
    pub fn values(&self, tape: &Tape) -> EmbeddingPair {
        EmbeddingPair {
            p: tape.value(self.p).clone(),
            q: tape.value(self.q).clone(),
            role: self.role,
        }
    }
}

fn check_pooled(tape: &Tape, x: Var, in_dim: usize) -> Result<()> {
    let shape = tape.value(x).shape();
    if shape.len() != 2 || shape[1] != in_dim {
        return Err(Error::Contract(format!(
            "pooled feature has shape {shape:?}, heads expect [N, {in_dim}]"
        )));
    }
    Ok(())
}

/// Preparation pair from pooled `[N, C]` features of the depth-only and
/// both-input forwards.
pub fn make_source_pair(
    heads: &ProxyHeads,
    bound: &BoundHeads,
    tape: &mut Tape,
    pooled_depth_only: Var,
    pooled_both: Var,
) -> Result<PairVars> {
    check_pooled(tape, pooled_depth_only, heads.in_dim)?;
    check_pooled(tape, pooled_both, heads.in_dim)?;
    let x0 = tape.detach(pooled_depth_only);
    let g = bound.apply(tape, Head::Online, x0);
    let p = bound.apply(tape, Head::Predictor, g);
    let q_live = bound.apply(tape, Head::Target, pooled_both);
    let q = tape.detach(q_live);
    Ok(PairVars {
        p,
        q,
        role: PairRole::SourcePrepare,
    })
}

/// Adaptation pair. Requires prepared heads; `bound` should come from
/// `heads.bind(tape, false)`.
pub fn make_target_pair(
    heads: &ProxyHeads,
    bound: &BoundHeads,
    tape: &mut Tape,
    pooled_depth_only: Var,
    pooled_both: Var,
) -> Result<PairVars> {
    if !heads.is_prepared() {
        return Err(Error::Lifecycle(
            "proxy heads have not been through the preparation stage".into(),
        ));
    }
    check_pooled(tape, pooled_depth_only, heads.in_dim)?;
    check_pooled(tape, pooled_both, heads.in_dim)?;
    let x0 = tape.detach(pooled_depth_only);
    let g = bound.apply(tape, Head::Online, x0);
    let p_live = bound.apply(tape, Head::Predictor, g);
    let p = tape.detach(p_live);
    let q = bound.apply(tape, Head::Target, pooled_both);
    Ok(PairVars {
        p,
        q,
        role: PairRole::TargetAdapt,
    })
}

fn check_rows(t: &Tensor) -> Result<()> {
    let (n, d) = t.dims2();
    for i in 0..n {
        let nv = norm(&t.data()[i * d..(i + 1) * d]);
        if !(nv > NORM_EPS) {
            return Err(Error::DegenerateEmbedding { norm: nv, eps: NORM_EPS });
        }
    }
    Ok(())
}

/// Row-mean cosine loss on the tape, after rejecting degenerate rows.
pub fn pair_loss(tape: &mut Tape, pair: &PairVars) -> Result<Var> {
    check_rows(tape.value(pair.p))?;
    check_rows(tape.value(pair.q))?;
    Ok(tape.cosine_loss(pair.p, pair.q))
}

/// `1 - cos(p, q)`, in `[0, 2]`.
pub fn cosine_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Contract(format!(
            "cosine_loss on vectors of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    for v in [p, q] {
        let nv = norm(v);
        if !(nv > NORM_EPS) {
            return Err(Error::DegenerateEmbedding { norm: nv, eps: NORM_EPS });
        }
    }
    let d = crate::autograd::dot(p, q) / (norm(p) * norm(q));
    Ok(1.0 - d.clamp(-1.0, 1.0))
}
