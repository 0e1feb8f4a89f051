//! Adaptation objective: sparse-depth consistency, edge-aware smoothness,
//! proxy consistency and their weighted sum, plus the supervised L1 loss.
//!
//! Each loss has a graph form (recorded on a [`Tape`], batched over
//! `[N, 1, H, W]` predictions) and a scalar form that evaluates the same
//! graph on a single prediction. Batched losses average per-sample values.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::datasets::{DepthMap, Image};
use crate::error::{Error, Result};
use crate::proxy::{cosine_loss, EmbeddingPair};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_z: f64,
    pub w_sm: f64,
    pub w_proxy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_z: 1.0,
            w_sm: 1.0,
            w_proxy: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(w_z: f64, w_sm: f64, w_proxy: f64) -> Self {
        LossWeights { w_z, w_sm, w_proxy }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_z, self.w_sm, self.w_proxy];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {ws:?}")));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step decomposition of the adaptation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l_z: f64,
    pub l_sm: f64,
    pub l_proxy: f64,
    pub valid_point_count: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_z,l_sm,l_proxy,total,valid_points";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9},{:.9},{:.9},{:.9},{}",
            self.l_z, self.l_sm, self.l_proxy, self.total, self.valid_point_count
        )
    }
}

fn check_batch(pred: &Tensor, maps: usize) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = pred.dims4();
    if c != 1 || n != maps {
        return Err(Error::Contract(format!(
            "prediction {:?} does not match {maps} reference maps",
            pred.shape()
        )));
    }
    Ok((n, h, w))
}

/// Per-sample masked mean of `|pred - target|` over the target's valid
/// pixels, averaged over samples that have any. Returns the node and the
/// number of valid pixels used.
fn masked_l1(tape: &mut Tape, pred: Var, targets: &[&DepthMap], what: &str) -> Result<(Var, usize)> {
    let (_, h, w) = check_batch(tape.value(pred), targets.len())?;
    let hw = h * w;
    let supported: Vec<usize> = targets.iter().map(|t| t.valid_count()).collect();
    let samples_with_support = supported.iter().filter(|&&c| c > 0).count();
    if samples_with_support == 0 {
        return Err(Error::EmptySupport(format!("{what}: no valid pixels in the batch")));
    }
    let mut target = Vec::with_capacity(targets.len() * hw);
    let mut weights = Vec::with_capacity(targets.len() * hw);
    for (t, &count) in targets.iter().zip(&supported) {
        if (t.height(), t.width()) != (h, w) {
            return Err(Error::Contract(format!("{what}: raster size mismatch")));
        }
        target.extend_from_slice(t.data());
        let wgt = if count > 0 {
            1.0 / (count as f64 * samples_with_support as f64)
        } else {
            0.0
        };
        weights.extend(t.data().iter().map(|&v| if v > 0.0 { wgt } else { 0.0 }));
    }
    Ok((tape.weighted_l1(pred, target, weights), supported.iter().sum()))
}

/// Sparse-depth consistency over the batch.
pub fn sparse_consistency_graph(tape: &mut Tape, pred: Var, sparse: &[&DepthMap]) -> Result<(Var, usize)> {
    masked_l1(tape, pred, sparse, "sparse consistency")
}

/// Supervised L1 against ground truth over the batch.
pub fn supervised_graph(tape: &mut Tape, pred: Var, gt: &[&DepthMap]) -> Result<Var> {
    masked_l1(tape, pred, gt, "supervised loss").map(|(v, _)| v)
}

/// Edge-aware weights `exp(-|dI|)` on channel-mean intensity; zero where the
/// forward difference leaves the raster.
pub fn smoothness_weights(image: &Image) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (image.height(), image.width());
    let mut lx = vec![0.0; h * w];
    let mut ly = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let here = image.intensity(y, x);
            if x + 1 < w {
                lx[y * w + x] = (-(image.intensity(y, x + 1) - here).abs()).exp();
            }
            if y + 1 < h {
                ly[y * w + x] = (-(image.intensity(y + 1, x) - here).abs()).exp();
            }
        }
    }
    (lx, ly)
}

/// Edge-aware local smoothness, normalized by `H * W` per sample.
pub fn smoothness_graph(tape: &mut Tape, pred: Var, images: &[&Image]) -> Result<Var> {
    let (n, h, w) = check_batch(tape.value(pred), images.len())?;
    let mut lx = Vec::with_capacity(n * h * w);
    let mut ly = Vec::with_capacity(n * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Contract("smoothness: image and prediction differ in size".into()));
        }
        let (a, b) = smoothness_weights(img);
        lx.extend(a);
        ly.extend(b);
    }
    Ok(tape.smoothness(pred, lx, ly, 1.0 / (n * h * w) as f64))
}

/// Builds `w_z l_z + w_sm l_sm + w_proxy l_proxy`. Zero-weight components are
/// evaluated for the report but kept out of the gradient graph.
pub fn adapt_loss_graph(
    tape: &mut Tape,
    pred: Var,
    sparse: &[&DepthMap],
    images: &[&Image],
    proxy: Option<Var>,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let (l_z, count) = sparse_consistency_graph(tape, pred, sparse)?;
    let l_sm = smoothness_graph(tape, pred, images)?;
    let mut terms = vec![(l_z, weights.w_z), (l_sm, weights.w_sm)];
    let l_proxy = match proxy {
        Some(v) => {
            terms.push((v, weights.w_proxy));
            tape.value(v).item()
        }
        None if weights.w_proxy > 0.0 => {
            return Err(Error::Contract("w_proxy > 0 but no proxy term supplied".into()))
        }
        None => 0.0,
    };
    let total = tape.weighted_sum(&terms);
    let report = LossReport {
        total: tape.value(total).item(),
        l_z: tape.value(l_z).item(),
        l_sm: tape.value(l_sm).item(),
        l_proxy,
        valid_point_count: count,
    };
    Ok((total, report))
}

fn single(pred: &DepthMap) -> Tensor {
    Tensor::from_vec(&[1, 1, pred.height(), pred.width()], pred.data().to_vec())
}

/// `mean_{x in valid(z)} |pred(x) - z(x)|`.
pub fn sparse_consistency(pred: &DepthMap, z: &DepthMap) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(single(pred));
    let (v, _) = sparse_consistency_graph(&mut tape, p, &[z])?;
    Ok(tape.value(v).item())
}

/// Mean over the raster of `lx |dX pred| + ly |dY pred|`.
pub fn local_smoothness(pred: &DepthMap, image: &Image) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(single(pred));
    let v = smoothness_graph(&mut tape, p, &[image])?;
    Ok(tape.value(v).item())
}

/// `1 - cos(p_t, q_t)` averaged over the pair's rows.
pub fn proxy_consistency(pair: &EmbeddingPair) -> Result<f64> {
    let (n, d) = pair.p.dims2();
    let mut total = 0.0;
    for i in 0..n {
        total += cosine_loss(&pair.p.data()[i * d..(i + 1) * d], &pair.q.data()[i * d..(i + 1) * d])?;
    }
    Ok(total / n as f64)
}

pub fn adapt_loss(
    pred: &DepthMap,
    z: &DepthMap,
    image: &Image,
    pair: &EmbeddingPair,
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let l_z = sparse_consistency(pred, z)?;
    let l_sm = local_smoothness(pred, image)?;
    let l_proxy = proxy_consistency(pair)?;
    Ok(LossReport {
        total: weights.w_z * l_z + weights.w_sm * l_sm + weights.w_proxy * l_proxy,
        l_z,
        l_sm,
        l_proxy,
        valid_point_count: z.valid_count(),
    })
}

/// Mean L1 over valid ground-truth pixels.
pub fn supervised_loss(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(single(pred));
    let v = supervised_graph(&mut tape, p, &[gt])?;
    Ok(tape.value(v).item())
}
