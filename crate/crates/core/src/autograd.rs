//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every op appends a node; [`Tape::backward`] walks the nodes in reverse.
//! A node carries a gradient only if one of its inputs does, so frozen
//! weights bound with [`Tape::constant`] cost nothing on the backward pass and
//! receive exactly zero gradient. [`Tape::detach`] is the stop-gradient.

use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        /// Per-sample patch matrices, kept only when `w` needs a gradient.
        cols: Vec<Vec<f64>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        /// Batch statistics: the normalizer depends on `x`.
        batch_stats: bool,
    },
    Elu {
        x: Var,
    },
    ScaledSigmoid {
        x: Var,
        scale: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Upsample2 {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Cosine {
        p: Var,
        q: Var,
    },
    WeightedL1 {
        x: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    Smoothness {
        x: Var,
        lx: Vec<f64>,
        ly: Vec<f64>,
        scale: f64,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass. A missing entry is an exact zero.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient of `v`, materializing zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, k, k]");
        assert_eq!(ws[1], c, "conv expects {} input channels, got {c}", ws[1]);
        let (o, k) = (ws[0], ws[2]);
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let (rows, p) = (geom.rows(), geom.cols());
        let keep_cols = self.rg(w);
        let mut out = vec![0.0; n * o * p];
        let mut cols = Vec::new();
        let mut col = vec![0.0; rows * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for s in 0..n {
                im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut col);
                let dst = &mut out[s * o * p..(s + 1) * o * p];
                for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(bv[oc]);
                }
                gemm(o, rows, p, wv, false, &col, false, dst, 1.0);
                if keep_cols {
                    cols.push(col.clone());
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::from_vec(&[n, o, geom.ho, geom.wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Batch normalization. With `running = None` the batch's own statistics
    /// are used; otherwise the given `(mean, var)` per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for smp in 0..n {
                        s += xv[(smp * c + ch) * hw..(smp * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut sq = 0.0;
                    for smp in 0..n {
                        sq += xv[(smp * c + ch) * hw..(smp * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for smp in 0..n {
            for ch in 0..c {
                let base = (smp * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let shape = [n, c, h, w];
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::from_vec(&shape, xhat),
                inv_std,
                batch_stats: running.is_none(),
            },
            rg,
        )
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        let rg = self.rg(x);
        self.push(out, Op::Elu { x }, rg)
    }

    /// `scale * sigmoid(x)`, mapping onto `(0, scale)`.
    pub fn scaled_sigmoid(&mut self, x: Var, scale: f64) -> Var {
        let out = self.value(x).map(|v| scale / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::ScaledSigmoid { x, scale }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let mut parts = Vec::with_capacity(xs.len());
        let mut total_c = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4();
            assert_eq!((vn, vh, vw), (n, h, w), "concat shape mismatch");
            parts.push((v, vc));
            total_c += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &(v, c) in &parts {
                out.extend_from_slice(&self.value(v).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let rg = parts.iter().any(|&(v, _)| self.rg(v));
        self.push(
            Tensor::from_vec(&[n, total_c, h, w], out),
            Op::Concat { parts },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            for y in 0..h2 {
                for x2 in 0..w2 {
                    out[plane * h2 * w2 + y * w2 + x2] = xv[plane * h * w + (y / 2) * w + x2 / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, h2, w2], out), Op::Upsample2 { x }, rg)
    }

    /// `[N, C, H, W]` to `[N, C]` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f64;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c], out), Op::GlobalAvgPool { x }, rg)
    }

    /// `x[N, in] * w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, din) = self.value(x).dims2();
        let (win, dout) = self.value(w).dims2();
        assert_eq!(din, win, "linear expects {win} inputs, got {din}");
        let mut out = vec![0.0; n * dout];
        let bv = self.value(b).data();
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(bv);
        }
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::from_vec(&[n, dout], out), Op::Linear { x, w, b }, rg)
    }

    /// Mean over rows of `1 - cos(p_i, q_i)`. Callers must reject
    /// near-zero rows first.
    pub fn cosine_loss(&mut self, p: Var, q: Var) -> Var {
        assert_eq!(self.value(p).shape(), self.value(q).shape());
        let (n, d) = self.value(p).dims2();
        let pv = self.value(p).data();
        let qv = self.value(q).data();
        let mut total = 0.0;
        for i in 0..n {
            total += 1.0 - cosine(&pv[i * d..(i + 1) * d], &qv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(p) || self.rg(q);
        self.push(Tensor::scalar(total / n as f64), Op::Cosine { p, q }, rg)
    }

    /// `sum_i weights[i] * |x_i - target_i|`.
    pub fn weighted_l1(&mut self, x: Var, target: Vec<f64>, weights: Vec<f64>) -> Var {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), target.len());
        assert_eq!(xv.len(), weights.len());
        let total: f64 = xv
            .iter()
            .zip(&target)
            .zip(&weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|((a, t), w)| w * (a - t).abs())
            .sum();
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(total),
            Op::WeightedL1 { x, target, weights },
            rg,
        )
    }

    /// `scale * sum lx|dX x| + ly|dY x|` with forward differences on each
    /// `H x W` plane; `lx`/`ly` are zero where the difference is undefined.
    pub fn smoothness(&mut self, x: Var, lx: Vec<f64>, ly: Vec<f64>, scale: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let xv = self.value(x).data();
        let mut total = 0.0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..h {
                for col in 0..w {
                    let i = base + r * w + col;
                    if col + 1 < w {
                        total += lx[i] * (xv[i + 1] - xv[i]).abs();
                    }
                    if r + 1 < h {
                        total += ly[i] * (xv[i + w] - xv[i]).abs();
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(total * scale),
            Op::Smoothness { x, lx, ly, scale },
            rg,
        )
    }

    /// `sum_i c_i * s_i` over scalar nodes. Zero coefficients are dropped
    /// from the graph.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let kept: Vec<(Var, f64)> = terms.iter().copied().filter(|&(_, c)| c != 0.0).collect();
        let total = kept.iter().map(|&(v, c)| c * self.value(v).item()).sum();
        let rg = kept.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(total), Op::WeightedSum { terms: kept }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        if self.rg(root) {
            grads[root.0] = Some(Tensor::from_vec(self.value(root).shape(), vec![1.0]));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (n, o, _, _) = node.value.dims4();
                let (rows, p) = (geom.rows(), geom.cols());
                if self.rg(*b) {
                    let mut db = vec![0.0; o];
                    for s in 0..n {
                        for (oc, chunk) in gd[s * o * p..(s + 1) * o * p].chunks(p).enumerate() {
                            db[oc] += chunk.iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[o], db));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; o * rows];
                    for (s, col) in cols.iter().enumerate() {
                        gemm(o, p, rows, &gd[s * o * p..(s + 1) * o * p], false, col, true, &mut dw, 1.0);
                    }
                    let shape = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::from_vec(&shape, dw));
                }
                if self.rg(*x) {
                    let wv = self.value(*w).data();
                    let img = geom.c * geom.h * geom.w;
                    let mut dx = vec![0.0; n * img];
                    let mut dcol = vec![0.0; rows * p];
                    for s in 0..n {
                        gemm(rows, o, p, wv, true, &gd[s * o * p..(s + 1) * o * p], false, &mut dcol, 0.0);
                        col2im(&dcol, geom, &mut dx[s * img..(s + 1) * img]);
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::from_vec(&shape, dx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = node.value.dims4();
                let hw = h * w;
                let xh = xhat.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += gd[i] * xh[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let gv = self.value(*gamma).data();
                    let m = (n * hw) as f64;
                    let mut dx = vec![0.0; gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    k * (gd[i] - dbeta[ch] / m - xh[i] * dgamma[ch] / m)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::Elu { x } => {
                let y = node.value.data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > 0.0 { g } else { g * (y + 1.0) })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), dx));
            }
            Op::ScaledSigmoid { x, scale } => {
                let y = node.value.data();
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (1.0 - y / scale))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(node.value.shape(), dx));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Concat { parts } => {
                let (n, total_c, h, w) = node.value.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &(v, c) in parts {
                    if self.rg(v) {
                        let mut dv = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let start = (s * total_c + offset) * hw;
                            dv.extend_from_slice(&gd[start..start + c * hw]);
                        }
                        self.accumulate(grads, v, Tensor::from_vec(&[n, c, h, w], dv));
                    }
                    offset += c;
                }
            }
            Op::Upsample2 { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let w2 = 2 * w;
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..2 * h {
                        for x2 in 0..w2 {
                            dx[plane * h * w + (y / 2) * w + x2 / 2] += gd[plane * 4 * h * w + y * w2 + x2];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for (plane, chunk) in dx.chunks_mut(hw).enumerate() {
                    chunk.fill(gd[plane] / hw as f64);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2();
                let dout = node.value.shape()[1];
                if self.rg(*b) {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[dout], db));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, n, dout, self.value(*x).data(), true, gd, false, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::from_vec(&[din, dout], dw));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, gd, false, self.value(*w).data(), true, &mut dx, 0.0);
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, din], dx));
                }
            }
            Op::Cosine { p, q } => {
                let (n, d) = self.value(*p).dims2();
                let pv = self.value(*p).data();
                let qv = self.value(*q).data();
                let scale = gd[0] / n as f64;
                let mut dp = vec![0.0; n * d];
                let mut dq = vec![0.0; n * d];
                for i in 0..n {
                    let pr = &pv[i * d..(i + 1) * d];
                    let qr = &qv[i * d..(i + 1) * d];
                    let np = norm(pr);
                    let nq = norm(qr);
                    let c = dot(pr, qr) / (np * nq);
                    for j in 0..d {
                        // d(1 - cos)/dp = -(q/(|p||q|) - cos * p/|p|^2)
                        dp[i * d + j] = -scale * (qr[j] / (np * nq) - c * pr[j] / (np * np));
                        dq[i * d + j] = -scale * (pr[j] / (np * nq) - c * qr[j] / (nq * nq));
                    }
                }
                self.accumulate(grads, *p, Tensor::from_vec(&[n, d], dp));
                self.accumulate(grads, *q, Tensor::from_vec(&[n, d], dq));
            }
            Op::WeightedL1 { x, target, weights } => {
                let xv = self.value(*x).data();
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((a, t), w)| gd[0] * w * sign(a - t))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx));
            }
            Op::Smoothness { x, lx, ly, scale } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; xv.len()];
                let k = gd[0] * scale;
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for r in 0..h {
                        for col in 0..w {
                            let i = base + r * w + col;
                            if col + 1 < w {
                                let s = k * lx[i] * sign(xv[i + 1] - xv[i]);
                                dx[i + 1] += s;
                                dx[i] -= s;
                            }
                            if r + 1 < h {
                                let s = k * ly[i] * sign(xv[i + w] - xv[i]);
                                dx[i + w] += s;
                                dx[i] -= s;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, Tensor::scalar(gd[0] * c));
                }
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}
