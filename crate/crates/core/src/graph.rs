//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Graph`] owns every intermediate value. Operations append a node whose
//! inputs are strictly earlier nodes, so the node vector is already in
//! topological order and [`Graph::backward`] is a single reverse sweep.

use crate::kernels::{self, split_at_axis, ConvGeometry, PoolGeometry};
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a [Real], var: &'a [Real] },
}

/// Per-feature statistics of one training batch. `var` is the unbiased
/// estimate, which is what running averages track.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, shared_a: bool },
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, axis: usize, xhat: Vec<Real>, inv_std: Vec<Real>, batch: bool },
    Softmax { x: Var },
    GlobalAvgPool { x: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: Real },
    ChannelAffine { x: Var, scale: Option<Var>, shift: Option<Var> },
    AddBias { x: Var, bias: Var },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    GroupDot { q: Var, keys: Var, groups: usize },
    AttendPool { m: Var, z: Var, groups: usize },
    SpreadMap { m: Var, v: Var, groups: usize },
    RowMaxNormalize { x: Var, argmax: Vec<usize> },
    LabelSmoothedCe { logits: Var, targets: Vec<usize>, eps: Real, probs: Vec<Real> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape plus the values it produced.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    taps: Vec<(String, Var)>,
}

/// Gradients of a scalar with respect to every leaf of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros when the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Extent of everything past the first two axes (spatial positions for NCHW).
fn trailing(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name an intermediate so callers can read it after a forward pass.
    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        self.taps.push((name.into(), v));
    }

    pub fn tapped(&self, name: &str) -> Option<Var> {
        self.taps.iter().rev().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn taps(&self) -> impl Iterator<Item = (&str, Var)> {
        self.taps.iter().map(|(n, v)| (n.as_str(), *v))
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched `[B×m×k]·[B×k×n]`. `a` may have batch extent 1, in which case
    /// it is shared by every batch entry of `b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[2] != sb[1] || (sa[0] != sb[0] && sa[0] != 1) {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let shared_a = sa[0] == 1 && sb[0] != 1;
        let (batch, m, k, n) = (sb[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let ai = if shared_a { 0 } else { i };
            kernels::gemm(
                m,
                k,
                n,
                &ad[ai * m * k..(ai + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, shared_a },
            &[a, b],
        ))
    }

    /// Grouped 2-D convolution, `x: [N×Cin×H×W]`, `w: [Cout×Cin/G×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding, groups)?;
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        Ok(self.push(
            Tensor::from_parts(geom.output_shape().to_vec(), out),
            Op::Conv2d { x, w, geom },
            &[x, w],
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let geom = PoolGeometry::new(self.shape(x), kernel, stride, padding)?;
        let (out, argmax) = kernels::max_pool2d_forward(&geom, self.value(x).data());
        let shape = vec![geom.batch, geom.channels, geom.out_h, geom.out_w];
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool2d { x, argmax }, &[x]))
    }

    // ------------------------------------------------------------------
    // Normalization
    // ------------------------------------------------------------------

    /// Batch normalization with features along `axis`; statistics cover every
    /// other axis. `gamma` and `beta` have shape `[F]`.
    ///
    /// With [`NormStats::Batch`] the leading (batch) extent must be at least 2,
    /// and the returned [`BatchStats`] are what running averages should absorb.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: Real,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if axis == 0 || axis >= shape.len() {
            return Err(TensorError::invalid("batch_norm", format!("feature axis {axis} for shape {shape:?}")));
        }
        let (outer, features, inner) = split_at_axis(&shape, axis);
        for p in [gamma, beta] {
            if self.shape(p) != [features] {
                return Err(mismatch("batch_norm", &shape, self.shape(p)));
            }
        }
        if !(eps > 0.0) {
            return Err(TensorError::invalid("batch_norm", "epsilon must be positive"));
        }
        let xd = self.value(x).data();
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                if shape[0] < 2 {
                    return Err(TensorError::BatchTooSmall(shape[0]));
                }
                let count = (outer * inner) as Real;
                let mut mean = vec![0.0; features];
                let mut var = vec![0.0; features];
                for o in 0..outer {
                    for (f, m) in mean.iter_mut().enumerate() {
                        let base = (o * features + f) * inner;
                        *m += xd[base..base + inner].iter().sum::<Real>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for o in 0..outer {
                    for f in 0..features {
                        let base = (o * features + f) * inner;
                        var[f] += xd[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[f]) * (v - mean[f]))
                            .sum::<Real>();
                    }
                }
                let unbiased = var.iter().map(|v| v / (count - 1.0)).collect();
                var.iter_mut().for_each(|v| *v /= count);
                let bs = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(bs))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != features || var.len() != features {
                    return Err(mismatch("batch_norm", &shape, &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for f in 0..features {
                let base = (o * features + f) * inner;
                for i in base..base + inner {
                    xhat[i] = (xd[i] - mean[f]) * inv_std[f];
                    out[i] = gd[f] * xhat[i] + bd[f];
                }
            }
        }
        let batch = batch_stats.is_some();
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm { x, gamma, beta, axis, xhat, inv_std, batch },
            &[x, gamma, beta],
        );
        Ok((v, batch_stats))
    }

    // ------------------------------------------------------------------
    // Reductions and attention primitives
    // ------------------------------------------------------------------

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let cols = *t.shape().last().ok_or_else(|| TensorError::invalid("softmax", "scalar input"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x }, &[x]))
    }

    /// Mean over every axis past the second: `[N×C×...] → [N×C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() < 3 {
            return Err(TensorError::invalid("global_avg_pool", format!("need spatial axes, got {shape:?}")));
        }
        let (n, c, s) = (shape[0], shape[1], trailing(shape));
        let out = self
            .value(x)
            .data()
            .chunks(s)
            .map(|plane| plane.iter().sum::<Real>() / s as Real)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.numel() as Real;
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Per-group channel dot product: `q: [N×G·k]`, `keys: [N×G·k×...]`
    /// gives `[N×G×S]` with `S` the trailing extent of `keys`.
    pub fn group_dot(&mut self, q: Var, keys: Var, groups: usize) -> Result<Var> {
        let (sq, sk) = (self.shape(q), self.shape(keys));
        if sq.len() != 2 || sk.len() < 3 || sq[0] != sk[0] || sq[1] != sk[1] || groups == 0 || sq[1] % groups != 0 {
            return Err(mismatch("group_dot", sq, sk));
        }
        let (n, ch, s) = (sk[0], sk[1], trailing(sk));
        let k = ch / groups;
        let (qd, kd) = (self.value(q).data(), self.value(keys).data());
        let mut out = vec![0.0; n * groups * s];
        for b in 0..n {
            for g in 0..groups {
                let row = &mut out[(b * groups + g) * s..(b * groups + g + 1) * s];
                for j in 0..k {
                    let c = g * k + j;
                    let qv = qd[b * ch + c];
                    let plane = &kd[(b * ch + c) * s..(b * ch + c + 1) * s];
                    for (o, kv) in row.iter_mut().zip(plane) {
                        *o += qv * kv;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, groups, s], out),
            Op::GroupDot { q, keys, groups },
            &[q, keys],
        ))
    }

    /// Attention-weighted spatial sum per group: `m: [N×G×S]`,
    /// `z: [N×G·p×...]` gives `[N×G·p]`.
    pub fn attend_pool(&mut self, m: Var, z: Var, groups: usize) -> Result<Var> {
        let (sm, sz) = (self.shape(m), self.shape(z));
        if sm.len() != 3 || sz.len() < 3 || sm[0] != sz[0] || sm[1] != groups || groups == 0
            || sz[1] % groups != 0 || sm[2] != trailing(sz)
        {
            return Err(mismatch("attend_pool", sm, sz));
        }
        let (n, ch, s) = (sz[0], sz[1], sm[2]);
        let p = ch / groups;
        let (md, zd) = (self.value(m).data(), self.value(z).data());
        let mut out = vec![0.0; n * ch];
        for b in 0..n {
            for c in 0..ch {
                let g = c / p;
                let weights = &md[(b * groups + g) * s..(b * groups + g + 1) * s];
                let plane = &zd[(b * ch + c) * s..(b * ch + c + 1) * s];
                out[b * ch + c] = weights.iter().zip(plane).map(|(w, v)| w * v).sum();
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, ch], out), Op::AttendPool { m, z, groups }, &[m, z]))
    }

    /// Project per-group vectors onto per-group spatial maps:
    /// `m: [N×G×S]`, `v: [N×G·k]` gives `[N×G·k×S]`.
    pub fn spread_map(&mut self, m: Var, v: Var, groups: usize) -> Result<Var> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 3 || sv.len() != 2 || sm[0] != sv[0] || sm[1] != groups || groups == 0 || sv[1] % groups != 0 {
            return Err(mismatch("spread_map", sm, sv));
        }
        let (n, ch, s) = (sv[0], sv[1], sm[2]);
        let k = ch / groups;
        let (md, vd) = (self.value(m).data(), self.value(v).data());
        let mut out = Vec::with_capacity(n * ch * s);
        for b in 0..n {
            for c in 0..ch {
                let g = c / k;
                let scale = vd[b * ch + c];
                out.extend(md[(b * groups + g) * s..(b * groups + g + 1) * s].iter().map(|w| w * scale));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, ch, s], out), Op::SpreadMap { m, v, groups }, &[m, v]))
    }

    /// Divide every row (last axis) by its maximum.
    pub fn row_max_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().ok_or_else(|| TensorError::invalid("row_max_normalize", "scalar input"))?;
        let mut out = t.data().to_vec();
        let mut argmax = Vec::with_capacity(out.len() / cols);
        for (r, row) in out.chunks_mut(cols).enumerate() {
            let (at, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, Real::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
            if !(max > 0.0) || !max.is_finite() {
                return Err(TensorError::invalid(
                    "row_max_normalize",
                    format!("row {r} has non-positive maximum {max}"),
                ));
            }
            row.iter_mut().for_each(|v| *v /= max);
            argmax.push(r * cols + at);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::RowMaxNormalize { x, argmax }, &[x]))
    }

    /// Mean cross-entropy of `logits: [N×K]` against targets smoothed as
    /// `(1−eps)·onehot + eps/K`.
    pub fn label_smoothed_ce(&mut self, logits: Var, targets: &[usize], eps: Real) -> Result<Var> {
        const OP: &str = "label_smoothed_ce";
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(mismatch(OP, shape, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(TensorError::invalid(OP, format!("smoothing {eps} outside [0, 1)")));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::invalid(OP, format!("target {bad} out of range for {k} classes")));
        }
        let t = self.value(logits);
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: OP });
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut losses = Vec::with_capacity(n);
        for (row, &target) in t.data().chunks(k).zip(targets) {
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let shifted: Vec<Real> = row.iter().map(|v| v - max).collect();
            let total: Real = shifted.iter().map(|s| s.exp()).sum();
            let log_z = total.ln();
            probs.extend(shifted.iter().map(|s| s.exp() / total));
            let mean_shifted = shifted.iter().sum::<Real>() / k as Real;
            losses.push(log_z - ((1.0 - eps) * shifted[target] + eps * mean_shifted));
        }
        // Mean taken relative to the first entry so identical rows reproduce
        // their common value exactly.
        let first = losses[0];
        let loss = first + losses.iter().map(|l| l - first).sum::<Real>() / n as Real;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::LabelSmoothedCe { logits, targets: targets.to_vec(), eps, probs },
            &[logits],
        ))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(Real::tanh);
        self.push(out, Op::Tanh { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: Real) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// `scale ⊙ x + shift` with per-(sample, channel) `scale`, `shift` of
    /// shape `[N×C]` broadcast over the trailing axes of `x: [N×C×...]`.
    /// A missing scale acts as 1, a missing shift as 0.
    pub fn channel_affine(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::invalid("channel_scale_shift", format!("input shape {shape:?}")));
        }
        for p in scale.iter().chain(shift.iter()) {
            if self.shape(*p) != &shape[..2] {
                return Err(mismatch("channel_scale_shift", &shape, self.shape(*p)));
            }
        }
        let s = trailing(&shape);
        let xd = self.value(x).data();
        let sd = scale.map(|v| self.value(v).data());
        let td = shift.map(|v| self.value(v).data());
        let mut out = Vec::with_capacity(xd.len());
        for (nc, plane) in xd.chunks(s).enumerate() {
            let a = sd.map_or(1.0, |d| d[nc]);
            let b = td.map_or(0.0, |d| d[nc]);
            out.extend(plane.iter().map(|v| a * v + b));
        }
        let mut inputs = vec![x];
        inputs.extend(scale.iter().chain(shift.iter()));
        Ok(self.push(Tensor::from_parts(shape, out), Op::ChannelAffine { x, scale, shift }, &inputs))
    }

    /// Add a per-channel bias `[C]` along axis 1 of `x: [N×C×...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(mismatch("add_bias", &shape, self.shape(bias)));
        }
        let (c, s) = (shape[1], trailing(&shape));
        let bd = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_mut(s).enumerate() {
            let b = bd[i % c];
            plane.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { x, bias }, &[x, bias]))
    }

    // ------------------------------------------------------------------
    // Layout
    // ------------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().with_requires_grad(false).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice_axis(self.value(x), axis, start, len)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = kernels::concat_axis(&tensors, axis)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    // ------------------------------------------------------------------
    // Reverse sweep
    // ------------------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; loss.0 + 1];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            } else {
                self.propagate(i, g, &mut grads);
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[Real] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, i: usize, g: Vec<Real>, grads: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, contribution: Vec<Real>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, &g, false, self.data(*b), true, &mut ga, false);
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.data(*a), true, &g, false, &mut gb, false);
                    acc(*b, gb);
                }
            }
            Op::BatchMatMul { a, b, shared_a } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = (sb[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut ga = vec![0.0; sa[0] * m * k];
                    for t in 0..batch {
                        let at = if *shared_a { 0 } else { t };
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &bd[t * k * n..(t + 1) * k * n],
                            true,
                            &mut ga[at * m * k..(at + 1) * m * k],
                            true,
                        );
                    }
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        let at = if *shared_a { 0 } else { t };
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &ad[at * m * k..(at + 1) * m * k],
                            true,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            false,
                        );
                    }
                    acc(*b, gb);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    &g,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (gv, &at) in g.iter().zip(argmax) {
                    dx[at] += gv;
                }
                acc(*x, dx);
            }
            Op::BatchNorm { x, gamma, beta, axis, xhat, inv_std, batch } => {
                let (outer, features, inner) = split_at_axis(self.shape(*x), *axis);
                let gd = self.data(*gamma);
                let mut dgamma = vec![0.0; features];
                let mut dbeta = vec![0.0; features];
                for o in 0..outer {
                    for f in 0..features {
                        let base = (o * features + f) * inner;
                        for j in base..base + inner {
                            dgamma[f] += g[j] * xhat[j];
                            dbeta[f] += g[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let count = (outer * inner) as Real;
                    for o in 0..outer {
                        for f in 0..features {
                            let base = (o * features + f) * inner;
                            for j in base..base + inner {
                                dx[j] = if *batch {
                                    gd[f] * inv_std[f] / count
                                        * (count * g[j] - dbeta[f] - xhat[j] * dgamma[f])
                                } else {
                                    g[j] * gd[f] * inv_std[f]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Softmax { x } => {
                let cols = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: Real = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let s = trailing(self.shape(*x));
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv / s as Real, s)).collect();
                acc(*x, dx);
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*x, dx);
            }
            Op::Tanh { x } => {
                let dx = g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                acc(*x, dx);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(bd).map(|(gv, v)| gv * v).collect());
                acc(*b, g.iter().zip(ad).map(|(gv, v)| gv * v).collect());
            }
            Op::Scale { x, factor } => acc(*x, g.iter().map(|gv| gv * factor).collect()),
            Op::ChannelAffine { x, scale, shift } => {
                let s = trailing(self.shape(*x));
                let xd = self.data(*x);
                if let Some(sv) = scale {
                    let ds = g
                        .chunks(s)
                        .zip(xd.chunks(s))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*sv, ds);
                }
                if let Some(tv) = shift {
                    acc(*tv, g.chunks(s).map(|gp| gp.iter().sum()).collect());
                }
                let dx = match scale {
                    Some(sv) => {
                        let sd = self.data(*sv);
                        g.chunks(s)
                            .enumerate()
                            .flat_map(|(nc, gp)| gp.iter().map(move |gv| gv * sd[nc]))
                            .collect()
                    }
                    None => g,
                };
                acc(*x, dx);
            }
            Op::AddBias { x, bias } => {
                let shape = self.shape(*x);
                let (c, s) = (shape[1], trailing(shape));
                let mut db = vec![0.0; c];
                for (i, plane) in g.chunks(s).enumerate() {
                    db[i % c] += plane.iter().sum::<Real>();
                }
                acc(*bias, db);
                acc(*x, g);
            }
            Op::Sum { x } => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as Real; n]);
            }
            Op::Reshape { x } => acc(*x, g),
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, extent, inner) = split_at_axis(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let ext = self.shape(*p)[*axis];
                    let mut dp = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[src..src + ext * inner]);
                    }
                    offset += ext;
                    acc(*p, dp);
                }
            }
            Op::GroupDot { q, keys, groups } => {
                let sk = self.shape(*keys);
                let (n, ch, s) = (sk[0], sk[1], trailing(sk));
                let k = ch / groups;
                let (qd, kd) = (self.data(*q), self.data(*keys));
                let mut dq = vec![0.0; n * ch];
                let mut dk = vec![0.0; kd.len()];
                for b in 0..n {
                    for c in 0..ch {
                        let grp = c / k;
                        let grow = &g[(b * groups + grp) * s..(b * groups + grp + 1) * s];
                        let plane = (b * ch + c) * s;
                        dq[b * ch + c] = grow.iter().zip(&kd[plane..plane + s]).map(|(a, v)| a * v).sum();
                        for (d, gv) in dk[plane..plane + s].iter_mut().zip(grow) {
                            *d = gv * qd[b * ch + c];
                        }
                    }
                }
                acc(*q, dq);
                acc(*keys, dk);
            }
            Op::AttendPool { m, z, groups } => {
                let sz = self.shape(*z);
                let (n, ch, s) = (sz[0], sz[1], trailing(sz));
                let p = ch / groups;
                let (md, zd) = (self.data(*m), self.data(*z));
                let mut dm = vec![0.0; md.len()];
                let mut dz = vec![0.0; zd.len()];
                for b in 0..n {
                    for c in 0..ch {
                        let row = (b * groups + c / p) * s;
                        let plane = (b * ch + c) * s;
                        let gv = g[b * ch + c];
                        for t in 0..s {
                            dm[row + t] += gv * zd[plane + t];
                            dz[plane + t] = gv * md[row + t];
                        }
                    }
                }
                acc(*m, dm);
                acc(*z, dz);
            }
            Op::SpreadMap { m, v, groups } => {
                let sv = self.shape(*v);
                let (n, ch) = (sv[0], sv[1]);
                let s = self.shape(*m)[2];
                let k = ch / groups;
                let (md, vd) = (self.data(*m), self.data(*v));
                let mut dm = vec![0.0; md.len()];
                let mut dv = vec![0.0; vd.len()];
                for b in 0..n {
                    for c in 0..ch {
                        let row = (b * groups + c / k) * s;
                        let plane = (b * ch + c) * s;
                        let mut total = 0.0;
                        for t in 0..s {
                            dm[row + t] += g[plane + t] * vd[b * ch + c];
                            total += g[plane + t] * md[row + t];
                        }
                        dv[b * ch + c] = total;
                    }
                }
                acc(*m, dm);
                acc(*v, dv);
            }
            Op::RowMaxNormalize { x, argmax } => {
                let cols = *node.value.shape().last().unwrap();
                let xd = self.data(*x);
                let mut dx = vec![0.0; g.len()];
                for (r, &at) in argmax.iter().enumerate() {
                    let max = xd[at];
                    let range = r * cols..(r + 1) * cols;
                    let mut cross = 0.0;
                    for j in range {
                        dx[j] = g[j] / max;
                        cross += g[j] * xd[j];
                    }
                    dx[at] -= cross / (max * max);
                }
                acc(*x, dx);
            }
            Op::LabelSmoothedCe { logits, targets, eps, probs } => {
                let k = self.shape(*logits)[1];
                let n = targets.len() as Real;
                let mut dx = Vec::with_capacity(probs.len());
                for (row, &target) in probs.chunks(k).zip(targets) {
                    for (j, p) in row.iter().enumerate() {
                        let t = eps / k as Real + if j == target { 1.0 - eps } else { 0.0 };
                        dx.push(g[0] * (p - t) / n);
                    }
                }
                acc(*logits, dx);
            }
        }
    }
}
