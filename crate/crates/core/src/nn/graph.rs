//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so reverse creation order is a valid
//! topological order for the backward sweep.

use super::kernels::{self, ConvGeom, PoolGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, Scalar, Tensor};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Pending batch-norm running statistic (mean or variance) observed in training mode.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub param: ParamId,
    pub observed: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    GlobalAvgPool { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: T },
    Sum { x: NodeId },
    WeightedSum { x: NodeId, weights: Vec<T> },
    ConcatLast { parts: Vec<NodeId> },
    ConcatBatch { parts: Vec<NodeId> },
    SelectBatch { x: NodeId, index: usize },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<T> },
    BilinearSample { x: NodeId, grid: NodeId },
    AffineGrid { theta: NodeId, extents: Vec<(T, T)> },
    ConstrainedAffine { raw: NodeId, min_scale: T, extents: Vec<(T, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    /// Accumulated gradient, kept for leaves only.
    grad: Option<Vec<T>>,
}

/// A single forward computation and its differentiation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    running: Vec<RunningUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::Shape(msg.into())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), running: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, param: None, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf holding a copy of a stored parameter; gradients are routed back by id.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let p = store.get(id);
        let node = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[node.0].param = Some(id);
        node
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    pub fn record_running_update(&mut self, param: ParamId, observed: Vec<T>) {
        self.running.push(RunningUpdate { param, observed });
    }

    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate<T>> {
        std::mem::take(&mut self.running)
    }

    /// Cross-correlation of an NHWC input with a `[k, k, cin, cout]` kernel.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId, NnError> {
        let (n, h, wd, cin) = self.value(x).dims4()?;
        let (kh, kw, wcin, cout) = self.value(w).dims4()?;
        if kh != kw || wcin != cin {
            return Err(shape_err(format!(
                "conv kernel {:?} incompatible with input channels {cin}",
                self.value(w).shape()
            )));
        }
        if stride == 0 {
            return Err(shape_err("conv stride must be >= 1"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { n, h, w: wd, cin, k: kh, cout, stride, pad, ho, wo };
        let y = kernels::conv_forward(self.value(x).data(), self.value(w).data(), &geom);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(vec![n, ho, wo, cout], y)?, Op::Conv2d { x, w, geom }, rg))
    }

    /// Batch normalization over all but the last axis.
    ///
    /// With `running` absent the batch statistics are used (training mode) and the
    /// observed mean and unbiased variance are returned so the caller can update
    /// running averages.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(NodeId, Option<(Vec<T>, Vec<T>)>), NnError> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().ok_or_else(|| shape_err("batch norm on a scalar"))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(format!("batch norm affine parameters must have {c} entries")));
        }
        let xs = self.value(x).data();
        let m = xs.len() / c.max(1);
        let (mean, var, observed) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err("running statistics length mismatch"));
                }
                let mean: Vec<f64> = rm.iter().map(|v| v.to_f64c()).collect();
                let var: Vec<f64> = rv.iter().map(|v| v.to_f64c()).collect();
                (mean, var, None)
            }
            None => {
                if shape[0] < 2 {
                    return Err(NnError::DegenerateBatch);
                }
                let (mean, var) = kernels::channel_mean_var(xs, c);
                let unbias = m as f64 / (m as f64 - 1.0).max(1.0);
                let obs_mean = mean.iter().map(|v| T::from_f64c(*v)).collect();
                let obs_var = var.iter().map(|v| T::from_f64c(v * unbias)).collect();
                (mean, var, Some((obs_mean, obs_var)))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64c(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|v| T::from_f64c(*v)).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let (mean_t, inv_t, g_t, b_t) = (kernels::tile(&mean_t), kernels::tile(&inv_std), kernels::tile(g), kernels::tile(b));
        let span = mean_t.len();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut y = Vec::with_capacity(xs.len());
        kernels::tiled_spans(xs.len(), span, |r| {
            let n = r.len();
            xhat.extend(xs[r].iter().zip(&mean_t[..n]).zip(&inv_t[..n]).map(|((v, m), s)| (*v - *m) * *s));
            let h = &xhat[xhat.len() - n..];
            y.extend(h.iter().zip(&g_t[..n]).zip(&b_t[..n]).map(|((h, g), b)| *g * *h + *b));
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = running.is_none();
        let id = self.push(
            Tensor::new(shape, y)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            rg,
        );
        Ok((id, observed))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let y = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let t = Tensor::new(v.shape().to_vec(), y).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> Result<NodeId, NnError> {
        let (n, h, w, c) = self.value(x).dims4()?;
        if k == 0 || stride == 0 || pad >= k || h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err("invalid max-pool geometry"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let g = PoolGeom { n, h, w, c, k, stride, pad, ho, wo };
        let (y, argmax) = kernels::max_pool_forward(self.value(x).data(), &g);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, ho, wo, c], y)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Spatial mean per channel: `[n, h, w, c] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let (n, h, w, c) = self.value(x).dims4()?;
        let xs = self.value(x).data();
        let mut y = vec![T::zero(); n * c];
        let inv = T::one() / T::from_usize(h * w).unwrap();
        for b in 0..n {
            let out = &mut y[b * c..(b + 1) * c];
            for px in xs[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
                for (o, v) in out.iter_mut().zip(px) {
                    *o += *v;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], y)?, Op::GlobalAvgPool { x }, rg))
    }

    /// Affine map `x·w + b` with `x: [n, din]`, `w: [din, dout]`, `b: [dout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (n, din) = self.value(x).dims2()?;
        let (wdin, dout) = self.value(w).dims2()?;
        if wdin != din || self.value(b).len() != dout {
            return Err(shape_err(format!(
                "linear layer {:?} cannot take input of width {din}",
                self.value(w).shape()
            )));
        }
        let mut y = Vec::with_capacity(n * dout);
        for _ in 0..n {
            y.extend_from_slice(self.value(b).data());
        }
        matmul(n, din, dout, self.value(x).data(), false, self.value(w).data(), false, &mut y, true);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, dout], y)?, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let y = self.value(a).data().iter().zip(self.value(b).data()).map(|(p, q)| *p + *q).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| *a * factor).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Scalar `Σ xᵢ·wᵢ` against constant weights (random projections in gradient checks).
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<T>) -> Result<NodeId, NnError> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err("weighted sum length mismatch"));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(a, w)| *a * *w).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Concatenation along the last (channel / feature) axis.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let first = self.value(*parts.first().ok_or_else(|| shape_err("empty concat"))?).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err(format!("concat of {:?} with {:?}", first, s)));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                y.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(shape, y)?, Op::ConcatLast { parts: parts.to_vec() }, rg))
    }

    /// Stacks tensors with identical trailing shape along the first axis.
    pub fn concat_batch(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let first = self.value(*parts.first().ok_or_else(|| shape_err("empty concat"))?).shape().to_vec();
        let mut n = 0;
        let mut y = Vec::new();
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(shape_err(format!("batch concat of {:?} with {:?}", first, s)));
            }
            n += s[0];
            y.extend_from_slice(self.value(*p).data());
        }
        let mut shape = first;
        shape[0] = n;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(shape, y)?, Op::ConcatBatch { parts: parts.to_vec() }, rg))
    }

    /// Extracts sample `index` along the first axis, keeping a batch axis of 1.
    pub fn select_batch(&mut self, x: NodeId, index: usize) -> Result<NodeId, NnError> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(shape_err(format!("batch index {index} out of range for {:?}", shape)));
        }
        let stride: usize = shape[1..].iter().product();
        let y = self.value(x).data()[index * stride..(index + 1) * stride].to_vec();
        let mut out_shape = shape;
        out_shape[0] = 1;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, y)?, Op::SelectBatch { x, index }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, NnError> {
        let (n, k) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(shape_err(format!("{} targets for a batch of {n}", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(NnError::Label { label: bad, classes: k });
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let xs = self.value(logits).data();
        let mut total = 0.0f64;
        for (row, &t) in xs.chunks_exact(k).zip(targets) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.to_f64c()));
            let lse = mx + row.iter().map(|v| (v.to_f64c() - mx).exp()).sum::<f64>().ln();
            total += lse - row[t].to_f64c();
        }
        let value = T::from_f64c(total / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Samples `x: [n, h, w, c]` at normalized locations `grid: [n, ho, wo, 2]` (x, y order),
    /// clamping reads to the border.
    pub fn bilinear_sample(&mut self, x: NodeId, grid: NodeId) -> Result<NodeId, NnError> {
        let (n, h, w, c) = self.value(x).dims4()?;
        let (gn, ho, wo, two) = self.value(grid).dims4()?;
        if gn != n || two != 2 {
            return Err(shape_err(format!(
                "grid {:?} does not match input {:?}",
                self.value(grid).shape(),
                self.value(x).shape()
            )));
        }
        let xs = self.value(x).data();
        let gs = self.value(grid).data();
        let mut y = vec![T::zero(); n * ho * wo * c];
        for b in 0..n {
            let img = &xs[b * h * w * c..(b + 1) * h * w * c];
            for p in 0..ho * wo {
                let gi = (b * ho * wo + p) * 2;
                let px = kernels::unnormalize(gs[gi], w);
                let py = kernels::unnormalize(gs[gi + 1], h);
                let (y0, y1, x0, x1, wy, wx, _, _) = kernels::bilinear_taps(py, px, h, w);
                let out = &mut y[(b * ho * wo + p) * c..(b * ho * wo + p + 1) * c];
                let w00 = (T::one() - wy) * (T::one() - wx);
                let w01 = (T::one() - wy) * wx;
                let w10 = wy * (T::one() - wx);
                let w11 = wy * wx;
                for ch in 0..c {
                    out[ch] = w00 * img[(y0 * w + x0) * c + ch]
                        + w01 * img[(y0 * w + x1) * c + ch]
                        + w10 * img[(y1 * w + x0) * c + ch]
                        + w11 * img[(y1 * w + x1) * c + ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(grid);
        Ok(self.push(Tensor::new(vec![n, ho, wo, c], y)?, Op::BilinearSample { x, grid }, rg))
    }

    /// Builds normalized sampling grids of size `out_h × out_w` from per-sample `(s, tx, ty)`.
    ///
    /// Parameters live in a frame where the shorter image side spans `[-1, 1]`; `extents[i]`
    /// holds `(width / min_side, height / min_side)` of sample `i`, so a window of scale `s`
    /// is square in pixels regardless of the image aspect ratio.
    pub fn affine_grid(
        &mut self,
        theta: NodeId,
        out_h: usize,
        out_w: usize,
        extents: &[(T, T)],
    ) -> Result<NodeId, NnError> {
        let (n, three) = self.value(theta).dims2()?;
        if three != 3 || extents.len() != n {
            return Err(shape_err("affine grid expects [n, 3] parameters and n extents"));
        }
        let th = self.value(theta).data();
        let mut y = vec![T::zero(); n * out_h * out_w * 2];
        for b in 0..n {
            let (s, tx, ty) = (th[b * 3], th[b * 3 + 1], th[b * 3 + 2]);
            let (ex, ey) = extents[b];
            for i in 0..out_h {
                let v = target_coord::<T>(i, out_h);
                for j in 0..out_w {
                    let u = target_coord::<T>(j, out_w);
                    let o = ((b * out_h + i) * out_w + j) * 2;
                    y[o] = (s * u + tx) / ex;
                    y[o + 1] = (s * v + ty) / ey;
                }
            }
        }
        let rg = self.rg(theta);
        Ok(self.push(
            Tensor::new(vec![n, out_h, out_w, 2], y)?,
            Op::AffineGrid { theta, extents: extents.to_vec() },
            rg,
        ))
    }

    /// Squashes raw regressor outputs `[n, 3]` into admissible `(s, tx, ty)`:
    /// `s = s_min + (1 - s_min)·σ(r₀)`, `t = (extent - s)·tanh(r)`.
    pub fn constrained_affine(&mut self, raw: NodeId, min_scale: T, extents: &[(T, T)]) -> Result<NodeId, NnError> {
        let (n, three) = self.value(raw).dims2()?;
        if three != 3 || extents.len() != n {
            return Err(shape_err("constrained affine expects [n, 3] inputs and n extents"));
        }
        let r = self.value(raw).data();
        if !r.iter().all(|v| v.is_finite()) {
            return Err(NnError::Numeric("non-finite localization output".into()));
        }
        let mut y = vec![T::zero(); n * 3];
        for b in 0..n {
            let sig = sigmoid(r[b * 3]);
            let s = min_scale + (T::one() - min_scale) * sig;
            let (ex, ey) = extents[b];
            y[b * 3] = s;
            y[b * 3 + 1] = (ex - s) * r[b * 3 + 1].tanh();
            y[b * 3 + 2] = (ey - s) * r[b * 3 + 2].tanh();
        }
        let rg = self.rg(raw);
        Ok(self.push(
            Tensor::new(vec![n, 3], y)?,
            Op::ConstrainedAffine { raw, min_scale, extents: extents.to_vec() },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let len_of = |id: NodeId| nodes[id.0].value.len();
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![T::zero(); len_of(id)]);
            f(buf);
        };
        let add_into = |dst: &mut [T], src: &[T]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv_backward(
                    nodes[x.0].value.data(),
                    nodes[w.0].value.data(),
                    g,
                    geom,
                    nodes[x.0].requires_grad,
                    nodes[w.0].requires_grad,
                );
                for (id, d) in [(*x, dx), (*w, dw)] {
                    if let Some(d) = d {
                        match grads[id.0].as_mut() {
                            Some(buf) => add_into(buf, &d),
                            None => grads[id.0] = Some(d),
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let m = T::from_usize(xhat.len() / c).unwrap();
                let span = kernels::tile(inv_std).len();
                let mut sdy = vec![T::zero(); span];
                let mut sdyx = vec![T::zero(); span];
                kernels::tiled_spans(g.len(), span, |r| {
                    for ((gv, hv), (a, b)) in g[r.clone()].iter().zip(&xhat[r]).zip(sdy.iter_mut().zip(sdyx.iter_mut())) {
                        *a += *gv;
                        *b += *gv * *hv;
                    }
                });
                let sum_dy = kernels::untile(&sdy, c);
                let sum_dy_xhat = kernels::untile(&sdyx, c);
                let gam = nodes[gamma.0].value.data();
                let scale: Vec<T> = gam.iter().zip(inv_std).map(|(g, s)| *g * *s).collect();
                let scale_t = kernels::tile(&scale);
                let mean_dy = kernels::tile(&sum_dy.iter().map(|v| *v / m).collect::<Vec<_>>());
                let mean_dyx = kernels::tile(&sum_dy_xhat.iter().map(|v| *v / m).collect::<Vec<_>>());
                acc(*x, &mut |b| {
                    kernels::tiled_spans(g.len(), span, |r| {
                        let n = r.len();
                        let it = b[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]).zip(&scale_t[..n]);
                        if *batch_stats {
                            for ((((d, gv), hv), s), (md, mx)) in it.zip(mean_dy[..n].iter().zip(&mean_dyx[..n])) {
                                *d += *s * (*gv - *md - *hv * *mx);
                            }
                        } else {
                            for (((d, gv), _), s) in it {
                                *d += *s * *gv;
                            }
                        }
                    });
                });
                acc(*gamma, &mut |b| add_into(b, &sum_dy_xhat));
                acc(*beta, &mut |b| add_into(b, &sum_dy));
            }
            Op::Relu { x } => {
                let xs = nodes[x.0].value.data();
                acc(*x, &mut |b| {
                    for ((d, gv), xv) in b.iter_mut().zip(g).zip(xs) {
                        if *xv > T::zero() {
                            *d += *gv;
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => acc(*x, &mut |b| {
                for (gv, &a) in g.iter().zip(argmax) {
                    b[a as usize] += *gv;
                }
            }),
            Op::GlobalAvgPool { x } => {
                let (_, h, w, c) = nodes[x.0].value.dims4().expect("4-D");
                let inv = T::one() / T::from_usize(h * w).unwrap();
                acc(*x, &mut |b| {
                    for (bi, img) in b.chunks_exact_mut(h * w * c).enumerate() {
                        let gr = &g[bi * c..(bi + 1) * c];
                        for px in img.chunks_exact_mut(c) {
                            for (d, gv) in px.iter_mut().zip(gr) {
                                *d += *gv * inv;
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b: bias } => {
                let (n, din) = nodes[x.0].value.dims2().expect("2-D");
                let dout = nodes[bias.0].value.len();
                let xs = nodes[x.0].value.data();
                let ws = nodes[w.0].value.data();
                acc(*x, &mut |b| matmul(n, dout, din, g, false, ws, true, b, true));
                acc(*w, &mut |b| matmul(din, n, dout, xs, true, g, false, b, true));
                acc(*bias, &mut |b| {
                    for row in g.chunks_exact(dout) {
                        add_into(b, row);
                    }
                });
            }
            Op::Add { a, b: other } => {
                acc(*a, &mut |b| add_into(b, g));
                acc(*other, &mut |b| add_into(b, g));
            }
            Op::Scale { x, factor } => acc(*x, &mut |b| {
                b.iter_mut().zip(g).for_each(|(d, gv)| *d += *gv * *factor);
            }),
            Op::Sum { x } => acc(*x, &mut |b| b.iter_mut().for_each(|d| *d += g[0])),
            Op::WeightedSum { x, weights } => acc(*x, &mut |b| {
                b.iter_mut().zip(weights).for_each(|(d, w)| *d += g[0] * *w);
            }),
            Op::ConcatLast { parts } => {
                let total = *nodes[i].value.shape().last().unwrap();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for p in parts {
                    let w = *nodes[p.0].value.shape().last().unwrap();
                    acc(*p, &mut |b| {
                        for r in 0..rows {
                            add_into(&mut b[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatBatch { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = len_of(*p);
                    acc(*p, &mut |b| add_into(b, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SelectBatch { x, index } => {
                let len = g.len();
                acc(*x, &mut |b| add_into(&mut b[index * len..(index + 1) * len], g));
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let k = probs.len() / n;
                let scale = g[0] / T::from_usize(n).unwrap();
                acc(*logits, &mut |b| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            b[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::BilinearSample { x, grid } => self.backprop_sampler(*x, *grid, g, &mut acc),
            Op::AffineGrid { theta, extents } => {
                let (n, ho, wo, _) = nodes[i].value.dims4().expect("4-D");
                acc(*theta, &mut |b| {
                    for bi in 0..n {
                        let (ex, ey) = extents[bi];
                        let (mut ds, mut dtx, mut dty) = (T::zero(), T::zero(), T::zero());
                        for r in 0..ho {
                            let v = target_coord::<T>(r, ho);
                            for c in 0..wo {
                                let u = target_coord::<T>(c, wo);
                                let o = ((bi * ho + r) * wo + c) * 2;
                                let gx = g[o] / ex;
                                let gy = g[o + 1] / ey;
                                ds += gx * u + gy * v;
                                dtx += gx;
                                dty += gy;
                            }
                        }
                        b[bi * 3] += ds;
                        b[bi * 3 + 1] += dtx;
                        b[bi * 3 + 2] += dty;
                    }
                });
            }
            Op::ConstrainedAffine { raw, min_scale, extents } => {
                let r = nodes[raw.0].value.data();
                let n = extents.len();
                acc(*raw, &mut |b| {
                    for bi in 0..n {
                        let sig = sigmoid(r[bi * 3]);
                        let ds_dr0 = (T::one() - *min_scale) * sig * (T::one() - sig);
                        let s = *min_scale + (T::one() - *min_scale) * sig;
                        let (ex, ey) = extents[bi];
                        let thx = r[bi * 3 + 1].tanh();
                        let thy = r[bi * 3 + 2].tanh();
                        let (gs, gx, gy) = (g[bi * 3], g[bi * 3 + 1], g[bi * 3 + 2]);
                        b[bi * 3] += ds_dr0 * (gs - gx * thx - gy * thy);
                        b[bi * 3 + 1] += gx * (ex - s) * (T::one() - thx * thx);
                        b[bi * 3 + 2] += gy * (ey - s) * (T::one() - thy * thy);
                    }
                });
            }
        }
    }

    fn backprop_sampler(
        &self,
        x: NodeId,
        grid: NodeId,
        g: &[T],
        acc: &mut impl FnMut(NodeId, &mut dyn FnMut(&mut [T])),
    ) {
        let (n, h, w, c) = self.value(x).dims4().expect("4-D");
        let (_, ho, wo, _) = self.value(grid).dims4().expect("4-D");
        let xs = self.value(x).data();
        let gs = self.value(grid).data();
        let half_w = T::from_usize(w).unwrap() / T::from_f64c(2.0);
        let half_h = T::from_usize(h).unwrap() / T::from_f64c(2.0);
        let taps = |b: usize, p: usize| {
            let gi = (b * ho * wo + p) * 2;
            let px = kernels::unnormalize(gs[gi], w);
            let py = kernels::unnormalize(gs[gi + 1], h);
            kernels::bilinear_taps(py, px, h, w)
        };
        acc(x, &mut |buf| {
            for b in 0..n {
                for p in 0..ho * wo {
                    let (y0, y1, x0, x1, wy, wx, _, _) = taps(b, p);
                    let gr = &g[(b * ho * wo + p) * c..(b * ho * wo + p + 1) * c];
                    let img = &mut buf[b * h * w * c..(b + 1) * h * w * c];
                    let corners = [
                        ((y0 * w + x0) * c, (T::one() - wy) * (T::one() - wx)),
                        ((y0 * w + x1) * c, (T::one() - wy) * wx),
                        ((y1 * w + x0) * c, wy * (T::one() - wx)),
                        ((y1 * w + x1) * c, wy * wx),
                    ];
                    for (base, weight) in corners {
                        for ch in 0..c {
                            img[base + ch] += weight * gr[ch];
                        }
                    }
                }
            }
        });
        acc(grid, &mut |buf| {
            for b in 0..n {
                let img = &xs[b * h * w * c..(b + 1) * h * w * c];
                for p in 0..ho * wo {
                    let (y0, y1, x0, x1, wy, wx, cy, cx) = taps(b, p);
                    let gr = &g[(b * ho * wo + p) * c..(b * ho * wo + p + 1) * c];
                    let (mut dpx, mut dpy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let v00 = img[(y0 * w + x0) * c + ch];
                        let v01 = img[(y0 * w + x1) * c + ch];
                        let v10 = img[(y1 * w + x0) * c + ch];
                        let v11 = img[(y1 * w + x1) * c + ch];
                        dpx += gr[ch] * ((T::one() - wy) * (v01 - v00) + wy * (v11 - v10));
                        dpy += gr[ch] * ((T::one() - wx) * (v10 - v00) + wx * (v11 - v01));
                    }
                    let gi = (b * ho * wo + p) * 2;
                    if !cx {
                        buf[gi] += dpx * half_w;
                    }
                    if !cy {
                        buf[gi + 1] += dpy * half_h;
                    }
                }
            }
        });
    }
}

/// Normalized coordinate of the center of output cell `i` out of `n`.
#[inline]
pub(crate) fn target_coord<T: Scalar>(i: usize, n: usize) -> T {
    T::from_f64c((2 * i + 1) as f64 / n as f64 - 1.0)
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, o) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for (v, dst) in row.iter().zip(o.iter_mut()) {
            *dst = (*v - mx).exp();
            total += *dst;
        }
        o.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}
