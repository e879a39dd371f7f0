//! Reverse-mode differentiation tape over dense tensors.
//!
//! Operations append nodes to a [`Tape`]; `backward` walks the record in
//! exact reverse execution order and accumulates leaf gradients additively
//! across all uses. Forward results are deterministic: every kernel fixes
//! its reduction order per output element, so thread count cannot change
//! results bit-for-bit.

use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tensor};
use rayon::prelude::*;

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Region of interest in image pixel coordinates, pooled from one batch entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        // im2col matrices saved per batch entry, (cin*kh*kw) x (oh*ow)
        cols: Vec<Vec<T>>,
    },
    Relu {
        input: TensorId,
    },
    MaxPool2 {
        input: TensorId,
    },
    FullyConnected {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    ConcatChannels {
        inputs: Vec<TensorId>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<i64>,
        probs: Vec<T>,
        counted: usize,
    },
    SmoothL1 {
        pred: TensorId,
        target: TensorId,
        mask: TensorId,
        count: usize,
    },
    PsroiPool {
        feature: TensorId,
        rois: Vec<Roi>,
        grid: usize,
        stride: usize,
    },
    Permute {
        input: TensorId,
        axes: Vec<usize>,
    },
    Reshape {
        input: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        input: TensorId,
        factor: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed differentiable operations.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` pass; `None` if the node did not
    /// require one or was not reached.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// 2-d convolution, NCHW input, OIHW weight, zero padding.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("expected 4-d input/weight, got {xs:?} / {ws:?}")));
        }
        let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias shape {:?} != [{cout}]", b.shape())));
        }
        if stride < 1 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > wdt + 2 * pad {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wdt + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;

        let k = cin * kh * kw;
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let mut cols_all = Vec::with_capacity(n);
        for ni in 0..n {
            let xoff = ni * cin * h * wdt;
            let cols = im2col(&x.data()[xoff..xoff + cin * h * wdt], cin, h, wdt, kh, kw, stride, pad, oh, ow);
            let o = matmul(w.data(), &cols, cout, k, oh * ow);
            let dst = &mut out[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
            for c in 0..cout {
                let bv = b.data()[c];
                for (d, v) in dst[c * oh * ow..(c + 1) * oh * ow].iter_mut().zip(&o[c * oh * ow..(c + 1) * oh * ow]) {
                    *d = *v + bv;
                }
            }
            cols_all.push(cols);
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::from_vec(vec![n, cout, oh, ow], out)?;
        Ok(self.push(value, needs, Op::Conv2d { input, weight, bias, stride, pad, cols: cols_all }))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let v = self.value(input).map(|x| x.max(T::zero()));
        let needs = self.needs(input);
        self.push(v, needs, Op::Relu { input })
    }

    /// 2x2 max pooling with stride 2; requires even spatial dims.
    pub fn max_pool2(&mut self, input: TensorId) -> Result<TensorId> {
        let x = self.value(input);
        let sh = x.shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::shape("max_pool2", format!("expected 4-d input, got {sh:?}")));
        }
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("max_pool2", format!("spatial dims must be even, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let xd = x.data();
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let p = 2 * i * w + 2 * j;
                    let m = src[p].max(src[p + 1]).max(src[p + w]).max(src[p + w + 1]);
                    dst[i * ow + j] = m;
                }
            }
        }
        let needs = self.needs(input);
        let value = Tensor::from_vec(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, needs, Op::MaxPool2 { input }))
    }

    /// Affine map: input [N,K] x weight [K,L] + bias [L] -> [N,L].
    pub fn fully_connected(&mut self, input: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape("fully_connected", format!("expected 2-d input/weight, got {xs:?} / {ws:?}")));
        }
        let (n, k) = (xs[0], xs[1]);
        let (wk, l) = (ws[0], ws[1]);
        if k != wk {
            return Err(Error::shape("fully_connected", format!("inner dims disagree: {k} vs {wk}")));
        }
        if b.shape() != [l] {
            return Err(Error::shape("fully_connected", format!("bias shape {:?} != [{l}]", b.shape())));
        }
        let mut out = matmul(x.data(), w.data(), n, k, l);
        for row in out.chunks_mut(l) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o = *o + *bv;
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::from_vec(vec![n, l], out)?;
        Ok(self.push(value, needs, Op::FullyConnected { input, weight, bias }))
    }

    /// Stack [N,Ci,H,W] tensors along the channel axis in input order.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat_channels", "at least one input required"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if first.len() != 4 {
            return Err(Error::shape("concat_channels", format!("expected 4-d inputs, got {first:?}")));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut ctotal = 0usize;
        for &id in inputs {
            let sh = self.value(id).shape();
            if sh.len() != 4 || sh[0] != n || sh[2] != h || sh[3] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("input shape {sh:?} incompatible with {first:?}"),
                ));
            }
            ctotal += sh[1];
        }
        let mut out = vec![T::zero(); n * ctotal * h * w];
        let hw = h * w;
        for ni in 0..n {
            let mut coff = 0usize;
            for &id in inputs {
                let v = self.value(id);
                let ci = v.shape()[1];
                let src = &v.data()[ni * ci * hw..(ni + 1) * ci * hw];
                let dst = &mut out[ni * ctotal * hw + coff * hw..ni * ctotal * hw + (coff + ci) * hw];
                dst.copy_from_slice(src);
                coff += ci;
            }
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        let value = Tensor::from_vec(vec![n, ctotal, h, w], out)?;
        Ok(self.push(value, needs, Op::ConcatChannels { inputs: inputs.to_vec() }))
    }

    /// Mean negative log-softmax over rows whose label is not `ignore_label`.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[i64], ignore_label: i64) -> Result<TensorId> {
        let x = self.value(logits);
        let sh = x.shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::shape("softmax_cross_entropy", format!("expected 2-d logits, got {sh:?}")));
        }
        let (n, k) = (sh[0], sh[1]);
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{n} logit rows but {} labels", labels.len()),
            ));
        }
        for &lb in labels {
            if lb != ignore_label && (lb < 0 || lb as usize >= k) {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("label {lb} outside [0,{k}) and not ignore_label {ignore_label}"),
                ));
            }
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        let mut counted = 0usize;
        for r in 0..n {
            let row = &x.data()[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                sum = sum + *p;
            }
            for p in probs[r * k..(r + 1) * k].iter_mut() {
                *p = *p / sum;
            }
            if labels[r] != ignore_label {
                let lb = labels[r] as usize;
                // -log softmax, computed from the shifted logits for stability
                loss = loss + (sum.ln() - (row[lb] - max));
                counted += 1;
            }
        }
        let value = if counted > 0 { loss / s::<T>(counted as f64) } else { T::zero() };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(value),
            needs,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs, counted },
        ))
    }

    /// Masked mean of the elementwise smooth-L1 of `pred - target`,
    /// normalized by the number of nonzero mask entries. Empty mask gives 0
    /// with zero gradient. Differentiable in `pred`.
    pub fn smooth_l1(&mut self, pred: TensorId, target: TensorId, mask: TensorId) -> Result<TensorId> {
        let p = self.value(pred);
        let t = self.value(target);
        let m = self.value(mask);
        if p.shape() != t.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "smooth_l1",
                format!("shapes disagree: pred {:?}, target {:?}, mask {:?}", p.shape(), t.shape(), m.shape()),
            ));
        }
        let count = m.data().iter().filter(|v| **v != T::zero()).count();
        let mut loss = T::zero();
        if count > 0 {
            for ((&pv, &tv), &mv) in p.data().iter().zip(t.data()).zip(m.data()) {
                let d = pv - tv;
                let a = d.abs();
                let l = if a < T::one() { s::<T>(0.5) * d * d } else { a - s::<T>(0.5) };
                loss = loss + mv * l;
            }
            loss = loss / s::<T>(count as f64);
        }
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss), needs, Op::SmoothL1 { pred, target, mask, count }))
    }

    /// Position-sensitive ROI pooling: feature [N, S^2*C, H, W] and R rois
    /// give [R, C, S, S]; output bin (c,i,j) averages feature channel
    /// c*S^2 + i*S + j over the bin's cells, and empty bins are 0.
    /// ROI coordinates are image pixels; they are divided by `stride`.
    pub fn psroi_pool(&mut self, feature: TensorId, rois: &[Roi], grid: usize, stride: usize) -> Result<TensorId> {
        let f = self.value(feature);
        let sh = f.shape().to_vec();
        if sh.len() != 4 {
            return Err(Error::shape("psroi_pool", format!("expected 4-d feature, got {sh:?}")));
        }
        let (n, ch, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        if grid == 0 || stride == 0 {
            return Err(Error::invalid("psroi_pool", "grid and stride must be >= 1"));
        }
        if ch % (grid * grid) != 0 {
            return Err(Error::shape(
                "psroi_pool",
                format!("channel count {ch} not divisible by grid^2 = {}", grid * grid),
            ));
        }
        if rois.is_empty() {
            return Err(Error::invalid("psroi_pool", "at least one roi required"));
        }
        for r in rois {
            if r.batch >= n {
                return Err(Error::invalid("psroi_pool", format!("roi batch {} out of range {n}", r.batch)));
            }
        }
        let c = ch / (grid * grid);
        let mut out = vec![T::zero(); rois.len() * c * grid * grid];
        for (ri, roi) in rois.iter().enumerate() {
            let base = roi.batch * ch * h * w;
            for cc in 0..c {
                for i in 0..grid {
                    for j in 0..grid {
                        let (hs, he, ws, we) = psroi_bin_bounds(roi, grid, stride, h, w, i, j);
                        let dst = &mut out[((ri * c + cc) * grid + i) * grid + j];
                        if he > hs && we > ws {
                            let chan = cc * grid * grid + i * grid + j;
                            let mut sum = T::zero();
                            for y in hs..he {
                                let row = base + chan * h * w + y * w;
                                for x in ws..we {
                                    sum = sum + f.data()[row + x];
                                }
                            }
                            *dst = sum / s::<T>(((he - hs) * (we - ws)) as f64);
                        }
                    }
                }
            }
        }
        let needs = self.needs(feature);
        let value = Tensor::from_vec(vec![rois.len(), c, grid, grid], out)?;
        Ok(self.push(value, needs, Op::PsroiPool { feature, rois: rois.to_vec(), grid, stride }))
    }

    /// Axis permutation (generalized transpose).
    pub fn permute(&mut self, input: TensorId, axes: &[usize]) -> Result<TensorId> {
        let x = self.value(input);
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("axes {axes:?} is not a permutation of 0..{rank}")));
        }
        let out = permute_data(x, axes);
        let needs = self.needs(input);
        Ok(self.push(out, needs, Op::Permute { input, axes: axes.to_vec() }))
    }

    pub fn reshape(&mut self, input: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = self.value(input).reshaped(shape)?;
        let needs = self.needs(input);
        Ok(self.push(v, needs, Op::Reshape { input }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(va.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, input: TensorId, factor: T) -> TensorId {
        let v = self.value(input).map(|x| x * factor);
        let needs = self.needs(input);
        self.push(v, needs, Op::Scale { input, factor })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a single-element loss node.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward", "loss must be a single-element tensor"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            // Put it back for callers inspecting intermediate grads.
            self.nodes[i].grad = Some(grad);
            let grad = self.nodes[i].grad.as_ref().unwrap().clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d { input, weight, bias, stride, pad, .. } => {
                    let (input, weight, bias, stride, pad) = (*input, *weight, *bias, *stride, *pad);
                    self.backward_conv2d(i, input, weight, bias, stride, pad, &grad)?;
                }
                Op::Relu { input } => {
                    let input = *input;
                    if self.needs(input) {
                        let dg: Vec<T> = self.nodes[input.0]
                            .value
                            .data()
                            .iter()
                            .zip(&grad)
                            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                            .collect();
                        self.accumulate(input, &dg);
                    }
                }
                Op::MaxPool2 { input } => {
                    let input = *input;
                    if self.needs(input) {
                        let x = &self.nodes[input.0].value;
                        let sh = x.shape();
                        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                        let (oh, ow) = (h / 2, w / 2);
                        let mut dg = vec![T::zero(); x.numel()];
                        for nc in 0..n * c {
                            let src = &x.data()[nc * h * w..(nc + 1) * h * w];
                            let g = &grad[nc * oh * ow..(nc + 1) * oh * ow];
                            let d = &mut dg[nc * h * w..(nc + 1) * h * w];
                            for i2 in 0..oh {
                                for j in 0..ow {
                                    let p = 2 * i2 * w + 2 * j;
                                    // first occurrence in scan order wins ties
                                    let cand = [p, p + 1, p + w, p + w + 1];
                                    let mut best = cand[0];
                                    for &q in &cand[1..] {
                                        if src[q] > src[best] {
                                            best = q;
                                        }
                                    }
                                    d[best] = d[best] + g[i2 * ow + j];
                                }
                            }
                        }
                        self.accumulate(input, &dg);
                    }
                }
                Op::FullyConnected { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let x = &self.nodes[input.0].value;
                    let wv = &self.nodes[weight.0].value;
                    let (n, k) = (x.shape()[0], x.shape()[1]);
                    let l = wv.shape()[1];
                    if self.needs(input) {
                        // dX = dOut . W^T
                        let dx = matmul_abt(&grad, self.nodes[weight.0].value.data(), n, l, k);
                        self.accumulate(input, &dx);
                    }
                    if self.needs(weight) {
                        // dW = X^T . dOut
                        let dw = matmul_atb(self.nodes[input.0].value.data(), &grad, n, k, l);
                        self.accumulate(weight, &dw);
                    }
                    if self.needs(bias) {
                        let mut db = vec![T::zero(); l];
                        for row in grad.chunks(l) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d = *d + g;
                            }
                        }
                        self.accumulate(bias, &db);
                    }
                }
                Op::ConcatChannels { inputs } => {
                    let inputs = inputs.clone();
                    let sh = self.nodes[i].value.shape().to_vec();
                    let (n, ctotal, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let hw = h * w;
                    let mut coff = 0usize;
                    for id in inputs {
                        let ci = self.nodes[id.0].value.shape()[1];
                        if self.needs(id) {
                            let mut dg = vec![T::zero(); n * ci * hw];
                            for ni in 0..n {
                                let src = &grad[ni * ctotal * hw + coff * hw..ni * ctotal * hw + (coff + ci) * hw];
                                dg[ni * ci * hw..(ni + 1) * ci * hw].copy_from_slice(src);
                            }
                            self.accumulate(id, &dg);
                        }
                        coff += ci;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs, counted } => {
                    let logits = *logits;
                    if self.needs(logits) && *counted > 0 {
                        let k = self.nodes[logits.0].value.shape()[1];
                        let scale = grad[0] / s::<T>(*counted as f64);
                        let mut dg = vec![T::zero(); probs.len()];
                        for (r, &lb) in labels.iter().enumerate() {
                            if lb < 0 || lb as usize >= k {
                                continue; // ignore_label row
                            }
                            let lb = lb as usize;
                            for c in 0..k {
                                let onehot = if c == lb { T::one() } else { T::zero() };
                                dg[r * k + c] = scale * (probs[r * k + c] - onehot);
                            }
                        }
                        self.accumulate(logits, &dg);
                    }
                }
                Op::SmoothL1 { pred, target, mask, count } => {
                    let (pred, target, mask, count) = (*pred, *target, *mask, *count);
                    if self.needs(pred) && count > 0 {
                        let p = self.nodes[pred.0].value.data();
                        let t = self.nodes[target.0].value.data();
                        let m = self.nodes[mask.0].value.data();
                        let scale = grad[0] / s::<T>(count as f64);
                        let dg: Vec<T> = p
                            .iter()
                            .zip(t)
                            .zip(m)
                            .map(|((&pv, &tv), &mv)| {
                                let d = pv - tv;
                                let dl = if d.abs() < T::one() { d } else { d.signum() };
                                scale * mv * dl
                            })
                            .collect();
                        self.accumulate(pred, &dg);
                    }
                }
                Op::PsroiPool { feature, rois, grid, stride } => {
                    let (feature, grid, stride) = (*feature, *grid, *stride);
                    let rois = rois.clone();
                    if self.needs(feature) {
                        let fsh = self.nodes[feature.0].value.shape().to_vec();
                        let (_, ch, h, w) = (fsh[0], fsh[1], fsh[2], fsh[3]);
                        let c = ch / (grid * grid);
                        let mut dg = vec![T::zero(); self.nodes[feature.0].value.numel()];
                        for (ri, roi) in rois.iter().enumerate() {
                            let base = roi.batch * ch * h * w;
                            for cc in 0..c {
                                for i2 in 0..grid {
                                    for j in 0..grid {
                                        let (hs, he, ws, we) = psroi_bin_bounds(roi, grid, stride, h, w, i2, j);
                                        if he > hs && we > ws {
                                            let g = grad[((ri * c + cc) * grid + i2) * grid + j]
                                                / s::<T>(((he - hs) * (we - ws)) as f64);
                                            let chan = cc * grid * grid + i2 * grid + j;
                                            for y in hs..he {
                                                let row = base + chan * h * w + y * w;
                                                for x in ws..we {
                                                    dg[row + x] = dg[row + x] + g;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        self.accumulate(feature, &dg);
                    }
                }
                Op::Permute { input, axes } => {
                    let input = *input;
                    let axes = axes.clone();
                    if self.needs(input) {
                        // invert the permutation and permute the gradient back
                        let mut inv = vec![0usize; axes.len()];
                        for (pos, &a) in axes.iter().enumerate() {
                            inv[a] = pos;
                        }
                        let gshape = self.nodes[i].value.shape().to_vec();
                        let gt = Tensor::from_vec(gshape, grad.clone())?;
                        let back = permute_data(&gt, &inv);
                        self.accumulate(input, back.data());
                    }
                }
                Op::Reshape { input } => {
                    let input = *input;
                    if self.needs(input) {
                        self.accumulate(input, &grad);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        self.accumulate(a, &grad);
                    }
                    if self.needs(b) {
                        self.accumulate(b, &grad);
                    }
                }
                Op::Scale { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    if self.needs(input) {
                        let dg: Vec<T> = grad.iter().map(|&g| g * factor).collect();
                        self.accumulate(input, &dg);
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_conv2d(
        &mut self,
        node: usize,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        grad: &[T],
    ) -> Result<()> {
        let xs = self.nodes[input.0].value.shape().to_vec();
        let ws = self.nodes[weight.0].value.shape().to_vec();
        let os = self.nodes[node].value.shape().to_vec();
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let k = cin * kh * kw;

        let needs_w = self.needs(weight);
        let needs_b = self.needs(bias);
        let needs_x = self.needs(input);

        let mut dw = if needs_w { vec![T::zero(); cout * k] } else { Vec::new() };
        let mut db = if needs_b { vec![T::zero(); cout] } else { Vec::new() };
        let mut dx = if needs_x { vec![T::zero(); n * cin * h * w] } else { Vec::new() };

        for ni in 0..n {
            let gout = &grad[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
            let cols = match &self.nodes[node].op {
                Op::Conv2d { cols, .. } => &cols[ni],
                _ => unreachable!(),
            };
            if needs_w {
                // dW += dOut . cols^T
                let part = matmul_abt(gout, cols, cout, oh * ow, k);
                for (d, v) in dw.iter_mut().zip(&part) {
                    *d = *d + *v;
                }
            }
            if needs_b {
                for c in 0..cout {
                    let mut sum = T::zero();
                    for &g in &gout[c * oh * ow..(c + 1) * oh * ow] {
                        sum = sum + g;
                    }
                    db[c] = db[c] + sum;
                }
            }
            if needs_x {
                // dCols = W^T . dOut, then scatter back with col2im
                let wv = self.nodes[weight.0].value.data();
                let dcols = matmul_atb(wv, gout, cout, k, oh * ow);
                col2im_add(
                    &dcols,
                    &mut dx[ni * cin * h * w..(ni + 1) * cin * h * w],
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                );
            }
        }
        if needs_w {
            self.accumulate(weight, &dw);
        }
        if needs_b {
            self.accumulate(bias, &db);
        }
        if needs_x {
            self.accumulate(input, &dx);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &[T]) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (a, &d) in g.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }
}

/// Continuous bin boundaries rounded with floor/ceil and clamped to the map.
fn psroi_bin_bounds(roi: &Roi, grid: usize, stride: usize, h: usize, w: usize, i: usize, j: usize) -> (usize, usize, usize, usize) {
    let st = stride as f64;
    let (rx1, ry1) = (roi.x1 / st, roi.y1 / st);
    let (rx2, ry2) = (roi.x2 / st, roi.y2 / st);
    let bh = (ry2 - ry1) / grid as f64;
    let bw = (rx2 - rx1) / grid as f64;
    let hs = (ry1 + i as f64 * bh).floor().max(0.0).min(h as f64) as usize;
    let he = (ry1 + (i + 1) as f64 * bh).ceil().max(0.0).min(h as f64) as usize;
    let ws = (rx1 + j as f64 * bw).floor().max(0.0).min(w as f64) as usize;
    let we = (rx1 + (j + 1) as f64 * bw).ceil().max(0.0).min(w as f64) as usize;
    (hs, he, ws, we)
}

fn permute_data<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let numel = x.numel();
    let mut out = vec![T::zero(); numel];
    let mut coords = vec![0usize; rank];
    for (oi, slot) in out.iter_mut().enumerate() {
        let mut rem = oi;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0usize;
        for d in 0..rank {
            src += coords[d] * in_strides[axes[d]];
        }
        *slot = x.data()[src];
    }
    Tensor::from_vec(out_shape, out).expect("permute preserves element count")
}

// ── matrix kernels ──────────────────────────────────────────────────
//
// Each output row is produced by exactly one task with a fixed inner
// reduction order, so results are bit-identical for any thread count.

const PAR_MIN_ROWS: usize = 8;

/// C[m,n] = A[m,k] . B[k,n]
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let body = |i: usize, crow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + av * bv;
                }
            }
        }
    };
    if m >= PAR_MIN_ROWS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    c
}

/// C[m,n] = A[m,t] . B[n,t]^T  (rows of A dotted with rows of B)
pub(crate) fn matmul_abt<T: Scalar>(a: &[T], b: &[T], m: usize, t: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let body = |i: usize, crow: &mut [T]| {
        let arow = &a[i * t..(i + 1) * t];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * t..(j + 1) * t];
            let mut sum = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                sum = sum + av * bv;
            }
            *cv = sum;
        }
    };
    if m >= PAR_MIN_ROWS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    c
}

/// C[k,n] = A[m,k]^T . B[m,n]
pub(crate) fn matmul_atb<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    let body = |i: usize, crow: &mut [T]| {
        for p in 0..m {
            let av = a[p * k + i];
            if av != T::zero() {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + av * bv;
                }
            }
        }
    };
    if k >= PAR_MIN_ROWS {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); cin * kh * kw * oh * ow];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = c * h * w + iy as usize * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    x: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = c * h * w + iy as usize * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst + ix as usize] = x[dst + ix as usize] + cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}
