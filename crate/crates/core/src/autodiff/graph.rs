use super::kernels::{self, ConvGeom, Padding};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm, used by the
/// caller to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

enum Op<E> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    /// Stored geometry is that of the forward convolution this op is the adjoint of.
    ConvTranspose2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelAvg {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        inv_std: Vec<E>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulBroadcast {
        x: Var,
        m: Var,
    },
    SpatialMask {
        x: Var,
        mask: Vec<E>,
    },
    Scale {
        x: Var,
        factor: E,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Bce {
        pred: Var,
        target: Vec<E>,
        eps: E,
    },
}

struct Node<E> {
    value: Tensor<E>,
    op: Op<E>,
    tracked: bool,
}

/// Tape of recorded operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the recording order is a
/// topological order and `backward` walks it once in reverse.
pub struct Graph<E: Element = f32> {
    nodes: Vec<Node<E>>,
    recording: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph that evaluates ops without keeping backward context.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor; it is differentiated if its `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        let tracked = self.recording && t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<E>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<E> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(E::zero()))
    }

    fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, shape: &[usize], data: Vec<E>, op: Op<E>, inputs: &[Var]) -> Result<Var> {
        let tracked = self.recording && inputs.iter().any(|&v| self.is_tracked(v));
        let value = Tensor::from_vec(shape, data)?;
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn nhwc(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        self.value(v).nhwc(op)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.nhwc(x, "conv2d")?, self.shape(k), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[geom.cout]));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            &geom,
            self.value(k).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        self.push(&geom.out_shape(), out, Op::Conv2d { x, k, bias, geom }, &inputs)
    }

    /// Transposed convolution with no padding.
    ///
    /// The kernel is laid out `kH x kW x Cout x Cin`, the layout of the
    /// forward convolution this op is the adjoint of, so that
    /// `<conv2d_transpose(x, k), y> == <x, conv2d(y, k)>` for a valid,
    /// equally strided `conv2d`.
    pub fn conv2d_transpose(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let [n, h, w, c] = self.nhwc(x, "conv2d_transpose")?;
        let &[kh, kw, cout, kcin] = self.shape(k) else {
            return Err(Error::invalid_shape(
                "conv2d_transpose",
                self.shape(k),
                "kernel must be kH x kW x Cout x Cin",
            ));
        };
        if kcin != c {
            return Err(Error::shape("conv2d_transpose", &[n, h, w, c], self.shape(k)));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d_transpose stride must be positive".into()));
        }
        let oh = (h - 1) * stride + kh;
        let ow = (w - 1) * stride + kw;
        let geom = ConvGeom::new([n, oh, ow, cout], self.shape(k), stride, Padding::Valid)?;
        debug_assert_eq!((geom.oh, geom.ow), (h, w));
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d_transpose bias", self.shape(b), &[cout]));
            }
        }
        let mut out = kernels::conv2d_backward_data(self.value(x).data(), &geom, self.value(k).data());
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for px in out.chunks_exact_mut(cout) {
                for (v, &b) in px.iter_mut().zip(bv) {
                    *v = *v + b;
                }
            }
        }
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        self.push(
            &[n, oh, ow, cout],
            out,
            Op::ConvTranspose2d { x, k, bias, geom },
            &inputs,
        )
    }

    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let shape = self.nhwc(x, "maxpool2d")?;
        let [n, h, w, c] = shape;
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::PaddingRequired {
                height: h,
                width: w,
                multiple: size,
            });
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), shape, size);
        self.push(&[n, h / size, w / size, c], out, Op::MaxPool2d { x, argmax }, &[x])
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.nhwc(x, "channel_max")?;
        let (out, argmax) = kernels::channel_max_forward(self.value(x).data(), c);
        self.push(&[n, h, w, 1], out, Op::ChannelMax { x, argmax }, &[x])
    }

    pub fn channel_avg(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.nhwc(x, "channel_avg")?;
        let out = kernels::channel_avg_forward(self.value(x).data(), c);
        self.push(&[n, h, w, 1], out, Op::ChannelAvg { x }, &[x])
    }

    /// Concatenates along channels; `a` occupies the leading channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, h, w, ca] = self.nhwc(a, "concat_channels")?;
        let [nb, hb, wb, cb] = self.nhwc(b, "concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for (pa, pb) in da.chunks_exact(ca).zip(db.chunks_exact(cb)) {
            out.extend_from_slice(pa);
            out.extend_from_slice(pb);
        }
        self.push(&[n, h, w, ca + cb], out, Op::Concat { a, b }, &[a, b])
    }

    /// Channels `[start, end)` of an NHWC tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [n, h, w, c] = self.nhwc(x, "slice_channels")?;
        if start >= end || end > c {
            return Err(Error::invalid_shape(
                "slice_channels",
                self.shape(x),
                format!("bad channel range {start}..{end}"),
            ));
        }
        let out: Vec<E> = self
            .value(x)
            .data()
            .chunks_exact(c)
            .flat_map(|px| px[start..end].iter().copied())
            .collect();
        self.push(&[n, h, w, end - start], out, Op::SliceChannels { x, start }, &[x])
    }

    /// Batch normalization over N, H, W using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let [n, h, w, c] = self.nhwc(x, "batch_norm")?;
        self.check_affine(gamma, beta, c)?;
        let count = n * h * w;
        if count < 2 {
            return Err(Error::invalid_shape(
                "batch_norm",
                self.shape(x),
                "training mode needs more than one value per channel",
            ));
        }
        let (mean, var) = kernels::channel_moments(self.value(x).data(), c);
        let inv_std: Vec<E> = var.iter().map(|v| E::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean_e: Vec<E> = mean.iter().map(|&m| E::from_f64(m)).collect();
        let (out, xhat) = self.normalize(x, gamma, beta, &mean_e, &inv_std, c);
        let stats = BatchStats { mean, var, count };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: if self.recording { xhat } else { Vec::new() },
            inv_std,
            train: true,
        };
        let v = self.push(&[n, h, w, c], out, op, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[E],
        running_var: &[E],
        eps: f64,
    ) -> Result<Var> {
        let [n, h, w, c] = self.nhwc(x, "batch_norm")?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm running stats", &[running_mean.len()], &[c]));
        }
        let inv_std: Vec<E> = running_var
            .iter()
            .map(|v| E::from_f64(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        let (out, xhat) = self.normalize(x, gamma, beta, running_mean, &inv_std, c);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: if self.recording { xhat } else { Vec::new() },
            inv_std,
            train: false,
        };
        self.push(&[n, h, w, c], out, op, &[x, gamma, beta])
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::shape("batch_norm affine", self.shape(v), &[c]));
            }
        }
        Ok(())
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[E], inv_std: &[E], c: usize) -> (Vec<E>, Vec<E>) {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for px in xs.chunks_exact(c) {
            for ch in 0..c {
                let xh = (px[ch] - mean[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(g[ch] * xh + b[ch]);
            }
        }
        (out, xhat)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t
            .data()
            .iter()
            .map(|&v| if v <= E::zero() { E::zero() } else { v })
            .collect();
        let shape = t.shape().to_vec();
        self.push(&shape, out, Op::Relu { x }, &[x])
    }

    /// Logistic sigmoid, clamped so outputs stay strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let hi = E::one() - E::epsilon() / (E::one() + E::one());
        let lo = E::min_positive_value();
        let out = t
            .data()
            .iter()
            .map(|&v| {
                let s = if v >= E::zero() {
                    E::one() / (E::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (E::one() + e)
                };
                if s.is_nan() {
                    s
                } else {
                    s.max(lo).min(hi)
                }
            })
            .collect();
        let shape = t.shape().to_vec();
        self.push(&shape, out, Op::Sigmoid { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&p, &q)| p + q).collect();
        let shape = ta.shape().to_vec();
        self.push(&shape, out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&p, &q)| p * q).collect();
        let shape = ta.shape().to_vec();
        self.push(&shape, out, Op::Mul { a, b }, &[a, b])
    }

    /// `x * m` where `m` is `N x H x W x 1`, broadcast across the channels of `x`.
    pub fn mul_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let [n, h, w, c] = self.nhwc(x, "mul_broadcast")?;
        if self.shape(m) != [n, h, w, 1] {
            return Err(Error::shape("mul_broadcast", self.shape(x), self.shape(m)));
        }
        let (tx, tm) = (self.value(x).data(), self.value(m).data());
        let mut out = Vec::with_capacity(tx.len());
        for (px, &mv) in tx.chunks_exact(c).zip(tm) {
            out.extend(px.iter().map(|&v| v * mv));
        }
        self.push(&[n, h, w, c], out, Op::MulBroadcast { x, m }, &[x, m])
    }

    /// Multiplies by a constant `N x H x W` mask shared across channels.
    pub fn spatial_mask(&mut self, x: Var, mask: Vec<E>) -> Result<Var> {
        let [n, h, w, c] = self.nhwc(x, "spatial_mask")?;
        if mask.len() != n * h * w {
            return Err(Error::shape("spatial_mask", self.shape(x), &[mask.len()]));
        }
        let tx = self.value(x).data();
        let mut out = Vec::with_capacity(tx.len());
        for (px, &mv) in tx.chunks_exact(c).zip(&mask) {
            out.extend(px.iter().map(|&v| v * mv));
        }
        self.push(&[n, h, w, c], out, Op::SpatialMask { x, mask }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: E) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * factor).collect();
        let shape = t.shape().to_vec();
        self.push(&shape, out, Op::Scale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(&[1], vec![E::from_f64(s)], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).data();
        let s: f64 = t.iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64;
        self.push(&[1], vec![E::from_f64(s)], Op::Mean { x }, &[x])
    }

    /// Mean binary cross-entropy; predictions are clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor<E>, eps: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("bce", p.shape(), target.shape()));
        }
        if let Some(bad) = target.data().iter().find(|&&t| t != E::zero() && t != E::one()) {
            return Err(Error::InvalidValue(format!("bce target must be 0 or 1, found {bad:?}")));
        }
        let mut acc = 0.0f64;
        for (&pv, &tv) in p.data().iter().zip(target.data()) {
            let q = pv.as_f64().clamp(eps, 1.0 - eps);
            acc -= if tv == E::one() { q.ln() } else { (1.0 - q).ln() };
        }
        let loss = acc / p.len() as f64;
        let op = Op::Bce {
            pred,
            target: target.data().to_vec(),
            eps: E::from_f64(eps),
        };
        self.push(&[1], vec![E::from_f64(loss)], op, &[pred])
    }

    /// Populates gradients of every tracked leaf reachable from `loss`.
    ///
    /// Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid_shape(
                "backward",
                self.shape(loss),
                "loss must be a scalar",
            ));
        }
        if !self.is_tracked(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                let merged = match node.value.grad() {
                    Some(prev) => prev.iter().zip(&gy).map(|(&a, &b)| a + b).collect(),
                    None => gy,
                };
                node.value.set_grad(Some(merged));
                continue;
            }
            self.propagate(i, &gy, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[E], grads: &mut [Option<Vec<E>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, g: Vec<E>| accumulate(grads, v, g);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, k, bias, geom } => {
                if tracked(*x) {
                    send(*x, kernels::conv2d_backward_data(gy, geom, val(*k)));
                }
                if tracked(*k) {
                    send(*k, kernels::conv2d_backward_kernel(val(*x), geom, gy));
                }
                if let Some(b) = bias.filter(|&b| tracked(b)) {
                    send(b, kernels::channel_sums(gy, geom.cout));
                }
            }
            Op::ConvTranspose2d { x, k, bias, geom } => {
                if tracked(*x) {
                    send(*x, kernels::conv2d_forward(gy, geom, val(*k), None));
                }
                if tracked(*k) {
                    send(*k, kernels::conv2d_backward_kernel(gy, geom, val(*x)));
                }
                if let Some(b) = bias.filter(|&b| tracked(b)) {
                    send(b, kernels::channel_sums(gy, geom.cin));
                }
            }
            Op::MaxPool2d { x, argmax } | Op::ChannelMax { x, argmax } => {
                if tracked(*x) {
                    let mut dx = vec![E::zero(); val(*x).len()];
                    let c = self.nodes[x.0].value.shape()[3];
                    let per_pixel = matches!(self.nodes[i].op, Op::ChannelMax { .. });
                    for (o, (&g, &a)) in gy.iter().zip(argmax).enumerate() {
                        let idx = if per_pixel { o * c + a as usize } else { a as usize };
                        dx[idx] = dx[idx] + g;
                    }
                    send(*x, dx);
                }
            }
            Op::ChannelAvg { x } => {
                if tracked(*x) {
                    let c = self.nodes[x.0].value.shape()[3];
                    let inv = E::from_f64(1.0 / c as f64);
                    let dx = gy.iter().flat_map(|&g| std::iter::repeat_n(g * inv, c)).collect();
                    send(*x, dx);
                }
            }
            Op::Concat { a, b } => {
                let ca = self.nodes[a.0].value.shape()[3];
                let cb = self.nodes[b.0].value.shape()[3];
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for px in gy.chunks_exact(ca + cb) {
                    da.extend_from_slice(&px[..ca]);
                    db.extend_from_slice(&px[ca..]);
                }
                if tracked(*a) {
                    send(*a, da);
                }
                if tracked(*b) {
                    send(*b, db);
                }
            }
            Op::SliceChannels { x, start } => {
                if tracked(*x) {
                    let c = self.nodes[x.0].value.shape()[3];
                    let width = self.nodes[i].value.shape()[3];
                    let mut dx = vec![E::zero(); val(*x).len()];
                    for (dpx, gpx) in dx.chunks_exact_mut(c).zip(gy.chunks_exact(width)) {
                        dpx[*start..start + width].copy_from_slice(gpx);
                    }
                    send(*x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let g = val(*gamma);
                let m = (gy.len() / c) as f64;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (gp, xp) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_dy[ch] += gp[ch].as_f64();
                        sum_dy_xhat[ch] += (gp[ch] * xp[ch]).as_f64();
                    }
                }
                if tracked(*x) {
                    let mut dx = Vec::with_capacity(gy.len());
                    for (gp, xp) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let d = if *train {
                                // dxhat = dy * gamma, reduced over the batch
                                let dxhat = gp[ch].as_f64();
                                g[ch].as_f64()
                                    * inv_std[ch].as_f64()
                                    * (dxhat - sum_dy[ch] / m - xp[ch].as_f64() * sum_dy_xhat[ch] / m)
                            } else {
                                (gp[ch] * g[ch] * inv_std[ch]).as_f64()
                            };
                            dx.push(E::from_f64(d));
                        }
                    }
                    send(*x, dx);
                }
                if tracked(*gamma) {
                    send(*gamma, sum_dy_xhat.iter().map(|&v| E::from_f64(v)).collect());
                }
                if tracked(*beta) {
                    send(*beta, sum_dy.iter().map(|&v| E::from_f64(v)).collect());
                }
            }
            Op::Relu { x } => {
                if tracked(*x) {
                    let dx = gy
                        .iter()
                        .zip(val(*x))
                        .map(|(&g, &v)| if v > E::zero() { g } else { E::zero() })
                        .collect();
                    send(*x, dx);
                }
            }
            Op::Sigmoid { x } => {
                if tracked(*x) {
                    let out = self.nodes[i].value.data();
                    let dx = gy.iter().zip(out).map(|(&g, &s)| g * s * (E::one() - s)).collect();
                    send(*x, dx);
                }
            }
            Op::Add { a, b } => {
                if tracked(*a) {
                    send(*a, gy.to_vec());
                }
                if tracked(*b) {
                    send(*b, gy.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if tracked(*a) {
                    send(*a, gy.iter().zip(val(*b)).map(|(&g, &v)| g * v).collect());
                }
                if tracked(*b) {
                    send(*b, gy.iter().zip(val(*a)).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::MulBroadcast { x, m } => {
                let c = self.nodes[x.0].value.shape()[3];
                let (xv, mv) = (val(*x), val(*m));
                if tracked(*x) {
                    let mut dx = Vec::with_capacity(gy.len());
                    for (gp, &mm) in gy.chunks_exact(c).zip(mv) {
                        dx.extend(gp.iter().map(|&g| g * mm));
                    }
                    send(*x, dx);
                }
                if tracked(*m) {
                    let dm = gy
                        .chunks_exact(c)
                        .zip(xv.chunks_exact(c))
                        .map(|(gp, xp)| E::from_f64(gp.iter().zip(xp).map(|(&g, &v)| (g * v).as_f64()).sum()))
                        .collect();
                    send(*m, dm);
                }
            }
            Op::SpatialMask { x, mask } => {
                if tracked(*x) {
                    let c = self.nodes[x.0].value.shape()[3];
                    let mut dx = Vec::with_capacity(gy.len());
                    for (gp, &mm) in gy.chunks_exact(c).zip(mask) {
                        dx.extend(gp.iter().map(|&g| g * mm));
                    }
                    send(*x, dx);
                }
            }
            Op::Scale { x, factor } => {
                if tracked(*x) {
                    send(*x, gy.iter().map(|&g| g * *factor).collect());
                }
            }
            Op::Sum { x } => {
                if tracked(*x) {
                    send(*x, vec![gy[0]; val(*x).len()]);
                }
            }
            Op::Mean { x } => {
                if tracked(*x) {
                    let n = val(*x).len();
                    send(*x, vec![gy[0] / E::from_f64(n as f64); n]);
                }
            }
            Op::Bce { pred, target, eps } => {
                if tracked(*pred) {
                    let p = val(*pred);
                    let n = E::from_f64(p.len() as f64);
                    let hi = E::one() - *eps;
                    let dp = p
                        .iter()
                        .zip(target)
                        .map(|(&pv, &tv)| {
                            if pv < *eps || pv > hi {
                                E::zero()
                            } else {
                                gy[0] * ((E::one() - tv) / (E::one() - pv) - tv / pv) / n
                            }
                        })
                        .collect();
                    send(*pred, dp);
                }
            }
        }
    }
}

fn accumulate<E: Element>(grads: &mut [Option<Vec<E>>], v: Var, g: Vec<E>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot => *slot = Some(g),
    }
}
