//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! [`Tape::backward`] walks the tape from the loss toward the leaves and
//! returns a [`Gradients`] table. Nodes that do not depend on any leaf created
//! with `requires_grad` are skipped entirely during the backward pass.

mod conv;
mod gradcheck;
mod norm;
mod optim;

pub use gradcheck::{grad_check, max_relative_error, numeric_gradient};
pub use norm::{batchnorm_apply, BatchStatVars, BatchStats, BnLayerState, BnMode};
pub use optim::{poly_decay_lr, OptimizerState};

use rustfft::num_complex::Complex64;

use crate::error::{ensure, Result};
use crate::spectral::{centered_index, Fft2};
use crate::tensor::Tensor;

/// Lower/upper clamp applied to predictions before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Down2Avg,
    Up2Nearest,
}

/// How a spectral offset combines with an image's amplitude spectrum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralCombine {
    Add,
    Mul,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    BroadcastAdd {
        batch: Var,
        offset: Var,
    },
    BroadcastMul {
        batch: Var,
        factor: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        std: Vec<f64>,
    },
    BatchMean(Var),
    BatchStd {
        input: Var,
        norm_node: usize,
    },
    BnEval {
        input: Var,
        scale: Var,
        shift: Var,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Down2(Var),
    Up2(Var),
    Concat(Var, Var),
    L1(Var, Var),
    Bce {
        pred: Var,
        target: Var,
    },
    SpectralOffset {
        batch: Var,
        offset: Var,
        combine: SpectralCombine,
        unit_phase: Vec<Complex64>,
        amplitude: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; all zeros when `v` is not on a path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let value = Tensor::from_fn(va.shape(), |i| va.data()[i] * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `batch[n] + offset` for every item of the leading axis.
    ///
    /// Entries where the offset is exactly zero are copied, so a zero offset
    /// is a bitwise pass-through even for negative zeros.
    pub fn broadcast_add(&mut self, batch: Var, offset: Var) -> Result<Var> {
        let item = self.broadcast_item_len(batch, offset)?;
        let vb = self.value(batch);
        let vo = self.value(offset).data();
        let value = Tensor::from_fn(vb.shape(), |i| match vo[i % item] {
            0.0 => vb.data()[i],
            o => vb.data()[i] + o,
        });
        let rg = self.any_grad(&[batch, offset]);
        Ok(self.push(value, Op::BroadcastAdd { batch, offset }, rg))
    }

    /// `batch[n] * factor` for every item of the leading axis.
    pub fn broadcast_mul(&mut self, batch: Var, factor: Var) -> Result<Var> {
        let item = self.broadcast_item_len(batch, factor)?;
        let vb = self.value(batch);
        let vf = self.value(factor).data();
        let value = Tensor::from_fn(vb.shape(), |i| vb.data()[i] * vf[i % item]);
        let rg = self.any_grad(&[batch, factor]);
        Ok(self.push(value, Op::BroadcastMul { batch, factor }, rg))
    }

    fn broadcast_item_len(&self, batch: Var, item: Var) -> Result<usize> {
        let bs = self.shape(batch);
        let is = self.shape(item);
        ensure!(
            bs.len() == is.len() + 1 && &bs[1..] == is,
            "broadcast: item shape {is:?} does not match batch shape {bs:?}"
        );
        Ok(self.value(item).len())
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = conv::Geometry::new(
            self.shape(input),
            self.shape(kernel),
            self.shape(bias),
            stride,
            padding,
        )?;
        let value = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let v = self.value(input);
        let rg = self.any_grad(&[input]);
        match kind {
            Activation::Relu => {
                let value = Tensor::from_fn(v.shape(), |i| v.data()[i].max(0.0));
                self.push(value, Op::Relu(input), rg)
            }
            Activation::Sigmoid => {
                let value = Tensor::from_fn(v.shape(), |i| sigmoid(v.data()[i]));
                self.push(value, Op::Sigmoid(input), rg)
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn resample(&mut self, input: Var, kind: Resample) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        ensure!(shape.len() == 4, "resample expects NCHW, got {shape:?}");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let x = self.value(input).data();
        let rg = self.any_grad(&[input]);
        match kind {
            Resample::Down2Avg => {
                ensure!(
                    h % 2 == 0 && w % 2 == 0,
                    "down2_avg needs even spatial size, got {h}x{w}"
                );
                let (ho, wo) = (h / 2, w / 2);
                let mut out = vec![0.0; n * c * ho * wo];
                for plane in 0..n * c {
                    let src = &x[plane * h * w..(plane + 1) * h * w];
                    let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
                    for i in 0..ho {
                        for j in 0..wo {
                            let r0 = 2 * i * w + 2 * j;
                            let r1 = r0 + w;
                            dst[i * wo + j] = 0.25 * (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]);
                        }
                    }
                }
                let value = Tensor::new(vec![n, c, ho, wo], out)?;
                Ok(self.push(value, Op::Down2(input), rg))
            }
            Resample::Up2Nearest => {
                let (ho, wo) = (h * 2, w * 2);
                let mut out = vec![0.0; n * c * ho * wo];
                for plane in 0..n * c {
                    let src = &x[plane * h * w..(plane + 1) * h * w];
                    let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
                    for i in 0..ho {
                        for j in 0..wo {
                            dst[i * wo + j] = src[(i / 2) * w + j / 2];
                        }
                    }
                }
                let value = Tensor::new(vec![n, c, ho, wo], out)?;
                Ok(self.push(value, Op::Up2(input), rg))
            }
        }
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        ensure!(
            sa.len() == 4 && sb.len() == 4 && sa[0] == sb[0] && sa[2..] == sb[2..],
            "concat: incompatible shapes {sa:?} and {sb:?}"
        );
        let (n, plane) = (sa[0], sa[2] * sa[3]);
        let (la, lb) = (sa[1] * plane, sb[1] * plane);
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let mut out = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            out.extend_from_slice(&xa[s * la..(s + 1) * la]);
            out.extend_from_slice(&xb[s * lb..(s + 1) * lb]);
        }
        let value = Tensor::new(vec![n, sa[1] + sb[1], sa[2], sa[3]], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Mean absolute difference. The subgradient at ties is zero.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1_distance")?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y).abs()).sum();
        let value = Tensor::scalar(s / va.len() as f64);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::L1(a, b), rg))
    }

    /// Mean binary cross-entropy of predictions against {0,1} targets.
    pub fn binary_cross_entropy(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "binary_cross_entropy")?;
        let p = self.value(pred).data();
        let y = self.value(target).data();
        ensure!(
            y.iter().all(|&t| t == 0.0 || t == 1.0),
            "binary_cross_entropy targets must be 0 or 1"
        );
        let s: f64 = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                if y == 1.0 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        let value = Tensor::scalar(s / p.len() as f64);
        let rg = self.any_grad(&[pred]);
        Ok(self.push(value, Op::Bce { pred, target }, rg))
    }

    /// Combine a DC-centered spectral offset `[C,H,W]` with the amplitude
    /// spectrum of every image in `batch` `[N,C,H,W]`, keep each image's
    /// phase, and return the real part of the inverse transform.
    ///
    /// Gradients flow to `offset` only.
    pub fn spectral_offset(
        &mut self,
        batch: Var,
        offset: Var,
        combine: SpectralCombine,
    ) -> Result<Var> {
        let plane_len = self.broadcast_item_len(batch, offset)?;
        let shape = self.shape(batch).to_vec();
        ensure!(shape.len() == 4, "spectral_offset expects NCHW, got {shape:?}");
        let (h, w) = (shape[2], shape[3]);
        let fft = Fft2::new(h, w);
        let x = self.value(batch).data();
        let off = self.value(offset).data();
        let hw = h * w;
        let mut unit_phase = Vec::with_capacity(x.len());
        let mut amplitude = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        let mut buf = vec![Complex64::new(0.0, 0.0); hw];
        for (p, plane) in x.chunks(hw).enumerate() {
            let item_plane = &off[(p * hw) % plane_len..(p * hw) % plane_len + hw];
            for (b, &v) in buf.iter_mut().zip(plane) {
                *b = Complex64::new(v, 0.0);
            }
            fft.forward(&mut buf);
            for (k, z) in buf.iter_mut().enumerate() {
                let amp = z.norm();
                let u = if amp > 0.0 { *z / amp } else { Complex64::new(1.0, 0.0) };
                let o = item_plane[centered_index(k, h, w)];
                let new_amp = match combine {
                    SpectralCombine::Add => amp + o,
                    SpectralCombine::Mul => amp * o,
                };
                unit_phase.push(u);
                amplitude.push(amp);
                *z = u * new_amp;
            }
            fft.inverse(&mut buf);
            out.extend(buf.iter().map(|z| z.re));
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[offset]);
        Ok(self.push(
            value,
            Op::SpectralOffset {
                batch,
                offset,
                combine,
                unit_phase,
                amplitude,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).is_scalar(),
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, g, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, |d| axpy(d, g, *f)),
            Op::Sum(a) => self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let m = g[0] / self.value(*a).len() as f64;
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|d| *d += m));
            }
            Op::BroadcastAdd { batch, offset } => {
                self.accumulate(grads, *batch, |d| axpy(d, g, 1.0));
                self.accumulate(grads, *offset, |d| {
                    for chunk in g.chunks(d.len()) {
                        axpy(d, chunk, 1.0);
                    }
                });
            }
            Op::BroadcastMul { batch, factor } => {
                let vb = self.value(*batch).data();
                let vf = self.value(*factor).data();
                self.accumulate(grads, *batch, |d| {
                    let m = vf.len();
                    for (i, (d, g)) in d.iter_mut().zip(g).enumerate() {
                        *d += g * vf[i % m];
                    }
                });
                self.accumulate(grads, *factor, |d| {
                    let m = d.len();
                    for (i, (g, x)) in g.iter().zip(vb).enumerate() {
                        d[i % m] += g * x;
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let geom = conv::Geometry::new(
                    self.shape(*input),
                    self.shape(*kernel),
                    self.shape(*bias),
                    *stride,
                    *padding,
                )
                .expect("conv geometry validated in forward");
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                self.accumulate(grads, *input, |d| conv::backward(&geom, x, k, g, Some(d), None));
                self.accumulate(grads, *kernel, |d| conv::backward(&geom, x, k, g, None, Some(d)));
                self.accumulate(grads, *bias, |d| conv::bias_grad(&geom, g, d));
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                std,
            } => {
                let (input, scale, shift) = (*input, *scale, *shift);
                let gamma = self.value(scale).data();
                let shape = self.shape(input);
                let (dscale, dshift) = if self.requires_grad(input) {
                    let d = grads[input.0].get_or_insert_with(|| vec![0.0; xhat.len()]);
                    norm::batchnorm_backward(shape, g, xhat, std, gamma, Some(d))
                } else {
                    norm::batchnorm_backward(shape, g, xhat, std, gamma, None)
                };
                self.accumulate(grads, scale, |d| axpy(d, &dscale, 1.0));
                self.accumulate(grads, shift, |d| axpy(d, &dshift, 1.0));
            }
            Op::BatchMean(input) => {
                let shape = self.shape(*input).to_vec();
                self.accumulate(grads, *input, |d| norm::batch_mean_backward(&shape, g, d));
            }
            Op::BatchStd { input, norm_node } => {
                let shape = self.shape(*input).to_vec();
                let Op::BatchNorm { xhat, .. } = &self.nodes[*norm_node].op else {
                    unreachable!("BatchStd always references a BatchNorm node")
                };
                self.accumulate(grads, *input, |d| {
                    norm::batch_std_backward(&shape, g, xhat, d)
                });
            }
            Op::BnEval {
                input,
                scale,
                shift,
                mean,
                std,
            } => {
                let shape = self.shape(*input).to_vec();
                let x = self.value(*input).data();
                let gamma = self.value(*scale).data();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                let ch = |i: usize| (i / plane) % c;
                self.accumulate(grads, *input, |d| {
                    for (i, (d, g)) in d.iter_mut().zip(g).enumerate() {
                        *d += g * gamma[ch(i)] / std[ch(i)];
                    }
                });
                self.accumulate(grads, *scale, |d| {
                    for (i, (g, x)) in g.iter().zip(x).enumerate() {
                        let k = ch(i);
                        d[k] += g * (x - mean[k]) / std[k];
                    }
                });
                self.accumulate(grads, *shift, |d| {
                    for (i, g) in g.iter().enumerate() {
                        d[ch(i)] += g;
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Down2(a) => {
                let s = self.shape(*a).to_vec();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                self.accumulate(grads, *a, |d| {
                    for plane in 0..s[0] * s[1] {
                        let gp = &g[plane * ho * wo..(plane + 1) * ho * wo];
                        let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                dp[i * w + j] += 0.25 * gp[(i / 2) * wo + j / 2];
                            }
                        }
                    }
                });
            }
            Op::Up2(a) => {
                let s = self.shape(*a).to_vec();
                let (h, w) = (s[2], s[3]);
                let wo = 2 * w;
                self.accumulate(grads, *a, |d| {
                    for plane in 0..s[0] * s[1] {
                        let gp = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                let r0 = 2 * i * wo + 2 * j;
                                let r1 = r0 + wo;
                                dp[i * w + j] += gp[r0] + gp[r0 + 1] + gp[r1] + gp[r1 + 1];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let plane = sa[2] * sa[3];
                let (la, lb) = (sa[1] * plane, sb[1] * plane);
                let n = sa[0];
                self.accumulate(grads, *a, |d| {
                    for s in 0..n {
                        let src = &g[s * (la + lb)..s * (la + lb) + la];
                        axpy(&mut d[s * la..(s + 1) * la], src, 1.0);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for s in 0..n {
                        let src = &g[s * (la + lb) + la..(s + 1) * (la + lb)];
                        axpy(&mut d[s * lb..(s + 1) * lb], src, 1.0);
                    }
                });
            }
            Op::L1(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let m = g[0] / va.len() as f64;
                let sign = |x: f64, y: f64| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.accumulate(grads, *a, |d| {
                    for ((d, x), y) in d.iter_mut().zip(va).zip(vb) {
                        *d += m * sign(*x, *y);
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, x), y) in d.iter_mut().zip(va).zip(vb) {
                        *d -= m * sign(*x, *y);
                    }
                });
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred).data();
                let y = self.value(*target).data();
                let m = g[0] / p.len() as f64;
                self.accumulate(grads, *pred, |d| {
                    for ((d, &p), &y) in d.iter_mut().zip(p).zip(y) {
                        if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        *d += m * if y == 1.0 { -1.0 / p } else { 1.0 / (1.0 - p) };
                    }
                });
            }
            Op::SpectralOffset {
                batch,
                offset,
                combine,
                unit_phase,
                amplitude,
            } => {
                let shape = self.shape(*batch);
                let (h, w) = (shape[2], shape[3]);
                let hw = h * w;
                let fft = Fft2::new(h, w);
                self.accumulate(grads, *offset, |d| {
                    let item_len = d.len();
                    let mut buf = vec![Complex64::new(0.0, 0.0); hw];
                    for (p, gp) in g.chunks(hw).enumerate() {
                        for (b, &v) in buf.iter_mut().zip(gp) {
                            *b = Complex64::new(v, 0.0);
                        }
                        // Adjoint of Re(ifft(u * a)) with respect to a.
                        fft.inverse(&mut buf);
                        let base = (p * hw) % item_len;
                        for (k, z) in buf.iter().enumerate() {
                            let u = unit_phase[p * hw + k];
                            let mut v = (u * z).re;
                            if *combine == SpectralCombine::Mul {
                                v *= amplitude[p * hw + k];
                            }
                            d[base + centered_index(k, h, w)] += v;
                        }
                    }
                });
            }
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
