//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every operation appends one node whose inputs are earlier nodes, so the
//! node list is already in topological order and the backward pass is a
//! single reverse sweep.

use super::kernels::{self, BnSaved, ConvGeom};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Floor applied to probabilities inside [`Tape::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnParams {
    pub eps: f64,
    /// Weight of the current batch in the running-stat moving average.
    pub momentum: f64,
}

impl Default for BnParams {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Up2 {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Concat(Var, Var),
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        target: Tensor<T>,
    },
    Scale(Var, T),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`] for leaf nodes, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
        stride: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        let [f, wc, kh, kw] = self.value(weight).dims4()?;
        if wc != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels, weight expects {wc}"
            )));
        }
        if kh != kw {
            return Err(Error::shape("conv2d: only square kernels are supported"));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d: stride must be positive"));
        }
        if kh > h + 2 * padding || kh > w + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh} larger than padded input {h}x{w}+2*{padding}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [f] {
                return Err(Error::shape(format!(
                    "conv2d: bias shape {:?}, expected [{f}]",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            k: kh,
            pad: padding,
            stride,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kh) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, f, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
    /// Weight layout is `[in_channels, out_channels, 2, 2]`.
    pub fn transposed_conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let [wc, f, kh, kw] = self.value(weight).dims4()?;
        if wc != dims[1] || kh != 2 || kw != 2 {
            return Err(Error::shape(format!(
                "transposed_conv2d: weight {:?} incompatible with input channels {}",
                self.value(weight).shape(),
                dims[1]
            )));
        }
        if self.value(bias).shape() != [f] {
            return Err(Error::shape("transposed_conv2d: bias shape mismatch"));
        }
        let out = kernels::up2_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            dims,
            f,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(vec![dims[0], f, dims[2] * 2, dims[3] * 2], out)?;
        Ok(self.push(
            value,
            Op::Up2 {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization. In train mode `running` is updated
    /// from the batch statistics; in eval mode it is used for normalization.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: &mut RunningStats<T>,
        params: BnParams,
    ) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let [n, c, h, w] = dims;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "batch_norm: gamma/beta must have shape [{c}]"
            )));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::shape("batch_norm: running stats channel mismatch"));
        }
        let eps = T::from_f64(params.eps);
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        match mode {
            BnMode::Train => {
                let count = n * h * w;
                if count < 2 {
                    return Err(Error::DegenerateVariance(format!(
                        "train-mode batch norm needs at least 2 values per channel, got {count}"
                    )));
                }
                let (y, saved) = kernels::batch_norm_train(
                    self.value(input).data(),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    dims,
                    eps,
                );
                let mom = T::from_f64(params.momentum);
                let unbias = T::from_f64(count as f64 / (count - 1) as f64);
                for ch in 0..c {
                    running.mean[ch] =
                        (T::one() - mom) * running.mean[ch] + mom * saved.batch_mean[ch];
                    running.var[ch] =
                        (T::one() - mom) * running.var[ch] + mom * saved.batch_var[ch] * unbias;
                }
                let value = Tensor::new(dims.to_vec(), y)?;
                Ok(self.push(
                    value,
                    Op::BatchNormTrain {
                        input,
                        gamma,
                        beta,
                        saved,
                    },
                    rg,
                ))
            }
            BnMode::Eval => {
                let x = self.value(input).data();
                let g = self.value(gamma).data();
                let b = self.value(beta).data();
                let inv_std: Vec<T> = running
                    .var
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                let hw = h * w;
                let mut xhat = vec![T::zero(); x.len()];
                let mut y = vec![T::zero(); x.len()];
                for (i, (&xi, (xh, yi))) in x.iter().zip(xhat.iter_mut().zip(&mut y)).enumerate() {
                    let ch = (i / hw) % c;
                    *xh = (xi - running.mean[ch]) * inv_std[ch];
                    *yi = g[ch] * *xh + b[ch];
                }
                let value = Tensor::new(dims.to_vec(), y)?;
                Ok(self.push(
                    value,
                    Op::BatchNormEval {
                        input,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                    rg,
                ))
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Relu(input), rg)
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        if dims[2] % 2 != 0 || dims[3] % 2 != 0 {
            return Err(Error::arg(format!(
                "max_pool2d: spatial dims {}x{} must be even",
                dims[2], dims[3]
            )));
        }
        let (out, argmax) = kernels::max_pool2_forward(self.value(input).data(), dims);
        let value = Tensor::new(vec![dims[0], dims[1], dims[2] / 2, dims[3] / 2], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&db[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Softmax over the channel (class) axis of an NCHW tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let y = kernels::softmax_channels(self.value(input).data(), dims);
        let value = Tensor::new(dims.to_vec(), y)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Softmax(input), rg))
    }

    /// Mean per-pixel cross-entropy `-(1/NHW) sum t_c ln max(p_c, floor)`
    /// between a two-class probability map and a constant target of equal
    /// shape (one-hot labels or soft teacher probabilities).
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let [n, c, h, w] = self.value(probs).dims4()?;
        if c != 2 {
            return Err(Error::arg(format!(
                "cross_entropy: class axis must have size 2, got {c}"
            )));
        }
        if target.shape() != self.value(probs).shape() {
            return Err(Error::shape(format!(
                "cross_entropy: target {:?} vs prediction {:?}",
                target.shape(),
                self.value(probs).shape()
            )));
        }
        let hw = h * w;
        let t = target.data();
        for b in 0..n {
            for p in 0..hw {
                let s = t[b * 2 * hw + p] + t[b * 2 * hw + hw + p];
                if (s.as_f64() - 1.0).abs() > 1e-4 || t[b * 2 * hw + p] < T::zero() {
                    return Err(Error::arg(
                        "cross_entropy: target rows must be distributions over the class axis",
                    ));
                }
            }
        }
        let floor = T::from_f64(PROB_FLOOR);
        let p = self.value(probs).data();
        let total: T = p
            .iter()
            .zip(t)
            .map(|(&pi, &ti)| ti * pi.max(floor).ln())
            .sum();
        let loss = -total / T::from_f64((n * hw) as f64);
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                target: target.clone(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v * factor).collect(),
        )
        .expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Scale(input, factor), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| u + v).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| u * v).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    /// Back-propagates from a single-element `output`, visiting each node
    /// at most once in reverse recording order.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    self.rg(*input),
                );
                if let Some(dx) = dx {
                    add_into(&mut grads[input.0], dx);
                }
                if self.rg(*weight) {
                    add_into(&mut grads[weight.0], dw);
                }
                if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Up2 {
                input,
                weight,
                bias,
            } => {
                let dims = self.value(*input).dims4()?;
                let f = self.value(*weight).shape()[1];
                let (dx, dw, db) = kernels::up2_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    dims,
                    f,
                    self.rg(*input),
                );
                if let Some(dx) = dx {
                    add_into(&mut grads[input.0], dx);
                }
                if self.rg(*weight) {
                    add_into(&mut grads[weight.0], dw);
                }
                if self.rg(*bias) {
                    add_into(&mut grads[bias.0], db);
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                saved,
            } => {
                let dims = self.value(*input).dims4()?;
                let (dx, dg, db) = kernels::batch_norm_train_backward(
                    g,
                    self.value(*gamma).data(),
                    saved,
                    dims,
                );
                if self.rg(*input) {
                    add_into(&mut grads[input.0], dx);
                }
                if self.rg(*gamma) {
                    add_into(&mut grads[gamma.0], dg);
                }
                if self.rg(*beta) {
                    add_into(&mut grads[beta.0], db);
                }
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [_, c, h, w] = self.value(*input).dims4()?;
                let hw = h * w;
                let gm = self.value(*gamma).data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (i, &gi) in g.iter().enumerate() {
                    let ch = (i / hw) % c;
                    dx[i] = gi * gm[ch] * inv_std[ch];
                    dg[ch] += gi * xhat[i];
                    db[ch] += gi;
                }
                if self.rg(*input) {
                    add_into(&mut grads[input.0], dx);
                }
                if self.rg(*gamma) {
                    add_into(&mut grads[gamma.0], dg);
                }
                if self.rg(*beta) {
                    add_into(&mut grads[beta.0], db);
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    dx[src as usize] += gi;
                }
                add_into(&mut grads[input.0], dx);
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let ct = ca + cb;
                if self.rg(*a) {
                    let mut da = Vec::with_capacity(n * ca * hw);
                    for i in 0..n {
                        da.extend_from_slice(&g[i * ct * hw..(i * ct + ca) * hw]);
                    }
                    add_into(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for i in 0..n {
                        db.extend_from_slice(&g[(i * ct + ca) * hw..(i + 1) * ct * hw]);
                    }
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Softmax(input) => {
                let dims = node.value.dims4()?;
                let dx = kernels::softmax_channels_backward(node.value.data(), g, dims);
                add_into(&mut grads[input.0], dx);
            }
            Op::CrossEntropy { probs, target } => {
                let [n, _, h, w] = self.value(*probs).dims4()?;
                let coef = g[0] / T::from_f64((n * h * w) as f64);
                let floor = T::from_f64(PROB_FLOOR);
                let dp = self
                    .value(*probs)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| if p > floor { -(t / p) * coef } else { T::zero() })
                    .collect();
                add_into(&mut grads[probs.0], dp);
            }
            Op::Scale(input, factor) => {
                let dx = g.iter().map(|&gi| gi * *factor).collect();
                add_into(&mut grads[input.0], dx);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g.iter().zip(x).map(|(&gi, &xi)| gi * xi).collect());
                }
            }
            Op::Sum(input) => {
                let n = self.value(*input).numel();
                add_into(&mut grads[input.0], vec![g[0]; n]);
            }
        }
        Ok(())
    }
}
