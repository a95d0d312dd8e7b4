//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] records every executed operation in order, so node inputs
//! always precede the node and a single reverse sweep visits each node once.
//! Leaf gradients accumulate across `backward` calls until
//! [`Graph::zero_grads`] is called.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail_shape, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu { alpha } => {
                if x > T::zero() {
                    x
                } else {
                    T::of(alpha) * x
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu { alpha } => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(alpha)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// Operation tag of a recorded node, without its operands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    GlobalAvgPool,
    Dense,
    Activation(Activation),
    Add,
    Scale,
    Reshape,
    Sum,
    Mean,
    Mse,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeometry, batch: usize },
    ConvTranspose2d { input: Var, kernel: Var, bias: Var, geom: ConvGeometry, batch: usize },
    GlobalAvgPool { input: Var },
    Dense { input: Var, weight: Var, bias: Var },
    Activation { input: Var, kind: Activation },
    Add { lhs: Var, rhs: Var },
    Scale { input: Var, factor: T },
    Reshape { input: Var },
    Sum { input: Var },
    Mean { input: Var },
    Mse { prediction: Var, target: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf. Its `requires_grad` flag decides whether
    /// `backward` produces a gradient for it; any gradient it already
    /// carries is not copied.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(Op::Leaf, shape, tensor.into_data(), requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.clone()).expect("node shape matches value")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn op_kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| match &n.op {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Dense { .. } => OpKind::Dense,
            Op::Activation { kind, .. } => OpKind::Activation(*kind),
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Mse { .. } => OpKind::Mse,
        })
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Convolution of `[N, C, H, W]` input with a `[F, C, kh, kw]` kernel and
    /// `[F]` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 {
            bail_shape!("conv2d expects rank-4 input and kernel, got {:?} and {:?}", xs, ks);
        }
        if xs[1] != ks[1] {
            bail_shape!("conv2d kernel expects {} input channels, input has {}", ks[1], xs[1]);
        }
        if bs != [ks[0]] {
            bail_shape!("conv2d bias {:?} does not match {} filters", bs, ks[0]);
        }
        let (Some(out_h), Some(out_w)) =
            (kernels::conv_out_len(xs[2], ks[2], stride, padding), kernels::conv_out_len(xs[3], ks[3], stride, padding))
        else {
            bail_shape!("conv2d kernel {:?} does not fit input {:?} with stride {} padding {}", ks, xs, stride, padding);
        };
        let geom = ConvGeometry {
            in_channels: xs[1],
            out_channels: ks[0],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            padding,
            in_h: xs[2],
            in_w: xs[3],
            out_h,
            out_w,
        };
        let batch = xs[0];
        let value = kernels::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), batch, &geom);
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(Op::Conv2d { input, kernel, bias, geom, batch }, vec![batch, geom.out_channels, out_h, out_w], value, rg))
    }

    /// Transposed convolution of `[N, C, H, W]` input with a `[C, F, kh, kw]`
    /// kernel and `[F]` bias.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 {
            bail_shape!("conv_transpose2d expects rank-4 input and kernel, got {:?} and {:?}", xs, ks);
        }
        if xs[1] != ks[0] {
            bail_shape!("conv_transpose2d kernel expects {} input channels, input has {}", ks[0], xs[1]);
        }
        if bs != [ks[1]] {
            bail_shape!("conv_transpose2d bias {:?} does not match {} output channels", bs, ks[1]);
        }
        let (Some(out_h), Some(out_w)) = (
            kernels::conv_transpose_out_len(xs[2], ks[2], stride, padding),
            kernels::conv_transpose_out_len(xs[3], ks[3], stride, padding),
        ) else {
            bail_shape!("conv_transpose2d output would be empty for input {:?} kernel {:?}", xs, ks);
        };
        // geometry of the forward convolution this op is the adjoint of
        let geom = ConvGeometry {
            in_channels: ks[1],
            out_channels: ks[0],
            kernel_h: ks[2],
            kernel_w: ks[3],
            stride,
            padding,
            in_h: out_h,
            in_w: out_w,
            out_h: xs[2],
            out_w: xs[3],
        };
        if kernels::conv_out_len(out_h, ks[2], stride, padding) != Some(xs[2])
            || kernels::conv_out_len(out_w, ks[3], stride, padding) != Some(xs[3])
        {
            bail_shape!("conv_transpose2d geometry is not invertible for input {:?} kernel {:?}", xs, ks);
        }
        let batch = xs[0];
        let value = kernels::conv_transpose2d_forward(self.value(input), self.value(kernel), self.value(bias), batch, &geom);
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            Op::ConvTranspose2d { input, kernel, bias, geom, batch },
            vec![batch, geom.in_channels, out_h, out_w],
            value,
            rg,
        ))
    }

    /// Mean over the spatial axes: `[N, C, H, W]` to `[N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            bail_shape!("global_avg_pool expects rank-4 input, got {:?}", xs);
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let count = T::of(hw as f64);
        let value = self.value(input).chunks_exact(hw).map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / count).collect();
        let rg = self.any_grad(&[input]);
        Ok(self.push(Op::GlobalAvgPool { input }, vec![n, c], value, rg))
    }

    /// Affine map `input[N, D] * weight[D, M] + bias[M]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            bail_shape!("dense shapes do not agree: input {:?} weight {:?} bias {:?}", xs, ws, bs);
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut value = Vec::with_capacity(n * m);
        for _ in 0..n {
            value.extend_from_slice(self.value(bias));
        }
        kernels::matmul_acc(self.value(input), self.value(weight), &mut value, n, d, m);
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(Op::Dense { input, weight, bias }, vec![n, m], value, rg))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let value = self.value(input).iter().map(|&x| kind.apply(x)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input]);
        self.push(Op::Activation { input, kind }, shape, value, rg)
    }

    /// Elementwise sum of two equally shaped nodes.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::ShapeMismatch { expected: self.shape(lhs).to_vec(), actual: self.shape(rhs).to_vec() });
        }
        let value = self.value(lhs).iter().zip(self.value(rhs)).map(|(&a, &b)| a + b).collect();
        let shape = self.shape(lhs).to_vec();
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(Op::Add { lhs, rhs }, shape, value, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).iter().map(|&x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.any_grad(&[input]);
        self.push(Op::Scale { input, factor }, shape, value, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(input).len() {
            bail_shape!("cannot reshape {:?} into {:?}", self.shape(input), shape);
        }
        let value = self.value(input).to_vec();
        let rg = self.any_grad(&[input]);
        Ok(self.push(Op::Reshape { input }, shape.to_vec(), value, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.any_grad(&[input]);
        self.push(Op::Sum { input }, vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let vals = self.value(input);
        let s = vals.iter().fold(T::zero(), |a, &v| a + v) / T::of(vals.len() as f64);
        let rg = self.any_grad(&[input]);
        self.push(Op::Mean { input }, vec![1], vec![s], rg)
    }

    /// Mean squared error between two equally shaped nodes. The target must
    /// not require a gradient.
    pub fn mse_loss(&mut self, prediction: Var, target: Var) -> Result<Var> {
        if self.shape(prediction) != self.shape(target) {
            return Err(Error::ShapeMismatch {
                expected: self.shape(prediction).to_vec(),
                actual: self.shape(target).to_vec(),
            });
        }
        if self.requires_grad(target) {
            return Err(Error::Contract("mse_loss target must not require grad".into()));
        }
        let value = mse(self.value(prediction), self.value(target));
        let rg = self.any_grad(&[prediction]);
        Ok(self.push(Op::Mse { prediction, target }, vec![1], vec![value], rg))
    }

    /// Back-propagates from a one-element `loss`, adding d(loss)/d(leaf) into
    /// every leaf that requires a gradient. Leaves the loss does not depend
    /// on receive a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let acc = node.grad.get_or_insert_with(|| vec![T::zero(); node.value.len()]);
            if let Some(Some(g)) = grads.get(id) {
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, batch } => {
                let (mut dx, mut dk, mut db) = (self.slot(input), self.slot(kernel), self.slot(bias));
                kernels::conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    batch,
                    &geom,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                merge(grads, input, dx);
                merge(grads, kernel, dk);
                merge(grads, bias, db);
            }
            Op::ConvTranspose2d { input, kernel, bias, geom, batch } => {
                let (mut dx, mut dk, mut db) = (self.slot(input), self.slot(kernel), self.slot(bias));
                kernels::conv_transpose2d_backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    batch,
                    &geom,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                merge(grads, input, dx);
                merge(grads, kernel, dk);
                merge(grads, bias, db);
            }
            Op::GlobalAvgPool { input } => {
                let xs = self.shape(input);
                let hw = xs[2] * xs[3];
                let inv = T::one() / T::of(hw as f64);
                let dx = g.iter().flat_map(|&v| core::iter::repeat(v * inv).take(hw)).collect();
                merge(grads, input, Some(dx));
            }
            Op::Dense { input, weight, bias } => {
                let (n, d) = (self.shape(input)[0], self.shape(input)[1]);
                let m = self.shape(weight)[1];
                if let Some(mut dx) = self.slot(input) {
                    kernels::matmul_a_bt_acc(g, self.value(weight), &mut dx, n, m, d);
                    merge(grads, input, Some(dx));
                }
                if let Some(mut dw) = self.slot(weight) {
                    kernels::matmul_at_b_acc(self.value(input), g, &mut dw, d, n, m);
                    merge(grads, weight, Some(dw));
                }
                if let Some(mut db) = self.slot(bias) {
                    for row in g.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    merge(grads, bias, Some(db));
                }
            }
            Op::Activation { input, kind } => {
                let dx = self
                    .value(input)
                    .iter()
                    .zip(&node.value)
                    .zip(g)
                    .map(|((&x, &y), &gy)| gy * kind.derivative(x, y))
                    .collect();
                merge(grads, input, Some(dx));
            }
            Op::Add { lhs, rhs } => {
                if self.requires_grad(lhs) {
                    merge(grads, lhs, Some(g.to_vec()));
                }
                if self.requires_grad(rhs) {
                    merge(grads, rhs, Some(g.to_vec()));
                }
            }
            Op::Scale { input, factor } => {
                merge(grads, input, Some(g.iter().map(|&v| v * factor).collect()));
            }
            Op::Reshape { input } => merge(grads, input, Some(g.to_vec())),
            Op::Sum { input } => {
                merge(grads, input, Some(vec![g[0]; self.value(input).len()]));
            }
            Op::Mean { input } => {
                let len = self.value(input).len();
                merge(grads, input, Some(vec![g[0] / T::of(len as f64); len]));
            }
            Op::Mse { prediction, target } => {
                let p = self.value(prediction);
                let scale = T::of(2.0) * g[0] / T::of(p.len() as f64);
                let dx = p.iter().zip(self.value(target)).map(|(&a, &b)| scale * (a - b)).collect();
                merge(grads, prediction, Some(dx));
            }
        }
    }

    /// Zeroed gradient buffer for `v`, or `None` when `v` needs no gradient.
    fn slot(&self, v: Var) -> Option<Vec<T>> {
        self.requires_grad(v).then(|| vec![T::zero(); self.value(v).len()])
    }
}

fn merge<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Plain mean squared error of two equally long slices.
pub fn mse<T: Real>(prediction: &[T], target: &[T]) -> T {
    let sum = prediction.iter().zip(target).fold(T::zero(), |acc, (&a, &b)| {
        let d = a - b;
        acc + d * d
    });
    sum / T::of(prediction.len() as f64)
}
