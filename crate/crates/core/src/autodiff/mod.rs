//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a scalar output replays the recorded backward rules
//! in reverse order and returns the gradient of every tracked node.
//! [`Tape::grad_wrt`] computes the gradient with respect to one intermediate
//! activation only, touching just the nodes recorded after it.
//!
//! Parameters are borrowed into the tape (`Tape::param`) so that building a
//! graph per sample does not copy model weights.

pub(crate) mod kernels;

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use kernels::ConvGeometry;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-element operations accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Abs,
    Exp,
    Square,
    Add,
    Sub,
    Mul,
}

impl Elementwise {
    pub fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Unary(Elementwise, Var),
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    Reduce(Reduction, Var),
    Reshape(Var),
    ResizeNearest(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// The lifetime `'p` ties borrowed parameter tensors to the tape.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; `None` when the node does not require gradients
    /// or does not influence the output.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf borrowing a parameter tensor.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Untracked leaf borrowing a tensor (inference-time parameters).
    pub fn frozen(&mut self, value: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Tracked leaf owning its value.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Untracked leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::NotOnTape(var.0))
        }
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D cross-correlation of a `[C_in, H, W]` input with a
    /// `[C_out, C_in, kH, kW]` kernel plus per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input vs kernel channels)",
                left: xs,
                right: ks,
            });
        }
        if bs != [ks[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d (bias vs output channels)",
                left: bs,
                right: ks,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (h, w, kh, kw) = (xs[1], xs[2], ks[2], ks[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                left: xs,
                right: ks,
            });
        }
        let geom = ConvGeometry {
            c_in: xs[0],
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let c_out = ks[0];
        let out = kernels::conv_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new(vec![c_out, geom.out_h, geom.out_w], out)?;
        let requires_grad = self.tracked(&[input, kernel, bias]);
        Ok(self.push(
            Cow::Owned(value),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            requires_grad,
        ))
    }

    /// `weight · input + bias`; the input is flattened to length N.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let ws = self.value(weight).shape().to_vec();
        let n_in = self.value(input).len();
        if ws.len() != 2 || ws[1] != n_in {
            return Err(Error::ShapeMismatch {
                op: "dense (weight vs input)",
                left: ws,
                right: self.value(input).shape().to_vec(),
            });
        }
        if self.value(bias).shape() != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "dense (bias vs weight rows)",
                left: self.value(bias).shape().to_vec(),
                right: ws,
            });
        }
        let mut out = self.value(bias).data().to_vec();
        kernels::gemm(
            ws[0],
            ws[1],
            1,
            self.value(weight).data(),
            false,
            self.value(input).data(),
            false,
            1.0,
            &mut out,
        );
        let requires_grad = self.tracked(&[input, weight, bias]);
        Ok(self.push(
            Cow::Owned(Tensor::vector(out)),
            Op::Dense {
                input,
                weight,
                bias,
            },
            requires_grad,
        ))
    }

    /// Applies a per-element operation. Binary kinds take two operands of
    /// identical shape.
    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        if operands.len() != kind.arity() {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} takes {} operand(s), got {}",
                kind.arity(),
                operands.len()
            )));
        }
        for &v in operands {
            self.check(v)?;
        }
        if kind.arity() == 1 {
            let a = operands[0];
            let value = {
                let x = self.value(a);
                match kind {
                    Elementwise::Relu => x.map(|v| v.max(0.0)),
                    Elementwise::Sigmoid => x.map(sigmoid),
                    Elementwise::Abs => x.map(f64::abs),
                    Elementwise::Exp => x.map(f64::exp),
                    Elementwise::Square => x.map(|v| v * v),
                    _ => unreachable!(),
                }
            };
            let rg = self.tracked(&[a]);
            return Ok(self.push(Cow::Owned(value), Op::Unary(kind, a), rg));
        }
        let (a, b) = (operands[0], operands[1]);
        let (name, f): (&'static str, fn(f64, f64) -> f64) = match kind {
            Elementwise::Add => ("add", |x, y| x + y),
            Elementwise::Sub => ("sub", |x, y| x - y),
            Elementwise::Mul => ("mul", |x, y| x * y),
            _ => unreachable!(),
        };
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Cow::Owned(value), Op::Binary(kind, a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sigmoid, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Abs, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Exp, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Square, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, &[a, b])
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|v| v * factor);
        let rg = self.tracked(&[a]);
        Ok(self.push(Cow::Owned(value), Op::Scale(a, factor), rg))
    }

    pub fn reduce(&mut self, kind: Reduction, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let total = x.sum();
        let value = match kind {
            Reduction::Sum => total,
            Reduction::Mean => total / x.len().max(1) as f64,
        };
        let rg = self.tracked(&[a]);
        Ok(self.push(Cow::Owned(Tensor::scalar(value)), Op::Reduce(kind, a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, a)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(Cow::Owned(value), Op::Reshape(a), rg))
    }

    /// Nearest-neighbour resize of a `[C, h, w]` tensor to `[C, H, W]`.
    pub fn resize_nearest(&mut self, a: Var, target: (usize, usize)) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let s = x.shape();
        if s.len() != 3 || target.0 == 0 || target.1 == 0 {
            return Err(Error::InvalidArgument(format!(
                "resize_nearest needs a [C,h,w] input and nonzero target, got {s:?} -> {target:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (th, tw) = target;
        let mut out = vec![0.0; c * th * tw];
        let src = x.data();
        for ch in 0..c {
            for y in 0..th {
                let sy = kernels::nearest_index(y, h, th);
                for xx in 0..tw {
                    let sx = kernels::nearest_index(xx, w, tw);
                    out[(ch * th + y) * tw + xx] = src[(ch * h + sy) * w + sx];
                }
            }
        }
        let value = Tensor::new(vec![c, th, tw], out)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(Cow::Owned(value), Op::ResizeNearest(a), rg))
    }

    /// Gradients of the scalar `output` with respect to every tracked node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.propagate(output, 0, false)
    }

    /// Gradient of the scalar `output` with respect to the intermediate
    /// node `activation`. Only nodes recorded after `activation` are
    /// visited; no parameter gradients are formed.
    pub fn grad_wrt(&self, output: Var, activation: Var) -> Result<Tensor> {
        self.check(activation)?;
        if activation.0 > output.0 {
            return Err(Error::NotOnTape(activation.0));
        }
        let mut grads = self.propagate(output, activation.0, true)?;
        Ok(grads
            .take(activation)
            .unwrap_or_else(|| Tensor::zeros(self.value(activation).shape())))
    }

    /// Core reverse sweep. Gradients flow into node `j` only when
    /// `j >= stop` and (`force` or the node requires gradients).
    fn propagate(&self, output: Var, stop: usize, force: bool) -> Result<Gradients> {
        self.check(output)?;
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        let wants = |v: Var| v.0 >= stop && (force || self.nodes[v.0].requires_grad);

        for i in (stop..=output.0).rev() {
            if i == stop && stop > 0 {
                break;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let n = geom.out_len();
                    let gd = g.data();
                    if wants(*bias) {
                        let db: Vec<f64> = gd.chunks(n).map(|row| row.iter().sum()).collect();
                        accumulate(&mut grads, *bias, Tensor::vector(db));
                    }
                    let (dk, dx) = kernels::conv_backward(
                        self.value(*input).data(),
                        self.value(*kernel).data(),
                        gd,
                        geom,
                        wants(*kernel),
                        wants(*input),
                    );
                    if let Some(dk) = dk {
                        let kshape = self.value(*kernel).shape().to_vec();
                        accumulate(&mut grads, *kernel, Tensor::new(kshape, dk)?);
                    }
                    if let Some(dx) = dx {
                        let xshape = self.value(*input).shape().to_vec();
                        accumulate(&mut grads, *input, Tensor::new(xshape, dx)?);
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let w = self.value(*weight);
                    let (m, n) = (w.shape()[0], w.shape()[1]);
                    if wants(*bias) {
                        accumulate(&mut grads, *bias, g.clone());
                    }
                    if wants(*weight) {
                        let x = self.value(*input).data();
                        let mut dw = Vec::with_capacity(m * n);
                        for &gi in g.data() {
                            dw.extend(x.iter().map(|&xj| gi * xj));
                        }
                        accumulate(&mut grads, *weight, Tensor::new(vec![m, n], dw)?);
                    }
                    if wants(*input) {
                        let mut dx = vec![0.0; n];
                        kernels::gemm(n, m, 1, w.data(), true, g.data(), false, 0.0, &mut dx);
                        let xshape = self.value(*input).shape().to_vec();
                        accumulate(&mut grads, *input, Tensor::new(xshape, dx)?);
                    }
                }
                Op::Unary(kind, a) => {
                    if wants(*a) {
                        let x = self.value(*a);
                        let y = &node.value;
                        let d: Vec<f64> = match kind {
                            Elementwise::Relu => zip3(g.data(), x.data(), y.data(), |g, x, _| {
                                if x > 0.0 {
                                    g
                                } else {
                                    0.0
                                }
                            }),
                            Elementwise::Sigmoid => {
                                zip3(g.data(), x.data(), y.data(), |g, _, y| g * y * (1.0 - y))
                            }
                            // Subgradient at exactly zero is taken as zero.
                            Elementwise::Abs => zip3(g.data(), x.data(), y.data(), |g, x, _| {
                                if x > 0.0 {
                                    g
                                } else if x < 0.0 {
                                    -g
                                } else {
                                    0.0
                                }
                            }),
                            Elementwise::Exp => zip3(g.data(), x.data(), y.data(), |g, _, y| g * y),
                            Elementwise::Square => {
                                zip3(g.data(), x.data(), y.data(), |g, x, _| 2.0 * g * x)
                            }
                            _ => unreachable!(),
                        };
                        accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), d)?);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (a, b) = (*a, *b);
                    match kind {
                        Elementwise::Add => {
                            if wants(a) {
                                accumulate(&mut grads, a, g.clone());
                            }
                            if wants(b) {
                                accumulate(&mut grads, b, g.clone());
                            }
                        }
                        Elementwise::Sub => {
                            if wants(a) {
                                accumulate(&mut grads, a, g.clone());
                            }
                            if wants(b) {
                                accumulate(&mut grads, b, g.map(|v| -v));
                            }
                        }
                        Elementwise::Mul => {
                            if wants(a) {
                                let d = g.zip_map(self.value(b), "mul backward", |g, y| g * y)?;
                                accumulate(&mut grads, a, d);
                            }
                            if wants(b) {
                                let d = g.zip_map(self.value(a), "mul backward", |g, x| g * x)?;
                                accumulate(&mut grads, b, d);
                            }
                        }
                        _ => unreachable!(),
                    }
                }
                Op::Scale(a, factor) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.map(|v| v * factor));
                    }
                }
                Op::Reduce(kind, a) => {
                    if wants(*a) {
                        let x = self.value(*a);
                        let gv = g.item();
                        let d = match kind {
                            Reduction::Sum => gv,
                            Reduction::Mean => gv / x.len().max(1) as f64,
                        };
                        accumulate(&mut grads, *a, Tensor::full(x.shape(), d));
                    }
                }
                Op::Reshape(a) => {
                    if wants(*a) {
                        let shape = self.value(*a).shape().to_vec();
                        accumulate(&mut grads, *a, g.clone().reshape(&shape)?);
                    }
                }
                Op::ResizeNearest(a) => {
                    if wants(*a) {
                        let x = self.value(*a);
                        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                        let (th, tw) = (g.shape()[1], g.shape()[2]);
                        let mut dx = vec![0.0; c * h * w];
                        let gd = g.data();
                        for ch in 0..c {
                            for y in 0..th {
                                let sy = kernels::nearest_index(y, h, th);
                                for xx in 0..tw {
                                    let sx = kernels::nearest_index(xx, w, tw);
                                    dx[(ch * h + sy) * w + sx] += gd[(ch * th + y) * tw + xx];
                                }
                            }
                        }
                        accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), dx)?);
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip3(g: &[f64], x: &[f64], y: &[f64], f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
    g.iter()
        .zip(x)
        .zip(y)
        .map(|((&g, &x), &y)| f(g, x, y))
        .collect()
}

/// Largest `f64` below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept strictly inside (0, 1) where f64 would round to
/// an endpoint.
#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}
