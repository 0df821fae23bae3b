//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward rule. Node indices are a topological order by
//! construction (inputs always precede outputs), so [`Tape::backward`] is a
//! single reverse sweep that visits each node once.
//!
//! A tape has a single writer; build one per forward pass.

use crate::error::{Error, Result};
use crate::nn::{self, kernels};
use crate::pyramid;
use crate::tensor::{ensure_finite, ensure_same_shape, Scalar, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Concat(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    TransposeConv2d { x: Var, w: Var, b: Var },
    InstanceNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    LeakyRelu { x: Var, slope: f64 },
    PyrDown(Var),
    PyrUp(Var),
    /// Scalar readout whose gradient wrt `input` was computed alongside the
    /// forward value.
    Fused { input: Var, dinput: Vec<T> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "mul_scalar",
            Op::Sum(..) => "sum",
            Op::Concat(..) => "concat_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::TransposeConv2d { .. } => "transpose_conv2d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::PyrDown(..) => "pyramid_down",
            Op::PyrUp(..) => "pyramid_up",
            Op::Fused { .. } => "fused_loss",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::PyrDown(a) | Op::PyrUp(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Conv2d { x, w, b, .. } | Op::TransposeConv2d { x, w, b } => vec![*x, *w, *b],
            Op::InstanceNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::LeakyRelu { x, .. } => vec![*x],
            Op::Fused { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Every recorded node in recording order with the name of its op.
    pub fn ops(&self) -> impl Iterator<Item = (Var, &'static str)> + '_ {
        self.nodes.iter().enumerate().map(|(i, n)| (Var(i), n.op.name()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        ensure_finite(op.name(), value.data())?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        ensure_same_shape("mul", x.shape(), y.shape())?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let v = Tensor::from_vec(x.shape(), data)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).mul_scalar(T::of(s));
        self.push(v, Op::Scale(a, s))
    }

    /// Sum of all elements as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::from_vec((1, 1, 1, 1), vec![T::of(self.value(a).sum())])?;
        self.push(v, Op::Sum(a))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&refs)?;
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let g = nn::conv_geom(self.shape(x), self.shape(w), self.shape(b), pad)?;
        let out = kernels::conv2d_forward(&g, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let v = Tensor::from_vec((g.n, g.c_out, g.h_out(), g.w_out()), out)?;
        self.push(v, Op::Conv2d { x, w, b, pad })
    }

    pub fn transpose_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let g = nn::up_geom(self.shape(x), self.shape(w), self.shape(b))?;
        let out = kernels::transpose_conv_forward(&g, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let v = Tensor::from_vec((g.n, g.c_out, 2 * g.h, 2 * g.w), out)?;
        self.push(v, Op::TransposeConv2d { x, w, b })
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        nn::check_norm(s, self.shape(gamma), self.shape(beta))?;
        let stats = kernels::plane_stats(self.value(x).data(), s.plane(), eps);
        let out = kernels::instance_norm_forward(
            self.value(x).data(),
            s.c(),
            s.plane(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &stats,
        );
        let v = Tensor::from_vec(s, out)?;
        self.push(v, Op::InstanceNorm { x, gamma, beta, stats })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let v = nn::leaky_relu(self.value(x), slope);
        self.push(v, Op::LeakyRelu { x, slope })
    }

    pub fn pyramid_down(&mut self, x: Var) -> Result<Var> {
        let v = pyramid::down(self.value(x))?;
        self.push(v, Op::PyrDown(x))
    }

    pub fn pyramid_up(&mut self, x: Var) -> Result<Var> {
        let v = pyramid::up(self.value(x));
        self.push(v, Op::PyrUp(x))
    }

    /// Depth-`depth` Laplacian decomposition recorded on the tape. Returns
    /// the band-pass levels finest first, followed by the residual.
    pub fn pyramid(&mut self, image: Var, depth: usize) -> Result<Vec<Var>> {
        if depth < 2 {
            return Err(Error::Contract(format!("pyramid depth must be at least 2, got {depth}")));
        }
        pyramid::check_divisible(self.shape(image), depth)?;
        let mut levels = Vec::with_capacity(depth);
        let mut current = image;
        for _ in 1..depth {
            let next = self.pyramid_down(current)?;
            let up = self.pyramid_up(next)?;
            levels.push(self.sub(current, up)?);
            current = next;
        }
        levels.push(current);
        Ok(levels)
    }

    /// Record a scalar whose gradient wrt `input` is already known.
    pub(crate) fn fused_scalar(&mut self, input: Var, value: f64, dinput: Vec<T>) -> Result<Var> {
        debug_assert_eq!(dinput.len(), self.value(input).len());
        ensure_finite("fused_loss gradient", &dinput)?;
        let v = Tensor::from_vec((1, 1, 1, 1), vec![T::of(value)])?;
        self.push(v, Op::Fused { input, dinput })
    }

    /// Populate gradients of `loss` wrt every tracked value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.shape() != Shape::new(1, 1, 1, 1) {
            return Err(Error::Contract(format!("backward needs a (1,1,1,1) loss, got {}", node.value.shape())));
        }
        if matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("backward called on a value with no recorded operations".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: impl FnOnce() -> Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let g = g();
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.to_vec());
                self.accumulate(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.to_vec());
                self.accumulate(grads, *b, || g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, || g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                self.accumulate(grads, *b, || g.iter().zip(va).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale(a, s) => {
                let s = T::of(*s);
                self.accumulate(grads, *a, || g.iter().map(|&v| v * s).collect());
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, || vec![g[0]; n]);
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let plane = s.plane();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p).c();
                    self.accumulate(grads, p, || {
                        let mut out = Vec::with_capacity(s.n() * c * plane);
                        for n in 0..s.n() {
                            let start = (n * s.c() + offset) * plane;
                            out.extend_from_slice(&g[start..start + c * plane]);
                        }
                        out
                    });
                    offset += c;
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let geom = nn::conv_geom(self.shape(*x), self.shape(*w), self.shape(*b), *pad)?;
                let need_dx = self.nodes[x.0].needs_grad;
                let r = kernels::conv2d_backward(&geom, self.value(*x).data(), self.value(*w).data(), g, need_dx);
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, || dx);
                }
                self.accumulate(grads, *w, || r.dw);
                self.accumulate(grads, *b, || r.db);
            }
            Op::TransposeConv2d { x, w, b } => {
                let geom = nn::up_geom(self.shape(*x), self.shape(*w), self.shape(*b))?;
                let need_dx = self.nodes[x.0].needs_grad;
                let r = kernels::transpose_conv_backward(&geom, self.value(*x).data(), self.value(*w).data(), g, need_dx);
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, || dx);
                }
                self.accumulate(grads, *w, || r.dw);
                self.accumulate(grads, *b, || r.db);
            }
            Op::InstanceNorm { x, gamma, beta, stats } => {
                let s = self.shape(*x);
                let (dx, dgamma, dbeta) = kernels::instance_norm_backward(
                    self.value(*x).data(),
                    g,
                    s.c(),
                    s.plane(),
                    self.value(*gamma).data(),
                    stats,
                );
                self.accumulate(grads, *x, || dx);
                self.accumulate(grads, *gamma, || dgamma);
                self.accumulate(grads, *beta, || dbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let slope = T::of(*slope);
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, || g.iter().zip(xv).map(|(&d, &v)| d * kernels::leaky_grad(v, slope)).collect());
            }
            Op::PyrDown(x) => {
                let gt = Tensor::from_vec(node.value.shape(), g.to_vec())?;
                self.accumulate(grads, *x, || pyramid::down_adjoint(&gt).into_data());
            }
            Op::PyrUp(x) => {
                let gt = Tensor::from_vec(node.value.shape(), g.to_vec())?;
                self.accumulate(grads, *x, || pyramid::up_adjoint(&gt).into_data());
            }
            Op::Fused { input, dinput } => {
                let s = g[0];
                self.accumulate(grads, *input, || dinput.iter().map(|&d| d * s).collect());
            }
        }
        Ok(())
    }
}
