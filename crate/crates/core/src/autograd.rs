//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node indices are therefore
//! already a topological order and [`Tape::backward`] simply walks them in
//! reverse, accumulating gradients additively across fan-out.

use std::fmt;

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// BCE predictions are clamped this far inside `(0, 1)`.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies the backward rule attached to a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    Leaf,
    Pow,
    Conv2d,
    ConvTranspose2d,
    Tanh,
    Sigmoid,
    Concat,
    Add,
    Mul,
    Sum,
    Bce,
    SwapLeading,
    Reshape,
}

impl Rule {
    pub const ALL: [Rule; 13] = [
        Rule::Leaf,
        Rule::Pow,
        Rule::Conv2d,
        Rule::ConvTranspose2d,
        Rule::Tanh,
        Rule::Sigmoid,
        Rule::Concat,
        Rule::Add,
        Rule::Mul,
        Rule::Sum,
        Rule::Bce,
        Rule::SwapLeading,
        Rule::Reshape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::Leaf => "leaf",
            Rule::Pow => "pow",
            Rule::Conv2d => "conv2d",
            Rule::ConvTranspose2d => "conv_transpose2d",
            Rule::Tanh => "tanh",
            Rule::Sigmoid => "sigmoid",
            Rule::Concat => "concat",
            Rule::Add => "add",
            Rule::Mul => "mul",
            Rule::Sum => "sum",
            Rule::Bce => "bce",
            Rule::SwapLeading => "swap_leading",
            Rule::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<Rule> {
        Rule::ALL.into_iter().find(|r| r.name() == name)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Pow {
        x: Var,
        q: u32,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    Tanh(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Bce {
        pred: Var,
        target: Tensor<T>,
    },
    SwapLeading(Var),
    Reshape(Var),
}

impl<T> Op<T> {
    fn rule(&self) -> Rule {
        match self {
            Op::Leaf => Rule::Leaf,
            Op::Pow { .. } => Rule::Pow,
            Op::Conv2d { .. } => Rule::Conv2d,
            Op::ConvTranspose2d { .. } => Rule::ConvTranspose2d,
            Op::Tanh(_) => Rule::Tanh,
            Op::Sigmoid(_) => Rule::Sigmoid,
            Op::Concat(..) => Rule::Concat,
            Op::Add(..) => Rule::Add,
            Op::Mul(..) => Rule::Mul,
            Op::Sum(_) => Rule::Sum,
            Op::Bce { .. } => Rule::Bce,
            Op::SwapLeading(_) => Rule::SwapLeading,
            Op::Reshape(_) => Rule::Reshape,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the root w.r.t. `var`; `None` if `var` does not require
    /// gradients or does not influence the root.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Records a computation for one forward/backward pass. Single-threaded.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    fault: Option<(Rule, f64)>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
            fault: None,
        }
    }

    /// Abort with the offending operation named whenever a result contains NaN/Inf.
    pub fn with_finite_checks(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    /// Test hook: scale every gradient emitted by `rule`'s backward pass by `factor`.
    #[doc(hidden)]
    pub fn with_fault(mut self, rule: Rule, factor: f64) -> Self {
        self.fault = Some((rule, factor));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn rule(&self, var: Var) -> Rule {
        self.nodes[var.0].op.rule()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op.rule().name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Elementwise `x^q` for `q ≥ 1`, by repeated multiplication.
    pub fn pow(&mut self, x: Var, q: u32) -> Result<Var> {
        if q == 0 {
            return Err(Error::InvalidArgument(
                "power must be at least 1; the constant term is the bias".into(),
            ));
        }
        let value = self.value(x).map(|v| int_pow(v, q));
        self.push(value, Op::Pow { x, q }, &[x])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = conv::conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(bias).collect();
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            },
            &inputs,
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let value = conv::conv_transpose2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            padding,
            output_padding,
        )?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(bias).collect();
        self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                stride,
                padding,
                output_padding,
            },
            &inputs,
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(T::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Concatenate `[N, Ca, H, W]` and `[N, Cb, H, W]` along channels, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = concat_channels(self.value(a), self.value(b))?;
        self.push(value, Op::Concat(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Mean binary cross-entropy. Predictions are clamped to `[ε, 1−ε]` with
    /// `ε = 1e-7`; the gradient is evaluated at the clamped value.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(target, "bce_loss")?;
        if let Some(bad) = target
            .data()
            .iter()
            .find(|&&t| t != T::zero() && t != T::one())
        {
            return Err(Error::InvalidArgument(format!(
                "bce target must be 0 or 1, found {bad}"
            )));
        }
        let eps = T::from_f64_lossy(BCE_EPS);
        let one = T::one();
        let total: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.max(eps).min(one - eps);
                -(t * p.ln() + (one - t) * (one - p).ln())
            })
            .sum();
        let n = T::from_usize(p.numel()).expect("element count fits the float type");
        self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                pred,
                target: target.clone(),
            },
            &[pred],
        )
    }

    /// `[A, B, ...]` → `[B, A, ...]`.
    pub fn swap_leading(&mut self, x: Var) -> Result<Var> {
        let value = swap_leading(self.value(x))?;
        self.push(value, Op::SwapLeading(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Back-propagate from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut contributions = self.node_backward(node, &g)?;
            if let Some((rule, factor)) = self.fault {
                if rule == node.op.rule() {
                    let factor = T::from_f64_lossy(factor);
                    for (_, c) in &mut contributions {
                        *c = c.map(|v| v * factor);
                    }
                }
            }
            for (var, contribution) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(existing) => existing.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Pow { x, q } => {
                let qf = T::from_u32(q).expect("small integer");
                let dx = self
                    .value(x)
                    .zip_map(g, |v, gv| gv * qf * int_pow(v, q - 1))?;
                res.push((x, dx));
            }
            &Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let need = [
                    self.wants(x),
                    self.wants(w),
                    bias.is_some_and(|b| self.wants(b)),
                ];
                let (gx, gw, gb) =
                    conv::conv2d_backward(self.value(x), self.value(w), g, stride, padding, need)?;
                res.extend(gx.map(|t| (x, t)));
                res.extend(gw.map(|t| (w, t)));
                res.extend(bias.zip(gb));
            }
            &Op::ConvTranspose2d {
                x,
                w,
                bias,
                stride,
                padding,
                output_padding,
            } => {
                let need = [
                    self.wants(x),
                    self.wants(w),
                    bias.is_some_and(|b| self.wants(b)),
                ];
                let (gx, gw, gb) = conv::conv_transpose2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    stride,
                    padding,
                    output_padding,
                    need,
                )?;
                res.extend(gx.map(|t| (x, t)));
                res.extend(gw.map(|t| (w, t)));
                res.extend(bias.zip(gb));
            }
            &Op::Tanh(x) => res.push((x, out.zip_map(g, |y, gv| gv * (T::one() - y * y))?)),
            &Op::Sigmoid(x) => res.push((x, out.zip_map(g, |y, gv| gv * y * (T::one() - y))?)),
            &Op::Concat(a, b) => {
                let (ga, gb) = split_channels(g, self.value(a).shape()[1])?;
                res.push((a, ga));
                res.push((b, gb));
            }
            &Op::Add(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.clone()));
            }
            &Op::Mul(a, b) => {
                res.push((a, self.value(b).zip_map(g, |v, gv| v * gv)?));
                res.push((b, self.value(a).zip_map(g, |v, gv| v * gv)?));
            }
            &Op::Sum(x) => res.push((x, Tensor::full(self.value(x).shape(), g.data()[0]))),
            Op::Bce { pred, target } => {
                let eps = T::from_f64_lossy(BCE_EPS);
                let one = T::one();
                let p = self.value(*pred);
                let scale = g.data()[0]
                    / T::from_usize(p.numel()).expect("element count fits the float type");
                let dp = p.zip_map(target, |p, t| {
                    let p = p.max(eps).min(one - eps);
                    scale * (p - t) / (p * (one - p))
                })?;
                res.push((*pred, dp));
            }
            &Op::SwapLeading(x) => res.push((x, swap_leading(g)?)),
            &Op::Reshape(x) => res.push((x, g.clone().reshape(self.value(x).shape())?)),
        }
        Ok(res)
    }
}

pub(crate) fn int_pow<T: Element>(v: T, q: u32) -> T {
    let mut acc = T::one();
    for _ in 0..q {
        acc *= v;
    }
    acc
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!(
                "batch/spatial dims differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new([n, ca + cb, h, w], data)
}

fn split_channels<T: Element>(g: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = g.dims4()?;
    let cb = c - ca;
    let plane = h * w;
    let mut a = Vec::with_capacity(n * ca * plane);
    let mut b = Vec::with_capacity(n * cb * plane);
    for chunk in g.data().chunks(c * plane) {
        a.extend_from_slice(&chunk[..ca * plane]);
        b.extend_from_slice(&chunk[ca * plane..]);
    }
    Ok((
        Tensor::new([n, ca, h, w], a)?,
        Tensor::new([n, cb, h, w], b)?,
    ))
}

fn swap_leading<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape(
            "swap_leading",
            format!("need rank ≥ 2, got {shape:?}"),
        ));
    }
    let (a, b) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut data = Vec::with_capacity(x.numel());
    for j in 0..b {
        for i in 0..a {
            data.extend_from_slice(&x.data()[(i * b + j) * inner..][..inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(0, 1);
    Tensor::new(new_shape, data)
}
