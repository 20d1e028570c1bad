//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order and `backward` simply walks them in reverse.

use super::params::{ParamId, ParamStore};
use super::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, pad4, Tensor};
use crate::{Error, Real, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Abs,
    Relu,
    Sigmoid,
    Softplus,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    ClampMin(Var, T),
    Mean(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    AvgPool2d(Var, usize),
    Upsample(Var, usize),
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Broadcast(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded computation graph.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if let Some(i) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "{op_name} produced non-finite value {} at index {i}",
                value.data()[i]
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (readable through [`Graph::grad`]).
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: T) -> Result<Var> {
        self.input(Tensor::scalar(v))
    }

    /// Trainable parameter copied from `store`; `backward` accumulates its
    /// gradient back into the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let t = store.tensor(id).clone();
        self.push("param", t, Op::Param(id), true)
    }

    /// Parameter copied from `store` as a constant (frozen weights).
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.input(store.tensor(id).clone())
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            let (x, y) = (ta.data(), tb.data());
            match kind {
                Binary::Add => x.iter().zip(y).map(|(p, q)| *p + *q).collect(),
                Binary::Sub => x.iter().zip(y).map(|(p, q)| *p - *q).collect(),
                Binary::Mul => x.iter().zip(y).map(|(p, q)| *p * *q).collect(),
                Binary::Div => x.iter().zip(y).map(|(p, q)| *p / *q).collect(),
            }
        } else {
            let out = broadcast_shape(name, ta.shape(), tb.shape())?;
            let (sa, sb) = (broadcast_strides(ta.shape(), &out), broadcast_strides(tb.shape(), &out));
            let n: usize = out.iter().product();
            let mut data = vec![T::zero(); n];
            let (x, y) = (ta.data(), tb.data());
            for_each_broadcast(&out, sa, sb, |o, i, j| {
                data[o] = match kind {
                    Binary::Add => x[i] + y[j],
                    Binary::Sub => x[i] - y[j],
                    Binary::Mul => x[i] * y[j],
                    Binary::Div => x[i] / y[j],
                };
            });
            return {
                let rg = self.rg(a) || self.rg(b);
                self.push(name, Tensor::from_parts(out, data), Op::Binary(kind, a, b), rg)
            };
        };
        let rg = self.rg(a) || self.rg(b);
        let shape = self.value(a).shape().to_vec();
        self.push(name, Tensor::from_parts(shape, data), Op::Binary(kind, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    fn unary(&mut self, kind: Unary, name: &'static str, a: Var) -> Result<Var> {
        let t = self.value(a);
        let f: fn(T) -> T = match kind {
            Unary::Neg => |x| -x,
            Unary::Exp => |x| x.exp(),
            Unary::Ln => |x| x.ln(),
            Unary::Abs => |x| x.abs(),
            Unary::Relu => |x| if x > T::zero() { x } else { T::zero() },
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
        };
        if matches!(kind, Unary::Ln) {
            if let Some(bad) = t.data().iter().find(|v| **v <= T::zero()) {
                return Err(Error::InvalidInput(format!("ln of non-positive value {bad}")));
            }
        }
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(name, Tensor::from_parts(shape, data), Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, "neg", a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, "exp", a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Ln, "ln", a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, "abs", a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, "relu", a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, "sigmoid", a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, "softplus", a)
    }

    /// `max(a, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| if x > floor { x } else { floor }).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push("clamp_min", Tensor::from_parts(shape, data), Op::ClampMin(a, floor), rg)
    }

    /// Mean over all elements, returned as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = t.data().iter().copied().sum::<T>() / T::from_usize(t.len()).unwrap();
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Explicit broadcast of `a` (typically a scalar) to `shape`.
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let out = broadcast_shape("broadcast_scalar", t.shape(), shape)?;
        if out != shape {
            return Err(Error::shape(
                "broadcast_scalar",
                format!("{:?} does not broadcast to {shape:?}", t.shape()),
            ));
        }
        let sa = broadcast_strides(t.shape(), &out);
        let n: usize = out.iter().product();
        let mut data = vec![T::zero(); n];
        let x = t.data();
        for_each_broadcast(&out, sa, [0; 4], |o, i, _| data[o] = x[i]);
        let rg = self.rg(a);
        self.push("broadcast_scalar", Tensor::from_parts(out, data), Op::Broadcast(a), rg)
    }

    /// 2-D cross-correlation. `input` is `B x Cin x H x W`, `weight` is
    /// `Cout x Cin x kh x kw`, optional `bias` has `Cout` elements.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.value(input).shape(), self.value(weight).shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, stride {stride}"),
            ));
        }
        let geo = ConvGeom::new(xs, ws, stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).len() != geo.cout {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.value(b).shape(), geo.cout),
                ));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![T::zero(); geo.batch * geo.cout * geo.n_out()];
        let mut col = if geo.use_direct() { Vec::new() } else { vec![T::zero(); geo.k() * geo.n_out()] };
        let (mut pad_a, mut pad_b) = (Vec::new(), Vec::new());
        for b in 0..geo.batch {
            let xb = &x[b * geo.in_len()..(b + 1) * geo.in_len()];
            if geo.use_direct() {
                let ob = &mut out[b * geo.cout * geo.n_out()..(b + 1) * geo.cout * geo.n_out()];
                geo.direct_forward(xb, w, ob, &mut pad_a, &mut pad_b);
                continue;
            }
            let cols: &[T] = if geo.is_pointwise() {
                xb
            } else {
                geo.im2col(xb, &mut col);
                &col
            };
            let ob = &mut out[b * geo.cout * geo.n_out()..(b + 1) * geo.cout * geo.n_out()];
            let n = geo.n_out() as isize;
            let k = geo.k() as isize;
            T::gemm(geo.cout, geo.k(), geo.n_out(), T::one(), w, k, 1, cols, n, 1, T::zero(), ob, n, 1);
        }
        if let Some(bv) = bias {
            let bias_data = self.value(bv).data();
            for plane in out.chunks_exact_mut(geo.n_out()).enumerate() {
                let co = plane.0 % geo.cout;
                let bb = bias_data[co];
                plane.1.iter_mut().for_each(|v| *v += bb);
            }
        }
        let shape = vec![geo.batch, geo.cout, geo.ho, geo.wo];
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            "conv2d",
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        )
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::shape("avg_pool2d", format!("input {s:?}, kernel {k}")));
        }
        let [b, c, h, w] = [s[0], s[1], s[2], s[3]];
        let (ho, wo) = (h / k, w / k);
        let x = self.value(a).data();
        let scale = T::one() / T::from_usize(k * k).unwrap();
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * ho + y / k) * wo + xx / k] += x[(p * h + y) * w + xx] * scale;
                }
            }
        }
        let rg = self.rg(a);
        self.push("avg_pool2d", Tensor::from_parts(vec![b, c, ho, wo], out), Op::AvgPool2d(a, k), rg)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample_nearest", format!("input {s:?}, factor {factor}")));
        }
        let [b, c, h, w] = [s[0], s[1], s[2], s[3]];
        let (ho, wo) = (h * factor, w * factor);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for p in 0..b * c {
            for y in 0..ho {
                let row = &x[(p * h + y / factor) * w..(p * h + y / factor + 1) * w];
                for xx in 0..wo {
                    out.push(row[xx / factor]);
                }
            }
        }
        let rg = self.rg(a);
        self.push("upsample_nearest", Tensor::from_parts(vec![b, c, ho, wo], out), Op::Upsample(a, factor), rg)
    }

    /// Spatial mean: `B x C x H x W -> B x C x 1 x 1`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {s:?}")));
        }
        let (bc, hw) = (s[0] * s[1], s[2] * s[3]);
        let shape = vec![s[0], s[1], 1, 1];
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out = self
            .value(a)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect::<Vec<_>>();
        debug_assert_eq!(out.len(), bc);
        let rg = self.rg(a);
        self.push("global_avg_pool", Tensor::from_parts(shape, out), Op::GlobalAvgPool(a), rg)
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.value(*first).shape().to_vec();
        if s0.len() != 4 {
            return Err(Error::shape("concat", format!("input {s0:?}")));
        }
        let mut channels = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?}")));
            }
            channels += s[1];
        }
        let hw = s0[2] * s0[3];
        let mut out = Vec::with_capacity(s0[0] * channels * hw);
        for b in 0..s0[0] {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[1] * hw;
                out.extend_from_slice(&t.data()[b * chunk..(b + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(
            "concat",
            Tensor::from_parts(vec![s0[0], channels, s0[2], s0[3]], out),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Node gradients are recomputed from
    /// scratch; parameter gradients are *added* into `store` when given.
    pub fn backward(&mut self, loss: Var, store: Option<&mut ParamStore<T>>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            if self.nodes[id].requires_grad {
                self.backprop_node(id, &g);
            }
            self.grads[id] = Some(g);
        }
        if let Some(store) = store {
            for (id, node) in self.nodes.iter().enumerate() {
                if let (Op::Param(pid), Some(g)) = (&node.op, &self.grads[id]) {
                    store.accumulate_grad(*pid, g);
                }
            }
        }
        Ok(())
    }

    /// Runs `f` on the gradient buffer of `v` (created zeroed on first use)
    /// with read access to all node values.
    fn accumulate(&mut self, v: Var, f: impl FnOnce(&[Node<T>], &mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let mut slot = self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n]);
        f(&self.nodes, &mut slot);
        self.grads[v.0] = Some(slot);
    }

    fn backprop_node(&mut self, id: usize, g: &[T]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Binary(kind, a, b) => self.backprop_binary(id, kind, a, b, g),
            Op::Unary(kind, a) => self.accumulate(a, |nodes, ga| {
                let x = nodes[a.0].value.data();
                let y = nodes[id].value.data();
                let it = ga.iter_mut().zip(g).zip(x.iter().zip(y));
                match kind {
                    Unary::Neg => it.for_each(|((d, g), _)| *d -= *g),
                    Unary::Exp => it.for_each(|((d, g), (_, y))| *d += *g * *y),
                    Unary::Ln => it.for_each(|((d, g), (x, _))| *d += *g / *x),
                    Unary::Abs => it.for_each(|((d, g), (x, _))| {
                        if *x > T::zero() {
                            *d += *g
                        } else if *x < T::zero() {
                            *d -= *g
                        }
                    }),
                    Unary::Relu => it.for_each(|((d, g), (x, _))| {
                        if *x > T::zero() {
                            *d += *g
                        }
                    }),
                    Unary::Sigmoid => it.for_each(|((d, g), (_, y))| *d += *g * *y * (T::one() - *y)),
                    Unary::Softplus => it.for_each(|((d, g), (x, _))| *d += *g * sigmoid(*x)),
                }
            }),
            Op::ClampMin(a, floor) => self.accumulate(a, |nodes, ga| {
                let x = nodes[a.0].value.data();
                for ((d, g), x) in ga.iter_mut().zip(g).zip(x) {
                    if *x > floor {
                        *d += *g;
                    }
                }
            }),
            Op::Mean(a) => {
                let n = T::from_usize(self.nodes[a.0].value.len()).unwrap();
                let d = g[0] / n;
                self.accumulate(a, |_, ga| ga.iter_mut().for_each(|v| *v += d));
            }
            Op::Broadcast(a) => {
                let out = self.nodes[id].value.shape().to_vec();
                let sa = broadcast_strides(self.nodes[a.0].value.shape(), &out);
                self.accumulate(a, |_, ga| for_each_broadcast(&out, sa, [0; 4], |o, i, _| ga[i] += g[o]));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => self.backprop_conv(input, weight, bias, stride, padding, g),
            Op::AvgPool2d(a, k) => {
                let [b, c, h, w] = pad4(self.nodes[a.0].value.shape());
                let (ho, wo) = (h / k, w / k);
                let scale = T::one() / T::from_usize(k * k).unwrap();
                self.accumulate(a, |_, ga| {
                    for p in 0..b * c {
                        for y in 0..h {
                            for x in 0..w {
                                ga[(p * h + y) * w + x] += g[(p * ho + y / k) * wo + x / k] * scale;
                            }
                        }
                    }
                });
            }
            Op::Upsample(a, f) => {
                let [b, c, h, w] = pad4(self.nodes[a.0].value.shape());
                let (ho, wo) = (h * f, w * f);
                self.accumulate(a, |_, ga| {
                    for p in 0..b * c {
                        for y in 0..ho {
                            let grow = &g[(p * ho + y) * wo..(p * ho + y + 1) * wo];
                            let base = (p * h + y / f) * w;
                            for (x, gv) in grow.iter().enumerate() {
                                ga[base + x / f] += *gv;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let s = self.nodes[a.0].value.shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                self.accumulate(a, |_, ga| {
                    for (p, plane) in ga.chunks_exact_mut(hw).enumerate() {
                        let d = g[p] * inv;
                        plane.iter_mut().for_each(|v| *v += d);
                    }
                });
            }
            Op::Concat(parts) => {
                let out = self.nodes[id].value.shape().to_vec();
                let hw = out[2] * out[3];
                let mut offset = 0;
                for p in parts {
                    let cp = self.nodes[p.0].value.shape()[1];
                    let chunk = cp * hw;
                    self.accumulate(p, |_, gp| {
                        for b in 0..out[0] {
                            let src = &g[(b * out[1] + offset) * hw..(b * out[1] + offset) * hw + chunk];
                            for (d, s) in gp[b * chunk..(b + 1) * chunk].iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    });
                    offset += cp;
                }
            }
        }
    }

    fn backprop_binary(&mut self, id: usize, kind: Binary, a: Var, b: Var, g: &[T]) {
        let out = self.nodes[id].value.shape().to_vec();
        let sa = broadcast_strides(self.nodes[a.0].value.shape(), &out);
        let sb = broadcast_strides(self.nodes[b.0].value.shape(), &out);
        let same = self.nodes[a.0].value.shape() == out.as_slice() && self.nodes[b.0].value.shape() == out.as_slice();
        self.accumulate(a, |nodes, ga| {
            let xb = nodes[b.0].value.data();
            if same {
                let it = ga.iter_mut().zip(g);
                match kind {
                    Binary::Add | Binary::Sub => it.for_each(|(d, g)| *d += *g),
                    Binary::Mul => it.zip(xb).for_each(|((d, g), q)| *d += *g * *q),
                    Binary::Div => it.zip(xb).for_each(|((d, g), q)| *d += *g / *q),
                }
                return;
            }
            for_each_broadcast(&out, sa, sb, |o, i, j| {
                ga[i] += match kind {
                    Binary::Add | Binary::Sub => g[o],
                    Binary::Mul => g[o] * xb[j],
                    Binary::Div => g[o] / xb[j],
                }
            })
        });
        self.accumulate(b, |nodes, gb| {
            let xa = nodes[a.0].value.data();
            let xb = nodes[b.0].value.data();
            let y = nodes[id].value.data();
            if same {
                let it = gb.iter_mut().zip(g);
                match kind {
                    Binary::Add => it.for_each(|(d, g)| *d += *g),
                    Binary::Sub => it.for_each(|(d, g)| *d -= *g),
                    Binary::Mul => it.zip(xa).for_each(|((d, g), p)| *d += *g * *p),
                    Binary::Div => it.zip(y.iter().zip(xb)).for_each(|((d, g), (y, q))| *d -= *g * *y / *q),
                }
                return;
            }
            for_each_broadcast(&out, sa, sb, |o, i, j| {
                gb[j] += match kind {
                    Binary::Add => g[o],
                    Binary::Sub => -g[o],
                    Binary::Mul => g[o] * xa[i],
                    Binary::Div => -g[o] * y[o] / xb[j],
                }
            })
        });
    }

    fn backprop_conv(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize, g: &[T]) {
        let xs = self.nodes[input.0].value.shape().to_vec();
        let ws = self.nodes[weight.0].value.shape().to_vec();
        let geo = ConvGeom::new(&xs, &ws, stride, padding).expect("validated in forward");
        let (n, k, cout) = (geo.n_out(), geo.k(), geo.cout);
        let plane = cout * n;

        if let Some(bv) = bias {
            self.accumulate(bv, |_, gb| {
                for (p, gp) in g.chunks_exact(n).enumerate() {
                    gb[p % cout] += gp.iter().copied().sum::<T>();
                }
            });
        }

        let need_w = self.nodes[weight.0].requires_grad;
        let need_x = self.nodes[input.0].requires_grad;
        if !need_w && !need_x {
            return;
        }
        let x = std::mem::replace(&mut self.nodes[input.0].value, Tensor::scalar(T::zero()));
        let w = std::mem::replace(&mut self.nodes[weight.0].value, Tensor::scalar(T::zero()));
        let mut col = if geo.use_direct() { Vec::new() } else { vec![T::zero(); k * n] };
        let (mut pad_a, mut pad_b) = (Vec::new(), Vec::new());
        let mut gw = if need_w { vec![T::zero(); cout * k] } else { Vec::new() };
        let mut gx = if need_x { vec![T::zero(); x.len()] } else { Vec::new() };
        for b in 0..geo.batch {
            let gb = &g[b * plane..(b + 1) * plane];
            if geo.use_direct() {
                let xb = &x.data()[b * geo.in_len()..(b + 1) * geo.in_len()];
                let gxb = need_x.then(|| &mut gx[b * geo.in_len()..(b + 1) * geo.in_len()]);
                geo.direct_backward(xb, w.data(), gb, need_w.then_some(&mut gw[..]), gxb, &mut pad_a, &mut pad_b);
                continue;
            }
            if need_w {
                let xb = &x.data()[b * geo.in_len()..(b + 1) * geo.in_len()];
                let cols: &[T] = if geo.is_pointwise() {
                    xb
                } else {
                    geo.im2col(xb, &mut col);
                    &col
                };
                // gw (cout x k) += g_b (cout x n) * cols^T (n x k)
                T::gemm(cout, n, k, T::one(), gb, n as isize, 1, cols, 1, n as isize, T::one(), &mut gw, k as isize, 1);
            }
            if need_x {
                let gxb = &mut gx[b * geo.in_len()..(b + 1) * geo.in_len()];
                if geo.is_pointwise() {
                    T::gemm(k, cout, n, T::one(), w.data(), 1, k as isize, gb, n as isize, 1, T::one(), gxb, n as isize, 1);
                } else {
                    T::gemm(k, cout, n, T::one(), w.data(), 1, k as isize, gb, n as isize, 1, T::zero(), &mut col, n as isize, 1);
                    geo.col2im_add(&col, gxb);
                }
            }
        }
        self.nodes[input.0].value = x;
        self.nodes[weight.0].value = w;
        if need_w {
            self.accumulate(weight, |_, d| d.iter_mut().zip(&gw).for_each(|(d, s)| *d += *s));
        }
        if need_x {
            self.accumulate(input, |_, d| d.iter_mut().zip(&gx).for_each(|(d, s)| *d += *s));
        }
    }

    /// Sign pattern of every kink-carrying op input (relu, abs, clamp_min).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            let (input, at) = match &node.op {
                Op::Unary(Unary::Relu | Unary::Abs, a) => (*a, T::zero()),
                Op::ClampMin(a, floor) => (*a, *floor),
                _ => continue,
            };
            sig.extend(self.nodes[input.0].value.data().iter().map(|v| {
                if *v > at {
                    1
                } else if *v < at {
                    -1
                } else {
                    0
                }
            }));
        }
        sig
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ra.iter().zip(rb).fold(T::zero(), |s, (x, y)| s + *x * *y);
    for v in acc {
        s += v;
    }
    s
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        Ok(Self {
            batch: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn n_out(&self) -> usize {
        self.ho * self.wo
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Thin stride-1 convolutions skip im2col: with a handful of output
    /// channels the gemm would be dominated by packing.
    fn use_direct(&self) -> bool {
        self.stride == 1 && self.cout <= 4 && !self.is_pointwise()
    }

    /// Copies one sample into a zero-padded `cin x (h + 2p) x (w + 2p)`
    /// buffer (plus a tail so every shifted plane stays in bounds).
    fn pad_input<T: Real>(&self, x: &[T], xpad: &mut Vec<T>) {
        let (hp, wp) = (self.h + 2 * self.pad, self.w + 2 * self.pad);
        xpad.clear();
        xpad.resize(self.cin * hp * wp + self.kw, T::zero());
        for ci in 0..self.cin {
            for y in 0..self.h {
                let dst = (ci * hp + y + self.pad) * wp + self.pad;
                xpad[dst..dst + self.w].copy_from_slice(&x[(ci * self.h + y) * self.w..(ci * self.h + y + 1) * self.w]);
            }
        }
    }

    /// Stride-1 convolution on padded planes: output row `oy` lives at
    /// `oy * wp` with `wp - wo` junk columns, so each tap is one contiguous
    /// axpy of length `ho * wp`.
    fn direct_forward<T: Real>(&self, x: &[T], w: &[T], out: &mut [T], xpad: &mut Vec<T>, opad: &mut Vec<T>) {
        let (hp, wp) = (self.h + 2 * self.pad, self.w + 2 * self.pad);
        let span = self.ho * wp;
        self.pad_input(x, xpad);
        opad.clear();
        opad.resize(self.cout * span, T::zero());
        for co in 0..self.cout {
            let o = &mut opad[co * span..(co + 1) * span];
            for ci in 0..self.cin {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let wv = w[((co * self.cin + ci) * self.kh + ky) * self.kw + kx];
                        let start = ci * hp * wp + ky * wp + kx;
                        o.iter_mut().zip(&xpad[start..start + span]).for_each(|(d, s)| *d += wv * *s);
                    }
                }
            }
        }
        for co in 0..self.cout {
            for oy in 0..self.ho {
                let src = (co * self.ho + oy) * wp;
                let dst = (co * self.ho + oy) * self.wo;
                out[dst..dst + self.wo].copy_from_slice(&opad[src..src + self.wo]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn direct_backward<T: Real>(
        &self,
        x: &[T],
        w: &[T],
        g: &[T],
        gw: Option<&mut [T]>,
        gx: Option<&mut [T]>,
        xpad: &mut Vec<T>,
        gpad: &mut Vec<T>,
    ) {
        let (hp, wp) = (self.h + 2 * self.pad, self.w + 2 * self.pad);
        let span = self.ho * wp;
        gpad.clear();
        gpad.resize(self.cout * span, T::zero());
        for co in 0..self.cout {
            for oy in 0..self.ho {
                let src = (co * self.ho + oy) * self.wo;
                let dst = (co * self.ho + oy) * wp;
                gpad[dst..dst + self.wo].copy_from_slice(&g[src..src + self.wo]);
            }
        }
        let tap = |co: usize, ci: usize, ky: usize, kx: usize| ((co * self.cin + ci) * self.kh + ky) * self.kw + kx;
        if let Some(gw) = gw {
            self.pad_input(x, xpad);
            for co in 0..self.cout {
                let gp = &gpad[co * span..(co + 1) * span];
                for ci in 0..self.cin {
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let start = ci * hp * wp + ky * wp + kx;
                            gw[tap(co, ci, ky, kx)] += dot(gp, &xpad[start..start + span]);
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx {
            // Reuse `xpad` as the padded input-gradient buffer.
            xpad.clear();
            xpad.resize(self.cin * hp * wp + self.kw, T::zero());
            for co in 0..self.cout {
                let gp = &gpad[co * span..(co + 1) * span];
                for ci in 0..self.cin {
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wv = w[tap(co, ci, ky, kx)];
                            let start = ci * hp * wp + ky * wp + kx;
                            xpad[start..start + span].iter_mut().zip(gp).for_each(|(d, s)| *d += wv * *s);
                        }
                    }
                }
            }
            for ci in 0..self.cin {
                for y in 0..self.h {
                    let src = (ci * hp + y + self.pad) * wp + self.pad;
                    let dst = (ci * self.h + y) * self.w;
                    gx[dst..dst + self.w].iter_mut().zip(&xpad[src..src + self.w]).for_each(|(d, s)| *d += *s);
                }
            }
        }
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` lies
    /// inside the image.
    fn valid_cols(&self, kx: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let n = self.n_out();
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * n;
                    let valid = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let dst = &mut col[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        dst[..valid.start].fill(T::zero());
                        dst[valid.end..].fill(T::zero());
                        if valid.is_empty() {
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..(ci * self.h + iy as usize + 1) * self.w];
                        let first = valid.start * self.stride + kx - self.pad;
                        let d = &mut dst[valid.clone()];
                        if self.stride == 1 {
                            d.copy_from_slice(&src[first..first + d.len()]);
                        } else {
                            for (v, s) in d.iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                *v = *s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, col: &[T], gx: &mut [T]) {
        let n = self.n_out();
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * n;
                    let valid = self.valid_cols(kx);
                    if valid.is_empty() {
                        continue;
                    }
                    let first = valid.start * self.stride + kx - self.pad;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + iy as usize) * self.w;
                        let src = &col[row + oy * self.wo + valid.start..row + oy * self.wo + valid.end];
                        let dst = &mut gx[base + first..base + self.w];
                        if self.stride == 1 {
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                        } else {
                            dst.iter_mut().step_by(self.stride).zip(src).for_each(|(d, s)| *d += *s);
                        }
                    }
                }
            }
        }
    }
}
