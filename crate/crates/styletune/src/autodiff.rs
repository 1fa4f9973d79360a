//! Eager tape autodiff over [`Tensor`].
//!
//! Every backward rule is itself built from graph operations, so gradients
//! are ordinary graph values and can be differentiated again. That is what
//! makes the R1 penalty (a gradient-of-gradient quantity) exact rather than
//! approximated.

use crate::tensor::{self, Scalar, Tensor};
use std::cell::RefCell;

/// Handle to a node in a [`Graph`]. Plain index; cheap to copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(T),
    AddConst(T),
    Recip,
    Sqrt,
    Rsqrt,
    Sigmoid,
    Softplus,
    LeakyRelu(T),
    /// Derivative mask of leaky-relu; treated as locally constant (its own
    /// gradient is zero almost everywhere).
    LeakyMask(T),
    MatmulNT,
    MatmulNN,
    MatmulTN,
    Conv,
    ConvWGrad,
    ConvB,
    ConvWGradB,
    KernelT,
    KernelTB,
    Upsample2x,
    Upsample2xT,
    AvgPool2,
    AvgPool2T,
    SumAll,
    BcastScalar,
    SumAxis0,
    RepeatAxis0,
    SumExcept(usize),
    BcastAxis(usize),
    Reshape,
    SliceCh { from: usize, len: usize },
    PadCh { from: usize, total: usize },
    /// [B,I] -> [B,O,I,k,k] (broadcast per-sample per-input-channel styles).
    ExpandIn,
    ReduceIn,
    /// [B,O] -> [B,O,I,k,k] (broadcast per-sample per-filter factors).
    ExpandOut,
    ReduceOut,
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Append-only computation tape. Values are computed eagerly on construction.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>, inputs: Vec<usize>, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_op(&self, op: Op<T>, inputs: Vec<usize>, value: Tensor<T>) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(op, inputs, value, rg)
    }

    /// Leaf that participates in differentiation.
    pub fn variable(&self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.0].value;
        assert_eq!(t.numel(), 1, "expected scalar node");
        t.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, v: Var, op: Op<T>, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[v.0].value)
        };
        self.push_op(op, vec![v.0], value)
    }

    fn binary(&self, a: Var, b: Var, op: Op<T>, f: impl Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push_op(op, vec![a.0, b.0], value)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add, |x, y| x.zip_map(y, |p, q| p + q))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub, |x, y| x.zip_map(y, |p, q| p - q))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul, |x, y| x.zip_map(y, |p, q| p * q))
    }

    pub fn neg(&self, v: Var) -> Var {
        self.unary(v, Op::Neg, |x| x.map(|p| -p))
    }

    pub fn scale(&self, v: Var, c: T) -> Var {
        self.unary(v, Op::Scale(c), |x| x.map(|p| p * c))
    }

    pub fn add_const(&self, v: Var, c: T) -> Var {
        self.unary(v, Op::AddConst(c), |x| x.map(|p| p + c))
    }

    pub fn recip(&self, v: Var) -> Var {
        self.unary(v, Op::Recip, |x| x.map(|p| T::ONE / p))
    }

    pub fn sqrt(&self, v: Var) -> Var {
        self.unary(v, Op::Sqrt, |x| x.map(|p| p.sqrt()))
    }

    pub fn rsqrt(&self, v: Var) -> Var {
        self.unary(v, Op::Rsqrt, |x| x.map(|p| T::ONE / p.sqrt()))
    }

    pub fn sigmoid(&self, v: Var) -> Var {
        self.unary(v, Op::Sigmoid, |x| x.map(sigmoid_stable))
    }

    pub fn softplus(&self, v: Var) -> Var {
        self.unary(v, Op::Softplus, |x| x.map(softplus_stable))
    }

    pub fn leaky_relu(&self, v: Var, slope: T) -> Var {
        self.unary(v, Op::LeakyRelu(slope), |x| {
            x.map(|p| if p > T::ZERO { p } else { p * slope })
        })
    }

    fn leaky_mask(&self, v: Var, slope: T) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[v.0]
                .value
                .map(|p| if p > T::ZERO { T::ONE } else { slope })
        };
        // Mask is piecewise constant: never differentiable through.
        self.push(Op::LeakyMask(slope), vec![v.0], value, false)
    }

    pub fn matmul_nt(&self, x: Var, w: Var) -> Var {
        self.binary(x, w, Op::MatmulNT, |a, b| tensor::matmul_nt(a, b))
    }

    pub fn matmul_nn(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatmulNN, |x, y| tensor::matmul_nn(x, y))
    }

    pub fn matmul_tn(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatmulTN, |x, y| tensor::matmul_tn(x, y))
    }

    pub fn conv2d(&self, x: Var, w: Var) -> Var {
        self.binary(x, w, Op::Conv, |a, b| tensor::conv2d(a, b))
    }

    fn conv2d_wgrad(&self, x: Var, g: Var, k: usize) -> Var {
        self.binary(x, g, Op::ConvWGrad, |a, b| tensor::conv2d_wgrad(a, b, k))
    }

    pub fn conv2d_batched(&self, x: Var, w: Var) -> Var {
        self.binary(x, w, Op::ConvB, |a, b| tensor::conv2d_batched(a, b))
    }

    fn conv2d_wgrad_batched(&self, x: Var, g: Var, k: usize) -> Var {
        self.binary(x, g, Op::ConvWGradB, |a, b| {
            tensor::conv2d_wgrad_batched(a, b, k)
        })
    }

    pub fn kernel_transpose(&self, w: Var) -> Var {
        self.unary(w, Op::KernelT, tensor::kernel_transpose)
    }

    pub fn kernel_transpose_batched(&self, w: Var) -> Var {
        self.unary(w, Op::KernelTB, tensor::kernel_transpose_batched)
    }

    pub fn upsample2x(&self, v: Var) -> Var {
        self.unary(v, Op::Upsample2x, tensor::upsample2x)
    }

    fn upsample2x_t(&self, v: Var) -> Var {
        self.unary(v, Op::Upsample2xT, tensor::upsample2x_t)
    }

    pub fn avgpool2(&self, v: Var) -> Var {
        self.unary(v, Op::AvgPool2, tensor::avgpool2)
    }

    fn avgpool2_t(&self, v: Var) -> Var {
        self.unary(v, Op::AvgPool2T, tensor::avgpool2_t)
    }

    pub fn sum_all(&self, v: Var) -> Var {
        self.unary(v, Op::SumAll, |x| Tensor::scalar(x.sum()))
    }

    pub fn mean_all(&self, v: Var) -> Var {
        let n = {
            let nodes = self.nodes.borrow();
            nodes[v.0].value.numel()
        };
        let s = self.sum_all(v);
        self.scale(s, T::ONE / T::from_f64(n as f64))
    }

    pub fn bcast_scalar(&self, v: Var, shape: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[v.0].value;
            assert_eq!(t.numel(), 1, "bcast_scalar needs scalar input");
            Tensor::full(shape, t.data()[0])
        };
        self.push_op(Op::BcastScalar, vec![v.0], value)
    }

    pub fn sum_axis0(&self, v: Var) -> Var {
        self.unary(v, Op::SumAxis0, |x| {
            let b = x.shape()[0];
            let rest: usize = x.shape()[1..].iter().product();
            let mut out = Tensor::zeros(&x.shape()[1..]);
            for bi in 0..b {
                for (j, o) in out.data_mut().iter_mut().enumerate() {
                    *o += x.data()[bi * rest + j];
                }
            }
            out
        })
    }

    pub fn repeat_axis0(&self, v: Var, count: usize) -> Var {
        self.unary(v, Op::RepeatAxis0, |x| {
            let mut shape = vec![count];
            shape.extend_from_slice(x.shape());
            let mut data = Vec::with_capacity(count * x.numel());
            for _ in 0..count {
                data.extend_from_slice(x.data());
            }
            Tensor::new(&shape, data)
        })
    }

    /// Reduce all axes except `axis`, producing a vector of length shape[axis].
    pub fn sum_except(&self, v: Var, axis: usize) -> Var {
        self.unary(v, Op::SumExcept(axis), |x| sum_except_kernel(x, axis))
    }

    /// Broadcast a vector along `axis` of `shape`.
    pub fn bcast_axis(&self, v: Var, shape: &[usize], axis: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            bcast_axis_kernel(&nodes[v.0].value, shape, axis)
        };
        self.push_op(Op::BcastAxis(axis), vec![v.0], value)
    }

    pub fn reshape(&self, v: Var, shape: &[usize]) -> Var {
        self.unary(v, Op::Reshape, |x| x.clone().reshaped(shape))
    }

    pub fn slice_ch(&self, v: Var, from: usize, len: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[v.0].value;
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            assert!(from + len <= c);
            let mut out = Tensor::zeros(&[b, len, h, w]);
            for bi in 0..b {
                let src = &x.data()[(bi * c + from) * h * w..(bi * c + from + len) * h * w];
                out.data_mut()[bi * len * h * w..(bi + 1) * len * h * w].copy_from_slice(src);
            }
            out
        };
        self.push_op(Op::SliceCh { from, len }, vec![v.0], value)
    }

    pub fn pad_ch(&self, v: Var, from: usize, total: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[v.0].value;
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            assert!(from + c <= total);
            let mut out = Tensor::zeros(&[b, total, h, w]);
            for bi in 0..b {
                out.data_mut()[(bi * total + from) * h * w..(bi * total + from + c) * h * w]
                    .copy_from_slice(&x.data()[bi * c * h * w..(bi + 1) * c * h * w]);
            }
            out
        };
        self.push_op(Op::PadCh { from, total }, vec![v.0], value)
    }

    /// Concatenate along the channel axis.
    pub fn concat_ch(&self, a: Var, b: Var) -> Var {
        let (ca, cb) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.shape()[1], nodes[b.0].value.shape()[1])
        };
        let pa = self.pad_ch(a, 0, ca + cb);
        let pb = self.pad_ch(b, ca, ca + cb);
        self.add(pa, pb)
    }

    /// Broadcast per-sample styles [B,I] over a weight grid -> [B,O,I,k,k].
    pub fn expand_in(&self, v: Var, out_ch: usize, k: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let s = &nodes[v.0].value;
            let (b, in_ch) = (s.shape()[0], s.shape()[1]);
            let mut out = Tensor::zeros(&[b, out_ch, in_ch, k, k]);
            let dst = out.data_mut();
            for bi in 0..b {
                for o in 0..out_ch {
                    for i in 0..in_ch {
                        let val = s.data()[bi * in_ch + i];
                        let base = (((bi * out_ch) + o) * in_ch + i) * k * k;
                        dst[base..base + k * k].fill(val);
                    }
                }
            }
            out
        };
        self.push_op(Op::ExpandIn, vec![v.0], value)
    }

    /// Reduce a [B,O,I,k,k] grid over (O,k,k) -> [B,I].
    pub fn reduce_in(&self, v: Var) -> Var {
        self.unary(v, Op::ReduceIn, |x| {
            let s = x.shape();
            let (b, o, i, k) = (s[0], s[1], s[2], s[3]);
            let mut out = Tensor::zeros(&[b, i]);
            for bi in 0..b {
                for oi in 0..o {
                    for ii in 0..i {
                        let base = (((bi * o) + oi) * i + ii) * k * k;
                        let mut acc = T::ZERO;
                        for &vv in &x.data()[base..base + k * k] {
                            acc += vv;
                        }
                        out.data_mut()[bi * i + ii] += acc;
                    }
                }
            }
            out
        })
    }

    /// Broadcast per-sample per-filter factors [B,O] over a weight grid.
    pub fn expand_out(&self, v: Var, in_ch: usize, k: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let s = &nodes[v.0].value;
            let (b, out_ch) = (s.shape()[0], s.shape()[1]);
            let mut out = Tensor::zeros(&[b, out_ch, in_ch, k, k]);
            let block = in_ch * k * k;
            for (j, chunk) in out.data_mut().chunks_mut(block).enumerate() {
                chunk.fill(s.data()[j]);
            }
            out
        };
        self.push_op(Op::ExpandOut, vec![v.0], value)
    }

    /// Reduce a [B,O,I,k,k] grid over (I,k,k) -> [B,O].
    pub fn reduce_out(&self, v: Var) -> Var {
        self.unary(v, Op::ReduceOut, |x| {
            let s = x.shape();
            let (b, o) = (s[0], s[1]);
            let block = s[2] * s[3] * s[4];
            let mut out = Tensor::zeros(&[b, o]);
            for (j, chunk) in x.data().chunks(block).enumerate() {
                let mut acc = T::ZERO;
                for &vv in chunk {
                    acc += vv;
                }
                out.data_mut()[j] = acc;
            }
            out
        })
    }

    /// Reverse-mode gradients of scalar `y` with respect to `wrt`, returned
    /// as graph values (differentiable again). `None` where no path exists.
    pub fn grad(&self, y: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[y.0].value.numel(), 1, "grad target must be scalar");
        }
        let n = y.0 + 1;
        // Mark nodes that can influence y through differentiable paths.
        let mut needed = vec![false; n];
        let mut stack = vec![y.0];
        {
            let nodes = self.nodes.borrow();
            while let Some(id) = stack.pop() {
                if needed[id] || !nodes[id].requires_grad {
                    continue;
                }
                needed[id] = true;
                for &i in &nodes[id].inputs {
                    if !needed[i] && nodes[i].requires_grad {
                        stack.push(i);
                    }
                }
            }
        }
        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        if needed[y.0] {
            adjoint[y.0] = Some(self.constant(Tensor::scalar(T::ONE)));
        }
        for id in (0..n).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = adjoint[id] else { continue };
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].inputs.clone())
            };
            let contribs = self.vjp(&op, &inputs, Var(id), g);
            for (slot, contrib) in inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !needed[*slot] {
                    continue;
                }
                adjoint[*slot] = Some(match adjoint[*slot] {
                    Some(prev) => self.add(prev, c),
                    None => c,
                });
            }
        }
        wrt.iter()
            .map(|v| if v.0 < n { adjoint[v.0] } else { None })
            .collect()
    }

    /// Input adjoints of one node; entries align with `inputs`.
    fn vjp(&self, op: &Op<T>, inputs: &[usize], out: Var, g: Var) -> Vec<Option<Var>> {
        let inp = |i: usize| Var(inputs[i]);
        match op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => vec![Some(g), Some(self.neg(g))],
            Op::Mul => vec![Some(self.mul(g, inp(1))), Some(self.mul(g, inp(0)))],
            Op::Neg => vec![Some(self.neg(g))],
            Op::Scale(c) => vec![Some(self.scale(g, *c))],
            Op::AddConst(_) => vec![Some(g)],
            Op::Recip => {
                let sq = self.mul(out, out);
                vec![Some(self.neg(self.mul(g, sq)))]
            }
            Op::Sqrt => {
                let r = self.recip(out);
                vec![Some(self.mul(g, self.scale(r, T::from_f64(0.5))))]
            }
            Op::Rsqrt => {
                let cube = self.mul(out, self.mul(out, out));
                vec![Some(self.mul(g, self.scale(cube, T::from_f64(-0.5))))]
            }
            Op::Sigmoid => {
                let one_minus = self.add_const(self.neg(out), T::ONE);
                vec![Some(self.mul(g, self.mul(out, one_minus)))]
            }
            Op::Softplus => vec![Some(self.mul(g, self.sigmoid(inp(0))))],
            Op::LeakyRelu(slope) => {
                let mask = self.leaky_mask(inp(0), *slope);
                vec![Some(self.mul(g, mask))]
            }
            Op::LeakyMask(_) => vec![None],
            Op::MatmulNT => vec![
                Some(self.matmul_nn(g, inp(1))),
                Some(self.matmul_tn(g, inp(0))),
            ],
            Op::MatmulNN => vec![
                Some(self.matmul_nt(g, inp(1))),
                Some(self.matmul_tn(inp(0), g)),
            ],
            Op::MatmulTN => vec![
                Some(self.matmul_nt(inp(1), g)),
                Some(self.matmul_nn(inp(0), g)),
            ],
            Op::Conv => {
                let k = self.shape_of(inp(1))[2];
                let wt = self.kernel_transpose(inp(1));
                vec![
                    Some(self.conv2d(g, wt)),
                    Some(self.conv2d_wgrad(inp(0), g, k)),
                ]
            }
            Op::ConvWGrad => {
                // out[o,i,p,q] = sum_b g_in[b,o]*patches(x); bilinear in (x, g_in)
                let ut = self.kernel_transpose(g);
                vec![
                    Some(self.conv2d(inp(1), ut)),
                    Some(self.conv2d(inp(0), g)),
                ]
            }
            Op::ConvB => {
                let k = self.shape_of(inp(1))[3];
                let wt = self.kernel_transpose_batched(inp(1));
                vec![
                    Some(self.conv2d_batched(g, wt)),
                    Some(self.conv2d_wgrad_batched(inp(0), g, k)),
                ]
            }
            Op::ConvWGradB => {
                let ut = self.kernel_transpose_batched(g);
                vec![
                    Some(self.conv2d_batched(inp(1), ut)),
                    Some(self.conv2d_batched(inp(0), g)),
                ]
            }
            Op::KernelT => vec![Some(self.kernel_transpose(g))],
            Op::KernelTB => vec![Some(self.kernel_transpose_batched(g))],
            Op::Upsample2x => vec![Some(self.upsample2x_t(g))],
            Op::Upsample2xT => vec![Some(self.upsample2x(g))],
            Op::AvgPool2 => vec![Some(self.avgpool2_t(g))],
            Op::AvgPool2T => vec![Some(self.avgpool2(g))],
            Op::SumAll => {
                let shape = self.shape_of(inp(0));
                vec![Some(self.bcast_scalar(g, &shape))]
            }
            Op::BcastScalar => vec![Some(self.sum_all(g))],
            Op::SumAxis0 => {
                let b = self.shape_of(inp(0))[0];
                vec![Some(self.repeat_axis0(g, b))]
            }
            Op::RepeatAxis0 => vec![Some(self.sum_axis0(g))],
            Op::SumExcept(axis) => {
                let shape = self.shape_of(inp(0));
                vec![Some(self.bcast_axis(g, &shape, *axis))]
            }
            Op::BcastAxis(axis) => vec![Some(self.sum_except(g, *axis))],
            Op::Reshape => {
                let shape = self.shape_of(inp(0));
                vec![Some(self.reshape(g, &shape))]
            }
            Op::SliceCh { from, .. } => {
                let total = self.shape_of(inp(0))[1];
                vec![Some(self.pad_ch(g, *from, total))]
            }
            Op::PadCh { from, .. } => {
                let len = self.shape_of(inp(0))[1];
                vec![Some(self.slice_ch(g, *from, len))]
            }
            Op::ExpandIn => vec![Some(self.reduce_in(g))],
            Op::ReduceIn => {
                let s = self.shape_of(inp(0));
                vec![Some(self.expand_in(g, s[1], s[3]))]
            }
            Op::ExpandOut => vec![Some(self.reduce_out(g))],
            Op::ReduceOut => {
                let s = self.shape_of(inp(0));
                vec![Some(self.expand_out(g, s[2], s[3]))]
            }
        }
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn softplus_stable<T: Scalar>(x: T) -> T {
    x.max(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}

fn sum_except_kernel<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape();
    assert!(axis < shape.len());
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = Tensor::zeros(&[n]);
    let od = out.data_mut();
    for o in 0..outer {
        for a in 0..n {
            let base = (o * n + a) * inner;
            let mut acc = T::ZERO;
            for &v in &x.data()[base..base + inner] {
                acc += v;
            }
            od[a] += acc;
        }
    }
    out
}

fn bcast_axis_kernel<T: Scalar>(v: &Tensor<T>, shape: &[usize], axis: usize) -> Tensor<T> {
    assert!(axis < shape.len());
    assert_eq!(v.numel(), shape[axis], "bcast_axis length mismatch");
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for o in 0..outer {
        for a in 0..n {
            let base = (o * n + a) * inner;
            od[base..base + inner].fill(v.data()[a]);
        }
    }
    out
}
